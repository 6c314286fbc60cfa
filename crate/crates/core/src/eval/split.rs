use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a time-ordered dataset is divided into training and test minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Alternating contiguous blocks: `train_block` minutes for training, then
    /// `test_block` for testing, repeated.
    Interpolation {
        train_block: usize,
        test_block: usize,
    },
    /// `k` contiguous folds; each is the test set once.
    Kfold { k: usize },
    /// Train on one dataset, test on another.
    Transfer {
        train_dataset: String,
        test_dataset: String,
    },
}

impl SplitSpec {
    pub fn interpolation() -> Self {
        SplitSpec::Interpolation {
            train_block: 2,
            test_block: 1,
        }
    }

    pub fn kfold() -> Self {
        SplitSpec::Kfold { k: 6 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitSpec::Interpolation { .. } => "interpolation",
            SplitSpec::Kfold { .. } => "kfold",
            SplitSpec::Transfer { .. } => "transfer",
        }
    }

    /// Share of minutes used for training under interpolation.
    pub fn train_fraction(&self) -> Option<f64> {
        match *self {
            SplitSpec::Interpolation {
                train_block,
                test_block,
            } => Some(train_block as f64 / (train_block + test_block) as f64),
            _ => None,
        }
    }
}

/// Indices into the dataset's minutes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `len` time-ordered minutes. Transfer is a pass-through: the single
/// fold lists every index on both sides, to be applied to the two datasets.
pub fn split(len: usize, spec: &SplitSpec) -> Result<Vec<Fold>> {
    match *spec {
        SplitSpec::Interpolation {
            train_block,
            test_block,
        } => {
            if train_block == 0 || test_block == 0 {
                return Err(Error::Split("interpolation blocks must be >= 1".into()));
            }
            let period = train_block + test_block;
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..len).partition(|i| i % period >= train_block);
            if train.is_empty() || test.is_empty() {
                return Err(Error::Split(format!(
                    "{len} minutes cannot fill a {train_block}:{test_block} interpolation split"
                )));
            }
            Ok(vec![Fold { train, test }])
        }
        SplitSpec::Kfold { k } => {
            if k < 2 {
                return Err(Error::Split(format!("k-fold needs k >= 2, got {k}")));
            }
            if len < k {
                return Err(Error::Split(format!("{len} minutes is fewer than k = {k}")));
            }
            let (base, extra) = (len / k, len % k);
            let mut start = 0;
            let mut folds = Vec::with_capacity(k);
            for i in 0..k {
                let size = base + usize::from(i < extra);
                let test: Vec<usize> = (start..start + size).collect();
                let train = (0..start).chain(start + size..len).collect();
                folds.push(Fold { train, test });
                start += size;
            }
            Ok(folds)
        }
        SplitSpec::Transfer { .. } => {
            if len == 0 {
                return Err(Error::Split("transfer dataset is empty".into()));
            }
            let all: Vec<usize> = (0..len).collect();
            Ok(vec![Fold {
                train: all.clone(),
                test: all,
            }])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_minute_interpolation() {
        let f = split(9, &SplitSpec::interpolation()).unwrap();
        // 0-based indices of minutes {1,2,4,5,7,8} / {3,6,9}.
        assert_eq!(f[0].train, vec![0, 1, 3, 4, 6, 7]);
        assert_eq!(f[0].test, vec![2, 5, 8]);
    }

    #[test]
    fn twelve_minutes_six_folds() {
        let folds = split(12, &SplitSpec::kfold()).unwrap();
        assert_eq!(folds.len(), 6);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.test, vec![2 * i, 2 * i + 1]);
            assert_eq!(f.train.len(), 10);
        }
    }

    #[test]
    fn kfold_errors() {
        assert!(matches!(
            split(12, &SplitSpec::Kfold { k: 1 }),
            Err(Error::Split(_))
        ));
        assert!(matches!(
            split(3, &SplitSpec::kfold()),
            Err(Error::Split(_))
        ));
    }
}
