use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optical constants of the camera and path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraGeometry {
    /// Pixel field of view, radians per pixel.
    pub pfov: f64,
    /// Lens aperture diameter, meters.
    pub aperture_d: f64,
    /// Camera to target distance, meters.
    pub path_length_l: f64,
    /// Dimensionless turbulence constant.
    pub turbulence_p: f64,
}

impl CameraGeometry {
    pub const P_MIN: f64 = 0.5;
    pub const P_MAX: f64 = 5.0;

    pub fn new(pfov: f64, aperture_d: f64, path_length_l: f64, turbulence_p: f64) -> Result<Self> {
        let g = Self {
            pfov,
            aperture_d,
            path_length_l,
            turbulence_p,
        };
        g.validate()?;
        Ok(g)
    }

    /// The field rig used for the July collection (724 m path, P = 1.1).
    pub fn field_default() -> Self {
        Self {
            pfov: 5.95e-6,
            aperture_d: 0.06,
            path_length_l: 724.0,
            turbulence_p: 1.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("pfov", self.pfov),
            ("aperture_d", self.aperture_d),
            ("path_length_l", self.path_length_l),
            ("turbulence_p", self.turbulence_p),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !(Self::P_MIN..=Self::P_MAX).contains(&self.turbulence_p) {
            return Err(Error::InvalidValue(format!(
                "turbulence_p {} outside [{}, {}]",
                self.turbulence_p,
                Self::P_MIN,
                Self::P_MAX
            )));
        }
        Ok(())
    }

    pub fn with_aperture(self, aperture_d: f64) -> Self {
        Self { aperture_d, ..self }
    }

    pub fn with_distance(self, path_length_l: f64) -> Self {
        Self {
            path_length_l,
            ..self
        }
    }
}

/// `PFOV^2 * D^(1/3) / (L * P)`: converts pixel displacement variance into
/// Cn2 (m^-2/3).
pub fn geometry_scalar(geom: &CameraGeometry) -> f64 {
    geom.pfov * geom.pfov * geom.aperture_d.cbrt() / (geom.path_length_l * geom.turbulence_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn field_constants() {
        // 5.95e-6^2 * 0.06^(1/3) / (724 * 1.1)
        let m = geometry_scalar(&CameraGeometry::field_default());
        assert_relative_eq!(m, 1.741e-14, max_relative = 1e-3);
    }

    #[test]
    fn unit_geometry() {
        let g = CameraGeometry::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(geometry_scalar(&g), 1.0);
    }

    #[test]
    fn doubling_distance_halves() {
        let g = CameraGeometry::field_default();
        let a = geometry_scalar(&g);
        let b = geometry_scalar(&g.with_distance(2.0 * g.path_length_l));
        assert_relative_eq!(b, a / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(CameraGeometry::new(0.0, 0.06, 724.0, 1.1).is_err());
        assert!(CameraGeometry::new(5.95e-6, 0.06, 724.0, 7.0).is_err());
        assert!(CameraGeometry::new(5.95e-6, f64::NAN, 724.0, 1.1).is_err());
        assert!(CameraGeometry::new(5.95e-6, 0.06, 1450.0, 2.9).is_ok());
    }
}
