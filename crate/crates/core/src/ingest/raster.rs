//! PNG/TIFF frame I/O. Grayscale and RGB, 8 or 16 bits per sample; RGB is
//! reduced to luma on load.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::imaging::{to_grayscale, ImageFrame, RgbFrame};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads one frame and stamps it with `timestamp_us`.
pub fn load_frame(path: &Path, timestamp_us: i64) -> Result<ImageFrame> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    decode(img, timestamp_us).map_err(|e| image_err(path, e))
}

fn decode(img: DynamicImage, timestamp_us: i64) -> Result<ImageFrame> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb32f();
        let mut channels = [
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
            Vec::with_capacity(w * h),
        ];
        for p in rgb.pixels() {
            for (c, v) in channels.iter_mut().zip(p.0) {
                c.push(v.clamp(0.0, 1.0));
            }
        }
        to_grayscale(&RgbFrame {
            width: w,
            height: h,
            channels,
            timestamp_us,
        })
    } else {
        let gray = img.into_luma16();
        let pixels = gray
            .pixels()
            .map(|p| p.0[0] as f32 / u16::MAX as f32)
            .collect();
        ImageFrame::new(w, h, pixels, timestamp_us)
    }
}

/// Writes a frame as a 16-bit grayscale PNG (or TIFF, by extension).
pub fn save_frame(frame: &ImageFrame, path: &Path) -> Result<()> {
    let data: Vec<u16> = frame
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width as u32, frame.height as u32, data)
            .ok_or_else(|| image_err(path, "pixel buffer does not match frame size"))?;
    buf.save(path).map_err(|e| image_err(path, e))
}
