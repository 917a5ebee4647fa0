//! Binary PGM (P5) output for maps and reconstruction slices.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Linear mapping onto `0..=65535`; the window defaults to the data range.
pub fn scale_to_u16(values: &[f64], window: Option<(f64, f64)>) -> Vec<u16> {
    let (lo, hi) = window.unwrap_or_else(|| {
        values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if !(span > 0.0) || !v.is_finite() {
                return 0;
            }
            (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
        })
        .collect()
}

/// 16-bit P5 image, samples big-endian as the format requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[u16]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    bytes.extend(pixels.iter().flat_map(|p| p.to_be_bytes()));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
