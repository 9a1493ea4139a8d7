//! Display-only heatmap rendering of distance and correlation matrices.
//! Rendering never feeds back into computed values.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

/// Render a row-major matrix as a PNG heatmap.
///
/// Values map linearly from `vmin`..`vmax` onto a blue-white-red ramp;
/// entries below `mask_below` (and NaNs) render white, matching the
/// masked-below-cutoff display of distance matrices.
pub fn save_heatmap(
    values: &[f64],
    dim: usize,
    vmin: f64,
    vmax: f64,
    mask_below: Option<f64>,
    path: &Path,
) -> Result<()> {
    // Cap the image at 2048px a side; larger matrices are downsampled by
    // striding, which is fine for a diagnostic picture.
    let side = dim.min(2048);
    let stride = dim.div_ceil(side);
    let px = dim.div_ceil(stride);
    let mut img = RgbImage::new(px as u32, px as u32);
    let span = (vmax - vmin).max(f64::MIN_POSITIVE);
    for py in 0..px {
        for pxx in 0..px {
            let v = values[(py * stride).min(dim - 1) * dim + (pxx * stride).min(dim - 1)];
            let masked = v.is_nan() || mask_below.map(|m| v < m).unwrap_or(false);
            let rgb = if masked {
                Rgb([255, 255, 255])
            } else {
                let t = ((v - vmin) / span).clamp(0.0, 1.0);
                ramp(t)
            };
            img.put_pixel(pxx as u32, py as u32, rgb);
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}

fn ramp(t: f64) -> Rgb<u8> {
    // 0 -> blue, 0.5 -> white, 1 -> red.
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (u, u, 1.0)
    } else {
        let u = (1.0 - t) * 2.0;
        (1.0, u, u)
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}
