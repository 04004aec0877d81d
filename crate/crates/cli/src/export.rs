//! Heatmap and CSV export of one sample field.
//!
//! The PNG is 8-bit RGB, one pixel per node, with the top row at the
//! largest y. Values map linearly from the field minimum to its maximum
//! onto [`COLORMAP`], a nine-stop sampling of viridis interpolated in RGB.
//! `tEXt` chunks `field`, `min`, and `max` record the mapping.

use std::fmt::Write as _;

use thermo_core::datastore::{read_sample_file, write_atomic};

use crate::args::ExportArgs;
use crate::Result;

pub const COLORMAP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Color of `t` in `[0, 1]`.
pub fn color(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let k = (x.floor() as usize).min(COLORMAP.len() - 2);
    let w = x - k as f64;
    let (a, b) = (COLORMAP[k], COLORMAP[k + 1]);
    std::array::from_fn(|c| (a[c] as f64 * (1.0 - w) + b[c] as f64 * w).round() as u8)
}

pub fn png_bytes(field: &str, nx: usize, ny: usize, values: &[f64]) -> Result<Vec<u8>> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut pixels = Vec::with_capacity(nx * ny * 3);
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = values[j * nx + i];
            let t = if span > 0.0 { (v - min) / span } else { 0.5 };
            pixels.extend_from_slice(&color(t));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, nx as u32, ny as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk("field".into(), field.into())?;
        enc.add_text_chunk("min".into(), format!("{min:e}"))?;
        enc.add_text_chunk("max".into(), format!("{max:e}"))?;
        let mut w = enc.write_header()?;
        w.write_image_data(&pixels)?;
        w.finish()?;
    }
    Ok(out)
}

/// `ny` lines of `nx` comma-separated values, line 0 at y = 0.
pub fn csv_text(nx: usize, values: &[f64]) -> String {
    let mut s = String::new();
    for row in values.chunks(nx) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

pub fn run(a: &ExportArgs) -> Result<()> {
    let sample = read_sample_file(&a.sample)?;
    let values = &sample.fields[a.field.index()];
    write_atomic(&a.png, &png_bytes(a.field.name(), sample.nx, sample.ny, values)?)?;
    if let Some(csv) = &a.csv {
        write_atomic(csv, csv_text(sample.nx, values).as_bytes())?;
    }
    Ok(())
}
