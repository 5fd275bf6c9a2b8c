//! 8-bit PNG previews.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use nlctf_core::tensor::Tensor3;
use nlctf_core::{NlctfError, Result};

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| NlctfError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(pixels).map_err(png_err)?;
    Ok(())
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

/// One grayscale PNG per channel, windowed to the channel's [min, max].
/// The window is part of the file name, e.g. `truth_ch0_win0-0.9215.png`.
pub fn write_channels(volume: &Tensor3, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [rows, cols, s] = volume.dims();
    for c in 0..s {
        let ch = volume.slice3(c);
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // PNG rows are image rows; volume is column-major.
        let mut px = vec![0u8; rows * cols];
        for r in 0..rows {
            for col in 0..cols {
                px[r * cols + col] = to_byte(ch[r + rows * col], lo, hi);
            }
        }
        let name = format!("{stem}_ch{c}_win{lo:.4}-{hi:.4}.png");
        write_png(&dir.join(name), cols, rows, png::ColorType::Grayscale, &px)?;
    }
    Ok(())
}

/// RGB composite of material fractions: material 0 green, 1 red, 2 blue.
/// Each material is scaled by its own maximum.
pub fn write_overlay(fractions: &Tensor3, path: &Path) -> Result<()> {
    let [rows, cols, m] = fractions.dims();
    const CHANNEL: [usize; 3] = [1, 0, 2];
    let mut px = vec![0u8; rows * cols * 3];
    for k in 0..m.min(3) {
        let f = fractions.slice3(k);
        let hi = f.iter().copied().fold(0.0, f64::max);
        for r in 0..rows {
            for col in 0..cols {
                px[(r * cols + col) * 3 + CHANNEL[k]] = to_byte(f[r + rows * col], 0.0, hi);
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_png(path, cols, rows, png::ColorType::Rgb, &px)?;
    println!("wrote {}", path.display());
    Ok(())
}
