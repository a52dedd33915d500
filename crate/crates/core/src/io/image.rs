//! Binary PPM (P6) and PGM (P5) export with maxval 255.

use std::path::Path;

use super::write_atomic;
use crate::{Error, Grid, Result};

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(grid: &Grid, channels: usize, magic: &str) -> Result<Vec<u8>> {
    if grid.channels() != channels {
        return Err(Error::input(format!(
            "{magic} export needs {channels} channel(s), image has {}",
            grid.channels()
        )));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// RGB image with values in `[0, 1]` (clamped) as binary PPM.
pub fn encode_ppm(rgb: &Grid) -> Result<Vec<u8>> {
    encode(rgb, 3, "P6")
}

/// Single-channel image with values in `[0, 1]` (clamped) as binary PGM.
pub fn encode_pgm(gray: &Grid) -> Result<Vec<u8>> {
    encode(gray, 1, "P5")
}

pub fn write_ppm(path: &Path, rgb: &Grid) -> Result<()> {
    write_atomic(path, &encode_ppm(rgb)?)
}

pub fn write_pgm(path: &Path, gray: &Grid) -> Result<()> {
    write_atomic(path, &encode_pgm(gray)?)
}
