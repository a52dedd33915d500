//! PSNR and SSIM for images in `[0, 1]`.
//!
//! SSIM uses an 11×11 Gaussian window with σ = 1.5, K₁ = 0.01, K₂ = 0.03 and
//! dynamic range L = 1, evaluated per channel on every window that lies fully
//! inside the image, then averaged over channels and positions.

use serde::{Deserialize, Serialize};

use crate::{Error, Grid, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    All,
    Visible,
    Hole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Decibels; `+∞` when the images agree exactly.
    #[serde(with = "inf_as_string")]
    pub psnr_db: f64,
    pub ssim: Option<f64>,
    pub region: Region,
}

fn check_shapes(a: &Grid, b: &Grid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::input(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean squared error, optionally restricted to pixels where `region` is set.
pub fn mse(a: &Grid, b: &Grid, region: Option<&[bool]>) -> Result<f64> {
    check_shapes(a, b)?;
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for cell in 0..a.cells() {
        if region.is_some_and(|r| !r[cell]) {
            continue;
        }
        for (x, y) in a.cell(cell).iter().zip(b.cell(cell)) {
            let d = x - y;
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::input("metric region is empty"));
    }
    Ok(sum / count as f64)
}

/// `10·log10(1 / MSE)` with peak 1; `+∞` when the MSE is zero.
pub fn psnr(a: &Grid, b: &Grid, region: Option<&[bool]>) -> Result<f64> {
    if let Some(r) = region {
        if r.len() != a.cells() {
            return Err(Error::input("region mask does not match image size"));
        }
    }
    let e = mse(a, b, region)?;
    Ok(psnr_from_mse(e))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for r in 0..SSIM_WINDOW {
        for c in 0..SSIM_WINDOW {
            w[r * SSIM_WINDOW + c] = g[r] * g[c] / (total * total);
        }
    }
    w
}

/// Mean SSIM over channels and all fully interior window positions.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::input(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (rows, cols) = (a.height() - SSIM_WINDOW + 1, a.width() - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..a.channels() {
        for r0 in 0..rows {
            for c0 in 0..cols {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in 0..SSIM_WINDOW {
                    for dc in 0..SSIM_WINDOW {
                        let w = window[dr * SSIM_WINDOW + dc];
                        let x = a.at(r0 + dr, c0 + dc)[ch];
                        let y = b.at(r0 + dr, c0 + dc)[ch];
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (a.channels() * rows * cols) as f64)
}

/// Serializes `+∞` as the string `"inf"` (JSON has no infinity literal).
pub mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {s:?}"))),
        }
    }
}

/// [`inf_as_string`] for optional values.
pub mod opt_inf_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize)]
    struct Ser(#[serde(with = "super::inf_as_string")] f64);

    #[derive(Deserialize)]
    struct De(#[serde(with = "super::inf_as_string")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Ser).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<De>::deserialize(d)?.map(|De(v)| v))
    }
}
