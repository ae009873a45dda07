//! Evaluation metrics: BT.601 luma conversion, border-shaved PSNR, and mean
//! local SSIM with an 11×11 Gaussian window, plus CSV report assembly.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::FeatureMap;

const LUMA_R: f64 = 65.481;
const LUMA_G: f64 = 128.553;
const LUMA_B: f64 = 24.966;
const LUMA_OFFSET: f64 = 16.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// ITU-R BT.601 luma: Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255.
pub fn to_luma(img: &FeatureMap) -> Result<Array2<f64>> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::Shape(format!("luma needs 3 channels, got {c}")));
    }
    let d = img.data();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        (LUMA_R * d[[0, y, x]] + LUMA_G * d[[1, y, x]] + LUMA_B * d[[2, y, x]] + LUMA_OFFSET)
            / 255.0
    }))
}

fn cropped_lumas(
    a: &FeatureMap,
    b: &FeatureMap,
    crop_border: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (_, h, w) = a.shape();
    if 2 * crop_border >= h || 2 * crop_border >= w {
        return Err(Error::Dimension(format!(
            "border {crop_border} swallows the whole {h}x{w} image"
        )));
    }
    let ya = to_luma(a)?;
    let yb = to_luma(b)?;
    let window = ndarray::s![
        crop_border..h - crop_border,
        crop_border..w - crop_border
    ];
    Ok((ya.slice(window).to_owned(), yb.slice(window).to_owned()))
}

/// Peak signal-to-noise ratio in dB over border-cropped luma, with peak 1.
/// Identical inputs give +∞.
pub fn psnr(a: &FeatureMap, b: &FeatureMap, crop_border: usize) -> Result<f64> {
    let (ya, yb) = cropped_lumas(a, b, crop_border)?;
    let n = ya.len() as f64;
    let mse: f64 = ya
        .iter()
        .zip(yb.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Valid-region separable filtering with a 1-D window applied to both axes.
fn filter_valid(img: &Array2<f64>, window: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::zeros((oh, w));
    for y in 0..oh {
        for x in 0..w {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|t| window[t] * img[[y + t, x]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..SSIM_WINDOW).map(|t| window[t] * rows[[y, x + t]]).sum::<f64>();
        }
    }
    out
}

/// Mean local structural similarity over border-cropped luma: 11×11 Gaussian
/// window (σ = 1.5), C1 = 0.01², C2 = 0.03², valid windows only.
pub fn ssim(a: &FeatureMap, b: &FeatureMap, crop_border: usize) -> Result<f64> {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (ya, yb) = cropped_lumas(a, b, crop_border)?;
    let (h, w) = ya.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "{h}x{w} region smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let mu_a = filter_valid(&ya, &win);
    let mu_b = filter_valid(&yb, &win);
    let e_aa = filter_valid(&(&ya * &ya), &win);
    let e_bb = filter_valid(&(&yb * &yb), &win);
    let e_ab = filter_valid(&(&ya * &yb), &win);

    let mut total = 0.0;
    for ((y, x), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[y, x]];
        let var_a = e_aa[[y, x]] - ma * ma;
        let var_b = e_bb[[y, x]] - mb * mb;
        let cov = e_ab[[y, x]] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metrics plus dataset means, as written to the report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub scale: usize,
    pub crop_border: usize,
    pub channel_mode: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Assembles a report; means are the arithmetic averages of the rows.
    pub fn from_rows(rows: Vec<EvalRow>, scale: usize, crop_border: usize) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::Parameter("report needs at least one image".into()));
        }
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            rows,
            scale,
            crop_border,
            channel_mode: "y".to_string(),
            mean_psnr,
            mean_ssim,
        })
    }

    /// Scores (restored, reference) pairs with border shave = scale.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a FeatureMap, &'a FeatureMap)>,
        scale: usize,
    ) -> Result<EvalReport> {
        let mut rows = Vec::new();
        for (id, sr, hr) in pairs {
            rows.push(EvalRow {
                id: id.to_string(),
                psnr: psnr(sr, hr, scale)?,
                ssim: ssim(sr, hr, scale)?,
            });
        }
        EvalReport::from_rows(rows, scale, scale)
    }

    /// Writes `id,psnr,ssim` rows and a final `mean` summary row.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "id,psnr,ssim")?;
        for row in &self.rows {
            writeln!(w, "{},{:.6},{:.6}", row.id, row.psnr, row.ssim)?;
        }
        writeln!(w, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim)?;
        Ok(())
    }
}
