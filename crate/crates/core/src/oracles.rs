//! Brute-force reference implementations used by differential tests.
//!
//! Everything here is written with explicit scalar loops and deliberately
//! shares no computation code with the production kernels; only the contract
//! types are common. All routines are O(N²) or worse and meant for small
//! test instances.

use ndarray::Array2;

use crate::subgraph::{PatchSet, SubgraphEdges, SSIM_C1, SSIM_C2};
use crate::types::FeatureMap;

/// Differential-test summary against a stated tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    pub n_cases: usize,
    pub pass: bool,
}

impl OracleReport {
    pub fn from_errors(errors: &[f64], tolerance: f64) -> Self {
        let n_cases = errors.len();
        let max_abs_err = errors.iter().cloned().fold(0.0, f64::max);
        let mean_abs_err = if n_cases == 0 {
            0.0
        } else {
            errors.iter().sum::<f64>() / n_cases as f64
        };
        OracleReport { max_abs_err, mean_abs_err, n_cases, pass: max_abs_err < tolerance }
    }
}

/// Normalized Gaussian-kernel aggregation over all query-candidate pairs,
/// with no top-K truncation and no exponent shifting.
pub fn dense_nonlocal(queries: &PatchSet, candidates: &PatchSet, temperature: f64) -> Array2<f64> {
    let nq = queries.len();
    let nc = candidates.len();
    let d = queries.dim();
    let q = queries.vectors();
    let c = candidates.vectors();
    let mut out = Array2::zeros((nq, d));
    for i in 0..nq {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..nc {
            let mut d2 = 0.0;
            for t in 0..d {
                let diff = q[[i, t]] - c[[j, t]];
                d2 += diff * diff;
            }
            let w = (-d2 / temperature).exp();
            for t in 0..d {
                num[t] += w * c[[j, t]];
            }
            den += w;
        }
        for t in 0..d {
            out[[i, t]] = num[t] / den;
        }
    }
    out
}

/// Top-K neighbors by full distance matrix and stable sort; ties go to the
/// lower candidate index, matching the production rule.
pub fn exhaustive_knn(queries: &PatchSet, candidates: &PatchSet, k: usize) -> SubgraphEdges {
    let nq = queries.len();
    let nc = candidates.len();
    let d = queries.dim();
    let q = queries.vectors();
    let c = candidates.vectors();

    let mut dmat = Array2::zeros((nq, nc));
    for i in 0..nq {
        for j in 0..nc {
            let mut d2 = 0.0;
            for t in 0..d {
                let diff = q[[i, t]] - c[[j, t]];
                d2 += diff * diff;
            }
            dmat[[i, j]] = d2;
        }
    }

    let mut neighbor_idx = Array2::zeros((nq, k));
    let mut distances = Array2::zeros((nq, k));
    let mut ssim = Array2::zeros((nq, k));
    for i in 0..nq {
        let mut order: Vec<usize> = (0..nc).collect();
        order.sort_by(|&a, &b| dmat[[i, a]].total_cmp(&dmat[[i, b]]).then(a.cmp(&b)));
        for slot in 0..k {
            let j = order[slot];
            neighbor_idx[[i, slot]] = j;
            distances[[i, slot]] = dmat[[i, j]].sqrt();
            let p: Vec<f64> = (0..d).map(|t| q[[i, t]]).collect();
            let qq: Vec<f64> = (0..d).map(|t| c[[j, t]]).collect();
            ssim[[i, slot]] = loop_patch_ssim(&p, &qq, SSIM_C1, SSIM_C2);
        }
    }
    SubgraphEdges::from_parts(neighbor_idx, distances, ssim)
}

fn loop_patch_ssim(p: &[f64], q: &[f64], c1: f64, c2: f64) -> f64 {
    let n = p.len() as f64;
    let mut sp = 0.0;
    let mut sq = 0.0;
    for t in 0..p.len() {
        sp += p[t];
    }
    for t in 0..q.len() {
        sq += q[t];
    }
    let mu_p = sp / n;
    let mu_q = sq / n;
    let mut var_p = 0.0;
    let mut var_q = 0.0;
    let mut cov = 0.0;
    for t in 0..p.len() {
        let dp = p[t] - mu_p;
        let dq = q[t] - mu_q;
        var_p += dp * dp;
        var_q += dq * dq;
        cov += dp * dq;
    }
    var_p /= n;
    var_q /= n;
    cov /= n;
    ((2.0 * mu_p * mu_q + c1) * (2.0 * cov + c2))
        / ((mu_p * mu_p + mu_q * mu_q + c1) * (var_p + var_q + c2))
}

/// Scaled dot-product attention written as scalar exp/normalize/accumulate
/// loops with no matrix primitives. Returns the n × d_head output.
pub fn loop_attention(
    s: &Array2<f64>,
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
) -> Array2<f64> {
    let n = s.nrows();
    let d = s.ncols();
    let d_head = w_q.ncols();

    let mut q = Array2::zeros((n, d_head));
    let mut k = Array2::zeros((n, d_head));
    let mut v = Array2::zeros((n, d_head));
    for i in 0..n {
        for a in 0..d_head {
            let mut sq = 0.0;
            let mut sk = 0.0;
            let mut sv = 0.0;
            for t in 0..d {
                sq += s[[i, t]] * w_q[[t, a]];
                sk += s[[i, t]] * w_k[[t, a]];
                sv += s[[i, t]] * w_v[[t, a]];
            }
            q[[i, a]] = sq;
            k[[i, a]] = sk;
            v[[i, a]] = sv;
        }
    }

    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = Array2::zeros((n, d_head));
    for i in 0..n {
        let mut weights = vec![0.0; n];
        let mut z = 0.0;
        for j in 0..n {
            let mut logit = 0.0;
            for a in 0..d_head {
                logit += q[[i, a]] * k[[j, a]];
            }
            let e = (logit * scale).exp();
            weights[j] = e;
            z += e;
        }
        for j in 0..n {
            let w = weights[j] / z;
            for a in 0..d_head {
                out[[i, a]] += w * v[[j, a]];
            }
        }
    }
    out
}

/// Peak signal-to-noise ratio recomputed from scratch: inline luma transform,
/// border crop, scalar mean-squared-error loop. Returns +∞ on exact equality.
/// Direct convolve-then-subsample bicubic reduction with the a = -0.5
/// kernel: every output pixel evaluates its full 2-D tap window in explicit
/// loops, with edge clamping and joint weight renormalization.
pub fn loop_bicubic_downscale(img: &FeatureMap, s: usize) -> FeatureMap {
    let (c, h, w) = img.shape();
    let (oh, ow) = (h / s, w / s);
    let sf = s as f64;
    let kernel = |x: f64| -> f64 {
        let x: f64 = x.abs();
        if x < 1.0 {
            (1.5 * x - 2.5) * x * x + 1.0
        } else if x < 2.0 {
            ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
        } else {
            0.0
        }
    };
    let mut out = ndarray::Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = (oy as f64 + 0.5) * sf - 0.5;
                let cx = (ox as f64 + 0.5) * sf - 0.5;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let y_lo = (cy - 2.0 * sf).ceil() as isize;
                let y_hi = (cy + 2.0 * sf).floor() as isize;
                let x_lo = (cx - 2.0 * sf).ceil() as isize;
                let x_hi = (cx + 2.0 * sf).floor() as isize;
                for jy in y_lo..=y_hi {
                    let wy = kernel((jy as f64 - cy) / sf);
                    if wy == 0.0 {
                        continue;
                    }
                    for jx in x_lo..=x_hi {
                        let wx = kernel((jx as f64 - cx) / sf);
                        if wx == 0.0 {
                            continue;
                        }
                        let sy = jy.clamp(0, h as isize - 1) as usize;
                        let sx = jx.clamp(0, w as isize - 1) as usize;
                        acc += wy * wx * img.data()[[ch, sy, sx]];
                        wsum += wy * wx;
                    }
                }
                out[[ch, oy, ox]] = (acc / wsum).clamp(0.0, 1.0);
            }
        }
    }
    FeatureMap::from_array_unchecked(out)
}

pub fn loop_psnr(a: &FeatureMap, b: &FeatureMap, crop_border: usize) -> f64 {
    let (_, h, w) = a.shape();
    let ya = loop_luma(a);
    let yb = loop_luma(b);
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in crop_border..h - crop_border {
        for c in crop_border..w - crop_border {
            let d = ya[[r, c]] - yb[[r, c]];
            sum += d * d;
            n += 1;
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean structural similarity recomputed from scratch: inline luma transform,
/// border crop, direct 11×11 Gaussian-weighted window loops at every valid
/// position.
pub fn loop_ssim(a: &FeatureMap, b: &FeatureMap, crop_border: usize) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let c1 = 0.01 * 0.01;
    let c2 = 0.03 * 0.03;

    let ya = loop_luma(a);
    let yb = loop_luma(b);
    let (h, w) = (ya.nrows(), ya.ncols());
    let ch = h - 2 * crop_border;
    let cw = w - 2 * crop_border;

    let mut win = [[0.0; WIN]; WIN];
    let mut wsum = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let di = i as f64 - 5.0;
            let dj = j as f64 - 5.0;
            win[i][j] = (-(di * di + dj * dj) / (2.0 * SIGMA * SIGMA)).exp();
            wsum += win[i][j];
        }
    }
    for i in 0..WIN {
        for j in 0..WIN {
            win[i][j] /= wsum;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=ch - WIN {
        for c in 0..=cw - WIN {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let x = ya[[crop_border + r + i, crop_border + c + j]];
                    let y = yb[[crop_border + r + i, crop_border + c + j]];
                    let wv = win[i][j];
                    mu_x += wv * x;
                    mu_y += wv * y;
                    xx += wv * x * x;
                    yy += wv * y * y;
                    xy += wv * x * y;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            total += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn loop_luma(img: &FeatureMap) -> Array2<f64> {
    let (_, h, w) = img.shape();
    let d = img.data();
    let mut y = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            y[[r, c]] =
                (65.481 * d[[0, r, c]] + 128.553 * d[[1, r, c]] + 24.966 * d[[2, r, c]] + 16.0) / 255.0;
        }
    }
    y
}
