//! Segmentation and prediction metrics.
//!
//! J is region IoU. F extracts boundaries by 4-neighborhood erosion
//! difference and matches them within a pixel tolerance (dilation
//! approximation of the bipartite matching); the default tolerance is
//! 0.8% of the image diagonal, rounded up. Prediction quality is MSE,
//! MAE, SSIM (11×11 Gaussian window, σ=1.5, C1=0.01², C2=0.03² on unit
//! range, per channel, valid region) and PSNR capped at 99 dB.

use serde::Serialize;

use stremn_core::tensor::Tensor;

use crate::error::{Error, Result};

/// Per-sequence metric bundle. Segmentation fills J/F; prediction fills
/// the rest.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsRecord {
    pub name: String,
    pub j_mean: Option<f64>,
    pub f_mean: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    /// Per-frame J (VOS) or per-frame MSE (prediction).
    pub per_frame: Vec<f64>,
}

/// Region similarity |A∩B|/|A∪B|; both empty counts as perfect.
pub fn metric_j(pred: &[bool], gt: &[bool]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Default boundary tolerance: ceil(0.8% of the diagonal).
pub fn default_boundary_tol(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Boundary pixels: in the mask but not in its 4-neighborhood erosion
/// (image border counts as background).
fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            mask[y as usize * w + x as usize]
        }
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x)
                && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
            {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Dilate a boolean map with a Euclidean disc of radius `tol`.
fn dilate(mask: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut offsets = Vec::new();
    let t = tol as isize;
    for dy in -t..=t {
        for dx in -t..=t {
            if (dy * dy + dx * dx) as usize <= tol * tol {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !mask[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure within `tol_px`. Both boundaries empty scores 1,
/// exactly one empty scores 0.
pub fn metric_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tol_px: usize) -> f64 {
    debug_assert_eq!(pred.len(), h * w);
    debug_assert_eq!(gt.len(), h * w);
    let pb = boundary(pred, h, w);
    let gb = boundary(gt, h, w);
    let np: usize = pb.iter().filter(|&&v| v).count();
    let ng: usize = gb.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let gb_d = dilate(&gb, h, w, tol_px);
    let pb_d = dilate(&pb, h, w, tol_px);
    let matched_p = pb.iter().zip(gb_d.iter()).filter(|&(&p, &g)| p && g).count();
    let matched_g = gb.iter().zip(pb_d.iter()).filter(|&(&g, &p)| g && p).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP_DB: f64 = 99.0;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur, valid region only (output (h-10)×(w-10)).
fn blur_valid(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let wv = w - 2 * half;
    let hv = h - 2 * half;
    // horizontal pass
    let mut tmp = vec![0.0; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * wv + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// SSIM between two single-channel images in [0,1].
fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = blur_valid(a, h, w);
    let mu_b = blur_valid(b, h, w);
    let m_aa = blur_valid(&aa, h, w);
    let m_bb = blur_valid(&bb, h, w);
    let m_ab = blur_valid(&ab, h, w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over the channels of a pair of 3×H×W frames.
pub fn ssim_frame(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (c, h, w) = dims3(a)?;
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "ssim on mismatched shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {0}x{0} images, got {1}x{2}",
            SSIM_WINDOW, h, w
        )));
    }
    let mut total = 0.0;
    for ch in 0..c {
        let ac: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let bc: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        total += ssim_channel(&ac, &bc, h, w);
    }
    Ok(total / c as f64)
}

fn dims3(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Contract(format!("expected C×H×W frame, got {:?}", s))),
    }
}

fn frame_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

fn frame_mae(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.len() as f64;
    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| ((x - y) as f64).abs()).sum::<f64>() / n
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

/// Per-frame MSE/MAE/SSIM/PSNR averaged over the predicted horizon.
pub fn metric_prediction(
    pred: &[Tensor<f32>],
    gt: &[Tensor<f32>],
) -> Result<(f64, f64, f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "prediction horizon mismatch: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut ssim = 0.0;
    let mut psnr = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "frame shape mismatch {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = frame_mse(p, g);
        mse += m;
        mae += frame_mae(p, g);
        ssim += ssim_frame(p, g)?;
        psnr += psnr_from_mse(m);
    }
    let n = pred.len() as f64;
    Ok((mse / n, mae / n, ssim / n, psnr / n))
}
