//! SSIM and 3-scale MS-SSIM on the luma channel.
//!
//! Windows are 7x7 uniform with stride 1 and population statistics;
//! `C1 = 0.01^2`, `C2 = 0.03^2` for a unit dynamic range.

use crate::catalog::PixelImage;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// First three standard MS-SSIM exponents, renormalized to sum to one.
pub const MSSSIM_WEIGHTS: [f64; 3] = [0.0448 / 0.6305, 0.2856 / 0.6305, 0.3001 / 0.6305];

struct Plane {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Plane {
    fn luma(img: &PixelImage) -> Self {
        Self {
            w: img.width(),
            h: img.height(),
            px: img.luma().to_vec(),
        }
    }

    /// 2x2 mean pool; odd trailing rows/columns are dropped.
    fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.px[(2 * y + dy) * self.w + 2 * x + dx];
                px.push(0.25 * (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)));
            }
        }
        Self { w, h, px }
    }
}

/// Per-window luminance and contrast-structure maps.
struct SsimMaps {
    l: Vec<f64>,
    cs: Vec<f64>,
}

/// Separable 7-tap box sums over the valid region.
fn box_sum(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = values[y * w + x..y * w + x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|dy| rows[(y + dy) * ow + x]).sum();
        }
    }
    out
}

fn ssim_maps(a: &Plane, b: &Plane) -> SsimMaps {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.px.iter().zip(&b.px).map(|(&x, &y)| f(x, y)).collect()
    };
    let sx = box_sum(&a.px, a.w, a.h);
    let sy = box_sum(&b.px, b.w, b.h);
    let sxx = box_sum(&prod(|x, _| x * x), a.w, a.h);
    let syy = box_sum(&prod(|_, y| y * y), a.w, a.h);
    let sxy = box_sum(&prod(|x, y| x * y), a.w, a.h);
    let mut l = Vec::with_capacity(sx.len());
    let mut cs = Vec::with_capacity(sx.len());
    for i in 0..sx.len() {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        l.push((2.0 * mx * my + C1) / (mx * mx + my * my + C1));
        cs.push((2.0 * cxy + C2) / (vx + vy + C2));
    }
    SsimMaps { l, cs }
}

fn check_pair(a: &PixelImage, b: &PixelImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean SSIM over all 7x7 windows of the luma channel.
pub fn ssim(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    check_pair(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    let maps = ssim_maps(&Plane::luma(a), &Plane::luma(b));
    let sum: f64 = maps.l.iter().zip(&maps.cs).map(|(l, cs)| l * cs).sum();
    Ok(sum / maps.l.len() as f64)
}

/// Three-scale MS-SSIM: mean contrast-structure at scales 1..3 and mean
/// luminance at scale 3, combined with [`MSSSIM_WEIGHTS`] as exponents.
/// Negative terms are clamped to zero before exponentiation.
pub fn msssim(a: &PixelImage, b: &PixelImage) -> Result<f64> {
    check_pair(a, b)?;
    let min_side = SSIM_WINDOW * 4;
    if a.width() < min_side || a.height() < min_side {
        return Err(Error::ImageTooSmall(format!(
            "MS-SSIM needs at least {min_side}x{min_side} for 3 scales, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    let mut pa = Plane::luma(a);
    let mut pb = Plane::luma(b);
    let mut value = 1.0;
    for (scale, &w) in MSSSIM_WEIGHTS.iter().enumerate() {
        if scale > 0 {
            pa = pa.downsample();
            pb = pb.downsample();
        }
        let maps = ssim_maps(&pa, &pb);
        let n = maps.cs.len() as f64;
        let cs = maps.cs.iter().sum::<f64>() / n;
        value *= cs.max(0.0).powf(w);
        if scale == MSSSIM_WEIGHTS.len() - 1 {
            let l = maps.l.iter().sum::<f64>() / n;
            value *= l.max(0.0).powf(w);
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand::Rng;

    fn noise(seed: u64, w: usize, h: usize) -> PixelImage {
        let mut rng = util::rng_from(seed, &[]);
        let rgb = (0..w * h)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
            .collect();
        PixelImage::new(w, h, rgb).unwrap()
    }

    #[test]
    fn identity_is_exactly_one() {
        let a = noise(1, 32, 32);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(msssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_closed_form() {
        let a = PixelImage::from_gray(8, 8, &[0.2; 64]).unwrap();
        let b = PixelImage::from_gray(8, 8, &[0.8; 64]).unwrap();
        let (la, lb) = (a.luma()[0], b.luma()[0]);
        // zero variances leave only the luminance term
        let want = (2.0 * la * lb + C1) / (la * la + lb * lb + C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3201 / 0.6801).abs() < 1e-9);
    }

    #[test]
    fn inverted_high_contrast_scores_low() {
        let vals: Vec<f64> = (0..32 * 32)
            .map(|i| {
                if (i % 32 / 2 + i / 32 / 2) % 2 == 0 {
                    0.05
                } else {
                    0.95
                }
            })
            .collect();
        let a = PixelImage::from_gray(32, 32, &vals).unwrap();
        let s = ssim(&a, &a.inverted()).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn symmetric_bitwise() {
        let a = noise(2, 32, 32);
        let b = noise(3, 32, 32);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert_eq!(msssim(&a, &b).unwrap(), msssim(&b, &a).unwrap());
    }

    #[test]
    fn size_errors() {
        let a = noise(1, 6, 6);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall(_))));
        let b = noise(1, 27, 40);
        assert!(matches!(msssim(&b, &b), Err(Error::ImageTooSmall(_))));
        let c = noise(1, 28, 28);
        assert!(msssim(&c, &c).is_ok());
        assert!(matches!(
            ssim(&noise(1, 8, 8), &noise(1, 8, 9)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn weights_sum_to_one() {
        assert!((MSSSIM_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    /// Direct per-window two-pass statistics, no box sums.
    fn oracle_window_stats(a: &[f64], b: &[f64], w: usize, x0: usize, y0: usize) -> (f64, f64) {
        let idx: Vec<usize> = (0..7)
            .flat_map(|dy| (0..7).map(move |dx| (y0 + dy) * w + x0 + dx))
            .collect();
        let n = idx.len() as f64;
        let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
        let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
        let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / n;
        let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / n;
        let cov = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / n;
        let l = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
        let cs = (2.0 * cov + 9e-4) / (va + vb + 9e-4);
        (l, cs)
    }

    fn oracle_pool(p: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let s = p[2 * y * w + 2 * x]
                    + p[2 * y * w + 2 * x + 1]
                    + p[(2 * y + 1) * w + 2 * x]
                    + p[(2 * y + 1) * w + 2 * x + 1];
                out.push(s / 4.0);
            }
        }
        out
    }

    fn oracle_msssim(a: &PixelImage, b: &PixelImage) -> f64 {
        let weights = [0.0448, 0.2856, 0.3001];
        let total: f64 = weights.iter().sum();
        let (mut w, mut h) = (a.width(), a.height());
        let mut pa = a.luma().to_vec();
        let mut pb = b.luma().to_vec();
        let mut out = 1.0;
        for s in 0..3 {
            if s > 0 {
                pa = oracle_pool(&pa, w, h);
                pb = oracle_pool(&pb, w, h);
                w /= 2;
                h /= 2;
            }
            let mut ls = Vec::new();
            let mut css = Vec::new();
            for y0 in 0..=h - 7 {
                for x0 in 0..=w - 7 {
                    let (l, cs) = oracle_window_stats(&pa, &pb, w, x0, y0);
                    ls.push(l);
                    css.push(cs);
                }
            }
            let cs_mean = css.iter().sum::<f64>() / css.len() as f64;
            out *= cs_mean.max(0.0).powf(weights[s] / total);
            if s == 2 {
                let l_mean = ls.iter().sum::<f64>() / ls.len() as f64;
                out *= l_mean.max(0.0).powf(weights[s] / total);
            }
        }
        out
    }

    fn fixture_pair() -> (PixelImage, PixelImage) {
        let a = noise(11, 32, 32);
        let rgb = a
            .rgb()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = (i % 32) as f64 / 31.0;
                std::array::from_fn(|c| 0.6 * p[c] + 0.4 * t)
            })
            .collect();
        (a, PixelImage::new(32, 32, rgb).unwrap())
    }

    #[test]
    fn msssim_matches_straight_line_oracle() {
        let (a, b) = fixture_pair();
        let got = msssim(&a, &b).unwrap();
        let want = oracle_msssim(&a, &b);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn ssim_matches_straight_line_oracle() {
        let (a, b) = fixture_pair();
        let (pa, pb) = (a.luma(), b.luma());
        let mut acc = 0.0;
        for y0 in 0..26 {
            for x0 in 0..26 {
                let (l, cs) = oracle_window_stats(pa, pb, 32, x0, y0);
                acc += l * cs;
            }
        }
        let want = acc / 676.0;
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-10);
    }
}
