//! Fusion quality metrics and synthetic multi-focus test data.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, Image, IntegralImage};
use crate::ssim::{self, window_stats, SsimConstants};

/// Shannon entropy in bits of the 256-bin histogram of `img`.
///
/// Pixels are quantised with `round(v * 255)` after clamping to `[0, 1]`.
pub fn entropy(img: &Image) -> f64 {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let n = img.data().len() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Universal image quality index of one window.
///
/// Flat windows follow the reference convention: both variances and both
/// means zero gives 1; zero variances alone give the luminance term.
pub fn quality_index(mean_a: f64, mean_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let mean_sq = mean_a * mean_a + mean_b * mean_b;
    let var_sum = var_a + var_b;
    let den = var_sum * mean_sq;
    if den != 0.0 {
        4.0 * cov * mean_a * mean_b / den
    } else if var_sum == 0.0 && mean_sq != 0.0 {
        2.0 * mean_a * mean_b / mean_sq
    } else {
        1.0
    }
}

/// Saliency weight of the first source; 0.5 when neither window varies.
pub fn saliency_weight(var1: f64, var2: f64) -> f64 {
    if var1 + var2 == 0.0 {
        0.5
    } else {
        var1 / (var1 + var2)
    }
}

/// Piella's structural fusion quality: the variance-weighted blend of the
/// quality index of `f` against each source, averaged over windows.
///
/// Windows are the same uniform interior windows used by the loss.
pub fn q_s(x1: &Image, x2: &Image, f: &Image, k: &SsimConstants) -> Result<f64> {
    ensure_same_dims("q_s", x1, x2)?;
    ensure_same_dims("q_s", x1, f)?;
    let a = window_stats(x1, f, k)?;
    let b = window_stats(x2, f, k)?;
    let mut total = 0.0;
    for i in 0..a.len() {
        let q1 = quality_index(
            a.mean_x[i],
            a.mean_y[i],
            a.var_x[i],
            a.var_y[i],
            a.cov_xy[i],
        );
        let q2 = quality_index(
            b.mean_x[i],
            b.mean_y[i],
            b.var_x[i],
            b.var_y[i],
            b.cov_xy[i],
        );
        let lambda = saliency_weight(a.var_x[i], b.var_x[i]);
        total += lambda * q1 + (1.0 - lambda) * q2;
    }
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Random half-plane through a point near the centre.
    pub fn random_half_plane(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let cx = width as f64 * rng.random_range(0.35..0.65);
        let cy = height as f64 * rng.random_range(0.35..0.65);
        let (s, c) = theta.sin_cos();
        Self::from_fn(width, height, |x, y| {
            (x as f64 + 0.5 - cx) * c + (y as f64 + 0.5 - cy) * s > 0.0
        })
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with a kernel truncated at `ceil(3 sigma)` and
/// symmetric (edge-repeating) reflection at the borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("gaussian_blur", "sigma must be positive"));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= norm);

    let (w, h) = img.dims();
    let horizontal = Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * img.get(reflect(x as isize + i as isize - radius, w), y))
            .sum()
    });
    Ok(Image::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * horizontal.get(x, reflect(y as isize + i as isize - radius, h)))
            .sum()
    }))
}

/// Builds a multi-focus pair from a sharp image: the first is blurred where
/// the mask is set, the second everywhere else.
pub fn synth_pair(sharp: &Image, mask: &BinaryMask, sigma: f64) -> Result<(Image, Image)> {
    if mask.dims() != sharp.dims() {
        return Err(Error::ShapeMismatch {
            op: "synth_pair",
            expected: vec![sharp.height(), sharp.width()],
            found: vec![mask.height, mask.width],
        });
    }
    let blurred = gaussian_blur(sharp, sigma)?;
    let (w, h) = sharp.dims();
    let p1 = Image::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            blurred.get(x, y)
        } else {
            sharp.get(x, y)
        }
    });
    let p2 = Image::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            sharp.get(x, y)
        } else {
            blurred.get(x, y)
        }
    });
    Ok((p1, p2))
}

/// Procedural textured scene for synthetic datasets: overlapping flat shapes
/// carrying fine gratings and pixel noise.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(width, height, rng.random_range(0.3..0.7));
    let (wf, hf) = (width as f64, height as f64);
    for _ in 0..10 {
        let level: f64 = rng.random_range(0.05..0.95);
        let fx = rng.random_range(0.6..1.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let fy = rng.random_range(0.6..1.6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.08..0.2);
        let circle = rng.random_bool(0.5);
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let rx = rng.random_range(0.1..0.35) * wf;
        let ry = rng.random_range(0.1..0.35) * hf;
        for y in 0..height {
            for x in 0..width {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = if circle {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    let t = (fx * x as f64 + fy * y as f64 + phase).sin();
                    img.set(x, y, level + amp * t);
                }
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    img
}

/// Local variance in a `window x window` neighbourhood centred on each pixel,
/// clipped at the borders.
pub fn local_variance(img: &Image, window: usize) -> Image {
    let (w, h) = img.dims();
    let ii = IntegralImage::of(img);
    let ii2 = IntegralImage::new(w, h, img.data().iter().map(|v| v * v));
    let r = window / 2;
    Image::from_fn(w, h, |x, y| {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let m = ii.sum(x0, y0, x1, y1) / n;
        (ii2.sum(x0, y0, x1, y1) / n - m * m).max(0.0)
    })
}

/// Per pixel, whether the first source has the larger centred local standard
/// deviation (ties favour the first source).
pub fn sharper_first(x1: &Image, x2: &Image, window: usize) -> Result<BinaryMask> {
    ensure_same_dims("sharper_first", x1, x2)?;
    let v1 = local_variance(x1, window);
    let v2 = local_variance(x2, window);
    let (w, h) = x1.dims();
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        v1.get(x, y).sqrt() >= v2.get(x, y).sqrt()
    }))
}

/// Naive baseline: every pixel copied from the locally sharper source.
pub fn max_std_fusion(x1: &Image, x2: &Image, window: usize) -> Result<Image> {
    let mask = sharper_first(x1, x2, window)?;
    let (w, h) = x1.dims();
    Ok(Image::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            x1.get(x, y)
        } else {
            x2.get(x, y)
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub q_s: f64,
    /// Entropy of the fused image in bits.
    pub en: f64,
    /// Mean windowed SSIM of the fused image against each source.
    pub ssim_vs_each_source: (f64, f64),
    /// `1 - fusion_loss`.
    pub scope_score: f64,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [
            self.q_s,
            self.en,
            self.ssim_vs_each_source.0,
            self.ssim_vs_each_source.1,
            self.scope_score,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn evaluate(x1: &Image, x2: &Image, f: &Image) -> Result<MetricReport> {
    let k = SsimConstants::default();
    Ok(MetricReport {
        q_s: q_s(x1, x2, f, &k)?,
        en: entropy(f),
        ssim_vs_each_source: (ssim::mean_ssim(x1, f, &k)?, ssim::mean_ssim(x2, f, &k)?),
        scope_score: 1.0 - ssim::fusion_loss_value(x1, x2, f, &k)?,
    })
}

/// Renders reports as a fixed-format table followed by a `mean` row.
///
/// ```text
/// pair  QS  EN  SSIM1  SSIM2  Scope
/// clock  0.9362  7.5030  0.8123  0.8456  0.9101
/// ```
pub fn render_report(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("pair  QS  EN  SSIM1  SSIM2  Scope\n");
    let line = |out: &mut String, name: &str, r: &MetricReport| {
        writeln!(
            out,
            "{}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
            name, r.q_s, r.en, r.ssim_vs_each_source.0, r.ssim_vs_each_source.1, r.scope_score
        )
        .expect("writing to a String");
    };
    for (name, r) in rows {
        line(&mut out, name, r);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        let mean = MetricReport {
            q_s: sum(|r| r.q_s),
            en: sum(|r| r.en),
            ssim_vs_each_source: (
                sum(|r| r.ssim_vs_each_source.0),
                sum(|r| r.ssim_vs_each_source.1),
            ),
            scope_score: sum(|r| r.scope_score),
        };
        line(&mut out, "mean", &mean);
    }
    out
}
