//! Windowed structural similarity, the sharpness-gated source selection built
//! on it, and the unsupervised fusion loss.
//!
//! Windows are uniform `k x k` squares moved one pixel at a time over every
//! position that lies fully inside the image, so an `H x W` image has
//! `(H - k + 1) * (W - k + 1)` windows. Variances are population variances.
//!
//! For a window `w`, with `x` a source and `y` the fused image:
//!
//! ```text
//! SSIM(x, y | w) = (2 mx my + C1)(2 sxy + C2) / ((mx^2 + my^2 + C1)(sx^2 + sy^2 + C2))
//! ```
//!
//! Each window compares the fused image against whichever source has the
//! larger local standard deviation (ties pick the first source), and the loss
//! is one minus the mean of those per-window scores.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::raster::{ensure_same_dims, Image, IntegralImage};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    /// Odd side length of the square window.
    pub window: usize,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants {
            c1: 1e-4,
            c2: 9e-4,
            window: 7,
        }
    }
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64, window: usize) -> Result<Self> {
        let k = SsimConstants { c1, c2, window };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("ssim", "C1 and C2 must be positive"));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("ssim", "window must be odd and at least 3"));
        }
        Ok(())
    }

    /// Number of window positions along each axis, `(cols, rows)`.
    pub fn grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if width < self.window || height < self.window {
            return Err(Error::ImageTooSmall {
                width,
                height,
                window: self.window,
            });
        }
        Ok((width - self.window + 1, height - self.window + 1))
    }

    /// SSIM of a single window from its moments.
    #[inline]
    pub fn ssim(&self, mean_x: f64, mean_y: f64, var_x: f64, var_y: f64, cov: f64) -> f64 {
        ((2.0 * mean_x * mean_y + self.c1) * (2.0 * cov + self.c2))
            / ((mean_x * mean_x + mean_y * mean_y + self.c1) * (var_x + var_y + self.c2))
    }
}

/// Per-window first and second moments of an image pair, in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStatsMap {
    pub cols: usize,
    pub rows: usize,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov_xy: Vec<f64>,
}

impl WindowStatsMap {
    /// Total number of windows.
    pub fn len(&self) -> usize {
        self.mean_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_x.is_empty()
    }
}

/// Window moments computed from summed-area tables.
///
/// Pixels are shifted by the first pixel of each image before summing so that
/// flat regions give exactly zero variance.
pub fn window_stats(x: &Image, y: &Image, k: &SsimConstants) -> Result<WindowStatsMap> {
    k.validate()?;
    ensure_same_dims("window_stats", x, y)?;
    let (w, h) = x.dims();
    let (cols, rows) = k.grid(w, h)?;
    let (sx, sy) = (x.data()[0], y.data()[0]);
    let xs: Vec<f64> = x.data().iter().map(|v| v - sx).collect();
    let ys: Vec<f64> = y.data().iter().map(|v| v - sy).collect();
    let ix = IntegralImage::new(w, h, xs.iter().copied());
    let iy = IntegralImage::new(w, h, ys.iter().copied());
    let ixx = IntegralImage::new(w, h, xs.iter().map(|v| v * v));
    let iyy = IntegralImage::new(w, h, ys.iter().map(|v| v * v));
    let ixy = IntegralImage::new(w, h, xs.iter().zip(&ys).map(|(a, b)| a * b));

    let n = cols * rows;
    let m = (k.window * k.window) as f64;
    let mut stats = WindowStatsMap {
        cols,
        rows,
        mean_x: Vec::with_capacity(n),
        mean_y: Vec::with_capacity(n),
        var_x: Vec::with_capacity(n),
        var_y: Vec::with_capacity(n),
        cov_xy: Vec::with_capacity(n),
    };
    for wy in 0..rows {
        for wx in 0..cols {
            let (x1, y1) = (wx + k.window, wy + k.window);
            let mx = ix.sum(wx, wy, x1, y1) / m;
            let my = iy.sum(wx, wy, x1, y1) / m;
            let vx = ixx.sum(wx, wy, x1, y1) / m - mx * mx;
            let vy = iyy.sum(wx, wy, x1, y1) / m - my * my;
            let cxy = ixy.sum(wx, wy, x1, y1) / m - mx * my;
            stats.mean_x.push(sx + mx);
            stats.mean_y.push(sy + my);
            stats.var_x.push(vx.max(0.0));
            stats.var_y.push(vy.max(0.0));
            stats.cov_xy.push(cxy);
        }
    }
    Ok(stats)
}

pub fn ssim_per_window(stats: &WindowStatsMap, k: &SsimConstants) -> Vec<f64> {
    (0..stats.len())
        .map(|i| {
            k.ssim(
                stats.mean_x[i],
                stats.mean_y[i],
                stats.var_x[i],
                stats.var_y[i],
                stats.cov_xy[i],
            )
        })
        .collect()
}

/// Mean SSIM over all windows.
pub fn mean_ssim(x: &Image, y: &Image, k: &SsimConstants) -> Result<f64> {
    let s = ssim_per_window(&window_stats(x, y, k)?, k);
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    First,
    Second,
}

fn gate(var1: f64, var2: f64) -> Source {
    if var1.max(0.0).sqrt() >= var2.max(0.0).sqrt() {
        Source::First
    } else {
        Source::Second
    }
}

/// Which source each window compares against. Depends only on the sources.
pub fn selection_mask(x1: &Image, x2: &Image, k: &SsimConstants) -> Result<Vec<Source>> {
    let stats = window_stats(x1, x2, k)?;
    Ok(stats
        .var_x
        .iter()
        .zip(&stats.var_y)
        .map(|(&a, &b)| gate(a, b))
        .collect())
}

struct ScopeWindows {
    first: WindowStatsMap,
    second: WindowStatsMap,
    selected: Vec<Source>,
}

impl ScopeWindows {
    fn compute(x1: &Image, x2: &Image, yhat: &Image, k: &SsimConstants) -> Result<Self> {
        ensure_same_dims("scope", x1, x2)?;
        ensure_same_dims("scope", x1, yhat)?;
        let first = window_stats(x1, yhat, k)?;
        let second = window_stats(x2, yhat, k)?;
        let selected = first
            .var_x
            .iter()
            .zip(&second.var_x)
            .map(|(&a, &b)| gate(a, b))
            .collect();
        Ok(ScopeWindows {
            first,
            second,
            selected,
        })
    }

    fn stats(&self, i: usize) -> &WindowStatsMap {
        match self.selected[i] {
            Source::First => &self.first,
            Source::Second => &self.second,
        }
    }

    fn scores(&self, k: &SsimConstants) -> Vec<f64> {
        (0..self.selected.len())
            .map(|i| {
                let s = self.stats(i);
                k.ssim(
                    s.mean_x[i],
                    s.mean_y[i],
                    s.var_x[i],
                    s.var_y[i],
                    s.cov_xy[i],
                )
            })
            .collect()
    }
}

/// Per-window SSIM of `yhat` against the locally sharper source.
pub fn scope(x1: &Image, x2: &Image, yhat: &Image, k: &SsimConstants) -> Result<Vec<f64>> {
    Ok(ScopeWindows::compute(x1, x2, yhat, k)?.scores(k))
}

/// `1 - mean(scope)` for a single image triple.
pub fn fusion_loss_value(x1: &Image, x2: &Image, yhat: &Image, k: &SsimConstants) -> Result<f64> {
    let s = scope(x1, x2, yhat, k)?;
    Ok(1.0 - s.iter().sum::<f64>() / s.len() as f64)
}

/// Loss value and its gradient with respect to `yhat`.
///
/// The gate is constant in `yhat`, so each window contributes the derivative
/// of its selected SSIM term through the fused image's mean, variance and
/// covariance. Per-window coefficients are spread back to pixels with a box
/// sum over the window grid.
pub fn fusion_loss_with_grad(
    x1: &Image,
    x2: &Image,
    yhat: &Image,
    k: &SsimConstants,
) -> Result<(f64, Image)> {
    let sw = ScopeWindows::compute(x1, x2, yhat, k)?;
    let (cols, rows) = (sw.first.cols, sw.first.rows);
    let n = sw.selected.len();
    let m = (k.window * k.window) as f64;

    let mut total = 0.0;
    // Per-window pixel derivative: a + b * y_p + c * x_p (x from the selected source).
    let mut coef_a = Vec::with_capacity(n);
    let mut coef_b = Vec::with_capacity(n);
    let mut coef_c1 = Vec::with_capacity(n);
    let mut coef_c2 = Vec::with_capacity(n);
    for i in 0..n {
        let s = sw.stats(i);
        let (mx, my, vx, vy, cxy) = (
            s.mean_x[i],
            s.mean_y[i],
            s.var_x[i],
            s.var_y[i],
            s.cov_xy[i],
        );
        let a1 = 2.0 * mx * my + k.c1;
        let a2 = 2.0 * cxy + k.c2;
        let b1 = mx * mx + my * my + k.c1;
        let b2 = vx + vy + k.c2;
        let score = (a1 * a2) / (b1 * b2);
        total += score;

        let d_mean = score * (2.0 * mx / a1 - 2.0 * my / b1);
        let d_cov = score * 2.0 / a2;
        let d_var = -score / b2;
        coef_a.push((d_mean - 2.0 * my * d_var - mx * d_cov) / m);
        coef_b.push(2.0 * d_var / m);
        let c = d_cov / m;
        match sw.selected[i] {
            Source::First => {
                coef_c1.push(c);
                coef_c2.push(0.0);
            }
            Source::Second => {
                coef_c1.push(0.0);
                coef_c2.push(c);
            }
        }
    }
    let loss = 1.0 - total / n as f64;

    let ia = IntegralImage::new(cols, rows, coef_a);
    let ib = IntegralImage::new(cols, rows, coef_b);
    let ic1 = IntegralImage::new(cols, rows, coef_c1);
    let ic2 = IntegralImage::new(cols, rows, coef_c2);
    let scale = -1.0 / n as f64;
    let win = k.window;
    let grad = Image::from_fn(yhat.width(), yhat.height(), |px, py| {
        // windows whose top-left lies in [p - win + 1, p], clipped to the grid
        let wx0 = (px + 1).saturating_sub(win);
        let wy0 = (py + 1).saturating_sub(win);
        let wx1 = (px + 1).min(cols);
        let wy1 = (py + 1).min(rows);
        if wx0 >= wx1 || wy0 >= wy1 {
            return 0.0;
        }
        let a = ia.sum(wx0, wy0, wx1, wy1);
        let b = ib.sum(wx0, wy0, wx1, wy1);
        let c1 = ic1.sum(wx0, wy0, wx1, wy1);
        let c2 = ic2.sum(wx0, wy0, wx1, wy1);
        scale * (a + b * yhat.get(px, py) + c1 * x1.get(px, py) + c2 * x2.get(px, py))
    });
    Ok((loss, grad))
}

/// Records the fusion loss of a batch `[N, 1, H, W]` of fused images on the graph.
///
/// The sources are constants. The loss is averaged over the batch.
pub fn fusion_loss<T: Real>(
    graph: &mut Graph<T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    yhat: Var,
    k: &SsimConstants,
) -> Result<Var> {
    let shape = graph.value(yhat).shape();
    for (name, t) in [("x1", x1), ("x2", x2)] {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: if name == "x1" {
                    "fusion_loss(x1)"
                } else {
                    "fusion_loss(x2)"
                },
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    if shape[1] != 1 {
        return Err(Error::invalid(
            "fusion_loss",
            "expected single-channel images",
        ));
    }
    let sources: Vec<(Image, Image)> = (0..shape[0])
        .map(|n| (Image::from_tensor(x1, n, 0), Image::from_tensor(x2, n, 0)))
        .collect();
    graph.fusion_loss(yhat, sources, *k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Image::from_fn(w, h, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn constant_pair_has_zero_spread() {
        let a = Image::filled(10, 9, 0.37);
        let b = Image::filled(10, 9, 0.81);
        let s = window_stats(&a, &b, &SsimConstants::default()).unwrap();
        assert_eq!(s.len(), 4 * 3);
        assert!(s.mean_x.iter().all(|&m| m == 0.37));
        assert!(s.mean_y.iter().all(|&m| m == 0.81));
        assert!(s
            .var_x
            .iter()
            .chain(&s.var_y)
            .chain(&s.cov_xy)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn seven_by_seven_is_one_window() {
        let a = noise(7, 7, 3);
        let s = window_stats(&a, &a, &SsimConstants::default()).unwrap();
        assert_eq!(s.len(), 1);
        let mean = a.data().iter().sum::<f64>() / 49.0;
        assert!((s.mean_x[0] - mean).abs() < 1e-14);
    }

    #[test]
    fn too_small_is_rejected() {
        let a = Image::filled(6, 20, 0.5);
        assert!(matches!(
            window_stats(&a, &a, &SsimConstants::default()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn constants_are_validated() {
        assert!(SsimConstants::new(0.0, 1e-3, 7).is_err());
        assert!(SsimConstants::new(1e-4, 9e-4, 6).is_err());
        assert!(SsimConstants::new(1e-4, 9e-4, 1).is_err());
        assert!(SsimConstants::new(1e-4, 9e-4, 3).is_ok());
    }

    #[test]
    fn identical_windows_score_one() {
        let a = noise(12, 11, 9);
        let k = SsimConstants::default();
        let s = ssim_per_window(&window_stats(&a, &a, &k).unwrap(), &k);
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn flat_windows_follow_the_formula() {
        let k = SsimConstants::default();
        let same = mean_ssim(&Image::filled(7, 7, 0.5), &Image::filled(7, 7, 0.5), &k).unwrap();
        assert!((same - 1.0).abs() < 1e-15);
        let got = mean_ssim(&Image::filled(7, 7, 0.9), &Image::filled(7, 7, 0.1), &k).unwrap();
        let expected = (2.0 * 0.9 * 0.1 + 1e-4) / (0.81 + 0.01 + 1e-4);
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn sharper_source_is_selected() {
        let k = SsimConstants::default();
        let x1 = noise(11, 11, 1);
        let x2 = Image::filled(11, 11, 0.5);
        let mask = selection_mask(&x1, &x2, &k).unwrap();
        assert!(mask.iter().all(|&s| s == Source::First));
        let scores = scope(&x1, &x2, &x1, &k).unwrap();
        assert!(scores.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mask = selection_mask(&x2, &x1, &k).unwrap();
        assert!(mask.iter().all(|&s| s == Source::Second));
    }

    #[test]
    fn ties_pick_the_first_source() {
        let k = SsimConstants::default();
        let a = noise(9, 9, 4);
        let flipped = a.map(|v| 1.0 - v);
        // same spread, different content
        let mask = selection_mask(&a, &a, &k).unwrap();
        assert!(mask.iter().all(|&s| s == Source::First));
        let s = scope(&a, &a, &flipped, &k).unwrap();
        let direct = ssim_per_window(&window_stats(&a, &flipped, &k).unwrap(), &k);
        assert_eq!(s, direct);
    }

    #[test]
    fn loss_of_identical_triple_is_zero() {
        let k = SsimConstants::default();
        let a = noise(16, 13, 5);
        let loss = fusion_loss_value(&a, &a, &a, &k).unwrap();
        assert!(loss.abs() < 1e-12);
        let (l2, g) = fusion_loss_with_grad(&a, &a, &a, &k).unwrap();
        assert_eq!(loss, l2);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn inverted_binary_target_loss_exceeds_one() {
        let k = SsimConstants::default();
        // 7x7 binary stripes: every window sees the same contrast inverted
        let x = Image::from_fn(7, 7, |c, _| if c % 2 == 0 { 1.0 } else { 0.0 });
        let inv = x.map(|v| 1.0 - v);
        let loss = fusion_loss_value(&x, &x, &inv, &k).unwrap();

        let mx = 4.0 / 7.0;
        let my = 3.0 / 7.0;
        let var = mx * (1.0 - mx);
        let cov = -var;
        let expected = 1.0
            - (2.0 * mx * my + 1e-4) * (2.0 * cov + 9e-4)
                / ((mx * mx + my * my + 1e-4) * (2.0 * var + 9e-4));
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!(loss > 1.0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let k = SsimConstants::default();
        let a = Image::filled(8, 8, 0.1);
        let b = Image::filled(9, 8, 0.1);
        assert!(scope(&a, &a, &b, &k).is_err());
        assert!(scope(&a, &b, &a, &k).is_err());
    }
}
