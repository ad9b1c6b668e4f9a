//! Brute-force reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's numerical code; each function is a
//! direct transcription of the defining formula.

#![allow(dead_code)]

use mfuse::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;
pub const WIN: usize = 7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| rng.random::<f64>())
}

/// Mean, population variances and covariance of one window.
#[derive(Clone, Copy, Debug)]
pub struct Stats {
    pub mx: f64,
    pub my: f64,
    pub vx: f64,
    pub vy: f64,
    pub cov: f64,
}

pub fn window(x: &Image, y: &Image, x0: usize, y0: usize) -> Stats {
    let n = (WIN * WIN) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for dy in 0..WIN {
        for dx in 0..WIN {
            sx += x.get(x0 + dx, y0 + dy);
            sy += y.get(x0 + dx, y0 + dy);
        }
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for dy in 0..WIN {
        for dx in 0..WIN {
            let a = x.get(x0 + dx, y0 + dy) - mx;
            let b = y.get(x0 + dx, y0 + dy) - my;
            vx += a * a;
            vy += b * b;
            cov += a * b;
        }
    }
    Stats {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cov: cov / n,
    }
}

/// All interior windows in row-major order of their top-left corner.
pub fn windows(x: &Image, y: &Image) -> Vec<Stats> {
    let (w, h) = x.dims();
    let mut out = Vec::new();
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            out.push(window(x, y, x0, y0));
        }
    }
    out
}

pub fn ssim(s: &Stats) -> f64 {
    ((2.0 * s.mx * s.my + C1) * (2.0 * s.cov + C2))
        / ((s.mx * s.mx + s.my * s.my + C1) * (s.vx + s.vy + C2))
}

pub fn scope(x1: &Image, x2: &Image, f: &Image) -> Vec<f64> {
    let a = windows(x1, f);
    let b = windows(x2, f);
    a.iter()
        .zip(&b)
        .map(|(a, b)| {
            if a.vx.sqrt() >= b.vx.sqrt() {
                ssim(a)
            } else {
                ssim(b)
            }
        })
        .collect()
}

pub fn loss(x1: &Image, x2: &Image, f: &Image) -> f64 {
    let s = scope(x1, x2, f);
    1.0 - s.iter().sum::<f64>() / s.len() as f64
}

fn q0(s: &Stats) -> f64 {
    4.0 * s.cov * s.mx * s.my / ((s.vx + s.vy) * (s.mx * s.mx + s.my * s.my))
}

/// Piella's Q_S for images without flat windows.
pub fn q_s(x1: &Image, x2: &Image, f: &Image) -> f64 {
    let a = windows(x1, f);
    let b = windows(x2, f);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(a, b)| {
            let lambda = a.vx / (a.vx + b.vx);
            lambda * q0(a) + (1.0 - lambda) * q0(b)
        })
        .sum();
    total / a.len() as f64
}

/// 3x3, stride 1, zero-padded convolution on NCHW data.
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    oc: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * oc * h * w];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for i in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let v = x[((b * c + i) * h + sy as usize) * w + sx as usize];
                                acc += v * weight[((o * c + i) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((b * oc + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn lrelu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct Replay<'a> {
    layers: &'a [(Vec<f64>, Vec<f64>, usize)],
    next: usize,
    h: usize,
    w: usize,
    slope: f64,
}

impl Replay<'_> {
    fn layer(&mut self, input: &[f64], c: usize, act: bool) -> (Vec<f64>, usize) {
        let (wt, b, oc) = &self.layers[self.next];
        self.next += 1;
        let mut y = conv2d(input, (1, c, self.h, self.w), wt, b, *oc);
        if act {
            y.iter_mut().for_each(|v| *v = lrelu(*v, self.slope));
        }
        (y, *oc)
    }

    fn branch(&mut self, input: &[f64], depth: usize, post: bool) -> (Vec<f64>, usize) {
        let (mut hdn, mut c) = self.layer(input, 1, true);
        for _ in 0..depth {
            (hdn, c) = self.layer(&hdn, c, true);
        }
        if post {
            (hdn, c) = self.layer(&hdn, c, false);
        }
        (hdn, c)
    }
}

/// Layer-by-layer f64 replay of the fusion network on a single pair.
///
/// `layers` holds `(weight, bias, out_channels)` in storage order, and
/// `d1`, `d2`, `d3` are the branch depths.
pub fn replay_network(
    layers: &[(Vec<f64>, Vec<f64>, usize)],
    (d1, d2, d3): (usize, usize, usize),
    slope: f64,
    x1: &Image,
    x2: &Image,
) -> Vec<f64> {
    let (w, h) = x1.dims();
    let mut r = Replay {
        layers,
        next: 0,
        h,
        w,
        slope,
    };
    let (f1, c) = r.branch(x1.data(), d1, true);
    let (f2, _) = r.branch(x2.data(), d1, true);
    let avg: Vec<f64> = x1
        .data()
        .iter()
        .zip(x2.data())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    let (fa, _) = r.branch(&avg, d2, false);
    let mut hdn: Vec<f64> = (0..f1.len()).map(|i| f1[i] + f2[i] + fa[i]).collect();
    let mut ch = c;
    for i in 0..d3 {
        (hdn, ch) = r.layer(&hdn, ch, i + 1 < d3);
    }
    assert_eq!(r.next, layers.len(), "every layer is used once");
    hdn.into_iter().map(sigmoid).collect()
}

/// Shannon entropy in bits of the 256-bin histogram of `round(v * 255)`.
pub fn entropy(img: &Image) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for &v in img.data() {
        *counts.entry((v * 255.0).round() as i64).or_insert(0usize) += 1;
    }
    let n = img.data().len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Population standard deviation of a 7x7 window.
pub fn window_std(img: &Image, x0: usize, y0: usize) -> f64 {
    window(img, img, x0, y0).vx.sqrt()
}
