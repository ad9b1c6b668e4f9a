//! Central finite-difference checks of every differentiable operation.
//!
//! Each check builds a small random `f64` graph, differentiates it with
//! [`Graph::backward`], and compares every gradient entry against
//! `(L(x + eps) - L(x - eps)) / (2 eps)` computed with forward passes only.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ssim::{self, SsimConstants};
use crate::tensor::{Shape, Tensor};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Conv2d,
    LeakyRelu,
    Sigmoid,
    Add,
    Scale,
    MeanAll,
    FusionLoss,
    /// conv2d -> leaky_relu -> mean_all
    ConvChain,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Conv2d,
        GradOp::LeakyRelu,
        GradOp::Sigmoid,
        GradOp::Add,
        GradOp::Scale,
        GradOp::MeanAll,
        GradOp::FusionLoss,
        GradOp::ConvChain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2d => "conv2d",
            GradOp::LeakyRelu => "leaky_relu",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Add => "add",
            GradOp::Scale => "scale",
            GradOp::MeanAll => "mean_all",
            GradOp::FusionLoss => "fusion_loss",
            GradOp::ConvChain => "conv2d+leaky_relu+mean_all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: GradOp,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.ops {
            writeln!(
                f,
                "{:<28} instances={:<3} max_rel_err={:.3e}  {}",
                r.op.name(),
                r.instances,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Scales the analytic gradient of one op by 1.01 before comparison,
    /// to confirm the checker catches a wrong gradient.
    pub corrupt: Option<GradOp>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            corrupt: None,
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Random values with magnitude at least `min_abs`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, min_abs: f64, max_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(min_abs..max_abs);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn loss_value(inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Largest relative error over all entries of all `inputs`.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Build<'_>, corrupt: bool) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.detached().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detached).collect();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(a) => a.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let a = if corrupt { a * 1.01 } else { a };
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + EPSILON;
            let plus = loss_value(&probe, build)?;
            probe[i].data_mut()[j] = orig - EPSILON;
            let minus = loss_value(&probe, build)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn check_instance(op: GradOp, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    match op {
        GradOp::Conv2d => {
            let x = random(rng, [1, 2, 5, 5], -1.0, 1.0);
            let w = random(rng, [3, 2, 3, 3], -0.5, 0.5);
            let b = random(rng, [1, 3, 1, 1], -0.5, 0.5);
            max_relative_error(
                &[x, w, b],
                &|g, v| {
                    let c = g.conv2d(v[0], v[1], v[2])?;
                    let s = g.sigmoid(c)?;
                    g.mean_all(s)
                },
                corrupt,
            )
        }
        GradOp::LeakyRelu => {
            let x = away_from_zero(rng, [1, 2, 4, 4], 0.05, 2.0);
            max_relative_error(
                &[x],
                &|g, v| {
                    let a = g.leaky_relu(v[0], 0.2)?;
                    let s = g.sigmoid(a)?;
                    g.mean_all(s)
                },
                corrupt,
            )
        }
        GradOp::Sigmoid => {
            let x = random(rng, [1, 2, 4, 4], -4.0, 4.0);
            max_relative_error(
                &[x],
                &|g, v| {
                    let s = g.sigmoid(v[0])?;
                    g.mean_all(s)
                },
                corrupt,
            )
        }
        GradOp::Add => {
            let a = random(rng, [2, 1, 3, 4], -2.0, 2.0);
            let b = random(rng, [2, 1, 3, 4], -2.0, 2.0);
            max_relative_error(
                &[a, b],
                &|g, v| {
                    let s = g.add(v[0], v[1])?;
                    let s = g.sigmoid(s)?;
                    g.mean_all(s)
                },
                corrupt,
            )
        }
        GradOp::Scale => {
            let x = random(rng, [1, 3, 3, 3], -2.0, 2.0);
            let k = rng.random_range(-2.0..2.0);
            max_relative_error(
                &[x],
                &move |g, v| {
                    let s = g.scale(v[0], k)?;
                    let s = g.sigmoid(s)?;
                    g.mean_all(s)
                },
                corrupt,
            )
        }
        GradOp::MeanAll => {
            let x = random(rng, [1, 2, 3, 3], -2.0, 2.0);
            max_relative_error(
                &[x],
                &|g, v| {
                    let m = g.mean_all(v[0])?;
                    g.sigmoid(m)
                },
                corrupt,
            )
        }
        GradOp::FusionLoss => {
            let x1 = random(rng, [2, 1, 9, 9], 0.0, 1.0);
            let x2 = random(rng, [2, 1, 9, 9], 0.0, 1.0);
            let yhat = random(rng, [2, 1, 9, 9], 0.0, 1.0);
            let k = SsimConstants::default();
            max_relative_error(
                &[yhat],
                &|g, v| ssim::fusion_loss(g, &x1, &x2, v[0], &k),
                corrupt,
            )
        }
        GradOp::ConvChain => {
            // resample until no pre-activation is close enough to the kink
            // for a single +-eps probe to cross it
            loop {
                let x = random(rng, [1, 2, 8, 8], -1.0, 1.0);
                let w = random(rng, [3, 2, 3, 3], -0.5, 0.5);
                let b = random(rng, [1, 3, 1, 1], -0.5, 0.5);
                let reach = 2.0
                    * EPSILON
                    * x.data()
                        .iter()
                        .chain(w.data())
                        .fold(1.0f64, |m, v| m.max(v.abs()));
                let mut g = Graph::new();
                let (xv, wv, bv) = (
                    g.constant(x.clone())?,
                    g.constant(w.clone())?,
                    g.constant(b.clone())?,
                );
                let z = g.conv2d(xv, wv, bv)?;
                if g.value(z).data().iter().any(|v| v.abs() <= reach) {
                    continue;
                }
                return max_relative_error(
                    &[x, w, b],
                    &|g, v| {
                        let c = g.conv2d(v[0], v[1], v[2])?;
                        let a = g.leaky_relu(c, 0.2)?;
                        g.mean_all(a)
                    },
                    corrupt,
                );
            }
        }
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut ops = Vec::with_capacity(GradOp::ALL.len());
    for (i, op) in GradOp::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        for _ in 0..opts.instances {
            worst = worst.max(check_instance(op, &mut rng, opts.corrupt == Some(op))?);
        }
        ops.push(OpReport {
            op,
            instances: opts.instances,
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport { ops })
}
