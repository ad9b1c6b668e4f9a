//! The three-branch fusion network.
//!
//! ```text
//! x1 -> stem1 -> branch1 (d1) -> post1 --\
//!                                         + -> fused --\
//! x2 -> stem2 -> branch2 (d1) -> post2 --/              + -> recon (d3) -> sigmoid -> y
//! (x1 + x2) / 2 -> stem_avg -> branch_avg (d2) --------/
//! ```
//!
//! Every convolution is 3x3 with zero padding, so spatial size is preserved
//! and any input size works. Stems and branch layers are followed by a leaky
//! ReLU; `post1`/`post2` have no activation; the reconstruction stack uses
//! leaky ReLU on all but its last layer, which maps to one channel through a
//! sigmoid.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::raster::{ensure_same_dims, Image};
use crate::tensor::{ConvParams, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MfNetConfig {
    pub channels: usize,
    /// Layers in each per-source feature branch.
    pub d1: usize,
    /// Layers in the branch fed with the average of the sources.
    pub d2: usize,
    /// Layers in the reconstruction stack, including the sigmoid output layer.
    pub d3: usize,
    pub lrelu_slope: f64,
    pub seed: u64,
}

impl Default for MfNetConfig {
    fn default() -> Self {
        MfNetConfig {
            channels: 64,
            d1: 5,
            d2: 6,
            d3: 7,
            lrelu_slope: 0.2,
            seed: 1,
        }
    }
}

impl MfNetConfig {
    /// Small preset for CPU-scale experiments and tests.
    pub fn tiny() -> Self {
        MfNetConfig {
            channels: 8,
            d1: 2,
            d2: 3,
            d3: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d1 == 0 || self.d2 == 0 || self.d3 == 0 {
            return Err(Error::Config(
                "channels, d1, d2 and d3 must all be at least 1".into(),
            ));
        }
        if !(self.lrelu_slope > 0.0 && self.lrelu_slope < 1.0) {
            return Err(Error::Config(format!(
                "lrelu_slope {} outside (0, 1)",
                self.lrelu_slope
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Positions of each sub-network inside the flat layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub stem1: usize,
    pub branch1: Range<usize>,
    pub post1: usize,
    pub stem2: usize,
    pub branch2: Range<usize>,
    pub post2: usize,
    pub stem_avg: usize,
    pub branch_avg: Range<usize>,
    pub recon: Range<usize>,
}

impl Layout {
    fn new(cfg: &MfNetConfig) -> Self {
        let stem1 = 0;
        let branch1 = 1..1 + cfg.d1;
        let post1 = branch1.end;
        let stem2 = post1 + 1;
        let branch2 = stem2 + 1..stem2 + 1 + cfg.d1;
        let post2 = branch2.end;
        let stem_avg = post2 + 1;
        let branch_avg = stem_avg + 1..stem_avg + 1 + cfg.d2;
        let recon = branch_avg.end..branch_avg.end + cfg.d3;
        Layout {
            stem1,
            branch1,
            post1,
            stem2,
            branch2,
            post2,
            stem_avg,
            branch_avg,
            recon,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.recon.end
    }

    /// Stable layer names, in storage order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_layers()];
        names[self.stem1] = "stem1".into();
        names[self.post1] = "post1".into();
        names[self.stem2] = "stem2".into();
        names[self.post2] = "post2".into();
        names[self.stem_avg] = "stem_avg".into();
        for (prefix, range) in [
            ("branch1", &self.branch1),
            ("branch2", &self.branch2),
            ("branch_avg", &self.branch_avg),
            ("recon", &self.recon),
        ] {
            for (i, l) in range.clone().enumerate() {
                names[l] = format!("{prefix}.{i}");
            }
        }
        names
    }

    /// `(in, out)` channels of every layer.
    pub fn channels(&self, channels: usize) -> Vec<(usize, usize)> {
        let mut io = vec![(channels, channels); self.num_layers()];
        for stem in [self.stem1, self.stem2, self.stem_avg] {
            io[stem] = (1, channels);
        }
        io[self.recon.end - 1] = (channels, 1);
        io
    }
}

/// All learnable parameters, stored as a flat list of convolutions in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MfNetWeights {
    config: MfNetConfig,
    layout: Layout,
    layers: Vec<ConvParams<f32>>,
}

/// Intermediate feature maps of one forward pass.
#[derive(Clone, Debug)]
pub struct Features<V> {
    pub f1: V,
    pub f2: V,
    pub avg_feat: V,
    pub merged: V,
    pub output: V,
}

/// Graph handles of every parameter, in [`MfNetWeights::params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<(Var, Var)>);

impl MfNetWeights {
    /// Uniform fan-in scaled initialisation with zero biases.
    ///
    /// The bound is `gain * sqrt(3 / fan_in)` with the leaky-ReLU gain
    /// `sqrt(2 / (1 + slope^2))`, or gain 1 for the sigmoid output layer.
    pub fn init(config: &MfNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let relu_gain = (2.0 / (1.0 + config.lrelu_slope * config.lrelu_slope)).sqrt();
        let last = layout.recon.end - 1;
        let layers = layout
            .channels(config.channels)
            .into_iter()
            .enumerate()
            .map(|(l, (ic, oc))| {
                let gain = if l == last { 1.0 } else { relu_gain };
                let bound = (gain * (3.0 / (ic * 9) as f64).sqrt()) as f32;
                let mut p = ConvParams::zeros(ic, oc);
                for w in p.weight.data_mut() {
                    *w = rng.random_range(-bound..bound);
                }
                p
            })
            .collect();
        Ok(MfNetWeights {
            config: config.clone(),
            layout,
            layers,
        })
    }

    /// Assembles weights from explicit layers, checking every shape.
    pub fn from_layers(config: MfNetConfig, layers: Vec<ConvParams<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let io = layout.channels(config.channels);
        if layers.len() != io.len() {
            return Err(Error::invalid(
                "weights",
                format!("expected {} layers, got {}", io.len(), layers.len()),
            ));
        }
        for (p, &(ic, oc)) in layers.iter().zip(&io) {
            if p.in_channels() != ic || p.out_channels() != oc {
                return Err(Error::ShapeMismatch {
                    op: "weights",
                    expected: vec![oc, ic, 3, 3],
                    found: p.weight.shape().to_vec(),
                });
            }
        }
        Ok(MfNetWeights {
            config,
            layout,
            layers,
        })
    }

    pub fn config(&self) -> &MfNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn layers(&self) -> &[ConvParams<f32>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams<f32>] {
        &mut self.layers
    }

    pub fn stem1(&self) -> &ConvParams<f32> {
        &self.layers[self.layout.stem1]
    }

    pub fn stem2(&self) -> &ConvParams<f32> {
        &self.layers[self.layout.stem2]
    }

    pub fn stem_avg(&self) -> &ConvParams<f32> {
        &self.layers[self.layout.stem_avg]
    }

    pub fn branch1(&self) -> &[ConvParams<f32>] {
        &self.layers[self.layout.branch1.clone()]
    }

    pub fn branch2(&self) -> &[ConvParams<f32>] {
        &self.layers[self.layout.branch2.clone()]
    }

    pub fn branch_avg(&self) -> &[ConvParams<f32>] {
        &self.layers[self.layout.branch_avg.clone()]
    }

    pub fn post1(&self) -> &ConvParams<f32> {
        &self.layers[self.layout.post1]
    }

    pub fn post2(&self) -> &ConvParams<f32> {
        &self.layers[self.layout.post2]
    }

    pub fn recon(&self) -> &[ConvParams<f32>] {
        &self.layers[self.layout.recon.clone()]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum()
    }

    /// `(name, tensor)` for every parameter: each layer's weight then bias.
    pub fn params(&self) -> Vec<(String, &Tensor<f32>)> {
        self.layout
            .layer_names()
            .into_iter()
            .zip(&self.layers)
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), &p.weight),
                    (format!("{name}.bias"), &p.bias),
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    /// Records a forward pass on `graph`. Parameters become trainable leaves.
    pub fn forward(&self, graph: &mut Graph<f32>, x1: Var, x2: Var) -> Result<(Var, ParamVars)> {
        check_inputs(graph.value(x1), graph.value(x2))?;
        let vars = self
            .layers
            .iter()
            .map(|p| graph.conv_params(p))
            .collect::<Result<Vec<_>>>()?;
        let mut exec = GraphExec {
            graph,
            params: &vars,
        };
        let out = self.run(&mut exec, &x1, &x2)?.output;
        Ok((out, ParamVars(vars)))
    }

    /// Adds the leaf gradients of a differentiated graph into the parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<f32>, vars: &ParamVars) {
        for (p, &(w, b)) in self.layers.iter_mut().zip(&vars.0) {
            if let Some(g) = graph.grad(w) {
                p.weight.accumulate_grad(g);
            }
            if let Some(g) = graph.grad(b) {
                p.bias.accumulate_grad(g);
            }
        }
    }

    /// Forward pass without recording, returning the intermediate features.
    pub fn features(&self, x1: &Tensor<f32>, x2: &Tensor<f32>) -> Result<Features<Tensor<f32>>> {
        check_inputs(x1, x2)?;
        let mut exec = EagerExec {
            layers: &self.layers,
        };
        self.run(&mut exec, x1, x2)
    }

    pub fn infer(&self, x1: &Tensor<f32>, x2: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.features(x1, x2)?.output)
    }

    /// Fuses a registered single-channel pair of any size.
    pub fn fuse(&self, x1: &Image, x2: &Image) -> Result<Image> {
        ensure_same_dims("fuse", x1, x2)?;
        let y = self.infer(&x1.to_tensor(), &x2.to_tensor())?;
        Ok(Image::from_tensor(&y, 0, 0))
    }

    fn run<E: Exec>(&self, e: &mut E, x1: &E::V, x2: &E::V) -> Result<Features<E::V>> {
        let slope = self.config.lrelu_slope;
        let lay = &self.layout;
        let conv_act = |e: &mut E, x: &E::V, l: usize| -> Result<E::V> {
            let y = e.conv(x, l)?;
            e.lrelu(y, slope)
        };

        let mut h = conv_act(e, x1, lay.stem1)?;
        for l in lay.branch1.clone() {
            h = conv_act(e, &h, l)?;
        }
        let f1 = e.conv(&h, lay.post1)?;

        let mut h = conv_act(e, x2, lay.stem2)?;
        for l in lay.branch2.clone() {
            h = conv_act(e, &h, l)?;
        }
        let f2 = e.conv(&h, lay.post2)?;

        let sum = e.add(x1, x2)?;
        let avg = e.scale(&sum, 0.5)?;
        let mut h = conv_act(e, &avg, lay.stem_avg)?;
        for l in lay.branch_avg.clone() {
            h = conv_act(e, &h, l)?;
        }
        let avg_feat = h;

        let fused = e.add(&f1, &f2)?;
        let merged = e.add(&fused, &avg_feat)?;

        let last = lay.recon.end - 1;
        let mut h = e.conv(&merged, lay.recon.start)?;
        for l in lay.recon.start + 1..=last {
            h = e.lrelu(h, slope)?;
            h = e.conv(&h, l)?;
        }
        let output = e.sigmoid(h)?;
        Ok(Features {
            f1,
            f2,
            avg_feat,
            merged,
            output,
        })
    }
}

fn check_inputs(x1: &Tensor<f32>, x2: &Tensor<f32>) -> Result<()> {
    if x1.shape() != x2.shape() {
        return Err(Error::ShapeMismatch {
            op: "mfnet",
            expected: x1.shape().to_vec(),
            found: x2.shape().to_vec(),
        });
    }
    if x1.shape()[1] != 1 {
        return Err(Error::invalid("mfnet", "inputs must have one channel"));
    }
    Ok(())
}

trait Exec {
    type V;
    fn conv(&mut self, x: &Self::V, layer: usize) -> Result<Self::V>;
    fn lrelu(&mut self, x: Self::V, slope: f64) -> Result<Self::V>;
    fn sigmoid(&mut self, x: Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, k: f64) -> Result<Self::V>;
}

struct GraphExec<'a> {
    graph: &'a mut Graph<f32>,
    params: &'a [(Var, Var)],
}

impl Exec for GraphExec<'_> {
    type V = Var;

    fn conv(&mut self, x: &Var, layer: usize) -> Result<Var> {
        let (w, b) = self.params[layer];
        self.graph.conv2d(*x, w, b)
    }

    fn lrelu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.graph.leaky_relu(x, slope)
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.graph.sigmoid(x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }

    fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        self.graph.scale(*x, k)
    }
}

struct EagerExec<'a> {
    layers: &'a [ConvParams<f32>],
}

impl Exec for EagerExec<'_> {
    type V = Tensor<f32>;

    fn conv(&mut self, x: &Tensor<f32>, layer: usize) -> Result<Tensor<f32>> {
        let p = &self.layers[layer];
        let [n, c, h, w] = x.shape();
        if c != p.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![p.out_channels(), c, 3, 3],
                found: p.weight.shape().to_vec(),
            });
        }
        let dims = ConvDims {
            batch: n,
            in_c: c,
            out_c: p.out_channels(),
            height: h,
            width: w,
        };
        let mut out = vec![0.0; n * dims.out_c * h * w];
        kernels::conv2d_forward(dims, x.data(), p.weight.data(), p.bias.data(), &mut out);
        Tensor::new([n, dims.out_c, h, w], out)
    }

    fn lrelu(&mut self, mut x: Tensor<f32>, slope: f64) -> Result<Tensor<f32>> {
        let s = slope as f32;
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = kernels::leaky_relu(*v, s));
        Ok(x)
    }

    fn sigmoid(&mut self, mut x: Tensor<f32>) -> Result<Tensor<f32>> {
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = kernels::sigmoid(*v));
        Ok(x)
    }

    fn add(&mut self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape(), data)
    }

    fn scale(&mut self, x: &Tensor<f32>, k: f64) -> Result<Tensor<f32>> {
        let k = k as f32;
        Tensor::new(x.shape(), x.data().iter().map(|v| v * k).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique_and_ordered() {
        let cfg = MfNetConfig::tiny();
        let names = cfg.layout().layer_names();
        assert_eq!(names.len(), 3 + 2 + 2 + 2 + 3 + 3);
        assert_eq!(names[0], "stem1");
        assert_eq!(names.last().unwrap(), "recon.2");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn last_layer_has_one_output() {
        let w = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
        assert_eq!(w.recon().last().unwrap().out_channels(), 1);
        assert_eq!(w.stem1().in_channels(), 1);
        assert!(w
            .layers()
            .iter()
            .all(|p| p.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = MfNetConfig::tiny();
        cfg.d2 = 0;
        assert!(MfNetWeights::init(&cfg).is_err());
        let mut cfg = MfNetConfig::tiny();
        cfg.lrelu_slope = 1.5;
        assert!(MfNetWeights::init(&cfg).is_err());
    }

    #[test]
    fn graph_and_eager_agree() {
        let w = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
        let x1 = Tensor::from_fn([2, 1, 9, 11], |n, _, y, x| {
            ((n + y * 3 + x) % 7) as f32 / 7.0
        });
        let x2 = Tensor::from_fn([2, 1, 9, 11], |n, _, y, x| {
            ((n * 2 + y + x * 5) % 5) as f32 / 5.0
        });
        let eager = w.infer(&x1, &x2).unwrap();
        let mut g = Graph::new();
        let a = g.constant(x1).unwrap();
        let b = g.constant(x2).unwrap();
        let (out, _) = w.forward(&mut g, a, b).unwrap();
        assert_eq!(g.value(out).data(), eager.data());
    }
}
