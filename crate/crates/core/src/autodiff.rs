//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so walking them backwards is a valid topological order
//! and each node is visited exactly once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::raster::Image;
use crate::ssim::{self, SsimConstants};
use crate::tensor::{ConvParams, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Sigmoid {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    MeanAll {
        input: Var,
    },
    FusionLoss {
        input: Var,
        sources: Vec<(Image, Image)>,
        constants: SsimConstants,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let needs = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf, needs))
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Adds trainable leaves for a convolution's weight and bias.
    pub fn conv_params(&mut self, params: &ConvParams<T>) -> Result<(Var, Var)> {
        let w = self.leaf(params.weight.detached().with_grad())?;
        let b = self.leaf(params.bias.detached().with_grad())?;
        Ok((w, b))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears leaf gradients so the graph can be differentiated again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).shape();
        let [oc, ic, kh, kw] = self.value(weight).shape();
        if ic != c || kh != 3 || kw != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![oc, c, 3, 3],
                found: vec![oc, ic, kh, kw],
            });
        }
        if self.value(bias).shape() != [1, oc, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d(bias)",
                expected: vec![1, oc, 1, 1],
                found: self.value(bias).shape().to_vec(),
            });
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("conv2d", "empty spatial extent"));
        }
        let dims = ConvDims {
            batch: n,
            in_c: c,
            out_c: oc,
            height: h,
            width: w,
        };
        let mut out = vec![T::zero(); n * oc * h * w];
        kernels::conv2d_forward(
            dims,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts([n, oc, h, w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(
                "leaky_relu",
                format!("slope {slope} outside (0, 1)"),
            ));
        }
        let slope = T::of(slope);
        let x = self.value(input);
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| kernels::leaky_relu(v, slope))
            .collect();
        let shape = x.shape();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LeakyRelu { input, slope },
            needs,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = x.shape();
        let needs = self.needs(input);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sigmoid { input }, needs))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: a.shape().to_vec(),
                found: b.shape().to_vec(),
            });
        }
        let out: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = a.shape();
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { lhs, rhs }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().map(|&v| v * factor).collect();
        let shape = x.shape();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Scale { input, factor },
            needs,
        ))
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let mean = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll { input }, needs))
    }

    pub(crate) fn fusion_loss(
        &mut self,
        input: Var,
        sources: Vec<(Image, Image)>,
        constants: SsimConstants,
    ) -> Result<Var> {
        let x = self.value(input);
        let mut total = 0.0;
        for (n, (x1, x2)) in sources.iter().enumerate() {
            let yhat = Image::from_tensor(x, n, 0);
            total += ssim::fusion_loss_value(x1, x2, &yhat, &constants)?;
        }
        let loss = total / sources.len() as f64;
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::FusionLoss {
                input,
                sources,
                constants,
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into every leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad() {
                        self.nodes[idx].value.accumulate_grad(&g);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let [n, c, h, w] = self.value(input).shape();
                    let oc = self.value(weight).shape()[0];
                    let dims = ConvDims {
                        batch: n,
                        in_c: c,
                        out_c: oc,
                        height: h,
                        width: w,
                    };
                    if self.needs(input) {
                        let mut gi = vec![T::zero(); n * c * h * w];
                        kernels::conv2d_backward_input(
                            dims,
                            &g,
                            self.value(weight).data(),
                            &mut gi,
                        );
                        accumulate(&mut grads, input, gi);
                    }
                    if self.needs(weight) || self.needs(bias) {
                        let mut gw = vec![T::zero(); oc * c * 9];
                        let mut gb = vec![T::zero(); oc];
                        kernels::conv2d_backward_params(
                            dims,
                            &g,
                            self.value(input).data(),
                            &mut gw,
                            &mut gb,
                        );
                        if self.needs(weight) {
                            accumulate(&mut grads, weight, gw);
                        }
                        if self.needs(bias) {
                            accumulate(&mut grads, bias, gb);
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input).data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * kernels::leaky_relu_grad(xv, *slope))
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let gi = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if self.needs(lhs) {
                        accumulate(&mut grads, lhs, g.clone());
                    }
                    if self.needs(rhs) {
                        accumulate(&mut grads, rhs, g);
                    }
                }
                Op::Scale { input, factor } => {
                    let gi = g.iter().map(|&gv| gv * *factor).collect();
                    accumulate(&mut grads, *input, gi);
                }
                Op::MeanAll { input } => {
                    let numel = self.value(*input).numel();
                    let share = g[0] / T::of(numel as f64);
                    accumulate(&mut grads, *input, vec![share; numel]);
                }
                Op::FusionLoss {
                    input,
                    sources,
                    constants,
                } => {
                    let x = self.value(*input);
                    let batch = sources.len() as f64;
                    let upstream = g[0].as_f64();
                    let mut gi = Vec::with_capacity(x.numel());
                    for (n, (x1, x2)) in sources.iter().enumerate() {
                        let yhat = Image::from_tensor(x, n, 0);
                        let (_, gimg) = ssim::fusion_loss_with_grad(x1, x2, &yhat, constants)?;
                        gi.extend(gimg.data().iter().map(|&v| T::of(v * upstream / batch)));
                    }
                    accumulate(&mut grads, *input, gi);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c + y + x) as f64).with_grad())
            .unwrap();
        let m = g.mean_all(x).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.125));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 3]).with_grad()).unwrap();
        let s = g.sigmoid(x).unwrap();
        let m = g.mean_all(s).unwrap();
        g.backward(m).unwrap();
        assert!(g
            .grad(x)
            .unwrap()
            .iter()
            .all(|&v| (v - 0.25 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 1, 1, 4], 1.0).with_grad()).unwrap();
        let y = g.add(x, x).unwrap();
        let z = g.scale(y, 3.0).unwrap();
        let m = g.mean_all(z).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]).with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 2, 2], 2.0)).unwrap();
        let w = g.leaf(Tensor::full([1, 1, 2, 2], 1.0).with_grad()).unwrap();
        let s = g.add(x, w).unwrap();
        let m = g.mean_all(s).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([1, 1, 2, 2])).unwrap();
        let b = g.leaf(Tensor::zeros([1, 1, 2, 3])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        let w = g.leaf(Tensor::zeros([4, 2, 3, 3])).unwrap();
        let bias = g.leaf(Tensor::zeros([1, 4, 1, 1])).unwrap();
        let err = g.conv2d(a, w, bias).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn non_finite_leaves_are_rejected() {
        let mut g = Graph::<f32>::new();
        assert!(g.leaf(Tensor::full([1, 1, 1, 1], f32::NAN)).is_err());
    }
}
