//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! evaluation order, so the list is topologically sorted by construction.
//! [`Tape::backward`] walks it once in reverse and returns a [`Gradients`]
//! table holding `dLoss/dNode` for every node that depends on a
//! gradient-requiring leaf.

use crate::error::{shape_err, Error, Result};

use super::kernels::{self, BatchNormCache, ConvGeom};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Sum(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    Resize(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GaussianNll {
        target: Var,
        mean: Var,
        log_gamma: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::batchnorm2d`] in training mode: the normalized tensor
/// and the batch (mean, biased variance) the caller folds into running stats.
pub struct BatchNormOutput {
    pub output: Var,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    /// Elementwise `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(dims)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let dims = src.dims();
        if axis >= dims.len() || start + len > dims[axis] || len == 0 {
            return Err(shape_err(
                "narrow",
                format!("cannot take [{start}, {}) of axis {axis} in {dims:?}", start + len),
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut out_dims = dims.to_vec();
        out_dims[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_dims, data),
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (v, geom) = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (v, geom) = kernels::conv_transpose2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            output_padding,
        )?;
        let rg = self.rg(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization. `running` holds (mean, variance) for eval mode;
    /// pass `None` to normalize with batch statistics.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<BatchNormOutput> {
        let (v, cache) = kernels::batchnorm2d(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            eps,
        )?;
        let batch_stats = cache.batch_stats.clone();
        let rg = self.rg(&[input, gamma, beta]);
        let output = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        );
        Ok(BatchNormOutput {
            output,
            batch_stats,
        })
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::bilinear_resize(self.value(input), out_h, out_w)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Resize(input), rg))
    }

    /// [`Tape::bilinear_resize`] restricted to enlarging both spatial axes.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(input).dims4("bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(shape_err(
                "bilinear_upsample",
                format!("target {out_h}x{out_w} is smaller than input {h}x{w}"),
            ));
        }
        self.bilinear_resize(input, out_h, out_w)
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (v, argmax) = kernels::max_pool2d(self.value(input), kernel, stride, pad)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MaxPool { input, argmax }, rg))
    }

    /// Channel-summed Gaussian negative log-likelihood map.
    ///
    /// `target` and `mean` are `[N,C,H,W]`, `log_gamma` is `[C]` (log of the
    /// per-channel standard deviation). Output is `[N,1,H,W]` with entries
    /// `Σ_c ½ln(2π) + log γ_c + (y−μ)²/(2γ_c²)`.
    pub fn gaussian_nll(&mut self, target: Var, mean: Var, log_gamma: Var) -> Result<Var> {
        self.same_dims("gaussian_nll", target, mean)?;
        let [n, c, h, w] = self.value(target).dims4("gaussian_nll")?;
        if self.value(log_gamma).len() != c {
            return Err(shape_err(
                "gaussian_nll",
                format!(
                    "log_gamma has {} entries for {c} channels",
                    self.value(log_gamma).len()
                ),
            ));
        }
        let v = gaussian_nll_map(
            self.value(target),
            self.value(mean),
            self.value(log_gamma).data(),
        );
        debug_assert_eq!(v.dims(), &[n, 1, h, w]);
        let rg = self.rg(&[target, mean, log_gamma]);
        Ok(self.push(
            v,
            Op::GaussianNll {
                target,
                mean,
                log_gamma,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.dims()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |d, y| d * y).expect("same dims"));
                acc(*b, g.zip_map(va, |d, x| d * x).expect("same dims"));
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, e| d * e).expect("same dims")),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |d, x| d * sign0(x)).expect("same dims"),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { d * slope })
                    .expect("same dims"),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                g.zip_map(&node.value, |d, s| d * s * (1.0 - s)).expect("same dims"),
            ),
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).dims(), g.item())),
            Op::Reshape(a) => acc(*a, Tensor::from_parts(self.value(*a).dims().to_vec(), g.data().to_vec())),
            Op::Narrow { input, axis, start } => {
                let dims = self.value(*input).dims();
                let len = node.value.dims()[*axis];
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[*axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let dst = (o * dims[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*input, Tensor::from_parts(dims.to_vec(), d));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(self.value(*input), self.value(*kernel), g, geom);
                acc(*input, dx);
                acc(*kernel, dk);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dy, dk, db) = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    geom,
                );
                acc(*input, dy);
                acc(*kernel, dk);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = kernels::batchnorm2d_backward(self.value(*gamma), cache, g);
                acc(*input, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Resize(input) => {
                acc(*input, kernels::bilinear_resize_backward(self.value(*input).dims(), g));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] += gv;
                }
                acc(*input, Tensor::from_parts(self.value(*input).dims().to_vec(), d));
            }
            Op::GaussianNll {
                target,
                mean,
                log_gamma,
            } => {
                let (y, mu) = (self.value(*target), self.value(*mean));
                let lg = self.value(*log_gamma).data();
                let [n, c, h, w] = y.dims4("gaussian_nll").expect("rank 4");
                let plane = h * w;
                let mut dy = vec![0.0; y.len()];
                let mut dlg = vec![0.0; c];
                for b in 0..n {
                    let gmap = &g.data()[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let inv_var = (-2.0 * lg[ch]).exp();
                        let base = (b * c + ch) * plane;
                        for p in 0..plane {
                            let r = y.data()[base + p] - mu.data()[base + p];
                            dy[base + p] = gmap[p] * r * inv_var;
                            dlg[ch] += gmap[p] * (1.0 - r * r * inv_var);
                        }
                    }
                }
                let dmu = Tensor::from_parts(y.dims().to_vec(), dy.iter().map(|v| -v).collect());
                acc(*target, Tensor::from_parts(y.dims().to_vec(), dy));
                acc(*mean, dmu);
                acc(*log_gamma, Tensor::from_parts(vec![c], dlg));
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was reached by the sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, materializing zeros when `v` does not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).dims()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward value of [`Tape::gaussian_nll`] outside any tape.
pub fn gaussian_nll_map(target: &Tensor, mean: &Tensor, log_gamma: &[f64]) -> Tensor {
    let [n, c, h, w] = target.dims4("gaussian_nll").expect("rank 4");
    let plane = h * w;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        let dst = &mut out[b * plane..(b + 1) * plane];
        for (ch, &lg) in log_gamma.iter().enumerate().take(c) {
            let inv_var = (-2.0 * lg).exp();
            let base = (b * c + ch) * plane;
            for (p, o) in dst.iter_mut().enumerate() {
                let r = target.data()[base + p] - mean.data()[base + p];
                *o += half_ln_2pi + lg + 0.5 * r * r * inv_var;
            }
        }
    }
    Tensor::from_parts(vec![n, 1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::new();
        let xv = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_blocks_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[4], |i| i as f64));
        let y = t.stop_gradient(x);
        assert_eq!(t.value(x), t.value(y));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(&t, x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![-1.0, 3.0]).unwrap());
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(y).data(), &[-0.2, 3.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn narrow_splits_channels() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 4, 1, 1], |i| i as f64));
        let lo = t.narrow(x, 1, 0, 2).unwrap();
        let hi = t.narrow(x, 1, 2, 2).unwrap();
        assert_eq!(t.value(lo).data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.value(hi).data(), &[2.0, 3.0, 6.0, 7.0]);
        let s = t.sum(hi);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(t.bilinear_upsample(x, 2, 8).is_err());
    }

    #[test]
    fn gaussian_nll_perfect_fit_unit_gamma() {
        let y = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64);
        let m = gaussian_nll_map(&y, &y, &[0.0; 3]);
        let want = 3.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(m.data().iter().all(|v| (v - want).abs() < 1e-12));
    }
}
