use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tensor, Var};

use super::params::{Graph, ParamId, ParamSet, Role, StatUpdate};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    },
    BatchNorm(BatchNormIds),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Shape-only stage (flatten, split, de-flatten, identity). Latents are
    /// kept as `[N,C,1,1]` throughout, so these never move data.
    Passthrough(&'static str),
}

/// Sequential stack whose indices match the published layer listings.
#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Runs the stack, returning the final output and the outputs of the
    /// layers listed in `taps` (in the order requested).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, taps: &[usize]) -> Result<(Var, Vec<Var>)> {
        let mut tapped = vec![None; taps.len()];
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = apply(layer, g, h)?;
            for (slot, _) in taps.iter().enumerate().filter(|(_, &t)| t == i) {
                tapped[slot] = Some(h);
            }
        }
        let tapped = tapped
            .into_iter()
            .zip(taps)
            .map(|(v, t)| {
                v.ok_or_else(|| {
                    crate::Error::InvalidArgument(format!(
                        "tap index {t} out of range for a {}-layer network",
                        self.layers.len()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((h, tapped))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn apply(layer: &Layer, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match *layer {
        Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => {
            let w = g.param(weight);
            let b = bias.map(|b| g.param(b));
            g.tape.conv2d(x, w, b, stride, pad)
        }
        Layer::ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
            output_padding,
        } => {
            let w = g.param(weight);
            let b = bias.map(|b| g.param(b));
            g.tape.conv_transpose2d(x, w, b, stride, pad, output_padding)
        }
        Layer::BatchNorm(ids) => batchnorm(g, ids, x),
        Layer::LeakyRelu(slope) => Ok(g.tape.leaky_relu(x, slope)),
        Layer::Relu => Ok(g.tape.relu(x)),
        Layer::Sigmoid => Ok(g.tape.sigmoid(x)),
        Layer::MaxPool {
            kernel,
            stride,
            pad,
        } => g.tape.max_pool2d(x, kernel, stride, pad),
        Layer::Passthrough(_) => Ok(x),
    }
}

fn batchnorm(g: &mut Graph<'_>, ids: BatchNormIds, x: Var) -> Result<Var> {
    let params = g.params();
    let use_batch = g.training() && !params.get(ids.weight).frozen;
    let gamma = g.param(ids.weight);
    let beta = g.param(ids.bias);
    if use_batch {
        let [n, _, h, w] = g.tape.value(x).dims4("batchnorm2d")?;
        let out = g.tape.batchnorm2d(x, gamma, beta, None, BN_EPS)?;
        if let Some((batch_mean, batch_var)) = out.batch_stats {
            g.record_stats(StatUpdate {
                mean: ids.running_mean,
                var: ids.running_var,
                batch_mean,
                batch_var,
                count: n * h * w,
            });
        }
        Ok(out.output)
    } else {
        let mean = params.value(ids.running_mean).data();
        let var = params.value(ids.running_var).data();
        Ok(g.tape.batchnorm2d(x, gamma, beta, Some((mean, var)), BN_EPS)?.output)
    }
}

/// Uniform Kaiming bound for a leaky-ReLU stack: `sqrt(3 · 2/(1+a²) / fan_in)`.
pub fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    (3.0 * 2.0 / (1.0 + slope * slope) / fan_in.max(1) as f64).sqrt()
}

/// Appends layers to a [`Network`], registering parameters as
/// `{prefix}.{layer index}.{weight|bias|running_mean|running_var}`.
pub struct NetBuilder<'a, R: Rng> {
    params: &'a mut ParamSet,
    prefix: String,
    layers: Vec<Layer>,
    rng: &'a mut R,
    next_name: Option<String>,
}

impl<'a, R: Rng> NetBuilder<'a, R> {
    pub fn new(params: &'a mut ParamSet, prefix: impl Into<String>, rng: &'a mut R) -> Self {
        Self {
            params,
            prefix: prefix.into(),
            layers: Vec::new(),
            rng,
            next_name: None,
        }
    }

    /// Names the next parameterized layer `{prefix}.{stem}` instead of by index.
    pub fn named(&mut self, stem: impl Into<String>) -> &mut Self {
        self.next_name = Some(stem.into());
        self
    }

    fn name(&self, leaf: &str) -> String {
        match &self.next_name {
            Some(stem) => format!("{}.{stem}.{leaf}", self.prefix),
            None => format!("{}.{}.{leaf}", self.prefix, self.layers.len()),
        }
    }

    fn push_layer(&mut self, layer: Layer) {
        self.next_name = None;
        self.layers.push(layer);
    }

    fn kaiming(&mut self, dims: &[usize], fan_in: usize) -> Tensor {
        let bound = kaiming_bound(fan_in, LEAKY_SLOPE);
        Tensor::uniform(dims, -bound, bound, self.rng)
    }

    pub fn conv(
        &mut self,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<&mut Self> {
        let w = self.kaiming(&[cout, cin, k.0, k.1], cin * k.0 * k.1);
        let weight = self.params.add(self.name("weight"), w, Role::Weight)?;
        let bias = self.params.add(self.name("bias"), Tensor::zeros(&[cout]), Role::Weight)?;
        self.push_layer(Layer::Conv2d {
            weight,
            bias: Some(bias),
            stride,
            pad,
        });
        Ok(self)
    }

    /// Convolution without a bias term (ResNet style).
    pub fn conv_nobias(
        &mut self,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<&mut Self> {
        let w = self.kaiming(&[cout, cin, k, k], cin * k * k);
        let weight = self.params.add(self.name("weight"), w, Role::Weight)?;
        self.push_layer(Layer::Conv2d {
            weight,
            bias: None,
            stride,
            pad,
        });
        Ok(self)
    }

    pub fn conv_t(
        &mut self,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<&mut Self> {
        // Each output sees about cin·k²/stride² input taps.
        let fan_in = (cin * k.0 * k.1 / (stride * stride)).max(1);
        let w = self.kaiming(&[cin, cout, k.0, k.1], fan_in);
        let weight = self.params.add(self.name("weight"), w, Role::Weight)?;
        let bias = self.params.add(self.name("bias"), Tensor::zeros(&[cout]), Role::Weight)?;
        self.push_layer(Layer::ConvTranspose2d {
            weight,
            bias: Some(bias),
            stride,
            pad,
            output_padding: 0,
        });
        Ok(self)
    }

    pub fn bn(&mut self, c: usize) -> Result<&mut Self> {
        let ids = BatchNormIds {
            weight: self.params.add(self.name("weight"), Tensor::ones(&[c]), Role::Weight)?,
            bias: self.params.add(self.name("bias"), Tensor::zeros(&[c]), Role::Weight)?,
            running_mean: self
                .params
                .add(self.name("running_mean"), Tensor::zeros(&[c]), Role::Buffer)?,
            running_var: self
                .params
                .add(self.name("running_var"), Tensor::ones(&[c]), Role::Buffer)?,
        };
        self.push_layer(Layer::BatchNorm(ids));
        Ok(self)
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.push_layer(layer);
        self
    }

    /// Number of layers added so far.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn finish(self) -> Network {
        Network {
            layers: self.layers,
        }
    }
}
