use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

use super::layers::{Layer, NetBuilder, Network, LEAKY_SLOPE};
use super::params::{Graph, ParamId, ParamSet, Role};

/// Total downsampling factor of the encoder before its final full-field conv.
pub const STRIDE_PRODUCT: usize = 16;

/// Decoder layers whose outputs have the widths of the three encoder stages
/// the adapters can attach to.
pub const DECODER_ATTACH_POINTS: [usize; 3] = [10, 16, 22];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    /// Unbounded output, for data that is not confined to (0,1).
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    /// Multiplier applied to every hidden width (1.0 is the full-size model).
    pub channel_scale: f64,
    pub output: OutputActivation,
    /// Batch normalization after hidden convolutions. When off, each BN slot
    /// becomes a no-op so layer indices are unchanged.
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    /// Full-size configuration: 3×128×128 inputs, 100 latent dimensions.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            height: 128,
            width: 128,
            latent_dim: 100,
            channel_scale: 1.0,
            output: OutputActivation::Sigmoid,
            batch_norm: true,
        }
    }

    /// Reduced configuration used for CPU experiments.
    pub fn desk(in_channels: usize, side: usize, latent_dim: usize) -> Self {
        Self {
            in_channels,
            height: side,
            width: side,
            latent_dim,
            channel_scale: 0.25,
            output: OutputActivation::Sigmoid,
            batch_norm: true,
        }
    }

    pub fn with_output(mut self, output: OutputActivation) -> Self {
        self.output = output;
        self
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "in_channels and latent_dim must be positive".into(),
            ));
        }
        if !(self.channel_scale.is_finite() && self.channel_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "channel_scale must be positive, got {}",
                self.channel_scale
            )));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % STRIDE_PRODUCT != 0 {
                return Err(Error::InvalidArgument(format!(
                    "input {name} {v} must be a positive multiple of {STRIDE_PRODUCT}"
                )));
            }
        }
        Ok(())
    }

    /// Scaled hidden width.
    pub fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.channel_scale).round() as usize).max(1)
    }

    pub fn input_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.height, self.width]
    }

    fn final_kernel(&self) -> (usize, usize) {
        (self.height / STRIDE_PRODUCT, self.width / STRIDE_PRODUCT)
    }

    /// Packs the spec into a 7-entry tensor for storage alongside weights.
    pub fn to_tensor(&self) -> Tensor {
        let out = match self.output {
            OutputActivation::Sigmoid => 0.0,
            OutputActivation::Identity => 1.0,
        };
        Tensor::new(
            &[7],
            vec![
                self.in_channels as f64,
                self.height as f64,
                self.width as f64,
                self.latent_dim as f64,
                self.channel_scale,
                out,
                if self.batch_norm { 1.0 } else { 0.0 },
            ],
        )
        .expect("fixed length")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 7 {
            return Err(Error::Config(format!("model spec record has {} entries, expected 7", d.len())));
        }
        let spec = Self {
            in_channels: d[0] as usize,
            height: d[1] as usize,
            width: d[2] as usize,
            latent_dim: d[3] as usize,
            channel_scale: d[4],
            output: if d[5] == 0.0 {
                OutputActivation::Sigmoid
            } else {
                OutputActivation::Identity
            },
            batch_norm: d[6] != 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One feature head: maps a decoder activation to a tapped feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub decoder_layer: usize,
    pub feature_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub spec: AdapterSpec,
    pub net: Network,
}

/// Encoder, decoder, feature adapters and per-channel decoder variances.
///
/// Parameter names: `encoder.{i}.*`, `decoder.{i}.*`, `adapter.{k}.{0|2}.*`
/// and `log_gamma.{space}` where space 0 is pixels and `k+1` is adapter `k`.
#[derive(Clone, Debug)]
pub struct Vae {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub encoder: Network,
    pub decoder: Network,
    pub adapters: Vec<Adapter>,
    pub log_gammas: Vec<ParamId>,
}

pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
    pub taps: Vec<Var>,
}

pub struct Decoded {
    pub mean: Var,
    /// Adapter outputs, one per adapter, in adapter order.
    pub features: Vec<Var>,
}

impl Vae {
    pub fn new(spec: ModelSpec, adapters: &[AdapterSpec], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = build_encoder(&spec, &mut params, &mut rng)?;
        let decoder = build_decoder(&spec, &mut params, &mut rng)?;
        let mut built = Vec::with_capacity(adapters.len());
        for (k, a) in adapters.iter().enumerate() {
            let cin = decoder
                .out_channels(&params, a.decoder_layer)
                .filter(|_| a.decoder_layer < decoder.len())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "decoder layer {} cannot host an adapter",
                        a.decoder_layer
                    ))
                })?;
            let c = a.feature_channels;
            let mut b = NetBuilder::new(&mut params, format!("adapter.{k}"), &mut rng);
            b.conv(cin, c, (1, 1), 1, 0)?;
            b.push(Layer::Relu);
            b.conv(c, c, (1, 1), 1, 0)?;
            built.push(Adapter {
                spec: *a,
                net: b.finish(),
            });
        }
        let mut log_gammas = vec![params.add("log_gamma.0", Tensor::zeros(&[spec.in_channels]), Role::Weight)?];
        for (k, a) in adapters.iter().enumerate() {
            log_gammas.push(params.add(
                format!("log_gamma.{}", k + 1),
                Tensor::zeros(&[a.feature_channels]),
                Role::Weight,
            )?);
        }
        Ok(Self {
            spec,
            params,
            encoder,
            decoder,
            adapters: built,
            log_gammas,
        })
    }

    pub fn adapter_specs(&self) -> Vec<AdapterSpec> {
        self.adapters.iter().map(|a| a.spec).collect()
    }

    /// Runs the encoder; `taps` selects encoder layers to return as well.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var, taps: &[usize]) -> Result<Encoded> {
        let dims = g.tape.value(x).dims4("encode")?;
        let want = self.spec.input_dims(dims[0]);
        if dims != want {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("model expects {want:?}, got {dims:?}"),
            });
        }
        let (h, taps) = self.encoder.forward(g, x, taps)?;
        let l = self.spec.latent_dim;
        let mu = g.tape.narrow(h, 1, 0, l)?;
        let logvar = g.tape.narrow(h, 1, l, l)?;
        Ok(Encoded { mu, logvar, taps })
    }

    /// Decodes `z` (`[N,l,1,1]`) and evaluates every adapter.
    pub fn decode(&self, g: &mut Graph<'_>, z: Var) -> Result<Decoded> {
        let attach: Vec<usize> = self.adapters.iter().map(|a| a.spec.decoder_layer).collect();
        let (mean, hidden) = self.decoder.forward(g, z, &attach)?;
        let mut features = Vec::with_capacity(hidden.len());
        for (a, h) in self.adapters.iter().zip(hidden) {
            features.push(a.net.forward(g, h, &[])?.0);
        }
        Ok(Decoded { mean, features })
    }

    /// Reconstruction through the posterior mean, in inference mode.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::frozen(&self.params);
        let xv = g.tape.constant(x.clone());
        let enc = self.encode(&mut g, xv, &[])?;
        let dec = self.decode(&mut g, enc.mu)?;
        Ok(g.tape.value(dec.mean).clone())
    }

    pub fn log_gamma(&self, space: usize) -> &[f64] {
        self.params.value(self.log_gammas[space]).data()
    }
}

impl Network {
    /// Channel count produced by layer `idx`, found from the last conv at or before it.
    pub fn out_channels(&self, params: &ParamSet, idx: usize) -> Option<usize> {
        self.layers.iter().take(idx + 1).rev().find_map(|l| match l {
            Layer::Conv2d { weight, .. } => Some(params.value(*weight).dims()[0]),
            Layer::ConvTranspose2d { weight, .. } => Some(params.value(*weight).dims()[1]),
            _ => None,
        })
    }
}

/// Channel widths of the eight strided/unstrided encoder convs before the
/// latent projection, with their kernel size and stride.
const ENCODER_STAGES: [(usize, usize, usize, usize); 8] = [
    // (in width, out width, kernel, stride); in width 0 = image channels
    (0, 128, 4, 2),
    (128, 128, 4, 2),
    (128, 256, 3, 1),
    (256, 256, 4, 2),
    (256, 512, 3, 1),
    (512, 512, 4, 2),
    (512, 512, 3, 1),
    (512, 32, 3, 1),
];

/// Unscaled output width of encoder layer `idx` (conv, BN or activation of
/// one of the eight hidden stages).
pub fn encoder_width(idx: usize) -> Option<usize> {
    ENCODER_STAGES.get(idx / 3).map(|s| s.1)
}

fn norm<R: rand::Rng>(b: &mut NetBuilder<'_, R>, spec: &ModelSpec, c: usize) -> Result<()> {
    if spec.batch_norm {
        b.bn(c)?;
    } else {
        b.push(Layer::Passthrough("no_norm"));
    }
    Ok(())
}

pub fn build_encoder<R: rand::Rng>(spec: &ModelSpec, params: &mut ParamSet, rng: &mut R) -> Result<Network> {
    let mut b = NetBuilder::new(params, "encoder", rng);
    for &(cin, cout, k, s) in &ENCODER_STAGES {
        let cin = if cin == 0 { spec.in_channels } else { spec.scaled(cin) };
        let cout = spec.scaled(cout);
        b.conv(cin, cout, (k, k), s, 1)?;
        norm(&mut b, spec, cout)?;
        b.push(Layer::LeakyRelu(LEAKY_SLOPE));
    }
    b.conv(spec.scaled(32), 2 * spec.latent_dim, spec.final_kernel(), 1, 0)?;
    b.push(Layer::Passthrough("flatten"));
    b.push(Layer::Passthrough("split"));
    Ok(b.finish())
}

pub fn build_decoder<R: rand::Rng>(spec: &ModelSpec, params: &mut ParamSet, rng: &mut R) -> Result<Network> {
    let mut b = NetBuilder::new(params, "decoder", rng);
    b.push(Layer::Passthrough("deflatten"));
    let first = spec.scaled(32);
    b.conv_t(spec.latent_dim, first, spec.final_kernel(), 1, 0)?;
    norm(&mut b, spec, first)?;
    b.push(Layer::LeakyRelu(LEAKY_SLOPE));
    // Mirror of the encoder stages, deepest first.
    for &(cout, cin, k, s) in ENCODER_STAGES.iter().rev() {
        if cout == 0 {
            b.conv_t(spec.scaled(cin), spec.in_channels, (k, k), s, 1)?;
            break;
        }
        let (cin, cout) = (spec.scaled(cin), spec.scaled(cout));
        b.conv_t(cin, cout, (k, k), s, 1)?;
        norm(&mut b, spec, cout)?;
        b.push(Layer::LeakyRelu(LEAKY_SLOPE));
    }
    b.push(Layer::Passthrough("identity"));
    b.push(match spec.output {
        OutputActivation::Sigmoid => Layer::Sigmoid,
        OutputActivation::Identity => Layer::Passthrough("identity"),
    });
    Ok(b.finish())
}
