//! Feature extractors whose tapped activations the decoder learns to
//! reconstruct, with the ablation modes that control how they are trained.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::apply;
use crate::nn::weights::{find, NamedTensors};
use crate::nn::{Graph, Layer, ModelSpec, NetBuilder, Network, ParamId, ParamSet, Role};
use crate::tensor::{Tensor, Var};

/// Prefix of extractor parameters inside a model's parameter set.
pub const PREFIX: &str = "extractor";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vgg16,
    Resnet18,
    RandomVgg16,
    OwnEncoder,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// M1: pretrained backbone, weights fixed.
    PretrainedFrozen,
    /// M2: randomly initialized backbone, weights fixed.
    RandomFrozen,
    /// M3: the model's own encoder, targets detached from the graph.
    EncoderGradstop,
    /// M4: pixels only.
    Vanilla,
    /// M5: pretrained backbone trained jointly with the VAE.
    Unfrozen,
    /// M6: the model's own encoder with gradients through the targets.
    EncoderNostop,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::PretrainedFrozen,
        Mode::RandomFrozen,
        Mode::EncoderGradstop,
        Mode::Vanilla,
        Mode::Unfrozen,
        Mode::EncoderNostop,
    ];

    /// Ablation label `m1`..`m6`.
    pub fn label(self) -> &'static str {
        match self {
            Mode::PretrainedFrozen => "m1",
            Mode::RandomFrozen => "m2",
            Mode::EncoderGradstop => "m3",
            Mode::Vanilla => "m4",
            Mode::Unfrozen => "m5",
            Mode::EncoderNostop => "m6",
        }
    }

    pub fn default_backbone(self) -> Backbone {
        match self {
            Mode::PretrainedFrozen | Mode::Unfrozen => Backbone::Vgg16,
            Mode::RandomFrozen => Backbone::RandomVgg16,
            Mode::EncoderGradstop | Mode::EncoderNostop => Backbone::OwnEncoder,
            Mode::Vanilla => Backbone::None,
        }
    }

    pub fn freezes_backbone(self) -> bool {
        matches!(self, Mode::PretrainedFrozen | Mode::RandomFrozen)
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected m1..m6)")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One tap: an extractor layer and the decoder layer whose adapter predicts it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPair {
    pub tap: usize,
    pub decoder_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapConfig {
    pub backbone: Backbone,
    pub mode: Mode,
    /// Extractor layers as listed in the connection table (ResNet stages are
    /// numbered 2, 3, 4 for conv2x, conv3x, conv4x).
    pub taps: Vec<usize>,
    /// Decoder layers as listed in the connection table.
    pub decoder_layers: Vec<usize>,
}

impl TapConfig {
    /// Connection table for a backbone.
    pub fn table(backbone: Backbone) -> (Vec<usize>, Vec<usize>) {
        match backbone {
            Backbone::Vgg16 | Backbone::RandomVgg16 => (vec![7, 14, 21], vec![22, 10, 16]),
            Backbone::Resnet18 => (vec![2, 3, 4], vec![22, 10, 16]),
            Backbone::OwnEncoder => (vec![3, 9, 15], vec![22, 10, 16]),
            Backbone::None => (vec![], vec![]),
        }
    }

    pub fn new(backbone: Backbone, mode: Mode) -> Result<Self> {
        let ok = match mode {
            Mode::Vanilla => backbone == Backbone::None,
            Mode::PretrainedFrozen | Mode::Unfrozen => {
                matches!(backbone, Backbone::Vgg16 | Backbone::Resnet18)
            }
            Mode::RandomFrozen => backbone == Backbone::RandomVgg16,
            Mode::EncoderGradstop | Mode::EncoderNostop => backbone == Backbone::OwnEncoder,
        };
        if !ok {
            return Err(Error::Config(format!(
                "backbone {backbone:?} cannot be used in mode {mode:?}"
            )));
        }
        let (taps, decoder_layers) = Self::table(backbone);
        Ok(Self {
            backbone,
            mode,
            taps,
            decoder_layers,
        })
    }

    pub fn for_mode(mode: Mode) -> Self {
        Self::new(mode.default_backbone(), mode).expect("default backbone fits its mode")
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Taps (shallow to deep) paired with decoder layers from the finest
    /// resolution to the coarsest. Later decoder layers are finer, so the
    /// decoder list is sorted in descending order.
    pub fn pairs(&self) -> Vec<TapPair> {
        let mut taps = self.taps.clone();
        taps.sort_unstable();
        let mut dec = self.decoder_layers.clone();
        dec.sort_unstable_by(|a, b| b.cmp(a));
        taps.into_iter()
            .zip(dec)
            .map(|(tap, decoder_layer)| TapPair { tap, decoder_layer })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    main: Network,
    downsample: Option<Network>,
}

#[derive(Clone, Debug)]
enum Net {
    None,
    Sequential(Network),
    Resnet { stem: Network, stages: Vec<Vec<Block>> },
    OwnEncoder,
}

/// A constructed extractor. Its parameters live in the model's parameter set
/// under [`PREFIX`].
#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: TapConfig,
    net: Net,
    /// Constant 1×1 conv applying per-channel normalization (and channel
    /// replication for grayscale input to a 3-channel backbone).
    norm: Option<(ParamId, ParamId)>,
    /// Channels of each tapped feature, in pair order.
    pub channels: Vec<usize>,
}

const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Channel count of each tapped feature (in pair order) for a model spec.
pub fn tap_channels(config: &TapConfig, spec: &ModelSpec) -> Result<Vec<usize>> {
    let scaled = !matches!(config.backbone, Backbone::Vgg16 | Backbone::Resnet18);
    let width = |w: usize| if scaled { spec.scaled(w) } else { w };
    config
        .pairs()
        .iter()
        .map(|p| {
            let base = match config.backbone {
                Backbone::Vgg16 | Backbone::RandomVgg16 => vgg_width(p.tap),
                Backbone::Resnet18 => p.tap.checked_sub(2).and_then(|i| RESNET_WIDTHS.get(i).copied()),
                Backbone::OwnEncoder => crate::nn::model::encoder_width(p.tap),
                Backbone::None => None,
            };
            base.map(width)
                .ok_or_else(|| Error::Config(format!("{:?} has no tap {}", config.backbone, p.tap)))
        })
        .collect()
}

/// Width of VGG16 feature layer `idx` (conv, ReLU or pool).
fn vgg_width(idx: usize) -> Option<usize> {
    let mut i = 0;
    let mut w = 0;
    for &c in VGG_CFG.iter().chain(&VGG_CFG_TAIL) {
        let span = if c == 0 { 1 } else { 2 };
        if c != 0 {
            w = c;
        }
        if idx < i + span {
            return Some(w);
        }
        i += span;
    }
    None
}

const VGG_CFG: [usize; 10] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0];
const VGG_CFG_TAIL: [usize; 3] = [512, 512, 512];

impl Extractor {
    /// Builds the extractor and registers its parameters. Pretrained
    /// backbones are built at full width and expect [`Extractor::load_pack`];
    /// random backbones use the model's `channel_scale`.
    pub fn build<R: Rng>(
        config: TapConfig,
        spec: &ModelSpec,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        let pretrained = matches!(config.backbone, Backbone::Vgg16 | Backbone::Resnet18);
        let width = |w: usize| {
            if pretrained {
                w
            } else {
                spec.scaled(w)
            }
        };
        let in_ch = if pretrained { 3 } else { spec.in_channels };
        let pairs = config.pairs();
        let channels = tap_channels(&config, spec)?;
        let net = match config.backbone {
            Backbone::None => Net::None,
            Backbone::OwnEncoder => Net::OwnEncoder,
            Backbone::Vgg16 | Backbone::RandomVgg16 => {
                let last = pairs.iter().map(|p| p.tap).max().unwrap_or(0);
                let mut b = NetBuilder::new(params, format!("{PREFIX}.features"), rng);
                let mut cin = in_ch;
                for &c in VGG_CFG.iter().chain(&VGG_CFG_TAIL) {
                    if c == 0 {
                        b.push(Layer::MaxPool {
                            kernel: 2,
                            stride: 2,
                            pad: 0,
                        });
                    } else {
                        b.conv(cin, width(c), (3, 3), 1, 1)?;
                        b.push(Layer::Relu);
                        cin = width(c);
                    }
                    if b.len() > last {
                        break;
                    }
                }
                Net::Sequential(b.finish())
            }
            Backbone::Resnet18 => {
                let stages = pairs.iter().map(|p| p.tap - 1).max().unwrap_or(0);
                let (stem, stages) = build_resnet18(params, rng, in_ch, &width, stages)?;
                Net::Resnet { stem, stages }
            }
        };
        let norm = match config.backbone {
            Backbone::None | Backbone::OwnEncoder => None,
            _ => {
                if !(spec.in_channels == in_ch || (spec.in_channels == 1 && in_ch == 3)) {
                    return Err(Error::Config(format!(
                        "{}-channel input cannot feed a {in_ch}-channel backbone",
                        spec.in_channels
                    )));
                }
                let w = params.add(
                    format!("{PREFIX}.norm.weight"),
                    norm_weight(spec.in_channels, &vec![1.0; in_ch])?,
                    Role::Buffer,
                )?;
                let b = params.add(format!("{PREFIX}.norm.bias"), Tensor::zeros(&[in_ch]), Role::Buffer)?;
                Some((w, b))
            }
        };
        if config.mode.freezes_backbone() {
            params.set_frozen(&format!("{PREFIX}."), true);
        }
        Ok(Self {
            config,
            net,
            norm,
            channels,
        })
    }

    pub fn is_vanilla(&self) -> bool {
        matches!(self.net, Net::None)
    }

    /// True when the extractor reads the model's own encoder.
    pub fn uses_encoder(&self) -> bool {
        matches!(self.net, Net::OwnEncoder)
    }

    /// Encoder layers to tap during encoding (empty unless [`Self::uses_encoder`]).
    pub fn encoder_taps(&self) -> Vec<usize> {
        if self.uses_encoder() {
            self.config.pairs().iter().map(|p| p.tap).collect()
        } else {
            Vec::new()
        }
    }

    /// Copies backbone weights and normalization constants from a pack with
    /// torchvision-style names (`features.N.weight`, `layer1.0.conv1.weight`).
    pub fn load_pack(&self, params: &mut ParamSet, pack: &[(String, Tensor)]) -> Result<()> {
        let prefixed: NamedTensors = pack
            .iter()
            .filter(|(n, _)| !n.starts_with("meta.") && !n.starts_with("ref."))
            .map(|(n, t)| (format!("{PREFIX}.{n}"), t.clone()))
            .collect();
        params.load_from(&prefixed)?;
        let missing: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&format!("{PREFIX}.")) && !p.name.contains(".norm."))
            .filter(|(_, p)| !prefixed.iter().any(|(n, _)| *n == p.name))
            .map(|(_, p)| p.name.clone())
            .take(3)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingWeights(format!(
                "weight pack lacks backbone tensors such as {missing:?}"
            )));
        }
        if let (Some(mean), Some(std), Some((w, b))) =
            (find(pack, "meta.norm.mean"), find(pack, "meta.norm.std"), self.norm)
        {
            let data_ch = params.value(w).dims()[1];
            params.get_mut(w).value = norm_weight(data_ch, std.data())?;
            let bias: Vec<f64> = mean.data().iter().zip(std.data()).map(|(m, s)| -m / s).collect();
            params.get_mut(b).value = Tensor::new(&[bias.len()], bias)?;
        }
        if let Some(taps) = find(pack, "meta.taps") {
            let listed: Vec<usize> = taps.data().iter().map(|&v| v as usize).collect();
            if listed != self.config.taps {
                return Err(Error::Config(format!(
                    "pack taps {listed:?} differ from configured taps {:?}",
                    self.config.taps
                )));
            }
        }
        Ok(())
    }

    /// Tapped features for input `x` (in pair order).
    ///
    /// `encoder_taps` are the activations returned by the encoder when the
    /// extractor is the model's own encoder; they are detached in
    /// gradient-stop mode.
    pub fn extract(&self, g: &mut Graph<'_>, x: Var, encoder_taps: &[Var]) -> Result<Vec<Var>> {
        let x = match self.norm {
            Some((w, b)) => {
                let (w, b) = (g.param(w), g.param(b));
                g.tape.conv2d(x, w, Some(b), 1, 0)?
            }
            None => x,
        };
        let taps: Vec<usize> = self.config.pairs().iter().map(|p| p.tap).collect();
        match &self.net {
            Net::None => Ok(vec![]),
            Net::OwnEncoder => {
                if encoder_taps.len() != taps.len() {
                    return Err(Error::InvalidArgument(format!(
                        "own-encoder extractor needs {} encoder taps, got {}",
                        taps.len(),
                        encoder_taps.len()
                    )));
                }
                Ok(encoder_taps
                    .iter()
                    .map(|&t| {
                        if self.config.mode == Mode::EncoderGradstop {
                            gradient_stop(g, t)
                        } else {
                            t
                        }
                    })
                    .collect())
            }
            Net::Sequential(net) => Ok(net.forward(g, x, &taps)?.1),
            Net::Resnet { stem, stages } => {
                let (mut h, _) = stem.forward(g, x, &[])?;
                let deepest = taps.iter().copied().max().unwrap_or(1);
                let mut outs = vec![None; taps.len()];
                for (s, blocks) in stages.iter().enumerate().take(deepest.saturating_sub(1)) {
                    for block in blocks {
                        h = block_forward(g, block, h)?;
                    }
                    for (slot, _) in taps.iter().enumerate().filter(|(_, &t)| t == s + 2) {
                        outs[slot] = Some(h);
                    }
                }
                outs.into_iter()
                    .map(|v| v.ok_or_else(|| Error::Config("resnet tap out of range".into())))
                    .collect()
            }
        }
    }
}

/// Forward identity whose backward pass contributes nothing upstream.
pub fn gradient_stop(g: &mut Graph<'_>, x: Var) -> Var {
    g.tape.stop_gradient(x)
}

/// 1×1 kernel dividing by `std` per output channel and replicating a
/// single input channel when needed.
fn norm_weight(data_ch: usize, std: &[f64]) -> Result<Tensor> {
    let out = std.len();
    let mut w = vec![0.0; out * data_ch];
    for o in 0..out {
        let i = if data_ch == 1 { 0 } else { o };
        if i >= data_ch {
            return Err(Error::Config(format!(
                "normalization for {out} channels cannot map {data_ch}-channel input"
            )));
        }
        w[o * data_ch + i] = 1.0 / std[o];
    }
    Tensor::new(&[out, data_ch, 1, 1], w)
}

fn build_resnet18<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    in_ch: usize,
    width: &dyn Fn(usize) -> usize,
    n_stages: usize,
) -> Result<(Network, Vec<Vec<Block>>)> {
    let mut b = NetBuilder::new(params, PREFIX, rng);
    let c0 = width(64);
    b.named("conv1").conv_nobias(in_ch, c0, 7, 2, 3)?;
    b.named("bn1").bn(c0)?;
    b.push(Layer::Relu);
    b.push(Layer::MaxPool {
        kernel: 3,
        stride: 2,
        pad: 1,
    });
    let stem = b.finish();
    let mut stages = Vec::new();
    let mut cin = c0;
    for (s, &w) in RESNET_WIDTHS.iter().enumerate().take(n_stages) {
        let c = width(w);
        let mut blocks = Vec::new();
        for i in 0..2 {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let prefix = format!("{PREFIX}.layer{}.{i}", s + 1);
            let mut m = NetBuilder::new(params, prefix.clone(), rng);
            m.named("conv1").conv_nobias(cin, c, 3, stride, 1)?;
            m.named("bn1").bn(c)?;
            m.push(Layer::Relu);
            m.named("conv2").conv_nobias(c, c, 3, 1, 1)?;
            m.named("bn2").bn(c)?;
            let main = m.finish();
            let downsample = if stride != 1 || cin != c {
                let mut d = NetBuilder::new(params, format!("{prefix}.downsample"), rng);
                d.conv_nobias(cin, c, 1, stride, 0)?;
                d.bn(c)?;
                Some(d.finish())
            } else {
                None
            };
            blocks.push(Block { main, downsample });
            cin = c;
        }
        stages.push(blocks);
    }
    Ok((stem, stages))
}

fn block_forward(g: &mut Graph<'_>, block: &Block, x: Var) -> Result<Var> {
    let mut h = x;
    for l in &block.main.layers {
        h = apply(l, g, h)?;
    }
    let skip = match &block.downsample {
        Some(d) => d.forward(g, x, &[])?.0,
        None => x,
    };
    let sum = g.tape.add(h, skip)?;
    Ok(g.tape.relu(sum))
}

/// Maximum absolute difference per tap between the extractor's activations
/// on `ref.input` and the `ref.tap.{i}` tensors of a reference pack.
pub fn reference_errors(
    extractor: &Extractor,
    params: &ParamSet,
    pack: &[(String, Tensor)],
) -> Result<Vec<f64>> {
    let input = find(pack, "ref.input")
        .ok_or_else(|| Error::Config("reference pack has no ref.input".into()))?;
    let mut g = Graph::frozen(params);
    let x = g.tape.constant(input.clone());
    let feats = extractor.extract(&mut g, x, &[])?;
    feats
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let want = find(pack, &format!("ref.tap.{i}"))
                .ok_or_else(|| Error::Config(format!("reference pack has no ref.tap.{i}")))?;
            let got = g.tape.value(f);
            if got.dims() != want.dims() {
                return Err(Error::Shape {
                    op: "reference_errors",
                    detail: format!("tap {i}: computed {:?}, pack {:?}", got.dims(), want.dims()),
                });
            }
            Ok(got.max_abs_diff(want))
        })
        .collect()
}

/// Tolerance stored in a reference pack (`ref.tolerance`), default 1e-4.
pub fn reference_tolerance(pack: &[(String, Tensor)]) -> f64 {
    find(pack, "ref.tolerance").map(|t| t.data()[0]).unwrap_or(1e-4)
}
