//! A VAE together with its feature extractor: the unit that is trained,
//! saved and scored.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extractor::{tap_channels, Backbone, Extractor, Mode, TapConfig};
use crate::nn::weights::{self, find, NamedTensors};
use crate::nn::{AdapterSpec, Decoded, Graph, ModelSpec, ParamSet, Vae};
use crate::tensor::{Tensor, Var};

const BACKBONES: [Backbone; 5] = [
    Backbone::Vgg16,
    Backbone::Resnet18,
    Backbone::RandomVgg16,
    Backbone::OwnEncoder,
    Backbone::None,
];

#[derive(Clone, Debug)]
pub struct Model {
    pub vae: Vae,
    pub extractor: Extractor,
}

/// Everything one forward pass produces.
pub struct Pass {
    pub mu: Var,
    pub logvar: Var,
    /// Latent code fed to the decoder.
    pub z: Var,
    pub decoded: Decoded,
    /// Extractor features `y_1..y_L`, in pair order.
    pub targets: Vec<Var>,
}

/// How the decoder input is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Latent {
    /// Posterior mean.
    Mean,
    /// `mu + exp(logvar/2) * eps` with `eps` supplied by the caller.
    Sample,
}

impl Model {
    pub fn new(spec: ModelSpec, taps: TapConfig, seed: u64) -> Result<Self> {
        let channels = tap_channels(&taps, &spec)?;
        let adapters: Vec<AdapterSpec> = taps
            .pairs()
            .iter()
            .zip(&channels)
            .map(|(p, &c)| AdapterSpec {
                decoder_layer: p.decoder_layer,
                feature_channels: c,
            })
            .collect();
        let mut vae = Vae::new(spec.clone(), &adapters, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let extractor = Extractor::build(taps, &spec, &mut vae.params, &mut rng)?;
        Ok(Self { vae, extractor })
    }

    pub fn for_mode(spec: ModelSpec, mode: Mode, seed: u64) -> Result<Self> {
        Self::new(spec, TapConfig::for_mode(mode), seed)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.vae.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.vae.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.vae.params
    }

    /// Copies pretrained backbone weights (and normalization constants) from
    /// a weight pack.
    pub fn load_backbone(&mut self, pack: &[(String, Tensor)]) -> Result<()> {
        self.extractor.load_pack(&mut self.vae.params, pack)
    }

    /// Number of reconstructed feature spaces besides pixels.
    pub fn num_taps(&self) -> usize {
        self.vae.adapters.len()
    }

    /// Encodes `x`, decodes `z` and extracts the feature targets.
    ///
    /// With [`Latent::Sample`], `eps` must hold one standard normal draw per
    /// latent entry (`[N,l,1,1]`).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, latent: Latent, eps: Option<&Tensor>) -> Result<Pass> {
        let enc_taps = self.extractor.encoder_taps();
        let enc = self.vae.encode(g, x, &enc_taps)?;
        let z = match latent {
            Latent::Mean => enc.mu,
            Latent::Sample => {
                let eps = eps.ok_or_else(|| Error::InvalidArgument("sampling needs eps".into()))?;
                let e = g.tape.constant(eps.clone());
                let half = g.tape.scale(enc.logvar, 0.5);
                let std = g.tape.exp(half);
                let noise = g.tape.mul(std, e)?;
                g.tape.add(enc.mu, noise)?
            }
        };
        let decoded = self.vae.decode(g, z)?;
        let targets = self.extractor.extract(g, x, &enc.taps)?;
        Ok(Pass {
            mu: enc.mu,
            logvar: enc.logvar,
            z,
            decoded,
            targets,
        })
    }

    /// Parameters plus `meta.model` and `meta.extractor` records.
    pub fn to_named_tensors(&self) -> NamedTensors {
        let cfg = &self.extractor.config;
        let code = |b: Backbone| BACKBONES.iter().position(|&x| x == b).unwrap_or(0) as f64;
        let mode = Mode::ALL.iter().position(|&m| m == cfg.mode).unwrap_or(0) as f64;
        let mut out = vec![
            ("meta.model".to_string(), self.vae.spec.to_tensor()),
            (
                "meta.extractor".to_string(),
                Tensor::new(&[2], vec![code(cfg.backbone), mode]).expect("two entries"),
            ),
        ];
        out.extend(self.vae.params.named_tensors());
        out
    }

    pub fn from_named_tensors(pack: &[(String, Tensor)]) -> Result<Self> {
        let spec = ModelSpec::from_tensor(
            find(pack, "meta.model").ok_or_else(|| Error::MissingWeights("meta.model record".into()))?,
        )?;
        let ext = find(pack, "meta.extractor")
            .ok_or_else(|| Error::MissingWeights("meta.extractor record".into()))?
            .data();
        let backbone = ext
            .first()
            .and_then(|&v| BACKBONES.get(v as usize))
            .copied()
            .ok_or_else(|| Error::Config("bad backbone code".into()))?;
        let mode = ext
            .get(1)
            .and_then(|&v| Mode::ALL.get(v as usize))
            .copied()
            .ok_or_else(|| Error::Config("bad mode code".into()))?;
        let mut model = Self::new(spec, TapConfig::new(backbone, mode)?, 0)?;
        let loaded = model.vae.params.load_from(pack)?;
        if loaded != model.vae.params.len() {
            let missing: Vec<&str> = model
                .vae
                .params
                .iter()
                .map(|(_, p)| p.name.as_str())
                .filter(|n| find(pack, n).is_none())
                .take(3)
                .collect();
            return Err(Error::MissingWeights(format!(
                "{} of {} parameters loaded; missing e.g. {missing:?}",
                loaded,
                model.vae.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save_pack(path, &self.to_named_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named_tensors(&weights::load_pack(path)?)
    }
}
