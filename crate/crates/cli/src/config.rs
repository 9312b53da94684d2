//! Run configuration: a strict JSON file whose every section has defaults,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use favae::evalkit::{Layout, Recipe, RenderMode};
use favae::extractor::{Backbone, Mode};
use favae::nn::{ModelSpec, OutputActivation};
use favae::scoring::ScoreKind;
use favae::toy::ToySpec;
use favae::train::TrainConfig;
use favae::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub toy: ToyConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub fig1: Fig1Config,
    pub correct: CorrectConfig,
    pub render: RenderConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Anomalies without pixel noise.
    #[default]
    Paper,
    /// Anomalies with pixel noise of half the normal level.
    Noisy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub preset: Preset,
    /// Image side; the preset's value when absent.
    pub side: Option<usize>,
    pub sigma_e: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Export stripe-patch images with masks instead of whole-image stripes.
    pub localization: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            side: None,
            sigma_e: None,
            n_train: 1000,
            n_test: 100,
            localization: false,
        }
    }
}

impl ToyConfig {
    pub fn spec(&self, seed: u64) -> Result<ToySpec> {
        let mut spec = match self.preset {
            Preset::Paper => ToySpec::paper(),
            Preset::Noisy => ToySpec::paper().noisy(),
        };
        if let Some(s) = self.side {
            spec = spec.with_side(s);
        }
        if let Some(e) = self.sigma_e {
            spec = spec.with_sigma_e(e);
        }
        spec = spec.with_seed(seed);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; toy data is generated on the fly when absent.
    pub root: Option<PathBuf>,
    pub layout: Layout,
    /// Preparation applied to every training image.
    pub recipe: Option<Recipe>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Mvtec,
            recipe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub channel_scale: f64,
    pub batch_norm: bool,
    pub output: OutputActivation,
    pub backbone: Option<BackboneArg>,
    pub ablation: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            channel_scale: 0.25,
            batch_norm: true,
            output: OutputActivation::Sigmoid,
            backbone: None,
            ablation: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, channels: usize, height: usize, width: usize) -> ModelSpec {
        ModelSpec {
            in_channels: channels,
            height,
            width,
            latent_dim: self.latent_dim,
            channel_scale: self.channel_scale,
            output: self.output,
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Vanilla,
    Favae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackboneArg {
    Vgg16,
    Resnet18,
    Random,
    Encoder,
    None,
}

impl BackboneArg {
    pub fn backbone(self) -> Backbone {
        match self {
            BackboneArg::Vgg16 => Backbone::Vgg16,
            BackboneArg::Resnet18 => Backbone::Resnet18,
            BackboneArg::Random => Backbone::RandomVgg16,
            BackboneArg::Encoder => Backbone::OwnEncoder,
            BackboneArg::None => Backbone::None,
        }
    }
}

/// Picks the ablation mode and backbone from `--ablation`, `--mode` and
/// `--backbone`, in that order of precedence.
pub fn resolve_mode(mode: Option<ModeArg>, backbone: Option<BackboneArg>, ablation: Option<&str>) -> Result<(Mode, Backbone)> {
    if let Some(a) = ablation {
        let m: Mode = a.parse()?;
        let b = match backbone {
            Some(b) => b.backbone(),
            None => m.default_backbone(),
        };
        return Ok((m, b));
    }
    let backbone = match (mode, backbone) {
        (Some(ModeArg::Vanilla), _) => BackboneArg::None,
        (_, Some(b)) => b,
        (_, None) => BackboneArg::Vgg16,
    };
    let m = match backbone {
        BackboneArg::Vgg16 | BackboneArg::Resnet18 => Mode::PretrainedFrozen,
        BackboneArg::Random => Mode::RandomFrozen,
        BackboneArg::Encoder => Mode::EncoderGradstop,
        BackboneArg::None => Mode::Vanilla,
    };
    Ok((m, backbone.backbone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub kinds: Vec<ScoreKind>,
    /// Render one anomaly map per test image.
    pub maps: bool,
    pub render_mode: RenderMode,
    pub batch_size: usize,
    pub bins: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ScoreKind::Favae, ScoreKind::Elbo, ScoreKind::Typicality, ScoreKind::ClassicPixelMax],
            maps: true,
            render_mode: RenderMode::EqualizedJet,
            batch_size: 16,
            bins: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fig1Score {
    AnalyticLoglik,
    Typicality,
    Favae,
}

impl Fig1Score {
    pub fn name(self) -> &'static str {
        match self {
            Fig1Score::AnalyticLoglik => "analytic-loglik",
            Fig1Score::Typicality => "typicality",
            Fig1Score::Favae => "favae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig1Config {
    /// Samples per distribution.
    pub n: usize,
    pub bins: usize,
    pub scores: Vec<Fig1Score>,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            n: 500,
            bins: 40,
            scores: vec![Fig1Score::AnalyticLoglik, Fig1Score::Typicality],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectConfig {
    pub input: Option<PathBuf>,
    pub lambda: f64,
    pub steps: usize,
    /// Gradient step; `None` picks `0.5·γ_min²` from the pixel decoder.
    pub step_size: Option<f64>,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        Self {
            input: None,
            lambda: 1.0,
            steps: 100,
            step_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub input: Option<PathBuf>,
    pub mode: RenderMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            input: None,
            mode: RenderMode::EqualizedJet,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_beats_mode_and_picks_its_backbone() {
        let r = resolve_mode(Some(ModeArg::Vanilla), None, Some("m3")).unwrap();
        assert_eq!(r, (Mode::EncoderGradstop, Backbone::OwnEncoder));
        let r = resolve_mode(None, Some(BackboneArg::Resnet18), Some("m5")).unwrap();
        assert_eq!(r, (Mode::Unfrozen, Backbone::Resnet18));
        assert!(matches!(resolve_mode(None, None, Some("m7")), Err(Error::Config(_))));
    }

    #[test]
    fn mode_and_backbone_defaults() {
        assert_eq!(resolve_mode(None, None, None).unwrap(), (Mode::PretrainedFrozen, Backbone::Vgg16));
        assert_eq!(
            resolve_mode(Some(ModeArg::Vanilla), Some(BackboneArg::Vgg16), None).unwrap(),
            (Mode::Vanilla, Backbone::None)
        );
        assert_eq!(
            resolve_mode(Some(ModeArg::Favae), Some(BackboneArg::Random), None).unwrap(),
            (Mode::RandomFrozen, Backbone::RandomVgg16)
        );
        assert_eq!(
            resolve_mode(None, Some(BackboneArg::Encoder), None).unwrap(),
            (Mode::EncoderGradstop, Backbone::OwnEncoder)
        );
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"toy":{"sidee":3}}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"fig1":{"scores":["favae"]}}"#).unwrap();
        assert_eq!(partial.fig1.scores, vec![Fig1Score::Favae]);
        assert_eq!(partial.fig1.n, 500);
    }

    #[test]
    fn toy_presets() {
        let paper = ToyConfig::default().spec(3).unwrap();
        assert_eq!((paper.sigma_n, paper.sigma_a, paper.psi, paper.side), (0.0285, 0.057, 5.0, 128));
        assert_eq!(paper.sigma_e, 0.0);
        let noisy = ToyConfig {
            preset: Preset::Noisy,
            side: Some(32),
            ..Default::default()
        }
        .spec(3)
        .unwrap();
        assert_eq!((noisy.sigma_e, noisy.side, noisy.seed), (0.01425, 32, 3));
    }
}
