//! Anomaly scores: fused FAVAE maps, the classic pixel classifier,
//! typicality and ELBO scores.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Latent, Model};
use crate::nn::Graph;
use crate::tensor::Tensor;
use crate::toy::{sorted_sum, AnalyticVae};
use crate::train::{gaussian_kl, layer_maps};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-pixel score field at input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values.
    pub values: Vec<f64>,
    /// True when larger values mean more anomalous.
    pub higher_is_anomalous: bool,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            higher_is_anomalous: true,
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Sum of a map over every pixel, in sorted order so that it does not
/// depend on pixel order.
pub fn image_score(map: &AnomalyMap) -> f64 {
    sorted_sum(map.values.iter().copied())
}

/// Per-layer and fused maps of one batch.
pub struct MapSet {
    /// `layers[i][b]`: upsampled, channel-summed NLL of space `i` for image `b`.
    pub layers: Vec<Vec<AnomalyMap>>,
    /// Sum over layers, one per image.
    pub fused: Vec<AnomalyMap>,
}

/// Fused anomaly maps `Σ_i upsample(channel-summed NLL_i)` at the posterior
/// mean, for a batch `[N,C,H,W]`.
pub fn favae_maps(model: &Model, x: &Tensor) -> Result<MapSet> {
    let [n, _, h, w] = x.dims4("favae_map")?;
    let mut g = Graph::frozen(model.params());
    let xv = g.tape.constant(x.clone());
    let pass = model.forward(&mut g, xv, Latent::Mean, None)?;
    let maps = layer_maps(&mut g, model, xv, &pass)?;
    let plane = h * w;
    let mut layers = Vec::with_capacity(maps.len());
    let mut fused = vec![vec![0.0; plane]; n];
    for m in maps {
        let data = g.tape.value(m).data();
        let mut per_image = Vec::with_capacity(n);
        for (b, acc) in fused.iter_mut().enumerate() {
            let slice = &data[b * plane..(b + 1) * plane];
            for (a, v) in acc.iter_mut().zip(slice) {
                *a += v;
            }
            per_image.push(AnomalyMap::new(h, w, slice.to_vec())?);
        }
        layers.push(per_image);
    }
    let fused = fused
        .into_iter()
        .map(|v| AnomalyMap::new(h, w, v))
        .collect::<Result<_>>()?;
    if let Some(bad) = layers.iter().flatten().position(|m| m.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("anomaly map of layer {}", bad / n)));
    }
    Ok(MapSet { layers, fused })
}

/// Fused map of a single image `[C,H,W]` or `[1,C,H,W]`.
pub fn favae_map(model: &Model, x: &Tensor) -> Result<AnomalyMap> {
    let x = as_batch(x)?;
    Ok(favae_maps(model, &x)?.fused.remove(0))
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.ndim() {
        3 => {
            let mut d = vec![1];
            d.extend_from_slice(x.dims());
            x.reshape(&d)
        }
        4 => Ok(x.clone()),
        _ => Err(Error::Shape {
            op: "as_batch",
            detail: format!("expected [C,H,W] or [N,C,H,W], got {:?}", x.dims()),
        }),
    }
}

/// Decoded pixel means and per-channel standard deviations.
pub trait PixelModel {
    /// Decoded mean for each image of `x` (`[N,C,H,W]`) at the posterior mean.
    fn decoded_mean(&self, x: &Tensor) -> Result<Tensor>;
    /// Standard deviation `γ_c` per image channel.
    fn pixel_gamma(&self) -> Vec<f64>;
}

impl PixelModel for Model {
    fn decoded_mean(&self, x: &Tensor) -> Result<Tensor> {
        self.vae.reconstruct(x)
    }

    fn pixel_gamma(&self) -> Vec<f64> {
        self.vae.log_gamma(0).iter().map(|l| l.exp()).collect()
    }
}

impl PixelModel for AnalyticVae {
    fn decoded_mean(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims()[0];
        let per = x.len() / n.max(1);
        let mut out = Vec::with_capacity(x.len());
        for img in x.data().chunks(per) {
            out.extend(self.reconstruct(img)?);
        }
        Tensor::new(x.dims(), out)
    }

    fn pixel_gamma(&self) -> Vec<f64> {
        vec![self.sigma_n]
    }
}

/// `ln N(r; 0, γ²)`.
fn log_density(r: f64, gamma: f64) -> f64 {
    -HALF_LN_2PI - gamma.ln() - 0.5 * (r / gamma).powi(2)
}

/// Channel of flat index `i` in an `[N,C,H,W]` tensor.
fn channel_of(dims: &[usize], i: usize) -> usize {
    (i / (dims[2] * dims[3])) % dims[1]
}

/// `p(x_k | z) < T` per pixel, evaluated as a density.
pub fn classify_by_density(x: &Tensor, mean: &Tensor, gamma: &[f64], threshold: f64) -> Result<Vec<bool>> {
    check_classifier(x, mean, gamma, threshold)?;
    Ok(x.data()
        .iter()
        .zip(mean.data())
        .enumerate()
        .map(|(i, (&v, &m))| log_density(v - m, gamma[channel_of(x.dims(), i)]) < threshold.ln())
        .collect())
}

/// The same classifier as a squared-residual threshold:
/// `r² > −2γ²(ln T + ln γ + ½ln 2π)`.
pub fn classify_by_residual(x: &Tensor, mean: &Tensor, gamma: &[f64], threshold: f64) -> Result<Vec<bool>> {
    check_classifier(x, mean, gamma, threshold)?;
    let limits: Vec<f64> = gamma
        .iter()
        .map(|&g| 2.0 * (-HALF_LN_2PI - g.ln() - threshold.ln()))
        .collect();
    Ok(x.data()
        .iter()
        .zip(mean.data())
        .enumerate()
        .map(|(i, (&v, &m))| {
            let c = channel_of(x.dims(), i);
            ((v - m) / gamma[c]).powi(2) > limits[c]
        })
        .collect())
}

fn check_classifier(x: &Tensor, mean: &Tensor, gamma: &[f64], threshold: f64) -> Result<()> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("density threshold must be > 0, got {threshold}")));
    }
    let [_, c, _, _] = x.dims4("classic_pixel_classifier")?;
    if x.dims() != mean.dims() || gamma.len() != c {
        return Err(Error::Shape {
            op: "classic_pixel_classifier",
            detail: format!("x {:?}, mean {:?}, {} gammas", x.dims(), mean.dims(), gamma.len()),
        });
    }
    Ok(())
}

/// Flags every pixel whose decoded density falls below `threshold`.
pub fn classic_pixel_classifier(x: &Tensor, model: &dyn PixelModel, threshold: f64) -> Result<Vec<bool>> {
    let mean = model.decoded_mean(x)?;
    classify_by_density(x, &mean, &model.pixel_gamma(), threshold)
}

/// Largest per-pixel NLL `−ln p(x_k|z)` of each image (higher = more anomalous).
pub fn classic_pixel_max(x: &Tensor, model: &dyn PixelModel) -> Result<Vec<f64>> {
    let mean = model.decoded_mean(x)?;
    let gamma = model.pixel_gamma();
    let n = x.dims4("classic_pixel_max")?[0];
    let per = x.len() / n;
    Ok((0..n)
        .map(|b| {
            (b * per..(b + 1) * per)
                .map(|i| -log_density(x.data()[i] - mean.data()[i], gamma[channel_of(x.dims(), i)]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Typicality `−|mean_k ln N(x_k − μ_k; 0, γ²) + H|` per image, with the
/// entropy `H` of the per-pixel decoder Gaussian. Zero is maximally typical.
///
/// Sums run in sorted order, so the score depends only on the multiset of
/// (residual, channel) pairs.
pub fn typicality_scores(x: &Tensor, model: &dyn PixelModel) -> Result<Vec<f64>> {
    let mean = model.decoded_mean(x)?;
    let gamma = model.pixel_gamma();
    let [n, c, _, _] = x.dims4("typicality_score")?;
    if gamma.len() != c {
        return Err(Error::Shape {
            op: "typicality_score",
            detail: format!("{} gammas for {c} channels", gamma.len()),
        });
    }
    let per = x.len() / n;
    Ok((0..n)
        .map(|b| {
            let range = b * per..(b + 1) * per;
            let ll = sorted_sum(range.clone().map(|i| {
                log_density(x.data()[i] - mean.data()[i], gamma[channel_of(x.dims(), i)])
            }));
            let h = sorted_sum(range.map(|i| {
                0.5 + HALF_LN_2PI + gamma[channel_of(x.dims(), i)].ln()
            }));
            -((ll + h) / per as f64).abs()
        })
        .collect())
}

/// Typicality of a single image.
pub fn typicality_score(x: &[f64], model: &AnalyticVae) -> Result<f64> {
    let t = Tensor::new(&[1, 1, 1, x.len()], x.to_vec())?;
    Ok(typicality_scores(&t, model)?[0])
}

/// ELBO per image at the posterior mean: `−Σ_i NLL_i(x | μ_z) − KL`. Lower
/// means more anomalous.
pub fn elbo_scores(model: &Model, x: &Tensor) -> Result<Vec<f64>> {
    let n = x.dims4("elbo_score")?[0];
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let xb = x.sample(b);
        let mut g = Graph::frozen(model.params());
        let xv = g.tape.constant(xb);
        let pass = model.forward(&mut g, xv, Latent::Mean, None)?;
        let maps = layer_maps(&mut g, model, xv, &pass)?;
        let nll: f64 = maps.iter().map(|&m| g.tape.value(m).sum()).sum();
        let kl = gaussian_kl(&mut g.tape, pass.mu, pass.logvar)?;
        out.push(-nll - g.tape.value(kl).item());
    }
    Ok(out)
}

/// Closed-form ELBO of the analytic model (equal to its log-likelihood).
pub fn analytic_elbo_score(x: &[f64], model: &AnalyticVae) -> Result<f64> {
    model.elbo(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Favae,
    Loglik,
    Elbo,
    Typicality,
    ClassicPixelMax,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Favae,
        ScoreKind::Loglik,
        ScoreKind::Elbo,
        ScoreKind::Typicality,
        ScoreKind::ClassicPixelMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Favae => "favae",
            ScoreKind::Loglik => "loglik",
            ScoreKind::Elbo => "elbo",
            ScoreKind::Typicality => "typicality",
            ScoreKind::ClassicPixelMax => "classic-pixel-max",
        }
    }

    /// Whether a larger raw value means more anomalous.
    pub fn higher_is_anomalous(self) -> bool {
        matches!(self, ScoreKind::Favae | ScoreKind::ClassicPixelMax)
    }

    /// Raw score mapped so that larger means more anomalous.
    pub fn to_anomaly(self, raw: f64) -> f64 {
        if self.higher_is_anomalous() {
            raw
        } else {
            -raw
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub kind: ScoreKind,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, kind: ScoreKind, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("{kind} score")));
        }
        Ok(Self {
            id: id.into(),
            kind,
            score,
        })
    }

    pub fn anomaly_score(&self) -> f64 {
        self.kind.to_anomaly(self.score)
    }
}

/// CSV with columns `id,kind,score,anomaly_score`.
pub fn write_scores_csv<W: Write>(mut w: W, records: &[ScoreRecord]) -> Result<()> {
    writeln!(w, "id,kind,score,anomaly_score")?;
    for r in records {
        writeln!(w, "{},{},{:.12e},{:.12e}", r.id, r.kind, r.score, r.anomaly_score())?;
    }
    Ok(())
}
