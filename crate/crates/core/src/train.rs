//! Training objective, optimizer, training loop and gradient-corrected
//! reconstruction.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Latent, Model, Pass};
use crate::nn::{apply_stat_updates, Graph, ParamId, ParamSet, BN_MOMENTUM};
use crate::tensor::{Tape, Tensor, Var};
use crate::toy::{sample_normal, ToySpec};

/// `Σ 0.5(μ² + σ² − 1 − ln σ²)` over every entry, with `σ² = exp(logvar)`.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let s = tape.sum(s);
    Ok(tape.scale(s, 0.5))
}

/// Channel-summed Gaussian NLL map `[N,1,h,w]` of `y` under mean `mu` and
/// per-channel `log_gamma`, and its total.
pub fn layer_recon_nll(tape: &mut Tape, y: Var, mu: Var, log_gamma: Var) -> Result<(Var, Var)> {
    let map = tape.gaussian_nll(y, mu, log_gamma)?;
    let total = tape.sum(map);
    Ok((map, total))
}

/// Per-layer NLL maps of a forward pass, each upsampled to input resolution
/// (`[N,1,H,W]`). Index 0 is pixel space.
///
/// An adapter output whose resolution differs from its target is resized to
/// the target first.
pub fn layer_maps(g: &mut Graph<'_>, model: &Model, x: Var, pass: &Pass) -> Result<Vec<Var>> {
    let [_, _, h, w] = g.tape.value(x).dims4("layer_maps")?;
    let feats = &pass.decoded.features;
    if feats.len() != pass.targets.len() || feats.len() + 1 != model.vae.log_gammas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} adapter outputs for {} extractor taps",
            feats.len(),
            pass.targets.len()
        )));
    }
    let lg = g.param(model.vae.log_gammas[0]);
    let (pixel, _) = layer_recon_nll(&mut g.tape, x, pass.decoded.mean, lg)?;
    let mut maps = vec![pixel];
    for (i, (&pred, &target)) in feats.iter().zip(&pass.targets).enumerate() {
        let [_, pc, ph, pw] = g.tape.value(pred).dims4("layer_maps")?;
        let [_, tc, th, tw] = g.tape.value(target).dims4("layer_maps")?;
        if pc != tc {
            return Err(Error::Shape {
                op: "layer_maps",
                detail: format!("adapter {i} emits {pc} channels, tap has {tc}"),
            });
        }
        let pred = if (ph, pw) != (th, tw) {
            g.tape.bilinear_resize(pred, th, tw)?
        } else {
            pred
        };
        let lg = g.param(model.vae.log_gammas[i + 1]);
        let (map, _) = layer_recon_nll(&mut g.tape, target, pred, lg)?;
        let map = if (th, tw) != (h, w) {
            g.tape.bilinear_upsample(map, h, w)?
        } else {
            map
        };
        maps.push(map);
    }
    Ok(maps)
}

/// Per-term values of one loss evaluation, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Reconstruction NLL per space: pixels first, then each tap.
    pub recon: Vec<f64>,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.recon.len()).map(|i| format!("recon_{i}")).collect();
        names.push("kl".into());
        names.push("total".into());
        names
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = self.recon.clone();
        v.push(self.kl);
        v.push(self.total);
        v
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.term_names()
            .into_iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Loss terms on the tape.
pub struct Loss {
    pub recon: Vec<Var>,
    pub kl: Var,
    pub total: Var,
}

impl Loss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            recon: self.recon.iter().map(|&v| tape.value(v).item()).collect(),
            kl: tape.value(self.kl).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// FAVAE objective: summed upsampled NLL maps of every space plus KL, with
/// one reparameterized latent draw per image (`eps`, `[N,l,1,1]`), averaged
/// over the batch. Without taps this is the plain VAE loss.
pub fn favae_loss(g: &mut Graph<'_>, model: &Model, x: Var, eps: &Tensor) -> Result<Loss> {
    let n = g.tape.value(x).dims4("favae_loss")?[0] as f64;
    let pass = model.forward(g, x, Latent::Sample, Some(eps))?;
    let maps = layer_maps(g, model, x, &pass)?;
    let recon: Vec<Var> = maps
        .into_iter()
        .map(|m| {
            let s = g.tape.sum(m);
            g.tape.scale(s, 1.0 / n)
        })
        .collect();
    let kl = gaussian_kl(&mut g.tape, pass.mu, pass.logvar)?;
    let kl = g.tape.scale(kl, 1.0 / n);
    let mut total = recon[0];
    for &r in &recon[1..] {
        total = g.tape.add(total, r)?;
    }
    let total = g.tape.add(total, kl)?;
    Ok(Loss { recon, kl, total })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to every learning rate (for schedules).
    pub lr_scale: f64,
    t: i32,
    overrides: Vec<(ParamId, f64)>,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_scale: 1.0,
            t: 0,
            overrides: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Uses learning rate `lr` for the given parameters instead of the default.
    pub fn with_lr_for(mut self, ids: impl IntoIterator<Item = ParamId>, lr: f64) -> Self {
        self.overrides.extend(ids.into_iter().map(|id| (id, lr)));
        self
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Tensor)]) {
        self.t += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let lr = self.overrides.iter().find(|o| o.0 == *id).map_or(self.lr, |o| o.1) * self.lr_scale;
            let p = params.get_mut(*id);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the decoder log-variances; `None` uses `lr`.
    pub gamma_lr: Option<f64>,
    /// Cosine-anneal every learning rate to this fraction of its start
    /// value by the last step; `None` keeps them constant.
    pub final_lr_fraction: Option<f64>,
    /// Images drawn per epoch.
    pub epoch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            gamma_lr: None,
            final_lr_fraction: None,
            epoch_size: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.epoch_size == 0 {
            return Err(Error::Config("epochs, batch_size and epoch_size must be positive".into()));
        }
        for lr in [self.lr].into_iter().chain(self.gamma_lr).chain(self.final_lr_fraction) {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("learning rate {lr} is invalid")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_size.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }
}

/// Supplies training batches of normal images.
pub trait BatchSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Fresh toy normal samples for every batch.
#[derive(Clone, Debug)]
pub struct ToyNormalSource(pub ToySpec);

impl BatchSource for ToyNormalSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(sample_normal(&self.0, n, rng))
    }
}

/// A fixed set of images `[N,C,H,W]`, cycled in a seeded shuffled order.
#[derive(Clone, Debug)]
pub struct FixedSet {
    images: Tensor,
    order: Vec<usize>,
    cursor: usize,
}

impl FixedSet {
    pub fn new(images: Tensor) -> Result<Self> {
        let n = images.dims4("FixedSet")?[0];
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        Ok(Self {
            images,
            order: Vec::new(),
            cursor: 0,
        })
    }
}

impl BatchSource for FixedSet {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        use rand::seq::SliceRandom;
        let [total, c, h, w] = self.images.dims4("FixedSet")?;
        let plane = c * h * w;
        let mut data = Vec::with_capacity(n * plane);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order = (0..total).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    /// CSV with columns `step,epoch,recon_0..,kl,total`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some(first) = self.rows.first() {
            writeln!(w, "step,epoch,{}", first.loss.term_names().join(","))?;
        } else {
            writeln!(w, "step,epoch")?;
        }
        for r in &self.rows {
            let vals: Vec<String> = r.loss.values().iter().map(|v| format!("{v:.10e}")).collect();
            writeln!(w, "{},{},{}", r.step, r.epoch, vals.join(","))?;
        }
        Ok(())
    }

    /// Mean total loss over the first and last `k` rows.
    pub fn head_tail_means(&self, k: usize) -> Option<(f64, f64)> {
        let k = k.min(self.rows.len());
        if k == 0 {
            return None;
        }
        let mean = |rows: &[HistoryRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..k]), mean(&self.rows[self.rows.len() - k..])))
    }
}

/// One optimizer step on batch `x`; returns the loss before the update.
pub fn train_step(model: &mut Model, opt: &mut Adam, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
    let n = x.dims4("train_step")?[0];
    let eps = Tensor::randn(&[n, model.spec().latent_dim, 1, 1], rng);
    let (breakdown, grads, stats) = {
        let mut g = Graph::new(model.params(), true);
        let xv = g.tape.constant(x.clone());
        let loss = favae_loss(&mut g, model, xv, &eps)?;
        let breakdown = loss.breakdown(&g.tape);
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFinite(format!("loss term {term}")));
        }
        let grads = g.tape.backward(loss.total)?;
        (breakdown, g.param_grads(&grads), g.stat_updates().to_vec())
    };
    if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", model.params().get(*id).name)));
    }
    opt.step(model.params_mut(), &grads);
    apply_stat_updates(model.params_mut(), &stats, BN_MOMENTUM);
    Ok(breakdown)
}

/// Trains `model` on batches from `source`. `on_step` sees every history row
/// as it is produced.
pub fn train(
    model: &mut Model,
    source: &mut dyn BatchSource,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<History> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr).with_lr_for(
        model.vae.log_gammas.clone(),
        cfg.gamma_lr.unwrap_or(cfg.lr),
    );
    let mut history = History::default();
    let per_epoch = cfg.steps_per_epoch();
    for step in 0..cfg.total_steps() {
        let epoch = step / per_epoch;
        let in_epoch = step % per_epoch;
        let n = cfg.batch_size.min(cfg.epoch_size - in_epoch * cfg.batch_size);
        let x = source.next_batch(n, &mut rng)?;
        if let Some(f) = cfg.final_lr_fraction {
            let t = step as f64 / (cfg.total_steps().max(2) - 1) as f64;
            opt.lr_scale = f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        }
        let loss = train_step(model, &mut opt, &x, &mut rng)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("step {step}: {what}")),
                other => other,
            })?;
        let row = HistoryRow { step, epoch, loss };
        on_step(&row);
        history.rows.push(row);
    }
    Ok(history)
}

/// Reconstruction loss `L_r(x)`: the sum of every space's NLL map at the
/// posterior-mean latent, per image, summed over the batch.
pub fn recon_objective(g: &mut Graph<'_>, model: &Model, x: Var) -> Result<Var> {
    let pass = model.forward(g, x, Latent::Mean, None)?;
    let maps = layer_maps(g, model, x, &pass)?;
    let mut total = g.tape.sum(maps[0]);
    for &m in &maps[1..] {
        let s = g.tape.sum(m);
        total = g.tape.add(total, s)?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct Correction {
    pub image: Tensor,
    /// Objective `L_r(x_t) + λ‖x_t − x‖₁` before each step and after the last.
    pub trace: Vec<f64>,
}

/// Gradient descent on `L_r(x_t) + λ‖x_t − x‖₁` from `x_t = x`.
pub fn correct(x: &Tensor, model: &Model, lambda: f64, steps: usize, step_size: f64) -> Result<Correction> {
    if !(lambda >= 0.0 && step_size.is_finite() && step_size >= 0.0) {
        return Err(Error::InvalidArgument("lambda and step_size must be non-negative".into()));
    }
    let objective = |xt: &Tensor, with_grad: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::frozen(model.params());
        let v = if with_grad {
            g.tape.leaf(xt.clone())
        } else {
            g.tape.constant(xt.clone())
        };
        let anchor = g.tape.constant(x.clone());
        let lr = recon_objective(&mut g, model, v)?;
        let diff = g.tape.sub(v, anchor)?;
        let l1 = g.tape.abs(diff);
        let l1 = g.tape.sum(l1);
        let l1 = g.tape.scale(l1, lambda);
        let total = g.tape.add(lr, l1)?;
        let value = g.tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("correction objective".into()));
        }
        let grad = if with_grad {
            let grads = g.tape.backward(total)?;
            Some(grads.wrt(&g.tape, v))
        } else {
            None
        };
        Ok((value, grad))
    };
    let mut xt = x.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (value, grad) = objective(&xt, true)?;
        trace.push(value);
        let grad = grad.expect("requested");
        for (p, gv) in xt.data_mut().iter_mut().zip(grad.data()) {
            *p -= step_size * gv;
        }
    }
    trace.push(objective(&xt, false)?.0);
    Ok(Correction { image: xt, trace })
}
