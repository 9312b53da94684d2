//! Toy distributions: flat images with Gaussian pixel noise (normal),
//! horizontal sine stripes (anomalous), and their pixel-shuffled twins.
//!
//! The normal class is exactly representable by a one-dimensional VAE whose
//! decoder broadcasts `z` to every pixel, so likelihoods, posteriors and the
//! normal/anomaly log-likelihood ratio all have closed forms here.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub sigma_n: f64,
    pub sigma_a: f64,
    pub psi: f64,
    pub side: usize,
    /// Pixel noise added to anomalous samples.
    pub sigma_e: f64,
    pub seed: u64,
}

impl ToySpec {
    /// `sigma_n = 0.0285`, `sigma_a = 0.0570`, `psi = 5`, 128×128 images.
    ///
    /// Anomalies carry no pixel noise here (`sigma_e = 0`), as in the formal
    /// definition of the stripe class. The likelihood ratio needs
    /// `sigma_e > 0`; [`ToySpec::NOISY_SIGMA_E_RATIO`] gives the usual choice.
    pub fn paper() -> Self {
        Self {
            sigma_n: 0.0285,
            sigma_a: 0.0570,
            psi: 5.0,
            side: 128,
            sigma_e: 0.0,
            seed: 0,
        }
    }

    /// Anomaly pixel noise as a fraction of `sigma_n` for the noisy variant.
    pub const NOISY_SIGMA_E_RATIO: f64 = 0.5;

    /// Same spec with anomaly pixel noise `sigma_n/2`.
    pub fn noisy(self) -> Self {
        let se = self.sigma_n * Self::NOISY_SIGMA_E_RATIO;
        self.with_sigma_e(se)
    }

    pub fn with_side(mut self, side: usize) -> Self {
        self.side = side;
        self
    }

    pub fn with_sigma_e(mut self, sigma_e: f64) -> Self {
        self.sigma_e = sigma_e;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn d(&self) -> usize {
        self.side * self.side
    }

    /// Pixel variance of an anomalous sample around its offset `mu`, averaged
    /// over rows: `sigma_a²/2 + sigma_e²`.
    pub fn anomaly_pixel_variance(&self) -> f64 {
        0.5 * self.sigma_a * self.sigma_a + self.sigma_e * self.sigma_e
    }

    /// Checks parameter ranges and the stripe-variance condition, which
    /// compares a variance against `sigma_n` (not `sigma_n²`) as stated in
    /// the toy definition.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma_n >= 0.0 && self.sigma_a >= 0.0 && self.sigma_e >= 0.0) {
            return bad(format!(
                "noise scales must be non-negative (sigma_n={}, sigma_a={}, sigma_e={})",
                self.sigma_n, self.sigma_a, self.sigma_e
            ));
        }
        if !(self.psi >= 1.0) {
            return bad(format!("psi must be >= 1, got {}", self.psi));
        }
        if self.side == 0 {
            return bad("side must be positive".into());
        }
        if self.sigma_n > 0.0 && self.anomaly_pixel_variance() >= self.sigma_n {
            return bad(format!(
                "stripe variance {} is not below sigma_n {}",
                self.anomaly_pixel_variance(),
                self.sigma_n
            ));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Row phase `2π·psi·row/side` of the stripe pattern.
    pub fn row_phase(&self, row: usize) -> f64 {
        2.0 * PI * self.psi * row as f64 / self.side as f64
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

/// `n` normal samples, `[n,1,side,side]`: a N(0,1) offset plus N(0,sigma_n²) pixel noise.
pub fn sample_normal<R: Rng + ?Sized>(spec: &ToySpec, n: usize, rng: &mut R) -> Tensor {
    let d = spec.d();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mu = gauss(rng, 1.0);
        for _ in 0..d {
            data.push(mu + gauss(rng, spec.sigma_n));
        }
    }
    Tensor::new(&[n.max(1), 1, spec.side, spec.side], data).expect("n >= 1")
}

/// Parameters drawn for one anomalous sample.
#[derive(Clone, Copy, Debug)]
pub struct StripeDraw {
    pub mu: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl StripeDraw {
    pub fn sample<R: Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Self {
        Self {
            mu: gauss(rng, 1.0),
            amplitude: gauss(rng, spec.sigma_a),
            phase: rng.gen_range(0.0..2.0 * PI),
        }
    }

    /// Noise-free value of a pixel in `row`.
    pub fn value(&self, spec: &ToySpec, row: usize) -> f64 {
        self.mu + self.amplitude * (spec.row_phase(row) + self.phase).sin()
    }
}

/// `n` anomalous samples: offset + `G·sin(2π·psi·row/side + phi)` + N(0,sigma_e²) noise.
pub fn sample_anomaly<R: Rng + ?Sized>(spec: &ToySpec, n: usize, rng: &mut R) -> Tensor {
    let side = spec.side;
    let mut data = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        let draw = StripeDraw::sample(spec, rng);
        for row in 0..side {
            let v = draw.value(spec, row);
            for _ in 0..side {
                data.push(v + gauss(rng, spec.sigma_e));
            }
        }
    }
    Tensor::new(&[n.max(1), 1, side, side], data).expect("n >= 1")
}

/// `n` normal samples, each with one square stripe patch pasted in, plus
/// the patch masks (row-major).
///
/// The patch side is uniform in `[side/4, side/2]` and its position uniform.
/// Inside the patch the pixel noise is replaced by the stripe pattern of
/// [`sample_anomaly`] around the same offset.
pub fn sample_patched<R: Rng + ?Sized>(spec: &ToySpec, n: usize, rng: &mut R) -> (Tensor, Vec<Vec<bool>>) {
    let side = spec.side;
    let mut images = sample_normal(spec, n, rng);
    let mut masks = Vec::with_capacity(n);
    let plane = side * side;
    for img in images.data_mut().chunks_mut(plane) {
        let mu = img.iter().sum::<f64>() / plane as f64;
        let draw = StripeDraw {
            mu,
            ..StripeDraw::sample(spec, rng)
        };
        let p = rng.gen_range((side / 4).max(1)..=(side / 2).max(1));
        let (y0, x0) = (rng.gen_range(0..=side - p), rng.gen_range(0..=side - p));
        let mut mask = vec![false; plane];
        for row in y0..y0 + p {
            let v = draw.value(spec, row);
            for col in x0..x0 + p {
                img[row * side + col] = v + gauss(rng, spec.sigma_e);
                mask[row * side + col] = true;
            }
        }
        masks.push(mask);
    }
    (images, masks)
}

/// Independently permutes the pixels of every sample in the batch.
pub fn shuffle_pixels<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R) -> Tensor {
    let n = batch.dims()[0];
    let per = batch.len() / n;
    let mut out = batch.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        chunk.shuffle(rng);
    }
    out
}

/// Sum in ascending order, so that the result depends only on the multiset
/// of values (exact permutation invariance).
pub fn sorted_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `(Σx, Σx²)` with order-independent summation.
fn moments(x: &[f64]) -> (f64, f64) {
    (sorted_sum(x.iter().copied()), sorted_sum(x.iter().map(|v| v * v)))
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The optimal VAE for the normal class: decoder mean `z` on every pixel,
/// decoder std `sigma_n`, prior N(0,1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticVae {
    pub sigma_n: f64,
    pub d: usize,
}

impl AnalyticVae {
    pub fn new(spec: &ToySpec) -> Self {
        Self {
            sigma_n: spec.sigma_n,
            d: spec.d(),
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::Shape {
                op: "analytic vae",
                detail: format!("expected {} pixels, got {}", self.d, x.len()),
            });
        }
        Ok(())
    }

    /// Exact posterior `N(Σx/(σ²+d), σ²/(σ²+d))`.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check(x)?;
        let s2 = self.sigma_n * self.sigma_n;
        let denom = s2 + self.d as f64;
        let (sum, _) = moments(x);
        Ok((sum / denom, s2 / denom))
    }

    /// Marginal `log N(x; 0, σ²I + 11ᵀ)` via the determinant lemma and
    /// Sherman–Morrison.
    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let d = self.d as f64;
        let s2 = self.sigma_n * self.sigma_n;
        let (sum, sq) = moments(x);
        let logdet = d * s2.ln() + (1.0 + d / s2).ln();
        let quad = (sq - sum * sum / (s2 + d)) / s2;
        Ok(-0.5 * (d * LN_2PI + logdet + quad))
    }

    /// Closed-form ELBO with an arbitrary Gaussian posterior `N(m, v)`.
    pub fn elbo_with(&self, x: &[f64], m: f64, v: f64) -> Result<f64> {
        self.check(x)?;
        let d = self.d as f64;
        let s2 = self.sigma_n * self.sigma_n;
        let (sum, sq) = moments(x);
        let resid = sq - 2.0 * m * sum + d * m * m;
        let expected = -0.5 * d * (LN_2PI + s2.ln()) - (resid + d * v) / (2.0 * s2);
        let kl = 0.5 * (m * m + v - 1.0 - v.ln());
        Ok(expected - kl)
    }

    /// ELBO evaluated at the exact posterior (equals [`Self::loglik`]).
    pub fn elbo(&self, x: &[f64]) -> Result<f64> {
        let (m, v) = self.posterior(x)?;
        self.elbo_with(x, m, v)
    }

    /// Decoder mean at the posterior mean: a constant image.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, _) = self.posterior(x)?;
        Ok(vec![m; self.d])
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order.max(1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Per-sample sufficient statistics for the stripe likelihood.
struct StripeStats {
    d: f64,
    sq: f64,
    sum: f64,
    // Σ over pixels of sin θ, cos θ, sin², cos², sin·cos (θ = row phase)
    s: f64,
    c: f64,
    ss: f64,
    cc: f64,
    sc: f64,
    // Σ x·sin θ, Σ x·cos θ
    xs: f64,
    xc: f64,
}

impl StripeStats {
    fn new(spec: &ToySpec, x: &[f64]) -> Self {
        let side = spec.side;
        let w = side as f64;
        let (sum, sq) = moments(x);
        let mut st = Self {
            d: spec.d() as f64,
            sq,
            sum,
            s: 0.0,
            c: 0.0,
            ss: 0.0,
            cc: 0.0,
            sc: 0.0,
            xs: 0.0,
            xc: 0.0,
        };
        for row in 0..side {
            let (sn, cs) = spec.row_phase(row).sin_cos();
            let r = sorted_sum(x[row * side..(row + 1) * side].iter().copied());
            st.s += w * sn;
            st.c += w * cs;
            st.ss += w * sn * sn;
            st.cc += w * cs * cs;
            st.sc += w * sn * cs;
            st.xs += r * sn;
            st.xc += r * cs;
        }
        st
    }

    /// `log N(x; 0, σe²I + 11ᵀ + σa² s sᵀ)` for stripe phase `phi`.
    fn loglik(&self, phi: f64, sigma_a: f64, se2: f64) -> f64 {
        let (sp, cp) = phi.sin_cos();
        // s_φ = sinθ·cosφ + cosθ·sinφ
        let s1 = cp * self.s + sp * self.c;
        let s2 = cp * cp * self.ss + 2.0 * sp * cp * self.sc + sp * sp * self.cc;
        let xs = cp * self.xs + sp * self.xc;
        // M = σe² I₂ + UᵀU with U = [1, σa·s_φ]
        let m11 = se2 + self.d;
        let m12 = sigma_a * s1;
        let m22 = se2 + sigma_a * sigma_a * s2;
        let det = m11 * m22 - m12 * m12;
        let (b1, b2) = (self.sum, sigma_a * xs);
        let bmb = (m22 * b1 * b1 - 2.0 * m12 * b1 * b2 + m11 * b2 * b2) / det;
        let logdet = (self.d - 2.0) * se2.ln() + det.ln();
        let quad = (self.sq - bmb) / se2;
        -0.5 * (self.d * LN_2PI + logdet + quad)
    }
}

fn log_sum_exp(values: &[(f64, f64)]) -> f64 {
    // values: (log integrand, weight)
    let max = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|(l, w)| w * (l - max).exp()).sum::<f64>().ln()
}

/// Log density of the anomaly class, marginalized over the stripe phase by
/// composite Gauss–Legendre quadrature of the given order per panel.
///
/// The integrand has period π in the phase. Panels are placed around its
/// mode so that the sharp peak seen at large `d` is resolved.
pub fn anomaly_loglik(x: &[f64], spec: &ToySpec, order: usize) -> Result<f64> {
    if spec.sigma_e <= 0.0 {
        return Err(Error::DegenerateDensity);
    }
    if x.len() != spec.d() {
        return Err(Error::Shape {
            op: "anomaly_loglik",
            detail: format!("expected {} pixels, got {}", spec.d(), x.len()),
        });
    }
    let st = StripeStats::new(spec, x);
    let se2 = spec.sigma_e * spec.sigma_e;
    let f = |phi: f64| st.loglik(phi, spec.sigma_a, se2);

    // Coarse scan, then golden-section refinement of the mode.
    const GRID: usize = 4096;
    let h = PI / GRID as f64;
    let (mut best, mut best_val) = (0.0, f64::NEG_INFINITY);
    for i in 0..GRID {
        let phi = i as f64 * h;
        let v = f(phi);
        if v > best_val {
            best = phi;
            best_val = v;
        }
    }
    let (mut a, mut b) = (best - h, best + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if f(c) > f(e) {
            b = e;
        } else {
            a = c;
        }
    }
    let mode = 0.5 * (a + b);

    // Peak width from the curvature at the mode.
    let eps = 1e-4;
    let curv = -(f(mode + eps) - 2.0 * f(mode) + f(mode - eps)) / (eps * eps);
    let half = if curv > 0.0 {
        (12.0 / curv.sqrt()).min(PI / 2.0)
    } else {
        PI / 2.0
    };

    let (nodes, weights) = gauss_legendre(order);
    let mut terms = Vec::with_capacity(order * 6);
    let mut panel = |lo: f64, hi: f64| {
        let (mid, rad) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (t, w) in nodes.iter().zip(&weights) {
            terms.push((f(mid + rad * t), w * rad));
        }
    };
    panel(mode - half, mode + half);
    let rest = PI - 2.0 * half;
    if rest > 1e-12 {
        const PANELS: usize = 4;
        let step = rest / PANELS as f64;
        for k in 0..PANELS {
            let lo = mode + half + k as f64 * step;
            panel(lo, lo + step);
        }
    }
    // Average over one period.
    Ok(log_sum_exp(&terms) - PI.ln())
}

/// Exact log-likelihood ratio `log q_a(x) − log q_n(x)` of the two toy
/// classes (class priors omitted).
pub fn toy_optimal_llr(x: &[f64], spec: &ToySpec, order: usize) -> Result<f64> {
    let qa = anomaly_loglik(x, spec, order)?;
    let qn = AnalyticVae::new(spec).loglik(x)?;
    Ok(qa - qn)
}

/// Default quadrature order for [`toy_optimal_llr`].
pub const LLR_ORDER: usize = 64;
