#![allow(dead_code)]

pub mod gradsuite;

use favae::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest norm-wise relative error between the tape gradient and a central
/// finite difference, over all `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// `Σ w ⊙ x` with a fixed weight tensor, so upstream gradients are not uniform.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w).expect("weights match output dims");
    tape.sum(p)
}

/// `log N(x; 0, cov)` with a dense Cholesky factorization.
pub fn dense_gaussian_logpdf(x: &[f64], cov: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (cov[i][i] - s).sqrt();
            } else {
                l[i][j] = (cov[i][j] - s) / l[j][j];
            }
        }
    }
    // forward solve L y = x
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (x[i] - s) / l[i][i];
    }
    let logdet: f64 = 2.0 * (0..n).map(|i| l[i][i].ln()).sum::<f64>();
    let quad: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Brute-force AUROC: fraction of (pos, neg) pairs ordered correctly, ties 1/2.
pub fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Total FAVAE loss of `model` on `x` with latent noise `eps`, BN in batch mode.
pub fn favae_loss_value(model: &favae::Model, x: &Tensor, eps: &Tensor) -> f64 {
    let mut g = favae::nn::Graph::new(model.params(), true);
    let xv = g.tape.constant(x.clone());
    let loss = favae::train::favae_loss(&mut g, model, xv, eps).expect("loss");
    g.tape.value(loss.total).item()
}

/// Worst relative error between the tape's directional derivative of the
/// FAVAE loss and a central difference, one random unit direction per
/// trainable parameter tensor.
///
/// The denominator is floored at the finite difference's own rounding noise
/// (scaled by the 1e-3 tolerance), so parameters whose true gradient is zero,
/// such as biases in front of batch norm, do not report spurious errors.
pub fn favae_loss_gradcheck(model: &favae::Model, x: &Tensor, eps: &Tensor, seed: u64, step: f64) -> f64 {
    let (grads, loss) = {
        let mut g = favae::nn::Graph::new(model.params(), true);
        let xv = g.tape.constant(x.clone());
        let loss = favae::train::favae_loss(&mut g, model, xv, eps).expect("loss");
        let value = g.tape.value(loss.total).item();
        let grads = g.tape.backward(loss.total).expect("scalar");
        (g.param_grads(&grads), value)
    };
    assert!(!grads.is_empty(), "no trainable parameters");
    let noise = 64.0 * f64::EPSILON * loss.abs().max(1.0) / step;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (id, grad) in grads {
        let mut dir = Tensor::randn(grad.dims(), &mut r);
        let norm = dir.dot(&dir).sqrt();
        dir = dir.map(|v| v / norm);
        let analytic = grad.dot(&dir);
        let shifted = |sign: f64| {
            let mut m = model.clone();
            let p = &mut m.params_mut().get_mut(id).value;
            for (w, d) in p.data_mut().iter_mut().zip(dir.data()) {
                *w += sign * step * d;
            }
            favae_loss_value(&m, x, eps)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
        let scale = analytic.abs().max(numeric.abs()).max(noise * 1e3);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}
