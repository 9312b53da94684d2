mod common;

use common::{favae_loss_gradcheck, favae_loss_value, rng};
use favae::extractor::Mode;
use favae::nn::{Graph, ModelSpec, OutputActivation};
use favae::tensor::{Tape, Tensor};
use favae::toy::{sample_anomaly, sample_normal, ToySpec};
use favae::train::{
    correct, favae_loss, gaussian_kl, layer_recon_nll, recon_objective, train, FixedSet, History, HistoryRow,
    LossBreakdown, ToyNormalSource, TrainConfig,
};
use favae::{Error, Model};
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    let mut t = Tape::new();
    let m = t.constant(Tensor::new(&[1, mu.len(), 1, 1], mu.to_vec()).unwrap());
    let l = t.constant(Tensor::new(&[1, logvar.len(), 1, 1], logvar.to_vec()).unwrap());
    let kl = gaussian_kl(&mut t, m, l).unwrap();
    t.value(kl).item()
}

fn nll_total(y: &Tensor, mu: &Tensor, log_gamma: &[f64]) -> f64 {
    let mut t = Tape::new();
    let yv = t.constant(y.clone());
    let mv = t.constant(mu.clone());
    let lg = t.constant(Tensor::new(&[log_gamma.len()], log_gamma.to_vec()).unwrap());
    let (_, total) = layer_recon_nll(&mut t, yv, mv, lg).unwrap();
    t.value(total).item()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(kl_value(&[0.0; 5], &[0.0; 5]), 0.0);
    assert!(close(kl_value(&[1.0, 0.0], &[0.0, 0.0]), 0.5, 1e-15));
    let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
    assert!(close(kl_value(&[0.0], &[4f64.ln()]), expected, 1e-14));
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(3);
    let mu = [0.7, -1.2, 0.1];
    let logvar: [f64; 3] = [-0.5, 0.4, 0.0];
    let n = 200_000;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = 0.0;
        for (m, lv) in mu.iter().zip(&logvar) {
            let e: f64 = StandardNormal.sample(&mut r);
            let sd = (0.5 * lv).exp();
            let z = m + sd * e;
            // ln q(z) − ln p(z)
            s += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        vals.push(s);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let exact = kl_value(&mu, &logvar);
    assert!((mean - exact).abs() < 4.0 * se, "mc {mean} exact {exact} se {se}");
}

#[test]
fn nll_at_perfect_reconstruction_is_half_ln_2pi_per_entry() {
    let mut r = rng(1);
    let y = Tensor::randn(&[2, 3, 4, 5], &mut r);
    let total = nll_total(&y, &y, &[0.0; 3]);
    assert!(close(total, 0.5 * LN_2PI * y.len() as f64, 1e-13));
}

#[test]
fn nll_with_residual_equal_to_gamma() {
    let g: f64 = 0.3;
    let y = Tensor::full(&[1, 1, 2, 2], g);
    let mu = Tensor::zeros(&[1, 1, 2, 2]);
    let per = 0.5 * (2.0 * std::f64::consts::PI * g * g).ln() + 0.5;
    assert!(close(nll_total(&y, &mu, &[g.ln()]), 4.0 * per, 1e-13));
}

#[test]
fn doubling_gamma_shifts_each_entry_by_closed_form() {
    let mut r = rng(2);
    let y = Tensor::randn(&[1, 2, 3, 3], &mut r);
    let mu = Tensor::randn(&[1, 2, 3, 3], &mut r);
    let lg = [-0.3, 0.2];
    let doubled: Vec<f64> = lg.iter().map(|l| l + 2f64.ln()).collect();
    let mut expected = 0.0;
    for (i, (a, b)) in y.data().iter().zip(mu.data()).enumerate() {
        let gamma = lg[i / 9].exp();
        expected += 2f64.ln() - 3.0 * (a - b).powi(2) / (8.0 * gamma * gamma);
    }
    let diff = nll_total(&y, &mu, &doubled) - nll_total(&y, &mu, &lg);
    assert!(close(diff, expected, 1e-12), "{diff} vs {expected}");
}

#[test]
fn optimal_gamma_is_rms_residual_per_channel() {
    let mut r = rng(4);
    let y = Tensor::randn(&[3, 2, 4, 4], &mut r);
    let mu = y.map(|v| 0.5 * v);
    let mut lg = Vec::new();
    for c in 0..2 {
        let mut ss = 0.0;
        let mut k = 0.0;
        for (i, (a, b)) in y.data().iter().zip(mu.data()).enumerate() {
            if (i / 16) % 2 == c {
                ss += (a - b).powi(2);
                k += 1.0;
            }
        }
        lg.push(0.5 * (ss / k).ln());
    }
    let mut t = Tape::new();
    let yv = t.constant(y.clone());
    let mv = t.constant(mu.clone());
    let lv = t.leaf(Tensor::new(&[2], lg.clone()).unwrap());
    let (_, total) = layer_recon_nll(&mut t, yv, mv, lv).unwrap();
    let grad = t.backward(total).unwrap().wrt(&t, lv);
    assert!(grad.data().iter().all(|g| g.abs() < 1e-10), "{:?}", grad.data());
    let at = nll_total(&y, &mu, &lg);
    for d in [-0.1, 0.1] {
        let moved: Vec<f64> = lg.iter().map(|l| l + d).collect();
        assert!(nll_total(&y, &mu, &moved) > at);
    }
}

fn small_spec(bn: bool) -> ModelSpec {
    ModelSpec::desk(1, 16, 3).with_output(OutputActivation::Identity).with_batch_norm(bn)
}

/// Plain VAE objective from tensors alone: Gaussian NLL summed over pixels
/// plus KL, batch-averaged.
fn vanilla_elbo_oracle(model: &Model, x: &Tensor, eps: &Tensor) -> f64 {
    let n = x.dims()[0];
    let (mu, logvar) = {
        let mut g = Graph::new(model.params(), true);
        let xv = g.tape.constant(x.clone());
        let enc = model.vae.encode(&mut g, xv, &[]).unwrap();
        (g.tape.value(enc.mu).clone(), g.tape.value(enc.logvar).clone())
    };
    let z: Vec<f64> = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let mean = {
        let mut g = Graph::new(model.params(), true);
        let zv = g.tape.constant(Tensor::new(mu.dims(), z).unwrap());
        let dec = model.vae.decode(&mut g, zv).unwrap();
        g.tape.value(dec.mean).clone()
    };
    let lg = model.vae.log_gamma(0)[0];
    let mut nll = 0.0;
    for (a, b) in x.data().iter().zip(mean.data()) {
        let r = (a - b) / lg.exp();
        nll += 0.5 * LN_2PI + lg + 0.5 * r * r;
    }
    let mut kl = 0.0;
    for (m, lv) in mu.data().iter().zip(logvar.data()) {
        kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    (nll + kl) / n as f64
}

#[test]
fn without_taps_the_loss_is_the_plain_vae_objective() {
    for (bn, seed) in [(true, 0), (false, 1)] {
        let mut model = Model::for_mode(small_spec(bn), Mode::Vanilla, seed).unwrap();
        let lg = model.vae.log_gammas[0];
        model.params_mut().get_mut(lg).value = Tensor::new(&[1], vec![-0.7]).unwrap();
        let mut r = rng(seed + 10);
        let x = Tensor::randn(&[3, 1, 16, 16], &mut r);
        let eps = Tensor::randn(&[3, 3, 1, 1], &mut r);
        let got = favae_loss_value(&model, &x, &eps);
        let want = vanilla_elbo_oracle(&model, &x, &eps);
        assert!(close(got, want, 1e-10), "{got} vs {want}");
    }
}

#[test]
fn loss_terms_add_up() {
    let model = Model::for_mode(small_spec(true), Mode::RandomFrozen, 5).unwrap();
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 1, 16, 16], &mut r);
    let eps = Tensor::randn(&[2, 3, 1, 1], &mut r);
    let mut g = Graph::new(model.params(), true);
    let xv = g.tape.constant(x);
    let b = favae_loss(&mut g, &model, xv, &eps).unwrap().breakdown(&g.tape);
    assert_eq!(b.recon.len(), 4);
    let sum: f64 = b.recon.iter().sum::<f64>() + b.kl;
    assert!(close(b.total, sum, 1e-12));
    assert_eq!(b.term_names(), ["recon_0", "recon_1", "recon_2", "recon_3", "kl", "total"]);
}

#[test]
fn favae_loss_gradient_matches_finite_differences() {
    for (i, mode) in [Mode::RandomFrozen, Mode::EncoderNostop, Mode::Vanilla].into_iter().enumerate() {
        let model = Model::for_mode(small_spec(true), mode, 20 + i as u64).unwrap();
        let mut r = rng(30 + i as u64);
        let x = Tensor::randn(&[2, 1, 16, 16], &mut r).map(|v| 0.5 + 0.2 * v);
        let eps = Tensor::randn(&[2, 3, 1, 1], &mut r);
        let err = favae_loss_gradcheck(&model, &x, &eps, 40 + i as u64, 1e-6);
        assert!(err < 1e-3, "{mode:?}: relative error {err:e}");
    }
}

fn toy_cfg(steps: usize, batch: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: batch,
        lr,
        gamma_lr: None,
        final_lr_fraction: None,
        epoch_size: steps * batch,
        seed: 0,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut model = Model::for_mode(small_spec(false), Mode::RandomFrozen, 1).unwrap();
    let before = model.params().named_tensors();
    let toy = ToySpec::paper().with_side(16);
    train(&mut model, &mut ToyNormalSource(toy), &toy_cfg(3, 4, 0.0), |_| {}).unwrap();
    assert_eq!(model.params().named_tensors(), before);
}

#[test]
fn training_lowers_the_loss() {
    let spec = ModelSpec::desk(1, 32, 4).with_output(OutputActivation::Identity);
    let mut model = Model::for_mode(spec, Mode::RandomFrozen, 2).unwrap();
    let toy = ToySpec::paper().with_side(32);
    let mut steps = 0;
    let h = train(&mut model, &mut ToyNormalSource(toy), &toy_cfg(200, 8, 1e-3), |row| {
        assert_eq!(row.step, steps);
        steps += 1;
    })
    .unwrap();
    assert_eq!(h.rows.len(), 200);
    let (head, tail) = h.head_tail_means(20).unwrap();
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn non_finite_loss_aborts_with_the_term_name() {
    let mut model = Model::for_mode(small_spec(false), Mode::Vanilla, 3).unwrap();
    let lg = model.vae.log_gammas[0];
    model.params_mut().get_mut(lg).value = Tensor::new(&[1], vec![f64::NAN]).unwrap();
    let toy = ToySpec::paper().with_side(16);
    let err = train(&mut model, &mut ToyNormalSource(toy), &toy_cfg(2, 2, 1e-3), |_| {}).unwrap_err();
    match err {
        Error::NonFinite(what) => assert!(what.contains("step 0") && what.contains("recon_0"), "{what}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn config_validation_and_step_counts() {
    let cfg = TrainConfig {
        epoch_size: 100,
        batch_size: 16,
        epochs: 3,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.steps_per_epoch(), 7);
    assert_eq!(cfg.total_steps(), 21);
    assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..cfg.clone() }.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "learning_rate": 1}"#).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
    assert_eq!(parsed.epochs, 2);
    assert_eq!(parsed.batch_size, TrainConfig::default().batch_size);
}

#[test]
fn fixed_set_visits_every_image_once_per_pass() {
    let images = Tensor::from_fn(&[5, 1, 1, 1], |i| i as f64);
    let mut set = FixedSet::new(images).unwrap();
    let mut r = rng(0);
    use favae::train::BatchSource;
    let a = set.next_batch(5, &mut r).unwrap();
    let mut seen: Vec<f64> = a.data().to_vec();
    seen.sort_by(f64::total_cmp);
    assert_eq!(seen, [0.0, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(set.next_batch(3, &mut r).unwrap().dims(), [3, 1, 1, 1]);
}

#[test]
fn history_csv_has_named_columns() {
    let h = History {
        rows: vec![HistoryRow {
            step: 0,
            epoch: 0,
            loss: LossBreakdown {
                recon: vec![1.0, 2.0],
                kl: 0.5,
                total: 3.5,
            },
        }],
    };
    let mut out = Vec::new();
    h.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,epoch,recon_0,recon_1,kl,total"));
    assert!(lines.next().unwrap().starts_with("0,0,1.0"));
}

fn l_r(model: &Model, x: &Tensor) -> f64 {
    let mut g = Graph::frozen(model.params());
    let xv = g.tape.constant(x.clone());
    let v = recon_objective(&mut g, model, xv).unwrap();
    g.tape.value(v).item()
}

#[test]
fn correction_limits() {
    let model = Model::for_mode(small_spec(false), Mode::RandomFrozen, 4).unwrap();
    let toy = ToySpec::paper().with_side(16);
    let x = sample_anomaly(&toy, 1, &mut rng(1));

    let none = correct(&x, &model, 1.0, 0, 0.1).unwrap();
    assert_eq!(none.image, x);
    assert_eq!(none.trace.len(), 1);

    let pinned = correct(&x, &model, 1e6, 5, 1e-10).unwrap();
    assert!(pinned.image.max_abs_diff(&x) < 1e-3);

    let free = correct(&x, &model, 0.0, 20, 1e-3).unwrap();
    assert_eq!(free.trace.len(), 21);
    assert!(l_r(&model, &free.image) < l_r(&model, &x));
    assert!(correct(&x, &model, -1.0, 1, 0.1).is_err());
}

#[test]
fn correction_objective_trace_starts_at_the_input_loss() {
    let model = Model::for_mode(small_spec(false), Mode::Vanilla, 6).unwrap();
    let toy = ToySpec::paper().with_side(16);
    let x = sample_normal(&toy, 1, &mut rng(2));
    let c = correct(&x, &model, 0.5, 3, 1e-3).unwrap();
    assert!(close(c.trace[0], l_r(&model, &x), 1e-12));
}
