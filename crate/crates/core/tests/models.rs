mod common;

use common::rng;
use favae::extractor::Mode;
use favae::nn::{weights, AdapterSpec, Graph, ModelSpec, OutputActivation, Vae};
use favae::Model;
use favae::tensor::Tensor;
use proptest::prelude::*;

fn encoder_len(spec: &ModelSpec, x: &Tensor) -> usize {
    let vae = Vae::new(spec.clone(), &[], 1).unwrap();
    let mut g = Graph::frozen(&vae.params);
    let xv = g.tape.constant(x.clone());
    let (h, _) = vae.encoder.forward(&mut g, xv, &[]).unwrap();
    let dims = g.tape.value(h).dims().to_vec();
    assert_eq!(&dims[2..], &[1, 1]);
    dims[1]
}

#[test]
fn full_size_encoder_emits_200() {
    let spec = ModelSpec::paper();
    let x = Tensor::uniform(&[1, 3, 128, 128], 0.0, 1.0, &mut rng(0));
    assert_eq!(encoder_len(&spec, &x), 200);
}

#[test]
fn desk_encoder_emits_twice_latent() {
    let spec = ModelSpec::desk(1, 64, 16);
    let x = Tensor::randn(&[2, 1, 64, 64], &mut rng(1));
    assert_eq!(encoder_len(&spec, &x), 32);
}

#[test]
fn decoder_of_zero_latent_is_image_in_unit_interval() {
    let vae = Vae::new(ModelSpec::paper(), &[], 3).unwrap();
    let mut g = Graph::frozen(&vae.params);
    let z = g.tape.constant(Tensor::zeros(&[1, 100, 1, 1]));
    let out = vae.decode(&mut g, z).unwrap();
    let y = g.tape.value(out.mean);
    assert_eq!(y.dims(), &[1, 3, 128, 128]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn indivisible_input_is_rejected() {
    let mut spec = ModelSpec::desk(1, 64, 8);
    spec.height = 40;
    let err = Vae::new(spec, &[], 0).unwrap_err().to_string();
    assert!(err.contains("multiple of 16"), "{err}");
}

#[test]
fn constant_decoder_gives_constant_reconstruction() {
    let mut vae = Vae::new(ModelSpec::desk(1, 32, 4), &[], 5).unwrap();
    let w = vae.params.id("decoder.25.weight").unwrap();
    let b = vae.params.id("decoder.25.bias").unwrap();
    let dims = vae.params.value(w).dims().to_vec();
    vae.params.get_mut(w).value = Tensor::zeros(&dims);
    vae.params.get_mut(b).value = Tensor::full(&[1], 0.7);
    let c = 1.0 / (1.0 + (-0.7f64).exp());
    for seed in 0..3 {
        let x = Tensor::randn(&[2, 1, 32, 32], &mut rng(seed));
        let r = vae.reconstruct(&x).unwrap();
        assert_eq!(r.dims(), x.dims());
        assert!(r.data().iter().all(|&v| (v - c).abs() < 1e-15));
    }
}

#[test]
fn adapters_keep_spatial_dims_and_all_params_get_gradient() {
    let spec = ModelSpec::desk(1, 32, 4).with_output(OutputActivation::Identity);
    let adapters = [
        AdapterSpec { decoder_layer: 22, feature_channels: 5 },
        AdapterSpec { decoder_layer: 16, feature_channels: 6 },
        AdapterSpec { decoder_layer: 10, feature_channels: 7 },
    ];
    let vae = Vae::new(spec, &adapters, 11).unwrap();
    let mut g = Graph::new(&vae.params, true);
    let x = g.tape.constant(Tensor::randn(&[3, 1, 32, 32], &mut rng(2)));
    let enc = vae.encode(&mut g, x, &[]).unwrap();
    let dec = vae.decode(&mut g, enc.mu).unwrap();
    let (_, hidden) = vae.decoder.forward(&mut g, enc.mu, &[22, 16, 10]).unwrap();
    let mut total = g.tape.sum(enc.logvar);
    let m = g.tape.mul(dec.mean, dec.mean).unwrap();
    let m = g.tape.sum(m);
    total = g.tape.add(total, m).unwrap();
    for ((f, h), a) in dec.features.iter().zip(&hidden).zip(&adapters) {
        let fd = g.tape.value(*f).dims().to_vec();
        let hd = g.tape.value(*h).dims().to_vec();
        assert_eq!(fd[1], a.feature_channels);
        assert_eq!(&fd[2..], &hd[2..]);
        let sq = g.tape.mul(*f, *f).unwrap();
        let s = g.tape.sum(sq);
        total = g.tape.add(total, s).unwrap();
    }
    let grads = g.tape.backward(total).unwrap();
    let got = g.param_grads(&grads);
    for (id, grad) in &got {
        let name = &vae.params.get(*id).name;
        if name.starts_with("log_gamma") {
            continue;
        }
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
    let trainable = vae
        .params
        .iter()
        .filter(|(_, p)| p.trainable() && !p.name.starts_with("log_gamma"))
        .count();
    assert_eq!(got.len(), trainable);
}

#[test]
fn save_load_round_trip() {
    let model = Model::for_mode(ModelSpec::desk(1, 32, 6), Mode::RandomFrozen, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fvw");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.spec(), model.spec());
    assert_eq!(back.vae.adapter_specs(), model.vae.adapter_specs());
    assert_eq!(back.extractor.config, model.extractor.config);
    for (id, p) in model.params().iter() {
        assert_eq!(back.params().get(id).name, p.name);
        assert_eq!(back.params().get(id).frozen, p.frozen);
        assert_eq!(back.params().value(id), &weights::quantize(&p.value));
    }
    let mut pack = weights::load_pack(&path).unwrap();
    pack.retain(|(n, _)| n != "decoder.1.weight");
    let err = Model::from_named_tensors(&pack).unwrap_err().to_string();
    assert!(err.contains("decoder.1.weight"), "{err}");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, bytes).unwrap();
    let err = weights::load_pack(&path).unwrap_err().to_string();
    assert!(err.contains("bad magic"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn decoder_output_matches_encoder_input(
        ch in 1usize..4, hm in 1usize..4, wm in 1usize..4, l in 1usize..6, scale in 0.05f64..0.12
    ) {
        let spec = ModelSpec {
            in_channels: ch,
            height: 16 * hm,
            width: 16 * wm,
            latent_dim: l,
            channel_scale: scale,
            output: OutputActivation::Sigmoid,
            batch_norm: hm % 2 == 0,
        };
        let x = Tensor::randn(&spec.input_dims(2), &mut rng(hm as u64));
        let r = Vae::new(spec, &[], 0).unwrap().reconstruct(&x).unwrap();
        prop_assert_eq!(r.dims(), x.dims());
    }
}
