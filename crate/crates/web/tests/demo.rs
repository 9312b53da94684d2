use favae::toy::{AnalyticVae, ToySpec};
use favae_web::{auroc_text, parse_list, sample, scores, to_rgba};

#[test]
fn samples_are_seeded_and_sized() {
    let a = sample("stripe", 16, 0.0, 3).unwrap();
    assert_eq!(a.len(), 256);
    assert_eq!(a, sample("stripe", 16, 0.0, 3).unwrap());
    assert_ne!(a, sample("stripe", 16, 0.0, 4).unwrap());
    assert!(sample("cat", 16, 0.0, 3).is_err());
    assert!(sample("normal", 0, 0.0, 3).is_err());
    assert!(sample("normal", 129, 0.0, 3).is_err());
}

#[test]
fn shuffled_keeps_the_pixel_multiset() {
    // Same seed, so the shuffle permutes the very stripe image drawn first.
    let n = sample("stripe", 8, 0.0, 9).unwrap();
    let mut s = sample("shuffled", 8, 0.0, 9).unwrap();
    let mut n2 = n.clone();
    n2.sort_by(f64::total_cmp);
    s.sort_by(f64::total_cmp);
    assert_eq!(n2, s);
}

#[test]
fn scores_match_the_analytic_model() {
    let px = sample("normal", 12, 0.0, 1).unwrap();
    let got = scores(&px, 12).unwrap();
    let vae = AnalyticVae::new(&ToySpec::paper().with_side(12));
    assert_eq!(got[0], vae.loglik(&px).unwrap());
    assert!(scores(&px, 11).is_err());
}

#[test]
fn typicality_flags_stripes() {
    let side = 32;
    let typ = |kind: &str, seed| scores(&sample(kind, side, 0.0, seed).unwrap(), side).unwrap()[1];
    let normal: Vec<f64> = (0..20).map(|s| typ("normal", s)).collect();
    for s in 0..5 {
        assert_eq!(typ("stripe", s), typ("shuffled", s));
    }
    let stripe: Vec<f64> = (0..20).map(|s| typ("stripe", s + 100)).collect();
    let worst_normal = normal.iter().copied().fold(f64::INFINITY, f64::min);
    let above = stripe.iter().filter(|&&t| t < worst_normal).count();
    assert!(above >= 15, "{above} of 20 stripes below every normal");
}

#[test]
fn rgba_stretches_to_full_range() {
    let b = to_rgba(&[-1.0, 0.0, 1.0]);
    assert_eq!(b, vec![0, 0, 0, 255, 128, 128, 128, 255, 255, 255, 255, 255]);
    assert_eq!(to_rgba(&[2.0, 2.0]), vec![0, 0, 0, 255, 0, 0, 0, 255]);
}

#[test]
fn auroc_from_text() {
    assert_eq!(parse_list("1, 2\n3  4").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    assert!(parse_list("1 x").is_err());
    assert_eq!(auroc_text("3 4", "1 2").unwrap(), 1.0);
    assert_eq!(auroc_text("1", "1").unwrap(), 0.5);
    assert!(auroc_text("", "1").is_err());
}
