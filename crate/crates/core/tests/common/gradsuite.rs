//! Finite-difference checks of every differentiable tape primitive.

use favae::tensor::{kernels, Tensor};

use super::{gradcheck, rng, weighted_sum};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// `(primitive, worst relative error)` for one random draw of every primitive.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(1000 + seed);
    let mut out = Vec::new();
    let stride = 1 + (seed % 2) as usize;

    let x = Tensor::randn(&[2, 2, 5, 5], &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], &mut r);
    let b = Tensor::randn(&[3], &mut r);
    let probe = kernels::conv2d(&x, &k, Some(&b), stride, 1).unwrap().0;
    let w = Tensor::randn(probe.dims(), &mut r);
    out.push((
        "conv2d",
        gradcheck(&[x.clone(), k.clone(), b], STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
            weighted_sum(t, y, &w)
        }),
    ));
    out.push((
        "conv2d(no bias)",
        gradcheck(&[x, k], STEP, |t, v| {
            let y = t.conv2d(v[0], v[1], None, stride, 1).unwrap();
            weighted_sum(t, y, &w)
        }),
    ));

    let x = Tensor::randn(&[2, 3, 3, 3], &mut r);
    let k = Tensor::randn(&[3, 2, 4, 4], &mut r);
    let b = Tensor::randn(&[2], &mut r);
    let probe = kernels::conv_transpose2d(&x, &k, Some(&b), stride, 1, 0).unwrap().0;
    let w = Tensor::randn(probe.dims(), &mut r);
    out.push((
        "conv_transpose2d",
        gradcheck(&[x, k, b], STEP, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, 1, 0).unwrap();
            weighted_sum(t, y, &w)
        }),
    ));

    let x = Tensor::randn(&[3, 2, 3, 3], &mut r);
    let g = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let b = Tensor::randn(&[2], &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], &mut r);
    out.push((
        "batchnorm2d(batch stats)",
        gradcheck(&[x.clone(), g.clone(), b.clone()], STEP, |t, v| {
            let y = t.batchnorm2d(v[0], v[1], v[2], None, 1e-5).unwrap().output;
            weighted_sum(t, y, &w)
        }),
    ));
    let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
    out.push((
        "batchnorm2d(running stats)",
        gradcheck(&[x, g, b], STEP, |t, v| {
            let y = t.batchnorm2d(v[0], v[1], v[2], Some((&mean, &var)), 1e-5).unwrap().output;
            weighted_sum(t, y, &w)
        }),
    ));

    let x = Tensor::randn(&[2, 3, 4], &mut r);
    let y = Tensor::randn(&[2, 3, 4], &mut r);
    let w = Tensor::randn(&[2, 3, 4], &mut r);
    type Unary = fn(&mut favae::Tape, favae::Var) -> favae::Var;
    let unary: [(&'static str, Unary); 6] = [
        ("leaky_relu", |t, v| t.leaky_relu(v, 0.2)),
        ("relu", |t, v| t.relu(v)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("exp", |t, v| t.exp(v)),
        ("abs", |t, v| t.abs(v)),
        ("scale/add_scalar", |t, v| {
            let s = t.scale(v, -1.7);
            t.add_scalar(s, 0.3)
        }),
    ];
    for (name, f) in unary {
        out.push((
            name,
            gradcheck(std::slice::from_ref(&x), STEP, |t, v| {
                let o = f(t, v[0]);
                weighted_sum(t, o, &w)
            }),
        ));
    }
    out.push((
        "add/sub/mul",
        gradcheck(&[x.clone(), y], STEP, |t, v| {
            let m = t.mul(v[0], v[1]).unwrap();
            let s = t.sub(m, v[1]).unwrap();
            let a = t.add(s, v[0]).unwrap();
            weighted_sum(t, a, &w)
        }),
    ));
    out.push((
        "reshape/narrow/sum",
        gradcheck(std::slice::from_ref(&x), STEP, |t, v| {
            let rs = t.reshape(v[0], &[2, 12]).unwrap();
            let n = t.narrow(rs, 1, 3, 5).unwrap();
            let e = t.exp(n);
            t.sum(e)
        }),
    ));

    let x = Tensor::randn(&[2, 2, 3, 4], &mut r);
    let w = Tensor::randn(&[2, 2, 7, 9], &mut r);
    out.push((
        "bilinear_upsample",
        gradcheck(std::slice::from_ref(&x), STEP, |t, v| {
            let o = t.bilinear_upsample(v[0], 7, 9).unwrap();
            weighted_sum(t, o, &w)
        }),
    ));
    let x = Tensor::randn(&[2, 2, 8, 6], &mut r);
    let w = Tensor::randn(&[2, 2, 3, 4], &mut r);
    out.push((
        "bilinear_resize(down)",
        gradcheck(std::slice::from_ref(&x), STEP, |t, v| {
            let o = t.bilinear_resize(v[0], 3, 4).unwrap();
            weighted_sum(t, o, &w)
        }),
    ));
    let x = Tensor::randn(&[2, 2, 6, 6], &mut r);
    let w = Tensor::randn(&[2, 2, 3, 3], &mut r);
    out.push((
        "max_pool2d",
        gradcheck(&[x], STEP, |t, v| {
            let o = t.max_pool2d(v[0], 3, 2, 1).unwrap();
            weighted_sum(t, o, &w)
        }),
    ));

    let y = Tensor::randn(&[2, 3, 2, 3], &mut r);
    let mu = Tensor::randn(&[2, 3, 2, 3], &mut r);
    let lg = Tensor::uniform(&[3], -0.5, 0.5, &mut r);
    let w = Tensor::randn(&[2, 1, 2, 3], &mut r);
    out.push((
        "gaussian_nll",
        gradcheck(&[y, mu, lg], STEP, |t, v| {
            let o = t.gaussian_nll(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, o, &w)
        }),
    ));

    let x = Tensor::randn(&[2, 2, 6, 6], &mut r);
    let k = Tensor::randn(&[3, 2, 4, 4], &mut r);
    let g = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let b = Tensor::randn(&[3], &mut r);
    out.push((
        "conv→bn→lrelu chain",
        gradcheck(&[x, k, g, b], STEP, |t, v| {
            let c = t.conv2d(v[0], v[1], None, 2, 1).unwrap();
            let n = t.batchnorm2d(c, v[2], v[3], None, 1e-5).unwrap().output;
            let a = t.leaky_relu(n, 0.2);
            let sq = t.mul(a, a).unwrap();
            t.sum(sq)
        }),
    ));
    out
}
