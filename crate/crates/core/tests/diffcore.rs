use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfield_core::diff::{grad_check, DiffError, GradCheckConfig, ParamStore, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

#[test]
fn square_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([1], &[3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn symmetric_softmax_mean_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
    let s = tape.softmax(l).unwrap();
    let loss = tape.mean(s).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(l).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_preconditions() {
    let mut tape = Tape::<f64>::new();
    assert!(matches!(tape.backward(Var::from_index_for_tests()), Err(DiffError::EmptyTape)));
    let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let y = tape.exp(x).unwrap();
    assert!(matches!(tape.backward(y), Err(DiffError::NotScalar(_))));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(DiffError::AlreadyBackpropagated)));
    tape.reset();
    let x = tape.leaf(Tensor::from_f64([1], &[1.0]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
}

#[test]
fn gradients_accumulate_across_uses_and_calls() {
    let mut p = ParamStore::<f64>::new();
    p.insert("x", Tensor::from_f64([1], &[2.0]).unwrap().with_grad());
    for _ in 0..2 {
        let mut tape = Tape::new();
        let a = tape.param(&p, 0);
        let b = tape.param(&p, 0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_into(&mut p).unwrap();
    }
    assert_eq!(p.tensor(0).grad().unwrap(), &[4.0]);
}

/// Builds a graph that touches every built-in kernel.
fn every_op_program(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng) -> Result<Var, DiffError> {
    let a = tape.leaf(rand_tensor(rng, &[3, 4], -1.0, 1.0));
    let b = tape.leaf(rand_tensor(rng, &[4], 0.5, 1.5));
    let w = tape.leaf(rand_tensor(rng, &[4, 2], -1.0, 1.0));
    let img = tape.leaf(rand_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0));
    let ker = tape.leaf(rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5));
    let fmap = tape.leaf(rand_tensor(rng, &[3, 5, 2], -1.0, 1.0));
    let coords = tape.leaf(rand_tensor(rng, &[4, 2], 0.7, 2.6));
    let sig = tape.leaf(rand_tensor(rng, &[2, 5], 0.1, 2.0));
    let del = tape.leaf(rand_tensor(rng, &[2, 5], 0.1, 0.5));

    let add = tape.add(a, b)?;
    let sub = tape.sub(add, b)?;
    let mul = tape.mul(sub, b)?;
    let div = tape.div(mul, b)?;
    let e = tape.exp(div)?;
    let lg = tape.log(e)?;
    let sp = tape.softplus(lg)?;
    let ab = tape.abs(lg)?;
    let r = tape.relu(lg)?;
    let cl = tape.clamp(lg, Some(-0.5), Some(0.5))?;
    let sc = tape.scale(cl, 1.7)?;
    let of = tape.offset(sc, 0.3)?;
    let mm = tape.matmul(of, w)?;
    let sm = tape.softmax(mm)?;
    let sl = tape.sum_last(sm)?;
    let mn = tape.min_axis(sp, 1)?;
    let cat = tape.concat(&[ab, r], 1)?;
    let t = tape.transpose(cat)?;
    let rs = tape.reshape(t, &[2, 12])?;

    let conv = tape.conv2d(img, ker, 2, 1)?;
    let up = tape.upsample2x(conv)?;
    let pad = tape.reflect_pad(up, 1)?;
    let bs = tape.bilinear_sample(fmap, coords)?;
    let rw = tape.ray_weights(sig, del)?;
    let vals = tape.leaf(rand_tensor(rng, &[2, 5, 3], -1.0, 1.0));
    let ws = tape.weighted_sum(rw, vals)?;
    let pm = tape.permute(vals, &[2, 0, 1])?;
    let pm2 = tape.mul(pm, pm)?;
    let sc_rows = tape.scatter_rows(a, &[2, 0, 4], 5)?;
    let sc2 = tape.mul(sc_rows, sc_rows)?;

    let parts = [
        tape.mean(sl)?,
        tape.sum(mn)?,
        tape.mean(rs)?,
        tape.mean(pad)?,
        tape.sum(bs)?,
        tape.sum(rw)?,
        tape.sum(ws)?,
        tape.mean(pm2)?,
        tape.sum(sc2)?,
    ];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(total)
}

#[test]
fn every_kernel_matches_central_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let loss = every_op_program(&mut tape, &mut rng).unwrap();
        tape.backward(loss).unwrap();
        let checks = tape.check_kernels(1e-6, 1e-5, 64, seed);
        let names: std::collections::BTreeSet<_> = checks.iter().map(|c| c.op.clone()).collect();
        for op in [
            "add", "sub", "mul", "div", "exp", "log", "relu", "softplus", "abs", "clamp", "scale", "offset",
            "matmul", "conv2d", "upsample2x", "softmax", "sum", "mean", "sum_last", "min", "concat",
            "bilinear_sample", "reshape", "transpose", "reflect_pad", "ray_weights",
            "weighted_sum", "permute", "scatter_rows",
        ] {
            assert!(names.contains(op), "{op} not exercised");
        }
        for c in checks {
            assert!(c.passed, "seed {seed}: {} rel err {}", c.op, c.max_rel_err);
        }
    }
}

#[test]
fn random_composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamStore::new();
    p.insert("w1", rand_tensor(&mut rng, &[5, 8], -0.7, 0.7).with_grad());
    p.insert("b1", rand_tensor(&mut rng, &[8], -0.1, 0.1).with_grad());
    p.insert("w2", rand_tensor(&mut rng, &[8, 3], -0.7, 0.7).with_grad());
    let x = rand_tensor(&mut rng, &[6, 5], -1.0, 1.0);
    let report = grad_check(
        |tape, v| {
            let xi = tape.constant(x.clone());
            let h = tape.linear(xi, v[0], v[1])?;
            let h = tape.softplus(h)?;
            let o = tape.matmul(h, v[2])?;
            let s = tape.softmax(o)?;
            let l = tape.log(s)?;
            let sq = tape.mul(l, l)?;
            tape.mean(sq)
        },
        &p,
        &GradCheckConfig {
            h: 1e-6,
            tol: 1e-5,
            max_coords: 64,
            seed: 0,
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let loss = every_op_program(&mut tape, &mut rng).unwrap();
        tape.value(loss).data()[0].to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let grad_of = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let e = tape.exp(x).unwrap();
            let f = tape.sum(e).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let g = tape.mean(sq).unwrap();
            let fa = tape.scale(f, ca).unwrap();
            let gb = tape.scale(g, cb).unwrap();
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..4 {
            let lin = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }
}
