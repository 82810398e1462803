use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Max relative error of `sum(op(x) * r)` for a random weighting `r`.
fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let x0 = rand_vec(&mut rng, numel, 2.0);
    let probe = {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(shape.to_vec(), x0.clone()).unwrap());
        let y = op(&mut t, x);
        t.value(y).shape().to_vec()
    };
    let r = rand_vec(&mut rng, probe.iter().product(), 1.0);
    let f = |p: &[f64]| {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(shape.to_vec(), p.to_vec()).unwrap());
        let y = op(&mut t, x);
        let w = t.constant(Tensor::new(probe.clone(), r.clone()).unwrap());
        let yw = t.mul(y, w);
        let l = t.sum(yw);
        let g = t.backward(l).unwrap();
        (t.value(l).item(), g.wrt(&t, x).into_data())
    };
    finite_diff_check(f, &x0, 1e-5).unwrap()
}

#[test]
fn affine_examples() {
    let mut t = Tape::new();
    let w = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let x = t.constant(Tensor::vector(vec![3.0]));
    let b = t.constant(Tensor::vector(vec![1.0]));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[7.0]);

    let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let x = t.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 3.0]).unwrap());
    let y = t.affine(x, eye, z).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let bad = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(t.affine(bad, eye, z).is_err());
}

#[test]
fn affine_input_gradient_is_column_sums() {
    let wdata = vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.3, -0.7, 1.1]));
    let w = t.constant(Tensor::matrix(2, 3, wdata.clone()).unwrap());
    let b = t.constant(Tensor::vector(vec![0.1, 0.2]));
    let y = t.affine(x, w, b).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[4.0, 2.0, -0.5]);
    let err = check_unary(&[4, 3], 1, |t, x| {
        let w = t.constant(Tensor::matrix(2, 3, wdata.clone()).unwrap());
        let b = t.constant(Tensor::vector(vec![0.1, 0.2]));
        t.affine(x, w, b).unwrap()
    });
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn sigmoid_values() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.0, 800.0, -800.0]));
    let y = t.sigmoid(x);
    assert_eq!(t.value(y).data(), &[0.5, 1.0, 0.0]);
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(&t, x).data()[0], 0.25);
    for seed in 0..10 {
        let err = check_unary(&[7], seed, |t, x| t.sigmoid(x));
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn batch_norm_cases() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(3, 1, vec![2.5, 2.5, 2.5]).unwrap());
    let (y, stats) = t.batch_norm_train(x, BN_EPS).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(stats.var, vec![0.0]);

    let x = t.constant(Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap());
    let (y, _) = t.batch_norm_train(x, BN_EPS).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

    let mut rs = RunningStats::new(1);
    t.batch_norm(x, BN_EPS, NormMode::Train, &mut rs).unwrap();
    assert!((rs.mean[0] - 0.0).abs() < 1e-15);
    assert!((rs.var[0] - (0.9 + 0.1)).abs() < 1e-15);

    // infer mode is affine in its input: f(a) + f(b) - f(0) == f(a + b)
    let stats = RunningStats {
        mean: vec![0.3, -1.0],
        var: vec![2.0, 0.5],
    };
    let run = |t: &mut Tape, d: Vec<f64>| {
        let x = t.constant(Tensor::matrix(1, 2, d).unwrap());
        let y = t.batch_norm_infer(x, &stats, BN_EPS).unwrap();
        t.value(y).data().to_vec()
    };
    let fa = run(&mut t, vec![1.0, 2.0]);
    let fb = run(&mut t, vec![-0.5, 4.0]);
    let f0 = run(&mut t, vec![0.0, 0.0]);
    let fab = run(&mut t, vec![0.5, 6.0]);
    for c in 0..2 {
        assert!((fa[c] + fb[c] - f0[c] - fab[c]).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x);
    let unused = t.param(Tensor::vector(vec![1.0, 2.0]));
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(&t, x).item(), 6.0);
    assert_eq!(g.wrt(&t, unused).data(), &[0.0, 0.0]);
    assert!(t.backward(unused).is_err());

    let err = check_unary(&[5, 3], 4, |t, x| {
        let w = t.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.3]).unwrap());
        let b = t.constant(Tensor::vector(vec![0.1, -0.1]));
        let a = t.affine(x, w, b).unwrap();
        t.sigmoid(a)
    });
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn finite_diff_check_examples() {
    // f(p) = p^T A p with symmetric A; central differences are exact up to rounding
    let a = [[2.0, 0.5, -1.0], [0.5, 1.0, 0.3], [-1.0, 0.3, 3.0]];
    let f = |p: &[f64]| {
        let mut v = 0.0;
        let mut g = vec![0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                v += p[i] * a[i][j] * p[j];
                g[i] += 2.0 * a[i][j] * p[j];
            }
        }
        (v, g)
    };
    assert!(finite_diff_check(f, &[0.4, -1.3, 2.2], 1e-5).unwrap() <= 1e-8);
    let zero = |p: &[f64]| (0.0, vec![0.0; p.len()]);
    assert_eq!(finite_diff_check(zero, &[1.0, 2.0], 1e-5).unwrap(), 0.0);
    assert!(finite_diff_check(zero, &[1.0], 1e-2).is_err());
}

fn gathered_ops(t: &mut Tape, x: Var) -> Vec<Var> {
    // x is [6, 3]
    let mut out = Vec::new();
    out.push(t.relu(x));
    out.push(t.exp(x));
    let sq = t.mul(x, x);
    let one = t.constant(Tensor::new(vec![6, 3], vec![1.0; 18]).unwrap());
    let pos = t.add(sq, one).unwrap();
    out.push(t.log(pos));
    out.push(t.scale(x, -1.7));
    out.push(t.concat_cols(x, sq).unwrap());
    out.push(t.batch_norm_train(x, BN_EPS).unwrap().0);
    let stats = RunningStats {
        mean: vec![0.1, 0.2, -0.3],
        var: vec![0.5, 2.0, 1.0],
    };
    out.push(t.batch_norm_infer(x, &stats, BN_EPS).unwrap());
    let gamma = t.constant(Tensor::vector(vec![1.5, -0.5, 2.0]));
    let beta = t.constant(Tensor::vector(vec![0.1, 0.0, -0.2]));
    out.push(t.scale_shift(x, gamma, beta).unwrap());
    out.push(t.gather_rows(x, &[5, 0, 0, 3]).unwrap());
    out.push(t.group_max(x, 2).unwrap());
    let rows = t.gather_rows(x, &[1, 2, 3]).unwrap();
    let other = t.gather_rows(x, &[4, 4, 0]).unwrap();
    out.push(t.row_cosine(rows, other).unwrap());
    out.push(t.segment_sum(x, &[0, 4, 4, 11, 18]).unwrap());
    out.push(
        t.refine(x, &[vec![], vec![3], vec![0, 5], vec![], vec![4], vec![1]], 0.6)
            .unwrap(),
    );
    out.push(t.mean(x));
    out
}

#[test]
fn every_primitive_passes_gradient_check() {
    let n_ops = {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[6, 3]));
        gathered_ops(&mut t, x).len()
    };
    for k in 0..n_ops {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let err = check_unary(&[6, 3], 1000 + seed, |t, x| gathered_ops(t, x)[k]);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-5, "op {k}: {worst}");
    }
}

#[test]
fn fused_losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let target: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x0 = rand_vec(&mut rng, 15, 2.0);
        // resample residuals near the |.| kink
        if x0.iter().zip(&target).any(|(a, b)| (a - b).abs() < 1e-4) {
            continue;
        }
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let x = t.param(Tensor::matrix(5, 3, p.to_vec()).unwrap());
            let ce = t.softmax_cross_entropy(x, &labels).unwrap();
            let mae = t.mean_abs_error(x, &target).unwrap();
            let l = t.add(ce, mae).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).item(), g.wrt(&t, x).into_data())
        };
        assert!(finite_diff_check(f, &x0, 1e-5).unwrap() <= 1e-5);
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = rand_vec(&mut rng, 12, 1.0);
    let grad_of = |ca: f64, cb: f64| {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(4, 3, x0.clone()).unwrap());
        let s = t.sigmoid(x);
        let f = t.sum(s);
        let e = t.exp(x);
        let g = t.mean(e);
        let fa = t.scale(f, ca);
        let gb = t.scale(g, cb);
        let l = t.add(fa, gb).unwrap();
        t.backward(l).unwrap().wrt(&t, x).into_data()
    };
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    let mix = grad_of(2.5, -0.75);
    for i in 0..12 {
        assert!((mix[i] - (2.5 * gf[i] - 0.75 * gg[i])).abs() < 1e-12);
    }
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(4, 2, vec![0.1, 0.7, -0.4, 1.2, 0.0, -2.0, 0.3, 0.9]).unwrap());
        let (n, _) = t.batch_norm_train(x, BN_EPS).unwrap();
        let g = t.gather_rows(n, &[0, 1, 1, 3, 2, 2]).unwrap();
        let m = t.group_max(g, 2).unwrap();
        let s = t.sigmoid(m);
        let l = t.sum(s);
        t.backward(l).unwrap().wrt(&t, x).into_data()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn group_max_ties_go_to_first_row() {
    let mut t = Tape::new();
    let x = t.param(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let m = t.group_max(x, 2).unwrap();
    let l = t.sum(m);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[1.0, 0.0]);
}
