use hjbfl::models::{
    Activation, PartitionPolyModel, PartitionSkeleton, ResidualNetModel, TaylorData, TerminalQuadratic, ValueModel,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn terminal(n: usize) -> TerminalQuadratic {
    let mut q = DMatrix::identity(n, n);
    if n > 1 {
        q[(0, 1)] = 0.2;
        q[(1, 0)] = 0.2;
    }
    TerminalQuadratic {
        alpha: 0.25,
        q2tq2: q,
        target: DVector::from_fn(n, |i, _| 0.1 * i as f64 - 0.05),
    }
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / (b.abs().max(scale))
}

/// Compares every analytic derivative with central differences.
fn check_model(model: &dyn ValueModel, theta: &[f64], t: f64, y: &DVector<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = y.len();
    let h = 1e-5;
    let e = model.eval(theta, t, y);
    let mut worst: f64 = 0.0;
    let scale = 1e-3 + e.grad_y.amax();
    for k in 0..n {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[k] += h;
        ym[k] -= h;
        let fd = (model.value(theta, t, &yp) - model.value(theta, t, &ym)) / (2.0 * h);
        worst = worst.max(rel_err(e.grad_y[k], fd, scale));
        let gp = model.grad_y(theta, t, &yp);
        let gm = model.grad_y(theta, t, &ym);
        let hscale = 1e-3 + e.hess_yy.amax();
        for j in 0..n {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            worst = worst.max(rel_err(e.hess_yy[(j, k)], fd, hscale));
        }
    }
    assert!((&e.hess_yy - e.hess_yy.transpose()).amax() <= 1e-10 * (1.0 + e.hess_yy.amax()));

    let gt = model.grad_theta(theta, t, y);
    let gyt = model.grad_y_theta(theta, t, y);
    let gscale = 1e-3 + gt.amax();
    let gyscale = 1e-3 + gyt.amax();
    for _ in 0..12 {
        let p = rng.random_range(0..theta.len());
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[p] += h;
        tm[p] -= h;
        let fd = (model.value(&tp, t, y) - model.value(&tm, t, y)) / (2.0 * h);
        worst = worst.max(rel_err(gt[p], fd, gscale));
        let dg = (model.grad_y(&tp, t, y) - model.grad_y(&tm, t, y)) / (2.0 * h);
        for j in 0..n {
            worst = worst.max(rel_err(gyt[(j, p)], dg[j], gyscale));
        }
    }

    // combined vector-Jacobian product
    let a = 0.7;
    let w = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut vjp = vec![0.0; theta.len()];
    model.accumulate_theta_vjp(theta, t, y, a, &w, &mut vjp);
    let direct = &gt * a + gyt.tr_mul(&w);
    for (p, v) in vjp.iter().enumerate() {
        assert!((v - direct[p]).abs() <= 1e-12 * (1.0 + direct.amax()));
    }
    worst
}

#[test]
fn resnet_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, hidden, act) in [
        (3, vec![6], Activation::SinCos),
        (2, vec![5, 4], Activation::SinCos),
        (2, vec![4, 3, 3], Activation::Tanh),
    ] {
        let model = ResidualNetModel::new(terminal(n), 1.5, &hidden, act).unwrap();
        for probe in 0..10 {
            let theta = model.init_theta(probe);
            let t = rng.random_range(0.0..1.5);
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
            let worst = check_model(&model, &theta, t, &y, &mut rng);
            assert!(worst < 1e-6, "n = {n}, hidden = {hidden:?}: {worst:e}");
        }
    }
}

#[test]
fn partition_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let skeleton = PartitionSkeleton::build(0.4, 2, 1.0).unwrap();
    let model = PartitionPolyModel::new(skeleton, terminal(2), 1.0).unwrap();
    let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..10 {
        let t = rng.random_range(0.0..1.0);
        let y = DVector::from_fn(2, |_, _| rng.random_range(-0.9..0.9));
        let worst = check_model(&model, &theta, t, &y, &mut rng);
        assert!(worst < 1e-6, "{worst:e}");
    }
}

#[test]
fn partition_taylor_init_is_exact_on_quadratics() {
    let skeleton = PartitionSkeleton::build(0.25, 2, 1.0).unwrap();
    let term = TerminalQuadratic {
        alpha: 1.0,
        q2tq2: DMatrix::identity(2, 2),
        target: DVector::zeros(2),
    };
    let model = PartitionPolyModel::new(skeleton, term, 1.0).unwrap();
    // V = ½|y|² + (1 − t)(y₀ − 0.5 y₁ + 0.3 t y₀ y₁ ... truncated to total degree 2)
    let reference = |x: &DVector<f64>| {
        let (t, y0, y1) = (x[0], x[1], x[2]);
        let value = 0.5 * (y0 * y0 + y1 * y1) + (1.0 - t) * (y0 - 0.5 * y1) + 0.2 * y0 * y1;
        TaylorData {
            value,
            grad: DVector::from_vec(vec![-(y0 - 0.5 * y1), y0 + (1.0 - t) + 0.2 * y1, y1 - 0.5 * (1.0 - t) + 0.2 * y0]),
            hess: DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.5, -1.0, 1.0, 0.2, 0.5, 0.2, 1.0]),
        }
    };
    let theta = model.taylor_init(reference);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let t = rng.random_range(0.0..1.0);
        let y = DVector::from_fn(2, |_, _| rng.random_range(-0.9..0.9));
        let r = reference(&DVector::from_vec(vec![t, y[0], y[1]]));
        // the 0.2 y₀y₁ term is t-independent and cancels in S(t,y) − S(T,y)
        let r_end = reference(&DVector::from_vec(vec![1.0, y[0], y[1]]));
        let expected = 0.5 * y.norm_squared() + r.value - r_end.value;
        let e = model.eval(&theta, t, &y);
        assert!((e.value - expected).abs() < 1e-10, "{} vs {}", e.value, expected);
    }
}
