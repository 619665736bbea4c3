use afan::{Error, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use afan::eval::*;
use afan::models::{BnMode, ModelSpec, SplitModel};

/// `0.5 * sum(diag_i * t_i^2) + 0.25 * quartic * sum(t_i^4)`.
struct Poly {
    diag: Vec<f64>,
    quartic: f64,
}

impl Objective for Poly {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn loss_grad(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
        let loss = t
            .iter()
            .zip(&self.diag)
            .map(|(x, d)| 0.5 * d * x * x + 0.25 * self.quartic * x.powi(4))
            .sum();
        let grad = t.iter().zip(&self.diag).map(|(x, d)| d * x + self.quartic * x.powi(3)).collect();
        Ok((loss, grad))
    }
}

fn quad(diag: &[f64]) -> Poly {
    Poly {
        diag: diag.to_vec(),
        quartic: 0.0,
    }
}

/// Logits `x W + b` for a fixed `[d, K]` weight.
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn record(&self, tape: &mut Tape, x: afan::tensor::Var) -> Result<afan::tensor::Var> {
        let w = tape.constant(&self.w);
        let b = tape.constant(&self.b);
        let z = tape.matmul(x, w)?;
        tape.add_channel(z, b)
    }
}

impl Classifier for Linear {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = self.record(&mut tape, xv)?;
        Ok(tape.tensor(z))
    }

    fn input_loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.variable(x);
        let z = self.record(&mut tape, xv)?;
        let l = tape.softmax_xent(z, labels)?;
        tape.backward(l)?;
        Ok((tape.scalar(l), tape.grad_tensor(xv)))
    }
}

/// Scores 1-D inputs as `[0, w x + b]`.
fn one_d(w: f64, b: f64) -> Linear {
    Linear {
        w: Tensor::new(vec![1, 2], vec![0.0, w]).unwrap(),
        b: Tensor::vector(vec![0.0, b]),
    }
}

#[test]
fn hvp_on_diagonal_quadratic() {
    let hv = hvp(&quad(&[3.0, 1.0]), &[0.3, -0.2], &[1.0, 0.0]).unwrap();
    assert!((hv[0] - 3.0).abs() < 1e-6 && hv[1].abs() < 1e-6);
}

#[test]
fn hvp_identity() {
    let obj = quad(&[1.0; 5]);
    let v = [0.5, -1.0, 2.0, 0.0, 3.0];
    let hv = hvp(&obj, &[1.0, 2.0, -3.0, 0.5, 0.0], &v).unwrap();
    for (a, b) in hv.iter().zip(&v) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(hvp(&obj, &[0.0; 5], &[0.0; 5]).unwrap(), vec![0.0; 5]);
}

#[test]
fn hvp_is_symmetric() {
    let obj = Poly {
        diag: vec![2.0, -1.0, 0.5, 4.0],
        quartic: 0.7,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut r = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    for _ in 0..10 {
        let (t, u, v) = (r(4), r(4), r(4));
        let uhv: f64 = u.iter().zip(hvp(&obj, &t, &v).unwrap()).map(|(a, b)| a * b).sum();
        let vhu: f64 = v.iter().zip(hvp(&obj, &t, &u).unwrap()).map(|(a, b)| a * b).sum();
        assert!((uhv - vhu).abs() < 1e-5);
    }
    let model = SplitModel::build(&ModelSpec::mlp(2, &[3], 2), 1).unwrap();
    let x = Tensor::new(vec![4, 2], vec![0.1, 0.9, 0.4, 0.3, 0.8, 0.2, 0.6, 0.7]).unwrap();
    let obj = ModelObjective::new(&model, &x, &[0, 1, 1, 0]).unwrap();
    let t = obj.theta();
    let (u, v) = (r(t.len()), r(t.len()));
    let uhv: f64 = u.iter().zip(hvp(&obj, &t, &v).unwrap()).map(|(a, b)| a * b).sum();
    let vhu: f64 = v.iter().zip(hvp(&obj, &t, &u).unwrap()).map(|(a, b)| a * b).sum();
    assert!((uhv - vhu).abs() < 1e-5);
}

#[test]
fn power_iteration_on_quadratics() {
    let cfg = PowerConfig {
        iters: 200,
        tol: 1e-10,
        seed: 1,
    };
    let est = spectral_norm(&quad(&[3.0, 1.0]), &[0.0, 0.0], &cfg).unwrap();
    assert!(est.converged);
    assert!((est.value - 3.0).abs() < 1e-4);

    let est = spectral_norm(&quad(&[1.0; 6]), &[0.0; 6], &cfg).unwrap();
    assert_eq!(est.iterations, 1);
    assert!((est.value - 1.0).abs() < 1e-9);

    let est = spectral_norm(&quad(&[-5.0, 2.0]), &[0.0, 0.0], &cfg).unwrap();
    assert!((est.value - 5.0).abs() < 1e-4);
    assert!(est.rayleigh < 0.0);
}

#[test]
fn power_iteration_restarts_on_zero_hessian() {
    let cfg = PowerConfig {
        iters: 3,
        tol: 1e-6,
        seed: 0,
    };
    let est = spectral_norm(&quad(&[0.0, 0.0]), &[1.0, 1.0], &cfg).unwrap();
    assert_eq!(est.restarts, 3);
    assert_eq!(est.value, 0.0);
    assert!(!est.converged);
    assert!(spectral_norm(&quad(&[1.0]), &[0.0], &PowerConfig { iters: 0, ..cfg }).is_err());
}

#[test]
fn hutchinson_on_quadratics() {
    let t = trace_hutchinson(&quad(&[3.0, 1.0]), &[0.2, 0.1], 50, 4).unwrap();
    assert!((t.mean - 4.0).abs() < 1e-4);
    assert!((t.mean - 4.0).abs() <= t.std_error + 1e-4);
    for probes in [1, 7] {
        let t = trace_hutchinson(&quad(&[1.0; 9]), &[0.0; 9], probes, 2).unwrap();
        assert_eq!(t.mean, 9.0);
    }
    assert!(trace_hutchinson(&quad(&[1.0]), &[0.0], 0, 0).is_err());
}

#[test]
fn estimators_are_seeded() {
    let obj = Poly {
        diag: vec![1.0, 2.0, 3.0],
        quartic: 1.0,
    };
    let t = [0.3, 0.1, -0.2];
    let a = trace_hutchinson(&obj, &t, 20, 5).unwrap();
    assert_eq!(a, trace_hutchinson(&obj, &t, 20, 5).unwrap());
    let cfg = PowerConfig::default();
    assert_eq!(spectral_norm(&obj, &t, &cfg).unwrap(), spectral_norm(&obj, &t, &cfg).unwrap());
}

#[test]
fn accuracy_of_constant_predictor() {
    let clf = Linear {
        w: Tensor::zeros(&[2, 2]),
        b: Tensor::vector(vec![1.0, 0.0]),
    };
    let x = Tensor::zeros(&[10, 2]);
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    assert_eq!(standard_accuracy(&clf, &x, &labels).unwrap(), 0.5);
    assert!(matches!(standard_accuracy(&clf, &Tensor::zeros(&[0, 2]), &[]), Err(Error::Domain(_))));
}

#[test]
fn accuracy_matches_counting_oracle() {
    // identity weights make the argmax the largest input coordinate
    let mut w = vec![0.0; 9];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let clf = Linear {
        w: Tensor::new(vec![3, 3], w).unwrap(),
        b: Tensor::vector(vec![0.0; 3]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut correct = 0;
    for _ in 0..300 {
        let hot = rng.random_range(0..3);
        let mut row = [0.1, 0.1, 0.1];
        row[hot] = 0.9;
        x.extend(row);
        let y = rng.random_range(0..3);
        if y == hot {
            correct += 1;
        }
        labels.push(y);
    }
    let x = Tensor::new(vec![300, 3], x).unwrap();
    assert_eq!(standard_accuracy(&clf, &x, &labels).unwrap(), correct as f64 / 300.0);
}

#[test]
fn zero_radius_attack_is_identity() {
    let model = SplitModel::build(&ModelSpec::mlp(2, &[4], 2), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![20, 2], (0..40).map(|_| rng.random::<f64>()).collect()).unwrap();
    let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..Default::default()
    };
    let xa = pgd_input_attack(&model, &x, &y, &cfg).unwrap();
    assert_eq!(xa.values(), x.values());
    assert_eq!(
        robust_accuracy(&model, &x, &y, &cfg).unwrap(),
        standard_accuracy(&model, &x, &y).unwrap()
    );
}

#[test]
fn attack_stays_in_ball_and_range() {
    let model = SplitModel::build(&ModelSpec::mlp(3, &[5], 3), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![300, 3], (0..900).map(|_| rng.random::<f64>()).collect()).unwrap();
    let y: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let cfg = AttackConfig {
        epsilon: 0.1,
        alpha: 0.03,
        ..Default::default()
    };
    let xa = pgd_input_attack(&model, &x, &y, &cfg).unwrap();
    for (a, c) in xa.values().iter().zip(x.values()) {
        assert!((a - c).abs() <= 0.1 + 1e-15);
        assert!((0.0..=1.0).contains(a));
    }
}

#[test]
fn linear_flip_threshold() {
    // margin 0.5 at x = 0.5, so the flip radius is 0.5 / 2 = 0.25
    let clf = one_d(2.0, -0.5);
    let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    for (eps, flips) in [(0.2, false), (0.249, false), (0.25, true), (0.3, true)] {
        let cfg = AttackConfig {
            epsilon: eps,
            alpha: 0.02,
            steps: 20,
            clamp: (0.0, 1.0),
        };
        let ra = robust_accuracy(&clf, &x, &[1], &cfg).unwrap();
        assert_eq!(ra == 0.0, flips, "eps {eps}");
    }
}

#[test]
fn attack_loss_is_non_decreasing() {
    let clf = Linear {
        w: Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 1.5, -1.0]).unwrap(),
        b: Tensor::vector(vec![0.1, 0.0, -0.2]),
    };
    let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
    let cfg = AttackConfig {
        steps: 20,
        alpha: 0.01,
        epsilon: 0.1,
        clamp: (0.0, 1.0),
    };
    let trace = pgd_input_trace(&clf, &x, &[0], &cfg).unwrap();
    for w in trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
    let mut best = f64::MIN;
    for i in 0..=200 {
        for j in 0..=200 {
            let p = [0.3 + 0.2 * i as f64 / 200.0, 0.5 + 0.2 * j as f64 / 200.0];
            let t = Tensor::new(vec![1, 2], p.to_vec()).unwrap();
            best = best.max(clf.input_loss_grad(&t, &[0]).unwrap().0);
        }
    }
    assert!(*trace.last().unwrap() >= 0.99 * best);
}

fn paraboloid_oracle(theta: &[f64], d1: &[f64], d2: &[f64], a: f64, b: f64) -> f64 {
    theta
        .iter()
        .zip(d1.iter().zip(d2))
        .map(|(t, (x, y))| 0.5 * (t + a * x + b * y).powi(2))
        .sum()
}

#[test]
fn slice_of_quadratic_is_paraboloid() {
    let obj = quad(&[1.0; 3]);
    let theta = [0.5, -0.25, 1.0];
    let d1 = [1.0, 0.0, 0.5];
    let d2 = [0.0, 1.0, -0.5];
    let s = loss_slice(&obj, &theta, &d1, &d2, 5, 1.0).unwrap();
    assert_eq!(s.coords, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    for i in 0..5 {
        for j in 0..5 {
            let want = paraboloid_oracle(&theta, &d1, &d2, s.coords[i], s.coords[j]);
            assert!((s.at(i, j) - want).abs() < 1e-12);
        }
    }
    assert_eq!(s.center(), Some(obj.loss(&theta).unwrap()));
    // both second derivatives are |d|^2 = 1.25 and 1.25
    assert!((s.curvature_proxy() - 1.25).abs() < 1e-9);
    assert_eq!(s.to_matrix().lines().count(), 5);
    assert!(loss_slice(&obj, &theta, &d1, &d2, 1, 1.0).is_err());
}

#[test]
fn model_slice_center_is_checkpoint_loss() {
    let spec = ModelSpec::tiny_resnet([1, 6, 6], &[2, 3], 2);
    let model = SplitModel::build(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![6, 1, 6, 6], (0..216).map(|_| rng.random::<f64>()).collect()).unwrap();
    let y = [0, 1, 0, 1, 1, 0];
    let s = model_loss_slice(&model, &x, &y, 5, 0.5, 7).unwrap();
    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape, BnMode::Eval, false);
    let xv = tape.constant(&x);
    let z = model.forward(&mut tape, &mut b, xv).unwrap();
    let l = tape.softmax_xent(z, &y).unwrap();
    assert_eq!(s.center(), Some(tape.scalar(l)));
    assert_eq!(s, model_loss_slice(&model, &x, &y, 5, 0.5, 7).unwrap());
}

#[test]
fn filter_normalization() {
    let spec = ModelSpec::tiny_resnet([1, 6, 6], &[2, 3], 2);
    let model = SplitModel::build(&spec, 3).unwrap();
    let d = filter_normalized_direction(&model, &mut ChaCha8Rng::seed_from_u64(0));
    let mut off = 0;
    for p in model.params() {
        let n = p.tensor.len();
        let (dp, vp) = (&d[off..off + n], p.tensor.values());
        match p.tensor.shape().len() {
            1 => assert!(dp.iter().all(|&v| v == 0.0)),
            2 => {
                let cols = p.tensor.shape()[1];
                for c in 0..cols {
                    let dn: f64 = dp.iter().skip(c).step_by(cols).map(|v| v * v).sum();
                    let pn: f64 = vp.iter().skip(c).step_by(cols).map(|v| v * v).sum();
                    assert!((dn.sqrt() - pn.sqrt()).abs() < 1e-12);
                }
            }
            _ => {
                let per = n / p.tensor.shape()[0];
                for (df, pf) in dp.chunks(per).zip(vp.chunks(per)) {
                    let dn: f64 = df.iter().map(|v| v * v).sum();
                    let pn: f64 = pf.iter().map(|v| v * v).sum();
                    assert!((dn.sqrt() - pn.sqrt()).abs() < 1e-12);
                }
            }
        }
        off += n;
    }
}

#[test]
fn attack_config_validation() {
    assert!(AttackConfig::default().validate().is_ok());
    for bad in [
        AttackConfig {
            steps: 0,
            ..Default::default()
        },
        AttackConfig {
            alpha: 0.0,
            ..Default::default()
        },
        AttackConfig {
            epsilon: -1.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Invalid { .. })));
    }
}
