use super::*;
use crate::seed::rng_from;
use approx::assert_abs_diff_eq;

fn tiny(hidden: Vec<usize>, input: usize, mode: Mode, seed: u64) -> BaclModel {
    let hyper = Hyperparameters {
        hidden,
        init_range: 0.5,
        ..Default::default()
    };
    let mut m = BaclModel::new(input, hyper, mode, seed).unwrap();
    let mut rng = rng_from(seed ^ 99);
    for l in &mut m.layers {
        for r in &mut l.rho {
            *r = rng.random_range(-2.0..0.5);
        }
    }
    m
}

fn batch(n: usize, width: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let x = (0..width).map(|_| rng.random_range(-1.5..1.5)).collect();
            (x, rng.random_range(-1.0..1.0))
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn softplus_helpers() {
    assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    assert_abs_diff_eq!(softplus(800.0), 800.0);
    assert!(softplus(-800.0) >= 0.0);
    for y in [1e-3, 0.5, 1.0, 7.0] {
        assert_abs_diff_eq!(softplus(inv_softplus(y)), y, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(sigmoid(0.0), 0.5);
}

#[test]
fn sample_weights_examples() {
    let m = tiny(vec![3], 2, Mode::Bayesian, 1);
    let w = m.sample_weights(&m.zero_noise());
    for (l, wl) in m.layers.iter().zip(&w) {
        assert_eq!(&l.mu, wl);
    }
    let mut m2 = m.clone();
    for l in &mut m2.layers {
        l.rho.iter_mut().for_each(|r| *r = 0.0);
    }
    let ones: Noise = m2.layers.iter().map(|l| vec![1.0; l.len()]).collect();
    let w = m2.sample_weights(&ones);
    for (l, wl) in m2.layers.iter().zip(&w) {
        for (mu, wi) in l.mu.iter().zip(wl) {
            assert_abs_diff_eq!(wi - mu, 0.6931471805599453, epsilon = 1e-12);
        }
    }
    for l in &mut m2.layers {
        l.rho.iter_mut().for_each(|r| *r = -800.0);
    }
    let big: Noise = m2.layers.iter().map(|l| vec![5.0; l.len()]).collect();
    for (l, wl) in m2.layers.iter().zip(m2.sample_weights(&big)) {
        for (mu, wi) in l.mu.iter().zip(&wl) {
            assert_abs_diff_eq!(wi, mu, epsilon = 1e-12);
        }
    }
}

#[test]
fn deterministic_perfect_fit_loss_is_constant() {
    let mut m = BaclModel::new(1, Hyperparameters { hidden: vec![], ..Default::default() }, Mode::Deterministic, 0).unwrap();
    let floor = m.hyper.sigma_floor;
    // mean head w = 2, b = 1; scale head constant sigma = 1
    m.layers[0].mu = vec![2.0, 1.0, 0.0, inv_softplus(1.0 - floor)];
    let data: Vec<_> = [-1.0, 0.0, 0.5, 3.0].iter().map(|&x| (vec![x], 2.0 * x + 1.0)).collect();
    let loss = m.negative_elbo(&data, &[], 1.0).unwrap();
    assert_abs_diff_eq!(loss, 4.0 * 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    let mut m = tiny(vec![4], 3, Mode::Bayesian, 2);
    for l in &mut m.layers {
        l.mu.iter_mut().for_each(|v| *v = 0.0);
        l.rho.iter_mut().for_each(|r| *r = inv_softplus(1.0));
    }
    assert_abs_diff_eq!(m.kl(), 0.0, epsilon = 1e-10);
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    let m = tiny(vec![2], 2, Mode::Bayesian, 3);
    let p = m.hyper.prior_std;
    let mut rng = rng_from(17);
    let n = 100_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for l in &m.layers {
            for (mu, r) in l.mu.iter().zip(&l.rho) {
                let s = softplus(*r);
                let e: f64 = StandardNormal.sample(&mut rng);
                let w = mu + s * e;
                let log_q = -(s.ln()) - 0.5 * e * e;
                let log_p = -(p.ln()) - 0.5 * (w / p).powi(2);
                acc += log_q - log_p;
            }
        }
    }
    let mc = acc / n as f64;
    let exact = m.kl();
    assert!(rel_err(mc, exact) < 0.02, "mc {mc} exact {exact}");
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let mut m = tiny(vec![3], 2, Mode::Bayesian, 4);
    let before = m.clone();
    let noise = vec![m.draw_noise(&mut rng_from(1))];
    m.gradient_step(&batch(5, 2, 1), &noise, 0.2, 0.0).unwrap();
    assert_eq!(m, before);
}

#[test]
fn single_weight_gradient_by_hand() {
    // one input, no hidden layer: m = w x + b, sigma = softplus(r) + floor
    let mut m = BaclModel::new(1, Hyperparameters { hidden: vec![], ..Default::default() }, Mode::Bayesian, 0).unwrap();
    let (mu_w, rho_w, mu_b, rho_b, mu_r, rho_r, mu_c, rho_c) = (0.3, -1.0, 0.1, -2.0, 0.0, -3.0, 0.2, -1.5);
    m.layers[0].mu = vec![mu_w, mu_b, mu_r, mu_c];
    m.layers[0].rho = vec![rho_w, rho_b, rho_r, rho_c];
    let eps = vec![vec![vec![0.7, -0.4, 1.1, 0.25]]];
    let (x, y, kw) = (1.5, 2.0, 0.3);
    let (loss, g) = m.loss_and_gradients(&[(vec![x], y)], &eps, kw).unwrap();

    let sp = softplus;
    let w = mu_w + sp(rho_w) * 0.7;
    let b = mu_b + sp(rho_b) * -0.4;
    let r = (mu_r + sp(rho_r) * 1.1) * x + mu_c + sp(rho_c) * 0.25;
    let sigma = sp(r) + m.hyper.sigma_floor;
    let mean = w * x + b;
    let res = y - mean;
    let nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln() + res * res / (2.0 * sigma * sigma);
    let kl: f64 = [(mu_w, rho_w), (mu_b, rho_b), (mu_r, rho_r), (mu_c, rho_c)]
        .iter()
        .map(|(mu, rho)| -sp(*rho).ln() + (sp(*rho).powi(2) + mu * mu) / 2.0 - 0.5)
        .sum();
    assert_abs_diff_eq!(loss, nll + kw * kl, epsilon = 1e-10);

    let dl_dmean = -res / (sigma * sigma);
    let d_mu_w = dl_dmean * x + kw * mu_w;
    let d_rho_w = dl_dmean * x * 0.7 * sigmoid(rho_w) + kw * (-1.0 / sp(rho_w) + sp(rho_w)) * sigmoid(rho_w);
    assert_abs_diff_eq!(g.mu[0][0], d_mu_w, epsilon = 1e-10);
    assert_abs_diff_eq!(g.rho[0][0], d_rho_w, epsilon = 1e-10);
    let dl_dsigma = 1.0 / sigma - res * res / sigma.powi(3);
    let d_mu_c = dl_dsigma * sigmoid(r) + kw * mu_c;
    assert_abs_diff_eq!(g.mu[0][3], d_mu_c, epsilon = 1e-10);
}

fn finite_difference_check(m: &BaclModel, data: &[(Vec<f64>, f64)], noises: &[Noise], kw: f64) {
    let (_, g) = m.loss_and_gradients(data, noises, kw).unwrap();
    let h = 1e-5;
    for k in 0..m.layers.len() {
        for j in 0..m.layers[k].len() {
            for which in 0..2 {
                let mut plus = m.clone();
                let mut minus = m.clone();
                if which == 0 {
                    plus.layers[k].mu[j] += h;
                    minus.layers[k].mu[j] -= h;
                } else {
                    plus.layers[k].rho[j] += h;
                    minus.layers[k].rho[j] -= h;
                }
                let num = (plus.negative_elbo(data, noises, kw).unwrap() - minus.negative_elbo(data, noises, kw).unwrap()) / (2.0 * h);
                let ana = if which == 0 { g.mu[k][j] } else { g.rho[k][j] };
                assert!(rel_err(ana, num) < 1e-4, "layer {k} param {j} ({}) analytic {ana} numeric {num}", ["mu", "rho"][which]);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let m = tiny(vec![3, 2], 2, Mode::Bayesian, seed);
        assert!(m.parameter_count() <= 2 * 50);
        let noises = vec![m.draw_noise(&mut rng_from(seed + 10)), m.draw_noise(&mut rng_from(seed + 20))];
        finite_difference_check(&m, &batch(5, 2, seed), &noises, 0.05);
    }
    let m = tiny(vec![4], 3, Mode::Deterministic, 7);
    finite_difference_check(&m, &batch(6, 3, 7), &[], 1.0);
}

#[test]
fn deterministic_mode_has_no_epistemic_variance() {
    let m = tiny(vec![4], 2, Mode::Deterministic, 5);
    let p = m.predict(&[vec![0.3, 0.2]], 50, 1);
    assert_eq!(p[0].epistemic, 0.0);
    assert_eq!(p[0].samples, 1);
    let b = tiny(vec![4], 2, Mode::Bayesian, 5);
    let p = b.predict(&[vec![0.3, 0.2]], 1, 1);
    assert_eq!(p[0].epistemic, 0.0);
    assert_eq!(p[0].total_variance(), p[0].epistemic + p[0].aleatoric);
}

#[test]
fn linear_layer_push_through() {
    let mut m = BaclModel::new(2, Hyperparameters { hidden: vec![], ..Default::default() }, Mode::Bayesian, 0).unwrap();
    m.layers[0].mu = vec![0.8, -0.5, 0.3, 0.0, 0.0, 0.0];
    m.layers[0].rho = vec![-1.0, -0.5, -2.0, -3.0, -3.0, -3.0];
    let x = [0.7, -1.3];
    let s: Vec<f64> = m.layers[0].rho.iter().map(|r| softplus(*r)).collect();
    let mean = 0.8 * x[0] - 0.5 * x[1] + 0.3;
    let var = (s[0] * x[0]).powi(2) + (s[1] * x[1]).powi(2) + s[2].powi(2);
    let n = 1_000_000;
    let p = m.predict(&[x.to_vec()], n, 42)[0];
    let se = (var / n as f64).sqrt();
    assert!((p.raw_mean - mean).abs() < 3.0 * se, "{} vs {mean}", p.raw_mean);
    assert!(rel_err(p.epistemic, var) < 0.01);
}

#[test]
fn bayesian_at_zero_noise_equals_deterministic_forward() {
    let mut b = tiny(vec![5, 5], 3, Mode::Bayesian, 9);
    for l in &mut b.layers {
        l.rho.iter_mut().for_each(|r| *r = -10.0);
    }
    let mut d = b.clone();
    d.mode = Mode::Deterministic;
    for x in [vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.0]] {
        let pb = b.predict_at_mean(&x);
        let pd = d.predict(&[x.clone()], 10, 0)[0];
        assert_abs_diff_eq!(pb.0, pd.raw_mean, epsilon = 1e-6);
        let pbm = b.predict(&[x], 20, 3)[0];
        assert_abs_diff_eq!(pbm.raw_mean, pd.raw_mean, epsilon = 1e-3);
    }
}

fn line_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = rng_from(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let ys = xs
        .iter()
        .map(|x| 0.5 * x[0] + 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    (xs, ys)
}

fn small_hyper() -> Hyperparameters {
    Hyperparameters {
        hidden: vec![16],
        epochs: 150,
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn learns_a_line() {
    let (xs, ys) = line_data(400, 1);
    let mut m = BaclModel::new(1, small_hyper(), Mode::Bayesian, 1).unwrap();
    let report = m.train(&xs, &ys, 1).unwrap();
    assert!(!report.epochs.is_empty());
    let p = m.predict(&[vec![-1.0], vec![1.0]], 200, 5);
    let slope = (p[1].raw_mean - p[0].raw_mean) / 2.0;
    assert!((0.4..=0.6).contains(&slope), "slope {slope}");
}

#[test]
fn zero_targets_give_zero_mean() {
    let (xs, _) = line_data(200, 2);
    let ys = vec![0.0; xs.len()];
    let mut m = BaclModel::new(1, small_hyper(), Mode::Bayesian, 2).unwrap();
    m.train(&xs, &ys, 2).unwrap();
    for p in m.predict(&xs[..20], 100, 1) {
        assert!(p.raw_mean.abs() <= 0.1, "{}", p.raw_mean);
    }
}

#[test]
fn duplicated_data_converges_to_same_predictions() {
    let (xs, ys) = line_data(300, 3);
    let hyper = Hyperparameters {
        epochs: 400,
        patience: 60,
        ..small_hyper()
    };
    let mut a = BaclModel::new(1, hyper.clone(), Mode::Bayesian, 3).unwrap();
    a.train(&xs, &ys, 3).unwrap();
    let xs2: Vec<_> = xs.iter().chain(&xs).cloned().collect();
    let ys2: Vec<_> = ys.iter().chain(&ys).copied().collect();
    let mut b = BaclModel::new(1, hyper, Mode::Bayesian, 3).unwrap();
    b.train(&xs2, &ys2, 3).unwrap();
    for i in -4..=4 {
        let x = [i as f64 * 0.4];
        let (u, v) = (a.predict_at_mean(&x).0, b.predict_at_mean(&x).0);
        assert!((u - v).abs() < 0.05, "{u} vs {v}");
    }
}

#[test]
fn artifact_round_trip_and_rejections() {
    let m = tiny(vec![3], 2, Mode::Bayesian, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    assert_eq!(BaclModel::load(&path, Some(2)).unwrap(), m);
    assert!(matches!(BaclModel::load(&path, Some(3)), Err(Error::ModelMismatch(_))));

    let text = m.to_json().unwrap();
    let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
    assert!(matches!(BaclModel::from_json(&bumped), Err(Error::ModelMismatch(_))));

    let mut broken = m.clone();
    broken.layers[1].mu.pop();
    assert!(matches!(BaclModel::from_json(&broken.to_json().unwrap()), Err(Error::ModelMismatch(_))));
}

#[test]
fn training_rejects_bad_input() {
    let mut m = BaclModel::new(2, small_hyper(), Mode::Bayesian, 0).unwrap();
    assert!(m.train(&[], &[], 0).is_err());
    assert!(m.train(&[vec![1.0]], &[1.0], 0).is_err());
    assert!(m.negative_elbo(&[], &[], 1.0).is_err());
}
