//! Checks against oracles computed independently of the autodiff tape:
//! dense eigendecompositions, numerical Jacobians and Hessians, and closed
//! forms.

use lvat_core::classifier::ClassifierModel;
use lvat_core::data::{gen_two_moons, Dataset, Standardizer};
use lvat_core::flow::{FlowModel, DEFAULT_S_MAX};
use lvat_core::nets::{self, Mlp, OutputActivation};
use lvat_core::regularizer::{self, PerturbConfig, Space};
use lvat_core::rng;
use lvat_core::trainer::{self, TrainConfig, TransformerTrainConfig};
use lvat_core::transformer::Transformer;
use lvat_core::{Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

fn dominant_eigenvector(h: &DMatrix<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(h.clone());
    let k = eig.eigenvalues.iamax();
    eig.eigenvectors.column(k).into_owned()
}

fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).abs()
}

#[test]
fn power_iteration_finds_dominant_eigenvector_of_quadratic() {
    let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
    let h = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
    let ht = Tensor::new(vec![4, 4], h.transpose().iter().copied().collect()).unwrap();
    let cfg = PerturbConfig {
        power_iters: 20,
        ..PerturbConfig::new(1.0, Space::Input).unwrap()
    };
    let d = regularizer::adv_direction(
        |r| {
            let hr = r.matmul(r.tape().constant(ht.clone()))?;
            Ok(hr.mul(r)?.sum(&[])?.scale(0.5))
        },
        &[1, 4],
        3,
        &cfg,
    )
    .unwrap();
    let top = dominant_eigenvector(&h);
    assert!(abs_cos(d.data(), top.as_slice()) >= 0.99);
}

fn kl_at(model: &ClassifierModel, x: &Tensor, r: &[f64]) -> f64 {
    let xr = x.add(&Tensor::new(vec![1, r.len()], r.to_vec()).unwrap()).unwrap();
    let p = model.predict_logits(x).unwrap();
    let q = model.predict_logits(&xr).unwrap();
    nets::kl_rows(&p, &q).unwrap()[0]
}

#[test]
fn vat_direction_aligns_with_numerical_hessian() {
    for seed in 0..5 {
        let model = ClassifierModel::from_net(Mlp::new(&[2, 2], OutputActivation::None, seed).unwrap()).unwrap();
        let x = rng::normal_tensor(vec![1, 2], &mut rng::rng(100 + seed));
        let h = 1e-3;
        let hess = DMatrix::from_fn(2, 2, |i, j| {
            let at = |si: f64, sj: f64| {
                let mut r = [0.0; 2];
                r[i] += si * h;
                r[j] += sj * h;
                kl_at(&model, &x, &r)
            };
            (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h)
        });
        let cfg = PerturbConfig::new(0.5, Space::Input).unwrap();
        let res = regularizer::vat_cost(&model, &x, &cfg, seed).unwrap();
        let top = dominant_eigenvector(&hess);
        let c = abs_cos(res.r.data(), top.as_slice());
        assert!(c >= 0.99, "seed {seed}: |cos| = {c}");
    }
}

fn numerical_log_det(flow: &FlowModel, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let eval = |v: &[f64]| flow.forward(&Tensor::new(vec![1, d], v.to_vec()).unwrap()).unwrap().0;
    let jac = DMatrix::from_fn(d, d, |i, j| {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[j] += h;
        m[j] -= h;
        (eval(&p).data()[i] - eval(&m).data()[i]) / (2.0 * h)
    });
    jac.determinant().abs().ln()
}

#[test]
fn flow_log_det_matches_numerical_jacobian() {
    for d in [2, 4, 8] {
        let flow = FlowModel::new(d, 6, &[16], DEFAULT_S_MAX, d as u64).unwrap();
        let x = rng::normal_tensor(vec![5, d], &mut rng::rng(7));
        let (_, ld) = flow.forward(&x).unwrap();
        for i in 0..5 {
            let num = numerical_log_det(&flow, x.row(i));
            let rel = ((ld.data()[i] - num).exp() - 1.0).abs();
            assert!(rel < 1e-4, "D={d} row {i}: rel err {rel}");
        }
    }
}

#[test]
fn closed_form_anchors() {
    let tape = Tape::new();
    let zero = nets::gaussian_kl(tape.constant(Tensor::zeros(vec![3, 4])), tape.constant(Tensor::zeros(vec![3, 4])))
        .unwrap();
    assert!(zero.value().item().abs() < 1e-12);
    let one = nets::gaussian_kl(tape.constant(Tensor::ones(vec![1, 1])), tape.constant(Tensor::zeros(vec![1, 1])))
        .unwrap();
    assert!((one.value().item() - 0.5).abs() < 1e-12);
    let flow = FlowModel::identity(2, 4, &[8]).unwrap();
    let ll = flow.log_likelihood(&Tensor::zeros(vec![1, 2])).unwrap();
    assert!((ll + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn vat_radius_over_many_batches() {
    let model = ClassifierModel::new(5, &[16], 3, 1).unwrap();
    for eps in [0.5, 2.5, 10.0] {
        let cfg = PerturbConfig::new(eps, Space::Input).unwrap();
        for b in 0..100u64 {
            let x = rng::normal_tensor(vec![8, 5], &mut rng::rng(b));
            let res = regularizer::vat_cost(&model, &x, &cfg, b).unwrap();
            assert!(res.r.row_norms().iter().all(|n| (n - eps).abs() < 1e-9));
        }
    }
}

#[test]
fn identity_flow_collapses_lvat_to_vat() {
    let model = ClassifierModel::new(4, &[16, 16], 3, 2).unwrap();
    let t = Transformer::Flow(FlowModel::identity(4, 8, &[16]).unwrap());
    for b in 0..20u64 {
        let x = rng::normal_tensor(vec![16, 4], &mut rng::rng(b));
        let v = regularizer::vat_cost(&model, &x, &PerturbConfig::new(1.0, Space::Input).unwrap(), b).unwrap();
        let l = regularizer::lvat_cost(&model, &t, &x, &PerturbConfig::new(1.0, Space::Latent).unwrap(), b).unwrap();
        assert!((v.cost - l.cost).abs() < 1e-12);
    }
}

fn moons_split(n: usize, seed: u64) -> (Dataset, Dataset) {
    let train = gen_two_moons(n, 0.1, seed).unwrap();
    let test = gen_two_moons(n, 0.1, seed + 1).unwrap();
    let s = Standardizer::fit(train.features());
    let train = train.with_features(s.apply(train.features()).unwrap()).unwrap();
    let test = test.with_features(s.apply(test.features()).unwrap()).unwrap();
    (train, test)
}

#[test]
fn adversarial_direction_beats_random_direction() {
    let (train, _) = moons_split(500, 1);
    let mut model = ClassifierModel::new(2, &[32, 32], 2, 3).unwrap();
    let cfg = TrainConfig {
        regularizer: lvat_core::regularizer::RegularizerKind::None,
        total_updates: 400,
        decay_updates: 0,
        ..Default::default()
    };
    trainer::train_classifier(&mut model, &train, None, None, &cfg, 4).unwrap();
    let pcfg = PerturbConfig::new(0.3, Space::Input).unwrap();
    let (mut adv, mut rnd) = (0.0, 0.0);
    for b in 0..100u64 {
        let idx: Vec<usize> = (0..32).map(|i| ((b as usize) * 37 + i * 13) % train.len()).collect();
        let x = train.features().select_rows(&idx);
        adv += regularizer::vat_cost(&model, &x, &pcfg, b).unwrap().cost;
        let r = regularizer::random_unit(x.shape(), 1000 + b).scale(pcfg.epsilon);
        let q = model.predict_logits(&x.add(&r).unwrap()).unwrap();
        let p = model.predict_logits(&x).unwrap();
        rnd += nets::kl_rows(&p, &q).unwrap().iter().sum::<f64>() / 32.0;
    }
    assert!(adv > rnd, "adversarial {adv} vs random {rnd}");
}

#[test]
fn trained_flow_improves_and_samples_near_data() {
    let (train, test) = moons_split(1000, 5);
    let held = test.without_labels();
    let mut t = Transformer::Flow(FlowModel::new(2, 8, &[32, 32], DEFAULT_S_MAX, 6).unwrap());
    let cfg = TransformerTrainConfig {
        epochs: 250,
        batch_size: 128,
        ..Default::default()
    };
    let h = trainer::train_transformer(&mut t, &train, &held, &cfg, 7).unwrap();
    assert_eq!(h.epochs.len(), 250);
    assert!(h.epochs.last().unwrap().held_out_loss < h.initial_held_out_loss);

    let Transformer::Flow(flow) = &t else { unreachable!() };
    let x = train.features();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..x.rows() {
        for k in 0..2 {
            lo[k] = lo[k].min(x.row(i)[k]);
            hi[k] = hi[k].max(x.row(i)[k]);
        }
    }
    let s = flow.sample(8, 2000).unwrap();
    let inside = (0..s.rows())
        .filter(|&i| {
            (0..2).all(|k| {
                let pad = 0.25 * (hi[k] - lo[k]);
                s.row(i)[k] >= lo[k] - pad && s.row(i)[k] <= hi[k] + pad
            })
        })
        .count();
    assert!(inside as f64 >= 0.9 * s.rows() as f64, "{inside} of {}", s.rows());

    // Latent perturbations of one radius give input displacements of many sizes.
    let model = ClassifierModel::new(2, &[32], 2, 9).unwrap();
    let batch = x.select_rows(&(0..128).collect::<Vec<_>>());
    let cv = |d: &[f64]| {
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt() / m
    };
    let l = regularizer::lvat_cost(&model, &t, &batch, &PerturbConfig::new(1.0, Space::Latent).unwrap(), 1).unwrap();
    let v = regularizer::vat_cost(&model, &batch, &PerturbConfig::new(1.0, Space::Input).unwrap(), 1).unwrap();
    assert!(cv(&l.distances) > 0.05, "{}", cv(&l.distances));
    assert!(cv(&v.distances) < 1e-6);
}
