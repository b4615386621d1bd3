//! Consistency costs: virtual adversarial perturbations in input space
//! (VAT) or in a transformer's latent space (LVAT), and the Π-model cost.
//!
//! The clean prediction `f(X)` is always a fixed target: it enters every
//! cost as a tape constant.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::data::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::nets::{self, BoundMlp};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::Transformer;

pub const DEFAULT_XI: f64 = 1e-6;
pub const DEFAULT_POWER_ITERS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Input,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    None,
    Vat,
    LvatVae,
    LvatFlow,
    Pi,
}

impl RegularizerKind {
    pub fn space(self) -> Space {
        match self {
            RegularizerKind::LvatVae | RegularizerKind::LvatFlow => Space::Latent,
            _ => Space::Input,
        }
    }

    /// The transformer kind this regularizer requires, if any.
    pub fn transformer_kind(self) -> Option<&'static str> {
        match self {
            RegularizerKind::LvatVae => Some("vae"),
            RegularizerKind::LvatFlow => Some("flow"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub epsilon: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    pub space: Space,
}

fn default_xi() -> f64 {
    DEFAULT_XI
}

fn default_power_iters() -> usize {
    DEFAULT_POWER_ITERS
}

impl PerturbConfig {
    pub fn new(epsilon: f64, space: Space) -> Result<Self> {
        let cfg = PerturbConfig {
            epsilon,
            xi: DEFAULT_XI,
            power_iters: DEFAULT_POWER_ITERS,
            space,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::invalid(format!("xi must be positive, got {}", self.xi)));
        }
        if self.power_iters == 0 {
            return Err(Error::invalid("power_iters must be >= 1"));
        }
        Ok(())
    }

    fn expect_space(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(Error::invalid(format!(
                "perturbation configured for {:?} space, used in {:?} space",
                self.space, space
            )));
        }
        Ok(())
    }
}

/// Π-model perturbation: Gaussian input noise and optional augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiConfig {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult {
    pub cost: f64,
    /// The perturbation in the space where it was injected.
    pub r: Tensor,
    pub x_adv: Tensor,
    /// Per-sample `‖x − x_adv‖₂` in input space.
    pub distances: Vec<f64>,
}

/// An adversarial perturbation before its cost is placed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub target: Tensor,
    pub r: Tensor,
    pub x_adv: Tensor,
}

impl Perturbation {
    pub fn distances(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(x.sub(&self.x_adv)?.row_norms())
    }

    /// `KL(target ∥ f(x_adv))` with the classifier bound on `net`'s tape.
    pub fn cost_on<'t>(&self, net: &BoundMlp<'t>, tape: &'t Tape) -> Result<Var<'t>> {
        let target = tape.constant(self.target.clone());
        let logits = net.forward(tape.constant(self.x_adv.clone()))?;
        nets::kl_categorical(target, logits)
    }
}

fn normalize_rows(t: &mut Tensor) {
    let norms = t.row_norms();
    for (i, n) in norms.into_iter().enumerate() {
        if n > 0.0 {
            t.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Seeded random direction with unit L2 norm per sample.
pub fn random_unit(shape: &[usize], seed: u64) -> Tensor {
    let mut d = rng::normal_tensor(shape.to_vec(), &mut rng::rng(seed));
    normalize_rows(&mut d);
    d
}

/// Power iteration for the most sensitive per-sample direction of `cost`.
///
/// `cost` receives the probe `ξ·d` as a tracked variable and returns a
/// scalar. Samples whose gradient vanishes keep the random start direction.
pub fn adv_direction<F>(cost: F, shape: &[usize], seed: u64, cfg: &PerturbConfig) -> Result<Tensor>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    cfg.validate()?;
    if shape.is_empty() || shape.iter().any(|&s| s == 0) {
        return Err(Error::invalid(format!("cannot perturb a batch of shape {shape:?}")));
    }
    let d0 = random_unit(shape, seed);
    let mut d = d0.clone();
    for _ in 0..cfg.power_iters {
        let tape = Tape::new();
        let probe = tape.leaf(d.scale(cfg.xi));
        let c = cost(probe)?;
        let mut g = tape.backward(c)?.get(probe);
        g.check_finite("adversarial gradient")?;
        let norms = g.row_norms();
        normalize_rows(&mut g);
        for (i, n) in norms.into_iter().enumerate() {
            if n == 0.0 {
                g.row_mut(i).copy_from_slice(d0.row(i));
            }
        }
        d = g;
    }
    Ok(d)
}

fn check_batch(model: &ClassifierModel, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.row_len() != model.input_dim() || x.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "classifier input",
            lhs: x.shape().to_vec(),
            rhs: vec![model.input_dim()],
        });
    }
    Ok(())
}

/// Input-space adversarial example `x + ε·d`.
pub fn vat_perturbation(
    model: &ClassifierModel,
    x: &Tensor,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Perturbation> {
    cfg.expect_space(Space::Input)?;
    check_batch(model, x)?;
    let target = model.predict_logits(x)?;
    let d = adv_direction(
        |r| {
            let tape = r.tape();
            let net = model.bind(tape, false);
            let xr = tape.constant(x.clone()).add(r)?;
            nets::kl_categorical(tape.constant(target.clone()), net.forward(xr)?)
        },
        x.shape(),
        seed,
        cfg,
    )?;
    let r = d.scale(cfg.epsilon);
    let x_adv = x.add(&r)?;
    Ok(Perturbation { target, r, x_adv })
}

/// Latent-space adversarial example `Dec(Enc(x) + ε·d)`.
pub fn lvat_perturbation(
    model: &ClassifierModel,
    transformer: &Transformer,
    x: &Tensor,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Perturbation> {
    cfg.expect_space(Space::Latent)?;
    check_batch(model, x)?;
    if transformer.input_dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "transformer input dimension {} differs from classifier input dimension {}",
            transformer.input_dim(),
            model.input_dim()
        )));
    }
    let target = model.predict_logits(x)?;
    let z = transformer.encode(x)?;
    let d = adv_direction(
        |r| {
            let tape = r.tape();
            let net = model.bind(tape, false);
            let dec = transformer.bind_frozen(tape);
            let xr = dec.decode_on(tape.constant(z.clone()).add(r)?)?;
            nets::kl_categorical(tape.constant(target.clone()), net.forward(xr)?)
        },
        z.shape(),
        seed,
        cfg,
    )?;
    let r = d.scale(cfg.epsilon);
    let x_adv = transformer.decode(&z.add(&r)?)?;
    Ok(Perturbation { target, r, x_adv })
}

fn finish(model: &ClassifierModel, x: &Tensor, p: Perturbation) -> Result<AdvResult> {
    let tape = Tape::new();
    let cost = p.cost_on(&model.bind(&tape, false), &tape)?.value().item();
    Ok(AdvResult {
        cost,
        distances: p.distances(x)?,
        r: p.r,
        x_adv: p.x_adv,
    })
}

pub fn vat_cost(model: &ClassifierModel, x: &Tensor, cfg: &PerturbConfig, seed: u64) -> Result<AdvResult> {
    let p = vat_perturbation(model, x, cfg, seed)?;
    finish(model, x, p)
}

pub fn lvat_cost(
    model: &ClassifierModel,
    transformer: &Transformer,
    x: &Tensor,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<AdvResult> {
    let p = lvat_perturbation(model, transformer, x, cfg, seed)?;
    finish(model, x, p)
}

fn pi_inputs(
    x: &Tensor,
    grid: Option<(usize, usize)>,
    cfg: &PiConfig,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if !(cfg.sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    let copy = |k: u64| -> Result<Tensor> {
        let s = rng::derive_index(seed, k);
        let a = data::augment(x, grid, &cfg.augment, rng::derive(s, "augment"))?;
        if cfg.sigma == 0.0 {
            return Ok(a);
        }
        let noise = rng::normal_tensor(a.shape().to_vec(), &mut rng::rng(rng::derive(s, "noise")));
        a.add(&noise.scale(cfg.sigma))
    };
    Ok((copy(0)?, copy(1)?))
}

/// Batch mean of `‖f(x̃₁) − f(x̃₂)‖²` over logits; both branches carry gradient.
pub fn pi_cost_on<'t>(
    net: &BoundMlp<'t>,
    tape: &'t Tape,
    x: &Tensor,
    grid: Option<(usize, usize)>,
    cfg: &PiConfig,
    seed: u64,
) -> Result<Var<'t>> {
    let (a, b) = pi_inputs(x, grid, cfg, seed)?;
    let fa = net.forward(tape.constant(a))?;
    let fb = net.forward(tape.constant(b))?;
    let per_sample = fa.sub(fb)?.square().sum(&[1])?;
    per_sample.mean(&[])
}

pub fn pi_cost(
    model: &ClassifierModel,
    x: &Tensor,
    grid: Option<(usize, usize)>,
    cfg: &PiConfig,
    seed: u64,
) -> Result<f64> {
    check_batch(model, x)?;
    let tape = Tape::new();
    Ok(pi_cost_on(&model.bind(&tape, false), &tape, x, grid, cfg, seed)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowModel;
    use crate::nets::Parameterized;

    fn zero_classifier(d: usize) -> ClassifierModel {
        let mut m = ClassifierModel::new(d, &[8], 3, 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    fn batch(b: usize, d: usize, seed: u64) -> Tensor {
        rng::normal_tensor(vec![b, d], &mut rng::rng(seed))
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig::new(0.0, Space::Input).is_err());
        assert!(PerturbConfig::new(1.0, Space::Input).is_ok());
        let mut c = PerturbConfig::new(1.0, Space::Input).unwrap();
        c.power_iters = 0;
        assert!(c.validate().is_err());
        c.power_iters = 1;
        c.xi = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn direction_has_unit_rows_and_is_deterministic() {
        let m = ClassifierModel::new(3, &[8], 2, 1).unwrap();
        let x = batch(6, 3, 2);
        let cfg = PerturbConfig::new(1.0, Space::Input).unwrap();
        let a = vat_perturbation(&m, &x, &cfg, 7).unwrap();
        let b = vat_perturbation(&m, &x, &cfg, 7).unwrap();
        assert_eq!(a, b);
        for n in a.r.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vat_radius_is_epsilon() {
        let m = ClassifierModel::new(4, &[8], 3, 3).unwrap();
        let x = batch(10, 4, 4);
        let cfg = PerturbConfig::new(0.37, Space::Input).unwrap();
        let res = vat_cost(&m, &x, &cfg, 1).unwrap();
        for d in res.distances {
            assert!((d - 0.37).abs() < 1e-9);
        }
        assert!(res.cost >= 0.0);
    }

    #[test]
    fn constant_classifier_costs_nothing_and_keeps_random_direction() {
        let m = zero_classifier(3);
        let x = batch(5, 3, 5);
        let cfg = PerturbConfig::new(2.0, Space::Input).unwrap();
        let res = vat_cost(&m, &x, &cfg, 9).unwrap();
        assert_eq!(res.cost, 0.0);
        assert_eq!(res.r, random_unit(&[5, 3], 9).scale(2.0));
    }

    #[test]
    fn identity_flow_lvat_equals_vat() {
        let m = ClassifierModel::new(2, &[16], 2, 6).unwrap();
        let x = batch(32, 2, 7);
        let t = Transformer::Flow(FlowModel::identity(2, 4, &[8]).unwrap());
        let vcfg = PerturbConfig::new(0.5, Space::Input).unwrap();
        let lcfg = PerturbConfig::new(0.5, Space::Latent).unwrap();
        let v = vat_cost(&m, &x, &vcfg, 3).unwrap();
        let l = lvat_cost(&m, &t, &x, &lcfg, 3).unwrap();
        assert!((v.cost - l.cost).abs() < 1e-12);
        assert_eq!(v.x_adv, l.x_adv);
    }

    #[test]
    fn lvat_latent_radius_is_epsilon() {
        let m = ClassifierModel::new(3, &[8], 2, 1).unwrap();
        let t = Transformer::Flow(FlowModel::new(3, 4, &[8], 2.0, 2).unwrap());
        let x = batch(12, 3, 3);
        let cfg = PerturbConfig::new(0.8, Space::Latent).unwrap();
        let res = lvat_cost(&m, &t, &x, &cfg, 4).unwrap();
        for n in res.r.row_norms() {
            assert!((n - 0.8).abs() < 1e-9);
        }
        assert!(res.cost >= 0.0);
    }

    #[test]
    fn space_and_dimension_mismatches_are_rejected() {
        let m = ClassifierModel::new(3, &[8], 2, 1).unwrap();
        let x = batch(4, 3, 0);
        let latent = PerturbConfig::new(1.0, Space::Latent).unwrap();
        assert!(vat_cost(&m, &x, &latent, 0).is_err());
        let t = Transformer::Flow(FlowModel::identity(4, 2, &[4]).unwrap());
        assert!(lvat_cost(&m, &t, &x, &latent, 0).is_err());
    }

    #[test]
    fn pi_cost_zero_without_noise_and_positive_with() {
        let m = ClassifierModel::new(3, &[8], 2, 1).unwrap();
        let x = batch(8, 3, 1);
        let none = PiConfig::default();
        assert_eq!(pi_cost(&m, &x, None, &none, 0).unwrap(), 0.0);
        let noisy = PiConfig {
            sigma: 0.1,
            ..Default::default()
        };
        assert!(pi_cost(&m, &x, None, &noisy, 0).unwrap() > 0.0);
    }

    #[test]
    fn kind_names_and_spaces() {
        let k: RegularizerKind = serde_json::from_str("\"lvat-flow\"").unwrap();
        assert_eq!(k, RegularizerKind::LvatFlow);
        assert_eq!(k.space(), Space::Latent);
        assert_eq!(RegularizerKind::Vat.space(), Space::Input);
        assert_eq!(RegularizerKind::LvatVae.transformer_kind(), Some("vae"));
    }
}
