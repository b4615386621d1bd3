//! Central finite-difference checks of reverse-mode gradients for every
//! tape operation and for the full consistency-cost graphs.
//!
//! Each case maps a list of input tensors to a scalar and its analytic
//! gradient. Non-scalar op outputs are reduced with `sum(out ⊙ W)` for a
//! fixed random `W`, so every output element contributes.

use std::fmt;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nets::{self, OutputActivation, Parameterized};
use crate::regularizer::{self, PerturbConfig, PiConfig, Space};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::Transformer;
use crate::vae::VaeModel;

/// Maximum accepted `|analytic − numeric| / max(1, |numeric|)`.
pub const TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

type Eval = Box<dyn Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>>;

pub struct Case {
    pub name: String,
    inputs: Vec<Tensor>,
    eval: Eval,
}

impl fmt::Debug for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Case")
            .field("name", &self.name)
            .field("inputs", &self.inputs.iter().map(Tensor::shape).collect::<Vec<_>>())
            .finish()
    }
}

impl Case {
    pub fn num_elements(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// A case on raw tensors: `graph` receives the inputs as tracked leaves.
pub fn op_case<G>(name: &str, inputs: Vec<Tensor>, graph: G) -> Case
where
    G: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    let seed = rng::derive(0, name);
    Case {
        name: name.to_string(),
        inputs,
        eval: Box::new(move |ins| {
            let tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
            let mut out = graph(&vars)?;
            if !out.value().is_scalar() {
                let w = rng::normal_tensor(out.shape(), &mut rng::rng(seed));
                out = out.mul(tape.constant(w))?.sum(&[])?;
            }
            let g = tape.backward(out)?;
            Ok((out.value().item(), vars.into_iter().map(|v| g.get(v)).collect()))
        }),
    }
}

/// A case over a model's parameters: `graph` binds the model as trainable
/// and returns the scalar with the parameter variables in `params()` order.
pub fn model_case<M, G>(name: &str, model: M, graph: G) -> Case
where
    M: Parameterized + Clone + 'static,
    G: for<'t> Fn(&M, &'t Tape) -> Result<(Var<'t>, Vec<Var<'t>>)> + 'static,
{
    let inputs = model.params().into_iter().cloned().collect();
    Case {
        name: name.to_string(),
        inputs,
        eval: Box::new(move |ins| {
            let mut m = model.clone();
            for (p, v) in m.params_mut().into_iter().zip(ins) {
                *p = v.clone();
            }
            let tape = Tape::new();
            let (out, vars) = graph(&m, &tape)?;
            let g = tape.backward(out)?;
            Ok((out.value().item(), vars.into_iter().map(|v| g.get(v)).collect()))
        }),
    }
}

/// Compares analytic and central-difference gradients elementwise.
/// With `corrupt`, the first analytic gradient element is shifted by 0.01.
pub fn check(case: &Case, corrupt: bool) -> Result<CheckReport> {
    let (_, mut grads) = (case.eval)(&case.inputs)?;
    if grads.len() != case.inputs.len() {
        return Err(Error::invalid(format!("{}: gradient count mismatch", case.name)));
    }
    if corrupt {
        if let Some(v) = grads.iter_mut().find(|g| !g.is_empty()).map(|g| &mut g.data_mut()[0]) {
            *v += 1e-2;
        }
    }
    let mut worst: f64 = 0.0;
    let mut inputs = case.inputs.clone();
    for (k, g) in grads.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + STEP;
            let (plus, _) = (case.eval)(&inputs)?;
            inputs[k].data_mut()[i] = orig - STEP;
            let (minus, _) = (case.eval)(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = (g.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradcheck {}", case.name),
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(CheckReport {
        name: case.name.clone(),
        elements: case.num_elements(),
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    rng::normal_tensor(shape.to_vec(), &mut rng::rng(seed))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    rng::uniform_tensor(shape.to_vec(), lo, hi, &mut rng::rng(seed))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 0.2, 1.5, seed).zip_with(&uniform(shape, 0.0, 1.0, seed + 1), "sign", |m, s| {
        if s < 0.5 {
            -m
        } else {
            m
        }
    })
    .expect("same shape")
}

/// Every registered tape operation and loss.
pub fn op_cases() -> Vec<Case> {
    let labels = vec![0, 2, 1, 2];
    vec![
        op_case("add (broadcast)", vec![normal(&[3, 4], 1), normal(&[4], 2)], |v| v[0].add(v[1])),
        op_case("sub (broadcast)", vec![normal(&[3, 1], 3), normal(&[3, 4], 4)], |v| v[0].sub(v[1])),
        op_case("mul (broadcast)", vec![normal(&[2, 3, 4], 5), normal(&[3, 1], 6)], |v| v[0].mul(v[1])),
        op_case("div", vec![normal(&[3, 4], 7), away_from_zero(&[3, 4], 8)], |v| v[0].div(v[1])),
        op_case("matmul", vec![normal(&[3, 5], 9), normal(&[5, 2], 10)], |v| v[0].matmul(v[1])),
        op_case("neg", vec![normal(&[5], 11)], |v| Ok(v[0].neg())),
        op_case("scale", vec![normal(&[2, 3], 12)], |v| Ok(v[0].scale(-1.7))),
        op_case("add_scalar", vec![normal(&[2, 3], 13)], |v| Ok(v[0].add_scalar(0.4))),
        op_case("exp", vec![normal(&[2, 3], 14)], |v| Ok(v[0].exp())),
        op_case("ln", vec![uniform(&[2, 3], 0.3, 2.0, 15)], |v| Ok(v[0].ln())),
        op_case("tanh", vec![normal(&[2, 3], 16)], |v| Ok(v[0].tanh())),
        op_case("sigmoid", vec![normal(&[2, 3], 17).scale(3.0)], |v| Ok(v[0].sigmoid())),
        op_case("softplus", vec![normal(&[2, 3], 18).scale(3.0)], |v| Ok(v[0].softplus())),
        op_case("square", vec![normal(&[2, 3], 19)], |v| Ok(v[0].square())),
        op_case("leaky_relu", vec![away_from_zero(&[3, 4], 20)], |v| {
            Ok(v[0].leaky_relu(nets::LEAKY_SLOPE))
        }),
        op_case("clamp", vec![Tensor::vector(vec![-2.0, -0.5, 0.3, 0.9, 2.5])], |v| {
            Ok(v[0].clamp(-1.0, 1.0))
        }),
        op_case("sum (axis)", vec![normal(&[3, 4, 2], 21)], |v| v[0].sum(&[1])),
        op_case("mean (axes)", vec![normal(&[3, 4, 2], 22)], |v| v[0].mean(&[0, 2])),
        op_case("reshape", vec![normal(&[3, 4], 23)], |v| v[0].reshape(vec![2, 6])),
        op_case("slice", vec![normal(&[3, 6], 24)], |v| v[0].slice(1, 2, 3)),
        op_case("concat", vec![normal(&[3, 2], 25), normal(&[3, 4], 26)], |v| {
            Var::concat(&[v[0], v[1]], 1)
        }),
        op_case("select_columns", vec![normal(&[3, 4], 27)], |v| v[0].select_columns(&[3, 0, 0, 2])),
        op_case("log_softmax", vec![normal(&[4, 3], 28).scale(2.0)], |v| v[0].log_softmax()),
        op_case("softmax", vec![normal(&[4, 3], 29).scale(2.0)], |v| v[0].softmax()),
        op_case("cross_entropy", vec![normal(&[4, 3], 30)], move |v| nets::cross_entropy(v[0], &labels)),
        op_case("kl_categorical", vec![normal(&[4, 3], 31), normal(&[4, 3], 32)], |v| {
            nets::kl_categorical(v[0], v[1])
        }),
        op_case("gaussian_kl", vec![normal(&[4, 2], 33), normal(&[4, 2], 34).scale(0.5)], |v| {
            nets::gaussian_kl(v[0], v[1])
        }),
    ]
}

/// The full consistency-cost, ELBO and flow-likelihood graphs.
pub fn model_cases() -> Result<Vec<Case>> {
    let d = 3;
    let clf = ClassifierModel::new(d, &[8], 3, 40)?;
    let x = normal(&[6, d], 41);
    let flow = FlowModel::new(d, 4, &[8], 2.0, 42)?;
    let vae = VaeModel::new(d, 2, &[8], OutputActivation::None, 43)?;
    let flow_t = Transformer::Flow(flow.clone());
    let vae_t = Transformer::Vae(vae.clone());
    let input = PerturbConfig::new(0.5, Space::Input)?;
    let latent = PerturbConfig::new(0.5, Space::Latent)?;

    let mut cases = Vec::new();

    // Final passes: gradient of KL(target ∥ f(x_adv)) in the classifier
    // parameters with the target and the perturbation held fixed.
    let perturbations = [
        ("vat_cost final pass", regularizer::vat_perturbation(&clf, &x, &input, 44)?),
        ("lvat_cost (flow) final pass", regularizer::lvat_perturbation(&clf, &flow_t, &x, &latent, 45)?),
        ("lvat_cost (vae) final pass", regularizer::lvat_perturbation(&clf, &vae_t, &x, &latent, 46)?),
    ];
    for (name, p) in perturbations {
        cases.push(model_case(name, clf.clone(), move |m: &ClassifierModel, tape| {
            let net = m.bind(tape, true);
            Ok((p.cost_on(&net, tape)?, net.vars()))
        }));
    }

    // Probe passes: gradient of the cost in the direction d, with ξ = 1.
    let target = clf.predict_logits(&x)?;
    {
        let (clf, x, target) = (clf.clone(), x.clone(), target.clone());
        cases.push(op_case("vat_cost probe", vec![normal(&[6, d], 47)], move |v| {
            let tape = v[0].tape();
            let net = clf.bind(tape, false);
            let xr = tape.constant(x.clone()).add(v[0])?;
            nets::kl_categorical(tape.constant(target.clone()), net.forward(xr)?)
        }));
    }
    for (name, t) in [("lvat_cost (flow) probe", flow_t), ("lvat_cost (vae) probe", vae_t)] {
        let z = t.encode(&x)?;
        let (clf, target) = (clf.clone(), target.clone());
        cases.push(op_case(name, vec![normal(z.shape(), 48)], move |v| {
            let tape = v[0].tape();
            let net = clf.bind(tape, false);
            let xr = t.bind_frozen(tape).decode_on(tape.constant(z.clone()).add(v[0])?)?;
            nets::kl_categorical(tape.constant(target.clone()), net.forward(xr)?)
        }));
    }

    {
        let x = x.clone();
        cases.push(model_case("pi_cost", clf.clone(), move |m: &ClassifierModel, tape| {
            let net = m.bind(tape, true);
            let cfg = PiConfig {
                sigma: 0.1,
                ..Default::default()
            };
            Ok((regularizer::pi_cost_on(&net, tape, &x, None, &cfg, 49)?, net.vars()))
        }));
    }
    {
        let x = x.clone();
        cases.push(model_case("flow log-likelihood", flow, move |f: &FlowModel, tape| {
            let b = f.bind(tape, true);
            Ok((b.log_likelihood_on(tape.constant(x.clone()))?, b.vars()))
        }));
    }
    {
        let noise = normal(&[6, 2], 50);
        cases.push(model_case("vae elbo", vae, move |m: &VaeModel, tape| {
            let b = m.bind(tape, true);
            Ok((b.elbo_on(tape.constant(x.clone()), &noise)?, b.vars()))
        }));
    }
    let bern = VaeModel::new(4, 2, &[6], OutputActivation::Sigmoid, 51)?;
    let xb = uniform(&[5, 4], 0.0, 1.0, 52);
    let noise = normal(&[5, 2], 53);
    cases.push(model_case("vae elbo (bernoulli)", bern, move |m: &VaeModel, tape| {
        let b = m.bind(tape, true);
        Ok((b.elbo_on(tape.constant(xb.clone()), &noise)?, b.vars()))
    }));
    Ok(cases)
}

pub fn all_cases() -> Result<Vec<Case>> {
    let mut c = op_cases();
    c.extend(model_cases()?);
    Ok(c)
}

/// Runs every case; `corrupt` names a case whose analytic gradient is
/// deliberately falsified.
pub fn run(corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let cases = all_cases()?;
    if let Some(name) = corrupt {
        if !cases.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format!("no gradcheck case named {name:?}")));
        }
    }
    cases.iter().map(|c| check(c, corrupt == Some(c.name.as_str()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_is_large_and_uniquely_named() {
        let cases = all_cases().unwrap();
        assert!(op_cases().len() >= 12);
        let mut names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), cases.len());
    }

    #[test]
    fn every_op_passes() {
        for c in op_cases() {
            let r = check(&c, false).unwrap();
            assert!(r.passed, "{} max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let cases = op_cases();
        let r = check(&cases[0], true).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_err > 1e-3);
    }

    #[test]
    fn unknown_corruption_target_is_an_error() {
        assert!(run(Some("no such op")).is_err());
    }
}
