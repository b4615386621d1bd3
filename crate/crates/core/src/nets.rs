//! Dense layers, parameter sets and the probabilistic losses shared by
//! every model.
//!
//! All losses reduce over the batch with the mean and measure KL in nats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Slope of every hidden-layer leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    None,
    Sigmoid,
    Tanh,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Models whose trainable tensors can be listed in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense layer",
                lhs: weights.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Glorot-uniform weights and zero biases for a chain of layer widths.
pub fn init_params(dims: &[usize], seed: u64) -> Result<ParamSet> {
    if dims.len() < 2 {
        return Err(Error::invalid("an MLP needs at least input and output widths"));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("non-positive layer width in {dims:?}")));
    }
    let mut r = rng::rng(seed);
    let mut ps = ParamSet::new();
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        ps.insert(
            format!("layers.{i}.weight"),
            rng::uniform_tensor(vec![fan_in, fan_out], -limit, limit, &mut r),
        )?;
        ps.insert(format!("layers.{i}.bias"), Tensor::zeros(vec![fan_out]))?;
    }
    Ok(ps)
}

/// Dense layers with leaky ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub output: OutputActivation,
}

impl Mlp {
    pub fn new(dims: &[usize], output: OutputActivation, seed: u64) -> Result<Self> {
        Self::from_params("", &init_params(dims, seed)?, output)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "mlp chain",
                    lhs: w[0].weights.shape().to_vec(),
                    rhs: w[1].weights.shape().to_vec(),
                });
            }
        }
        Ok(Mlp { layers, output })
    }

    /// Reads `{prefix}layers.{i}.{weight,bias}` for consecutive `i`.
    pub fn from_params(prefix: &str, ps: &ParamSet, output: OutputActivation) -> Result<Self> {
        let mut layers = Vec::new();
        while ps.contains(&format!("{prefix}layers.{}.weight", layers.len())) {
            let i = layers.len();
            layers.push(DenseLayer::new(
                ps.get(&format!("{prefix}layers.{i}.weight"))?.clone(),
                ps.get(&format!("{prefix}layers.{i}.bias"))?.clone(),
            )?);
        }
        Self::from_layers(layers, output)
    }

    pub fn write_params(&self, prefix: &str, ps: &mut ParamSet) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            ps.insert(format!("{prefix}layers.{i}.weight"), l.weights.clone())?;
            ps.insert(format!("{prefix}layers.{i}.bias"), l.bias.clone())?;
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(DenseLayer::out_dim));
        d
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weights), put(&l.bias)))
                .collect(),
            output: self.output,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).forward(tape.constant(x.clone()))?;
        Ok(out.value().as_ref().clone())
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    output: OutputActivation,
}

impl<'t> BoundMlp<'t> {
    /// Output before the output activation.
    pub fn forward_pre(&self, x: Var<'t>) -> Result<Var<'t>> {
        let in_dim = self.layers[0].0.shape()[0];
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                lhs: xs,
                rhs: vec![in_dim],
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.forward_pre(x)?;
        Ok(match self.output {
            OutputActivation::None => h,
            OutputActivation::Sigmoid => h.sigmoid(),
            OutputActivation::Tanh => h.tanh(),
        })
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.get(v)).collect()
    }
}

fn batch_of(v: &Var<'_>) -> Result<usize> {
    let s = v.shape();
    if s.len() != 2 {
        return Err(Error::invalid(format!("expected a B×K matrix, got {s:?}")));
    }
    Ok(s[0])
}

/// Row-wise softmax with the max-shift.
pub fn softmax<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.value().check_finite("softmax input")?;
    if logits.shape().get(1).copied().unwrap_or(0) < 2 {
        return Err(Error::invalid("softmax needs at least two classes"));
    }
    logits.softmax()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), num_classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        t.data_mut()[i * num_classes + y] = 1.0;
    }
    Ok(t)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let b = batch_of(&logits)?;
    if b != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape(),
            rhs: vec![labels.len()],
        });
    }
    let k = logits.shape()[1];
    let target = logits.tape().constant(one_hot(labels, k)?);
    Ok(target
        .mul(logits.log_softmax()?)?
        .sum(&[])?
        .scale(-1.0 / b as f64))
}

/// Mean over the batch of `KL(softmax(p) ‖ softmax(q))`, in nats.
pub fn kl_categorical<'t>(p_logits: Var<'t>, q_logits: Var<'t>) -> Result<Var<'t>> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_categorical",
            lhs: p_logits.shape(),
            rhs: q_logits.shape(),
        });
    }
    let b = batch_of(&p_logits)?;
    let lp = p_logits.log_softmax()?;
    let lq = q_logits.log_softmax()?;
    Ok(lp.exp().mul(lp.sub(lq)?)?.sum(&[])?.scale(1.0 / b as f64))
}

/// Per-sample `KL(softmax(p) ‖ softmax(q))` without recording.
pub fn kl_rows(p_logits: &Tensor, q_logits: &Tensor) -> Result<Vec<f64>> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_rows",
            lhs: p_logits.shape().to_vec(),
            rhs: q_logits.shape().to_vec(),
        });
    }
    let lp = p_logits.log_softmax_rows()?;
    let lq = q_logits.log_softmax_rows()?;
    Ok((0..lp.rows())
        .map(|i| {
            lp.row(i)
                .iter()
                .zip(lq.row(i))
                .map(|(a, b)| a.exp() * (a - b))
                .sum()
        })
        .collect())
}

/// Mean over the batch of `KL(N(mu, exp(log_var)) ‖ N(0, I))`.
pub fn gaussian_kl<'t>(mu: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    if mu.shape() != log_var.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_kl",
            lhs: mu.shape(),
            rhs: log_var.shape(),
        });
    }
    mu.value().check_finite("gaussian_kl mean")?;
    log_var.value().check_finite("gaussian_kl log-variance")?;
    let b = mu.value().rows() as f64;
    let terms = mu.square().add(log_var.exp())?.sub(log_var)?.add_scalar(-1.0);
    Ok(terms.sum(&[])?.scale(0.5 / b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl for<'t> Fn(&'t Tape) -> Var<'t>) -> f64 {
        let tape = Tape::new();
        f(&tape).value().item()
    }

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(&[3, 5, 2], 9).unwrap();
        let b = init_params(&[3, 5, 2], 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&[3, 5, 2], 10).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(init_params(&[3, 0, 2], 1).is_err());
    }

    #[test]
    fn init_weights_are_glorot_bounded_and_centered() {
        let ps = init_params(&[256, 256], 3).unwrap();
        let w = ps.get("layers.0.weight").unwrap();
        let limit = (6.0f64 / 512.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        // Uniform(-a, a) has sd a/sqrt(3); the mean of 65536 draws has sd ~2.5e-4.
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let p = softmax(tape.constant(m(&[vec![0.0, 0.0]]))).unwrap();
        assert_eq!(p.value().data(), &[0.5, 0.5]);
        let p = softmax(tape.constant(m(&[vec![1f64.ln(), 2f64.ln(), 3f64.ln()]]))).unwrap();
        for (got, want) in p.value().data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let p = softmax(tape.constant(m(&[vec![1000.0, 0.0]]))).unwrap();
        assert!(p.value().is_finite());
        assert!(softmax(tape.constant(m(&[vec![f64::NAN, 0.0]]))).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = eval(|t| cross_entropy(t.constant(m(&[vec![0.0, 0.0]])), &[0]).unwrap());
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        let ce = eval(|t| cross_entropy(t.constant(m(&[vec![30.0, -30.0]])), &[0]).unwrap());
        assert!(ce >= 0.0 && ce < 1e-20);
        let tape = Tape::new();
        assert!(matches!(
            cross_entropy(tape.constant(m(&[vec![0.0, 0.0]])), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let same = eval(|t| {
            let l = m(&[vec![0.3, -2.0, 1.0]]);
            kl_categorical(t.constant(l.clone()), t.constant(l)).unwrap()
        });
        assert_eq!(same, 0.0);
        let kl = eval(|t| {
            kl_categorical(
                t.constant(m(&[vec![30.0, -30.0]])),
                t.constant(m(&[vec![0.0, 0.0]])),
            )
            .unwrap()
        });
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        // p = [0.9, 0.1], q = [0.5, 0.5]
        let p = m(&[vec![9f64.ln(), 0.0]]);
        let q = m(&[vec![0.0, 0.0]]);
        let pq = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let qp = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got_pq = kl_rows(&p, &q).unwrap()[0];
        let got_qp = kl_rows(&q, &p).unwrap()[0];
        assert!((got_pq - pq).abs() < 1e-14);
        assert!((got_qp - qp).abs() < 1e-14);
        assert!((got_pq - got_qp).abs() > 0.1);
    }

    #[test]
    fn gaussian_kl_examples() {
        let g = |mu: Vec<f64>, lv: Vec<f64>| {
            eval(|t| {
                gaussian_kl(
                    t.constant(Tensor::new(vec![1, mu.len()], mu.clone()).unwrap()),
                    t.constant(Tensor::new(vec![1, lv.len()], lv.clone()).unwrap()),
                )
                .unwrap()
            })
        };
        assert_eq!(g(vec![0.0, 0.0], vec![0.0, 0.0]), 0.0);
        assert!((g(vec![1.0], vec![0.0]) - 0.5).abs() < 1e-15);
        assert!((g(vec![1.0, 1.0], vec![0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_round_trips_through_param_set() {
        let mlp = Mlp::new(&[2, 4, 3], OutputActivation::Sigmoid, 5).unwrap();
        let mut ps = ParamSet::new();
        mlp.write_params("enc.", &mut ps).unwrap();
        assert_eq!(Mlp::from_params("enc.", &ps, OutputActivation::Sigmoid).unwrap(), mlp);
        assert!(mlp.write_params("enc.", &mut ps).is_err());
        assert_eq!(mlp.dims(), vec![2, 4, 3]);
    }
}
