//! Invertible flow of affine couplings and fixed permutations with a
//! standard normal base distribution.
//!
//! A coupling keeps the masked dimensions `x_m` and maps the rest as
//! `y = x ⊙ exp(s(x_m)) + t(x_m)` with `s = s_max · tanh(·)`, so its
//! log-determinant is the sum of `s` over the transformed dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BoundMlp, Mlp, OutputActivation, ParamSet, Parameterized};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const DEFAULT_S_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling {
    /// `true` marks dimensions that pass through unchanged.
    pub mask: Vec<bool>,
    /// Maps the masked input to `[raw log-scale | shift]`.
    pub conditioner: Mlp,
    pub s_max: f64,
}

impl AffineCoupling {
    pub fn new(mask: Vec<bool>, conditioner: Mlp, s_max: f64) -> Result<Self> {
        let d = mask.len();
        let kept = mask.iter().filter(|&&m| m).count();
        if kept == 0 || kept == d {
            return Err(Error::invalid("coupling mask must split dimensions into two non-empty sets"));
        }
        if conditioner.in_dim() != d || conditioner.out_dim() != 2 * d {
            return Err(Error::invalid(format!(
                "conditioner maps {} -> {}, expected {d} -> {}",
                conditioner.in_dim(),
                conditioner.out_dim(),
                2 * d
            )));
        }
        if !(s_max > 0.0) {
            return Err(Error::invalid("log-scale bound must be positive"));
        }
        Ok(AffineCoupling {
            mask,
            conditioner,
            s_max,
        })
    }

    fn masks(&self) -> (Tensor, Tensor) {
        let keep: Vec<f64> = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let rest: Vec<f64> = keep.iter().map(|v| 1.0 - v).collect();
        (Tensor::vector(keep), Tensor::vector(rest))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowLayer {
    Coupling(AffineCoupling),
    Permutation(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Coupling,
    Permutation,
}

/// Everything about a flow except its conditioner weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLayout {
    pub dim: usize,
    pub layers: Vec<LayerKind>,
    pub masks: Vec<Vec<u8>>,
    pub permutations: Vec<Vec<usize>>,
    pub s_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub layers: Vec<FlowLayer>,
    pub dim: usize,
}

fn alternating_mask(dim: usize, parity: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == parity).collect()
}

fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

impl FlowModel {
    /// Couplings with alternating even/odd masks and a seeded random
    /// permutation after every second coupling.
    pub fn new(dim: usize, couplings: usize, hidden: &[usize], s_max: f64, seed: u64) -> Result<Self> {
        Self::build(dim, couplings, hidden, s_max, seed, false)
    }

    /// A flow whose every layer is the identity map.
    pub fn identity(dim: usize, couplings: usize, hidden: &[usize]) -> Result<Self> {
        let mut f = Self::build(dim, couplings, hidden, DEFAULT_S_MAX, 0, true)?;
        f.zero_conditioners();
        Ok(f)
    }

    fn build(
        dim: usize,
        couplings: usize,
        hidden: &[usize],
        s_max: f64,
        seed: u64,
        identity_perms: bool,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("a coupling flow needs at least two dimensions"));
        }
        if couplings == 0 {
            return Err(Error::invalid("a flow needs at least one coupling"));
        }
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * dim);
        let mut perm_rng = rng::rng(rng::derive(seed, "permutations"));
        let mut layers = Vec::new();
        for k in 0..couplings {
            let cond = Mlp::new(
                &dims,
                OutputActivation::None,
                rng::derive_index(rng::derive(seed, "conditioner"), k as u64),
            )?;
            layers.push(FlowLayer::Coupling(AffineCoupling::new(
                alternating_mask(dim, k % 2),
                cond,
                s_max,
            )?));
            if k % 2 == 1 && k + 1 < couplings {
                let p = if identity_perms {
                    (0..dim).collect()
                } else {
                    rng::permutation(dim, &mut perm_rng)
                };
                layers.push(FlowLayer::Permutation(p));
            }
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<FlowLayer>) -> Result<Self> {
        let dim = match layers.first() {
            Some(FlowLayer::Coupling(c)) => c.mask.len(),
            Some(FlowLayer::Permutation(p)) => p.len(),
            None => return Err(Error::invalid("empty flow")),
        };
        for l in &layers {
            match l {
                FlowLayer::Coupling(c) if c.mask.len() != dim => {
                    return Err(Error::invalid("coupling width differs from flow dimension"))
                }
                FlowLayer::Permutation(p) => {
                    let mut s = p.clone();
                    s.sort_unstable();
                    if s != (0..dim).collect::<Vec<_>>() {
                        return Err(Error::invalid(format!("{p:?} is not a permutation of 0..{dim}")));
                    }
                }
                _ => {}
            }
        }
        Ok(FlowModel { layers, dim })
    }

    /// Sets every conditioner output to zero, making each coupling the identity.
    pub fn zero_conditioners(&mut self) {
        for l in &mut self.layers {
            if let FlowLayer::Coupling(c) = l {
                for p in c.conditioner.params_mut() {
                    p.data_mut().fill(0.0);
                }
            }
        }
    }

    pub fn num_couplings(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, FlowLayer::Coupling(_)))
            .count()
    }

    /// Concatenation: `other` applied after `self`.
    pub fn then(&self, other: &FlowModel) -> Result<FlowModel> {
        if self.dim != other.dim {
            return Err(Error::invalid("cannot compose flows of different dimension"));
        }
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Self::from_layers(layers)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundFlow<'t> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                FlowLayer::Coupling(c) => {
                    let (keep, rest) = c.masks();
                    BoundLayer::Coupling {
                        keep: tape.constant(keep),
                        rest: tape.constant(rest),
                        cond: c.conditioner.bind(tape, trainable),
                        s_max: c.s_max,
                        dim: self.dim,
                    }
                }
                FlowLayer::Permutation(p) => BoundLayer::Permutation {
                    forward: p.clone(),
                    inverse: invert_permutation(p),
                },
            })
            .collect();
        BoundFlow {
            layers,
            dim: self.dim,
        }
    }

    /// `(z, log|det ∂z/∂x|)` per sample.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let (z, ld) = self.bind(&tape, false).forward_on(tape.constant(x.clone()))?;
        Ok((z.value().as_ref().clone(), ld.value().as_ref().clone()))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = self.bind(&tape, false).inverse_on(tape.constant(z.clone()))?;
        Ok(x.value().as_ref().clone())
    }

    /// Mean log-density of the batch under the flow.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let ll = self.bind(&tape, false).log_likelihood_on(tape.constant(x.clone()))?;
        Ok(ll.value().item())
    }

    pub fn sample(&self, seed: u64, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        self.inverse(&rng::normal_tensor(vec![n, self.dim], &mut rng::rng(seed)))
    }

    pub fn layout(&self) -> FlowLayout {
        let mut layout = FlowLayout {
            dim: self.dim,
            layers: Vec::new(),
            masks: Vec::new(),
            permutations: Vec::new(),
            s_max: DEFAULT_S_MAX,
        };
        for l in &self.layers {
            match l {
                FlowLayer::Coupling(c) => {
                    layout.layers.push(LayerKind::Coupling);
                    layout.masks.push(c.mask.iter().map(|&m| u8::from(m)).collect());
                    layout.s_max = c.s_max;
                }
                FlowLayer::Permutation(p) => {
                    layout.layers.push(LayerKind::Permutation);
                    layout.permutations.push(p.clone());
                }
            }
        }
        layout
    }

    pub fn param_set(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        let mut k = 0;
        for l in &self.layers {
            if let FlowLayer::Coupling(c) = l {
                c.conditioner.write_params(&format!("couplings.{k}."), &mut ps)?;
                k += 1;
            }
        }
        Ok(ps)
    }

    pub fn from_layout(layout: &FlowLayout, ps: &ParamSet) -> Result<Self> {
        let mut masks = layout.masks.iter();
        let mut perms = layout.permutations.iter();
        let mut layers = Vec::with_capacity(layout.layers.len());
        let mut k = 0;
        for kind in &layout.layers {
            match kind {
                LayerKind::Coupling => {
                    let mask = masks
                        .next()
                        .ok_or_else(|| Error::invalid("flow layout has too few masks"))?;
                    let cond = Mlp::from_params(&format!("couplings.{k}."), ps, OutputActivation::None)?;
                    layers.push(FlowLayer::Coupling(AffineCoupling::new(
                        mask.iter().map(|&m| m != 0).collect(),
                        cond,
                        layout.s_max,
                    )?));
                    k += 1;
                }
                LayerKind::Permutation => {
                    let p = perms
                        .next()
                        .ok_or_else(|| Error::invalid("flow layout has too few permutations"))?;
                    layers.push(FlowLayer::Permutation(p.clone()));
                }
            }
        }
        let model = Self::from_layers(layers)?;
        if model.dim != layout.dim {
            return Err(Error::invalid("flow layout dimension mismatch"));
        }
        Ok(model)
    }
}

impl Parameterized for FlowModel {
    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                FlowLayer::Coupling(c) => c.conditioner.params(),
                FlowLayer::Permutation(_) => Vec::new(),
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                FlowLayer::Coupling(c) => c.conditioner.params_mut(),
                FlowLayer::Permutation(_) => Vec::new(),
            })
            .collect()
    }
}

enum BoundLayer<'t> {
    Coupling {
        keep: Var<'t>,
        rest: Var<'t>,
        cond: BoundMlp<'t>,
        s_max: f64,
        dim: usize,
    },
    Permutation {
        forward: Vec<usize>,
        inverse: Vec<usize>,
    },
}

impl<'t> BoundLayer<'t> {
    fn scale_shift(&self, kept: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let BoundLayer::Coupling {
            rest, cond, s_max, dim, ..
        } = self
        else {
            unreachable!("scale_shift on a permutation")
        };
        let h = cond.forward(kept)?;
        let s = h.slice(1, 0, *dim)?.tanh().scale(*s_max).mul(*rest)?;
        let t = h.slice(1, *dim, *dim)?.mul(*rest)?;
        Ok((s, t))
    }
}

pub struct BoundFlow<'t> {
    layers: Vec<BoundLayer<'t>>,
    dim: usize,
}

impl<'t> BoundFlow<'t> {
    fn check(&self, x: &Var<'t>) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "flow input",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    pub fn forward_on(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check(&x)?;
        let tape = x.tape();
        let mut log_det = tape.constant(Tensor::zeros(vec![x.value().rows()]));
        let mut h = x;
        for layer in &self.layers {
            match layer {
                BoundLayer::Coupling { keep, rest, .. } => {
                    let kept = h.mul(*keep)?;
                    let (s, t) = layer.scale_shift(kept)?;
                    h = kept.add(h.mul(s.exp())?.mul(*rest)?)?.add(t)?;
                    log_det = log_det.add(s.sum(&[1])?)?;
                }
                BoundLayer::Permutation { forward, .. } => h = h.select_columns(forward)?,
            }
        }
        Ok((h, log_det))
    }

    pub fn inverse_on(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.check(&z)?;
        let mut h = z;
        for layer in self.layers.iter().rev() {
            match layer {
                BoundLayer::Coupling { keep, rest, .. } => {
                    let kept = h.mul(*keep)?;
                    let (s, t) = layer.scale_shift(kept)?;
                    h = kept.add(h.sub(t)?.mul(s.neg().exp())?.mul(*rest)?)?;
                }
                BoundLayer::Permutation { inverse, .. } => h = h.select_columns(inverse)?,
            }
        }
        Ok(h)
    }

    /// Batch mean of `-½‖z‖² - (D/2) ln 2π + log_det`.
    pub fn log_likelihood_on(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (z, log_det) = self.forward_on(x)?;
        let b = x.value().rows() as f64;
        let d = self.dim as f64;
        let norm = 0.5 * d * std::f64::consts::TAU.ln();
        let per_sample = z.square().sum(&[1])?.scale(-0.5).add(log_det)?;
        Ok(per_sample.sum(&[])?.scale(1.0 / b).add_scalar(-norm))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                BoundLayer::Coupling { cond, .. } => cond.vars(),
                BoundLayer::Permutation { .. } => Vec::new(),
            })
            .collect()
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.get(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_alternate_and_permutations_interleave() {
        let f = FlowModel::new(4, 4, &[8], DEFAULT_S_MAX, 0).unwrap();
        let kinds: Vec<LayerKind> = f.layout().layers;
        use LayerKind::*;
        assert_eq!(kinds, vec![Coupling, Coupling, Permutation, Coupling, Coupling]);
        let l = f.layout();
        assert_eq!(l.masks[0], vec![1, 0, 1, 0]);
        assert_eq!(l.masks[1], vec![0, 1, 0, 1]);
        assert!(FlowModel::new(1, 2, &[4], 2.0, 0).is_err());
    }

    #[test]
    fn zero_conditioners_give_permuted_identity() {
        let mut f = FlowModel::new(4, 4, &[8], DEFAULT_S_MAX, 3).unwrap();
        f.zero_conditioners();
        let x = rng::normal_tensor(vec![5, 4], &mut rng::rng(1));
        let (z, ld) = f.forward(&x).unwrap();
        let FlowLayer::Permutation(p) = &f.layers[2] else { panic!() };
        assert_eq!(z, x.select_columns(p).unwrap());
        assert!(ld.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_flow_inverse_is_identity() {
        let f = FlowModel::identity(3, 4, &[4]).unwrap();
        let z = rng::normal_tensor(vec![4, 3], &mut rng::rng(2));
        assert_eq!(f.inverse(&z).unwrap(), z);
        assert_eq!(f.forward(&z).unwrap().0, z);
    }

    #[test]
    fn identity_flow_density_at_origin() {
        let f = FlowModel::identity(2, 2, &[4]).unwrap();
        let ll = f.log_likelihood(&Tensor::zeros(vec![1, 2])).unwrap();
        assert!((ll + std::f64::consts::TAU.ln()).abs() < 1e-12);
        let far = f.log_likelihood(&Tensor::full(vec![1, 2], 1.5)).unwrap();
        assert!(far < ll);
    }

    #[test]
    fn round_trip_is_exact() {
        let f = FlowModel::new(6, 6, &[16, 16], DEFAULT_S_MAX, 8).unwrap();
        let x = rng::normal_tensor(vec![100, 6], &mut rng::rng(4)).scale(2.0);
        let (z, _) = f.forward(&x).unwrap();
        let back = f.inverse(&z).unwrap();
        let err = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        let again = f.inverse(&f.forward(&back).unwrap().0).unwrap();
        assert!(again.sub(&back).unwrap().data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn composition_adds_log_dets() {
        let a = FlowModel::new(4, 2, &[8], DEFAULT_S_MAX, 1).unwrap();
        let b = FlowModel::new(4, 3, &[8], DEFAULT_S_MAX, 2).unwrap();
        let x = rng::normal_tensor(vec![7, 4], &mut rng::rng(3));
        let (za, lda) = a.forward(&x).unwrap();
        let (zb, ldb) = b.forward(&za).unwrap();
        let (zab, ldab) = a.then(&b).unwrap().forward(&x).unwrap();
        assert_eq!(zab, zb);
        for ((x, y), s) in lda.data().iter().zip(ldb.data()).zip(ldab.data()) {
            assert!((x + y - s).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_flow_samples_are_standard_normal() {
        let f = FlowModel::identity(2, 2, &[4]).unwrap();
        let s = f.sample(5, 10_000).unwrap();
        assert_eq!(s, f.sample(5, 10_000).unwrap());
        for d in 0..2 {
            let col: Vec<f64> = (0..s.rows()).map(|i| s.row(i)[d]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&var), "{mean} {var}");
        }
    }

    #[test]
    fn layout_round_trip() {
        let f = FlowModel::new(5, 4, &[6], 1.5, 9).unwrap();
        let back = FlowModel::from_layout(&f.layout(), &f.param_set().unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
