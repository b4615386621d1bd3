//! Adam with bias correction and the linear learning-rate decay schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;
pub const BETA1: f64 = 0.9;
pub const BETA1_DECAY: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Running products of the β values used so far, for bias correction
    /// when β₁ changes mid-run.
    beta1_prod: f64,
    beta2_prod: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            beta1_prod: 1.0,
            beta2_prod: 1.0,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        self.beta1_prod *= self.beta1;
        self.beta2_prod *= self.beta2;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - self.beta1_prod;
        let c2 = 1.0 - self.beta2_prod;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate and β₁ at `step`: constant `lr0` and 0.9, then over the
/// final `decay_updates` a linear ramp to 0 with β₁ = 0.5.
pub fn lr_schedule(step: usize, total_updates: usize, decay_updates: usize, lr0: f64) -> Result<(f64, f64)> {
    if step > total_updates {
        return Err(Error::invalid(format!("step {step} beyond {total_updates} updates")));
    }
    if decay_updates > total_updates {
        return Err(Error::invalid("decay_updates exceeds total_updates"));
    }
    let start = total_updates - decay_updates;
    if decay_updates == 0 || step < start {
        return Ok((lr0, BETA1));
    }
    let frac = (total_updates - step) as f64 / decay_updates as f64;
    Ok((lr0 * frac, BETA1_DECAY))
}
