//! Variational autoencoder: Gaussian encoder, Bernoulli or Gaussian decoder.

use crate::error::{Error, Result};
use crate::nets::{self, BoundMlp, Mlp, OutputActivation, ParamSet, Parameterized};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Encoder log-variances are clamped into this interval.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    /// Maps `x` to `[mu | log_var]`.
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
}

impl VaeModel {
    pub fn new(
        input_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend(hidden.iter().rev());
        dec.push(input_dim);
        Self::from_parts(
            Mlp::new(&enc, OutputActivation::None, rng::derive(seed, "encoder"))?,
            Mlp::new(&dec, output, rng::derive(seed, "decoder"))?,
        )
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let latent_dim = decoder.in_dim();
        if latent_dim == 0 || encoder.out_dim() != 2 * latent_dim {
            return Err(Error::invalid(format!(
                "encoder emits {} values for latent dimension {latent_dim}",
                encoder.out_dim()
            )));
        }
        if encoder.in_dim() != decoder.out_dim() {
            return Err(Error::invalid("encoder input and decoder output widths differ"));
        }
        if latent_dim > encoder.in_dim() {
            return Err(Error::invalid(format!(
                "latent dimension {latent_dim} exceeds input dimension {}",
                encoder.in_dim()
            )));
        }
        Ok(VaeModel {
            encoder,
            decoder,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn output(&self) -> OutputActivation {
        self.decoder.output
    }

    pub fn hidden(&self) -> Vec<usize> {
        let d = self.encoder.dims();
        d[1..d.len() - 1].to_vec()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundVae<'t> {
        BoundVae {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
            latent_dim: self.latent_dim,
            output: self.output(),
        }
    }

    /// Posterior mean, log-variance and one reparameterized sample.
    pub fn encode(&self, x: &Tensor, seed: u64) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let vae = self.bind(&tape, false);
        let (mu, log_var) = vae.encode_on(tape.constant(x.clone()))?;
        let noise = rng::normal_tensor(mu.shape(), &mut rng::rng(seed));
        let z = vae.sample_on(mu, log_var, &noise)?;
        Ok((
            mu.value().as_ref().clone(),
            log_var.value().as_ref().clone(),
            z.value().as_ref().clone(),
        ))
    }

    /// The posterior mean; this is the latent code LVAT perturbs.
    pub fn encode_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let (mu, _) = self.bind(&tape, false).encode_on(tape.constant(x.clone()))?;
        Ok(mu.value().as_ref().clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).decode_on(tape.constant(z.clone()))?;
        Ok(out.value().as_ref().clone())
    }

    pub fn elbo_loss(&self, x: &Tensor, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let noise = rng::normal_tensor(vec![x.rows(), self.latent_dim], &mut rng::rng(seed));
        let loss = self.bind(&tape, false).elbo_on(tape.constant(x.clone()), &noise)?;
        Ok(loss.value().item())
    }

    pub fn param_set(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        self.encoder.write_params("encoder.", &mut ps)?;
        self.decoder.write_params("decoder.", &mut ps)?;
        Ok(ps)
    }

    pub fn from_param_set(ps: &ParamSet, output: OutputActivation) -> Result<Self> {
        Self::from_parts(
            Mlp::from_params("encoder.", ps, OutputActivation::None)?,
            Mlp::from_params("decoder.", ps, output)?,
        )
    }
}

impl Parameterized for VaeModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

pub struct BoundVae<'t> {
    encoder: BoundMlp<'t>,
    decoder: BoundMlp<'t>,
    latent_dim: usize,
    output: OutputActivation,
}

impl<'t> BoundVae<'t> {
    pub fn encode_on(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.encoder.forward(x)?;
        let mu = h.slice(1, 0, self.latent_dim)?;
        let log_var = h
            .slice(1, self.latent_dim, self.latent_dim)?
            .clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((mu, log_var))
    }

    /// `mu + exp(log_var / 2) * noise`.
    pub fn sample_on(&self, mu: Var<'t>, log_var: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
        let eps = mu.tape().constant(noise.clone());
        mu.add(log_var.scale(0.5).exp().mul(eps)?)
    }

    pub fn decode_on(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward(z)
    }

    /// Reconstruction error plus the Gaussian prior KL, both batch means.
    pub fn elbo_on(&self, x: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
        let (mu, log_var) = self.encode_on(x)?;
        let z = self.sample_on(mu, log_var, noise)?;
        let b = x.value().rows() as f64;
        let recon = match self.output {
            OutputActivation::Sigmoid => {
                let xv = x.value();
                if xv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid(
                        "Bernoulli reconstruction needs data in [0, 1]",
                    ));
                }
                // -[x ln σ(a) + (1 - x) ln(1 - σ(a))] = softplus(a) - x·a
                let a = self.decoder.forward_pre(z)?;
                a.softplus().sub(x.mul(a)?)?
            }
            _ => self.decoder.forward(z)?.sub(x)?.square().scale(0.5),
        };
        let recon = recon.sum(&[])?.scale(1.0 / b);
        recon.add(nets::gaussian_kl(mu, log_var)?)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.get(v)).collect()
    }
}
