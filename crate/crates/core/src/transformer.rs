//! A frozen encoder/decoder pair mapping inputs to a latent space: either
//! the VAE (posterior mean, decoder mean) or the flow (forward, inverse).

use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::nets::Parameterized;
use crate::tensor::{Tape, Tensor, Var};
use crate::vae::{BoundVae, VaeModel};

#[derive(Clone, Debug, PartialEq)]
pub enum Transformer {
    Vae(VaeModel),
    Flow(FlowModel),
}

impl Transformer {
    pub fn kind(&self) -> &'static str {
        match self {
            Transformer::Vae(_) => "vae",
            Transformer::Flow(_) => "flow",
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Transformer::Vae(v) => v.input_dim(),
            Transformer::Flow(f) => f.dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Transformer::Vae(v) => v.latent_dim,
            Transformer::Flow(f) => f.dim,
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        match self {
            Transformer::Vae(v) => v.encode_deterministic(x),
            Transformer::Flow(f) => Ok(f.forward(x)?.0),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Transformer::Vae(v) => v.decode(z),
            Transformer::Flow(f) => f.inverse(z),
        }
    }

    /// Binds the parameters as constants, so no gradient reaches them.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundTransformer<'t> {
        match self {
            Transformer::Vae(v) => BoundTransformer::Vae(v.bind(tape, false)),
            Transformer::Flow(f) => BoundTransformer::Flow(f.bind(tape, false)),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Transformer::Vae(v) => v.params(),
            Transformer::Flow(f) => f.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Transformer::Vae(v) => v.params_mut(),
            Transformer::Flow(f) => f.params_mut(),
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.row_len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "transformer input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }
}

pub enum BoundTransformer<'t> {
    Vae(BoundVae<'t>),
    Flow(BoundFlow<'t>),
}

impl<'t> BoundTransformer<'t> {
    pub fn decode_on(&self, z: Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundTransformer::Vae(v) => v.decode_on(z),
            BoundTransformer::Flow(f) => f.inverse_on(z),
        }
    }
}
