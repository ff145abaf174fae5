//! Sequence compressor: pools a variable-length set of vectors into one.
//!
//! Given rows `x: [N, d_in]`, a score MLP produces `h` scores per row, which
//! are softmax-normalized over the rows to mixture weights `M: [N, h]`. Each
//! column of `M` mixes the rows into one pooled vector, so `Mᵀx` is `[h, d_in]`.
//! That matrix is flattened row-major and mapped to `d_out` by an output MLP.
//!
//! Because the softmax runs over the row axis and `Mᵀx` sums over rows, the
//! result does not depend on row order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Tape, Var};

pub const DEFAULT_COMPRESSOR_HEADS: usize = 4;

#[derive(Debug, Clone)]
pub struct Compressor {
    pub score: Mlp,
    pub output: Mlp,
    pub heads: usize,
    pub input_width: usize,
    pub output_width: usize,
}

impl Compressor {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input_width: usize,
        output_width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_width == 0 || output_width == 0 || heads == 0 {
            return Err(Error::config(format!(
                "compressor {name}: widths and head count must be positive"
            )));
        }
        let score = Mlp::new(
            store,
            &format!("{name}.score"),
            &[input_width, input_width, heads],
            Activation::Relu,
            rng,
        )?;
        let output = Mlp::new(
            store,
            &format!("{name}.out"),
            &[heads * input_width, output_width, output_width],
            Activation::Relu,
            rng,
        )?;
        Ok(Self {
            score,
            output,
            heads,
            input_width,
            output_width,
        })
    }

    /// Critic side: pools per-agent features `[n, d]` into `e^0: [d]`.
    pub fn critic(store: &mut ParameterStore, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, "critic_compressor", width, width, heads, rng)
    }

    /// Actor side: pools the consensus sequence `[m + 1, d]` into `c: [d]`.
    pub fn actor(store: &mut ParameterStore, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, "actor_compressor", width, width, heads, rng)
    }

    fn batched(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, bool)> {
        let shape = tape.shape(x).to_vec();
        match shape.len() {
            2 => Ok((tape.reshape(x, &[1, shape[0], shape[1]])?, true)),
            3 => Ok((x, false)),
            _ => Err(Error::contract(format!(
                "compressor input must be [N, d] or [B, N, d], got {shape:?}"
            ))),
        }
    }

    /// Mixture weights `M`, `[B, N, h]` (or `[N, h]` for unbatched input).
    pub fn mixture_weights(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let (xb, unbatched) = self.batched(tape, x)?;
        let scores = self.score.forward(tape, p, xb)?;
        let m = tape.softmax(scores, 1)?;
        if unbatched {
            let s = tape.shape(m).to_vec();
            Ok(tape.reshape(m, &s[1..])?)
        } else {
            Ok(m)
        }
    }

    /// `[B, N, d_in] -> [B, d_out]`, or `[N, d_in] -> [d_out]`.
    pub fn compress(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let raw = tape.shape(x);
        if raw.len() >= 2 && raw[raw.len() - 2] == 0 {
            return Err(Error::contract("compressor needs at least one row"));
        }
        let (xb, unbatched) = self.batched(tape, x)?;
        let shape = tape.shape(xb).to_vec();
        if shape[2] != self.input_width {
            return Err(crate::tensor::TensorError::Dimension {
                op: "compress",
                lhs: shape,
                rhs: vec![self.input_width],
            }
            .into());
        }
        let batch = shape[0];
        let m = self.mixture_weights(tape, p, xb)?;
        let mt = tape.transpose_last2(m)?;
        let pooled = tape.bmm(mt, xb)?;
        let flat = tape.reshape(pooled, &[batch, self.heads * self.input_width])?;
        let y = self.output.forward(tape, p, flat)?;
        if unbatched {
            Ok(tape.reshape(y, &[self.output_width])?)
        } else {
            Ok(y)
        }
    }

    /// The pooled matrix `Mᵀx` flattened to `[B, h * d_in]`, before the
    /// output MLP. Exposed for inspection and tests.
    pub fn pooled(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let (xb, _) = self.batched(tape, x)?;
        let batch = tape.shape(xb)[0];
        let m = self.mixture_weights(tape, p, xb)?;
        let mt = tape.transpose_last2(m)?;
        let pooled = tape.bmm(mt, xb)?;
        Ok(tape.reshape(pooled, &[batch, self.heads * self.input_width])?)
    }
}
