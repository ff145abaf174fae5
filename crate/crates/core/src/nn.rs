//! Parameterized building blocks: affine layers, MLPs, multi-head attention,
//! pre-norm transformer blocks and a learned positional table.
//!
//! Every block owns only [`ParamId`]s; values live in a [`ParameterStore`] and
//! are bound to a [`Tape`] per forward pass. Inputs carry a leading batch axis,
//! `[B, L, d]` for sequences.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParameterStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new([rows, cols], data).expect("xavier shape")
}

/// `x W + b` with `W: [in, out]`; `b` is optional.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::without_bias(store, name, input, output, rng)?;
        layer.bias = Some(store.register(format!("{name}.bias"), Tensor::zeros([output]))?);
        Ok(layer)
    }

    pub fn without_bias(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), xavier(input, output, rng))?;
        Ok(Self {
            weight,
            bias: None,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => Ok(tape.add(h, p.var(b))?),
            None => Ok(h),
        }
    }

    pub fn zero(&self, store: &mut ParameterStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Chain of affine layers with an activation between them; the last layer
/// is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("mlp {name}: bad widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.last() != Some(&self.input_width()) {
            return Err(crate::tensor::TensorError::Dimension {
                op: "mlp",
                lhs: shape.to_vec(),
                rhs: vec![self.input_width(), self.output_width()],
            }
            .into());
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Zeroes the final layer so the network starts out emitting zeros.
    pub fn zero_output_layer(&self, store: &mut ParameterStore) {
        self.layers[self.layers.len() - 1].zero(store);
    }
}

/// Layer normalization over the last axis followed by a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full([width], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros([width]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tape.mul(n, p.var(self.gain))?;
        Ok(tape.add(g, p.var(self.bias))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` only sees keys `0..=i`.
    Causal,
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub width: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            width,
            query: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            // A key bias shifts every score of a query equally; softmax ignores it.
            key: Linear::without_bias(store, &format!("{name}.k"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
        })
    }

    /// `[B, L, d] -> [B*H, L, d/H]`
    fn split_heads(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l, dh) = (s[0], s[1], self.width / self.heads);
        let x = tape.reshape(x, &[b, l, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[b * self.heads, l, dh])?)
    }

    /// Attends `query [B, Lq, d]` over `context [B, Lk, d]`. Rank-2 inputs
    /// are treated as a batch of one.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Binding,
        query: Var,
        context: Var,
        mask: Mask,
    ) -> Result<Var> {
        let unbatched = tape.shape(query).len() == 2;
        let (query, context) = if unbatched {
            let (qs, cs) = (tape.shape(query).to_vec(), tape.shape(context).to_vec());
            (
                tape.reshape(query, &[1, qs[0], qs[1]])?,
                tape.reshape(context, &[1, cs[0], cs[1]])?,
            )
        } else {
            (query, context)
        };
        let (qs, cs) = (tape.shape(query).to_vec(), tape.shape(context).to_vec());
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != self.width || cs[2] != self.width {
            return Err(crate::tensor::TensorError::Dimension {
                op: "attention",
                lhs: qs,
                rhs: cs,
            }
            .into());
        }
        if mask == Mask::Causal && qs[1] != cs[1] {
            return Err(Error::contract(format!(
                "causal self-attention needs equal query and key lengths, got {} and {}",
                qs[1], cs[1]
            )));
        }
        let (b, lq) = (qs[0], qs[1]);
        let dh = self.width / self.heads;

        let q = self.query.forward(tape, p, query)?;
        let k = self.key.forward(tape, p, context)?;
        let v = self.value.forward(tape, p, context)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = match mask {
            Mask::None => tape.softmax(scores, 2)?,
            Mask::Causal => tape.softmax_causal(scores)?,
        };
        let heads = tape.bmm(weights, v)?;
        let heads = tape.reshape(heads, &[b, self.heads, lq, dh])?;
        let heads = tape.permute(heads, &[0, 2, 1, 3])?;
        let merged = tape.reshape(heads, &[b, lq, self.width])?;
        let out = self.output.forward(tape, p, merged)?;
        if unbatched {
            Ok(tape.reshape(out, &[lq, self.width])?)
        } else {
            Ok(out)
        }
    }
}

/// Pre-norm block: `x + SelfAttn(LN(x))`, then `+ MLP(LN(.))`. No mask and no
/// positional information, so it is permutation-equivariant over rows.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[width, 4 * width, width],
                Activation::Gelu,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.attention.forward(tape, p, h, h, Mask::None)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, h)?;
        Ok(tape.add(x, m)?)
    }
}

/// Pre-norm block: causal self-attention over `seq`, cross-attention to
/// `memory`, then an MLP, each with a residual connection.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.ln3"), width)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[width, 4 * width, width],
                Activation::Gelu,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, seq: Var, memory: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, seq)?;
        let a = self.self_attention.forward(tape, p, h, h, Mask::Causal)?;
        let x = tape.add(seq, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let c = self.cross_attention.forward(tape, p, h, memory, Mask::None)?;
        let x = tape.add(x, c)?;
        let h = self.norm3.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, h)?;
        Ok(tape.add(x, m)?)
    }
}

/// Stack of encoder blocks with a closing layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.ln_out"), width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, p, x)?;
        }
        self.norm.forward(tape, p, x)
    }
}

/// Stack of decoder blocks with a closing layer norm.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
}

impl Decoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| DecoderBlock::new(store, &format!("{name}.{i}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.ln_out"), width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, mut seq: Var, memory: Var) -> Result<Var> {
        for block in &self.blocks {
            seq = block.forward(tape, p, seq, memory)?;
        }
        self.norm.forward(tape, p, seq)
    }
}

/// Learned `[max_len, d]` position table.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub max_len: usize,
    pub width: usize,
}

impl PositionalEmbedding {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        max_len: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..max_len * width).map(|_| normal.sample(rng)).collect();
        let table = store.register(name.to_string(), Tensor::new([max_len, width], data)?)?;
        Ok(Self {
            table,
            max_len,
            width,
        })
    }

    /// Row `k` of the table, shape `[d]`.
    pub fn lookup(&self, tape: &mut Tape<'_>, p: &Binding, k: usize) -> Result<Var> {
        if k >= self.max_len {
            return Err(Error::config(format!(
                "position {k} exceeds positional table length {}",
                self.max_len
            )));
        }
        let row = tape.narrow(p.var(self.table), 0, k, 1)?;
        Ok(tape.reshape(row, &[self.width])?)
    }
}
