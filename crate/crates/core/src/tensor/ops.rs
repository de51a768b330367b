//! Parameterized layers built from tape primitives.

use rand_chacha::ChaCha8Rng;

use super::array::{Scalar, ShapeError, Tensor};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// `y = xW + b` with `W: (d_in, d_out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: store.add_glorot(format!("{name}.w"), group, &[d_in, d_out], (d_in, d_out), rng),
            b: store.add_const(format!("{name}.b"), group, &[d_out], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        linear(tape, x, w, b)
    }
}

/// `y = xW + b` over tape values.
pub fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), group, &[d], 1.0),
            beta: store.add_const(format!("{name}.beta"), group, &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Sinusoidal position table of shape `(rows, d)`.
pub fn positional_encoding<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(&[rows, d], data).expect("positional shape")
}

/// Dropout rates of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutRates {
    pub hidden: f64,
    pub attention: f64,
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        hidden: 0.0,
        attention: 0.0,
    };
}

/// One pre-norm transformer encoder layer: multi-head self-attention and a
/// GELU feed-forward network, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub d_model: usize,
    pub heads: usize,
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Base key for this layer's dropout sites.
    pub site: u64,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        heads: usize,
        ffn_width: usize,
        site: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "d_model {d_model} not divisible by {heads} heads");
        AttentionBlock {
            d_model,
            heads,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), group, d_model),
            q: Linear::new(store, &format!("{name}.q"), group, d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), group, d_model, d_model, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), group, d_model),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), group, d_model, ffn_width, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), group, ffn_width, d_model, rng),
            site,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        use_positional: bool,
        dropout: DropoutRates,
    ) -> Result<Var, ShapeError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(ShapeError::new(
                "self_attention_block",
                format!("input {:?}, d_model {}", shape, self.d_model),
            ));
        }
        let rows = shape[0];
        let x = if use_positional {
            let pe = tape.constant(positional_encoding(rows, self.d_model));
            tape.add(x, pe)?
        } else {
            x
        };

        let h = self.ln_attn.forward(tape, x)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;
        let dh = self.d_model / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            let attn = tape.dropout(attn, self.site + 1 + head as u64, dropout.attention);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn_out = self.out.forward(tape, merged)?;
        let attn_out = tape.dropout(attn_out, self.site + 100, dropout.hidden);
        let x = tape.add(x, attn_out)?;

        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn_in.forward(tape, h)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, self.site + 101, dropout.hidden);
        let f = self.ffn_out.forward(tape, f)?;
        let f = tape.dropout(f, self.site + 102, dropout.hidden);
        tape.add(x, f)
    }
}

/// Deep biaffine classifier: separate GELU projections of both sides into a
/// hidden space, then a biaffine scorer with `k` outputs.
#[derive(Debug, Clone)]
pub struct DeepBiaffine {
    pub source: Linear,
    pub target: Linear,
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub site: u64,
}

impl DeepBiaffine {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_source: usize,
        d_target: usize,
        hidden: usize,
        k: usize,
        site: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ParamGroup::Decoder;
        DeepBiaffine {
            source: Linear::new(store, &format!("{name}.source"), g, d_source, hidden, rng),
            target: Linear::new(store, &format!("{name}.target"), g, d_target, hidden, rng),
            u: store.add_glorot(format!("{name}.u"), g, &[hidden, k, hidden], (hidden, hidden), rng),
            w: store.add_glorot(format!("{name}.w"), g, &[2 * hidden, k], (2 * hidden, k), rng),
            b: store.add_const(format!("{name}.b"), g, &[k], 0.0),
            site,
        }
    }

    /// Scores of shape `(n_source, n_target, k)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        source: Var,
        target: Var,
        dropout: f64,
    ) -> Result<Var, ShapeError> {
        let hs = self.source.forward(tape, source)?;
        let hs = tape.gelu(hs);
        let hs = tape.dropout(hs, self.site, dropout);
        let ht = self.target.forward(tape, target)?;
        let ht = tape.gelu(ht);
        let ht = tape.dropout(ht, self.site + 1, dropout);
        let (u, w, b) = (tape.param(self.u), tape.param(self.w), tape.param(self.b));
        tape.biaffine(hs, ht, u, w, b)
    }
}
