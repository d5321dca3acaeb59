//! Latent-source attentive frequency transformation.
//!
//! A TDF whose second layer is replicated once per latent source; the
//! branches are blended with attention weights computed from the condition
//! embedding against a learned key matrix.

use crate::blocks::{tdf_hidden, to_frames, Builder, Ctx, FrameLayer, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Lasaft {
    pub freq: usize,
    pub hidden: usize,
    pub latent: usize,
    pub key_dim: usize,
    pub first: FrameLayer,
    pub branches: Vec<FrameLayer>,
    pub keys: String,
    pub query: Linear,
}

impl Lasaft {
    /// Names extend the TDF layout (`fc1`, `bn1`, `fc2.k`, `bn2.k`) with
    /// `keys` and `query`.
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        prefix: &str,
        freq: usize,
        bottleneck: usize,
        latent: usize,
        embedding_dim: usize,
        key_dim: usize,
    ) -> Result<Self> {
        if latent == 0 {
            return Err(Error::config("latent source count must be at least 1"));
        }
        if key_dim == 0 || embedding_dim == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        let hidden = tdf_hidden(freq, bottleneck)?;
        let first = FrameLayer::build(b, &format!("{prefix}.fc1"), &format!("{prefix}.bn1"), freq, hidden)?;
        let branches = (0..latent)
            .map(|k| FrameLayer::build(b, &format!("{prefix}.fc2.{k}"), &format!("{prefix}.bn2.{k}"), hidden, freq))
            .collect::<Result<Vec<_>>>()?;
        let keys = format!("{prefix}.keys");
        b.fan_in(&keys, &[latent, key_dim], key_dim)?;
        let query = Linear::build(b, format!("{prefix}.query"), embedding_dim, key_dim, true)?;
        Ok(Lasaft {
            freq,
            hidden,
            latent,
            key_dim,
            first,
            branches,
            keys,
            query,
        })
    }

    /// `softmax(Q Kᵀ / √d_k)` per example: `[N, E] → [N, |I_L|]`.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<T>, ctx: &Ctx<T>, embedding: Var) -> Result<Var> {
        let q = self.query.forward(g, ctx, embedding)?;
        let k = g.param(ctx.params, &self.keys)?;
        let logits = g.dense(q, k, None)?;
        let logits = g.scale(logits, T::c(1.0 / (self.key_dim as f64).sqrt()));
        Ok(g.softmax(logits))
    }

    /// Blends the branch outputs of every frame; `x` is `[N, C, T, F]` and
    /// `embedding` is `[N, E]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, embedding: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.freq {
            return Err(Error::config(format!(
                "attention block expects {} frequency bins, input is {shape:?}",
                self.freq
            )));
        }
        if g.shape(embedding).first() != Some(&shape[0]) {
            return Err(Error::shape(format!(
                "{} embeddings for a batch of {}",
                g.shape(embedding).first().copied().unwrap_or(0),
                shape[0]
            )));
        }
        let weights = self.attention(g, ctx, embedding)?;
        let (rows, shape) = to_frames(g, x, self.freq)?;
        let h = self.first.forward(g, ctx, rows)?;
        let outs = self
            .branches
            .iter()
            .map(|layer| layer.forward(g, ctx, h))
            .collect::<Result<Vec<_>>>()?;
        let mixed = g.mix(&outs, weights)?;
        g.reshape(mixed, &shape)
    }

    /// `x + lasaft(x)`.
    pub fn residual<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, embedding: Var) -> Result<Var> {
        let y = self.forward(g, ctx, x, embedding)?;
        g.add(x, y)
    }
}
