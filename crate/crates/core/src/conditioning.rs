//! Condition embedding, the condition generator, and feature modulation.
//!
//! FiLM scales and shifts each channel; PoCM mixes channels with a
//! condition-generated 1×1 convolution; GPoCM gates the features with the
//! sigmoid of a PoCM.

use crate::blocks::{BatchNorm, Builder, Ctx, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Source names in condition-index order.
pub const DEFAULT_INSTRUMENTS: [&str; 4] = ["vocals", "drums", "bass", "other"];

/// One-hot selector over the instrument vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionVector {
    z: Vec<u8>,
}

impl ConditionVector {
    pub fn one_hot(index: usize, instruments: usize) -> Result<Self> {
        if index >= instruments {
            return Err(Error::Validation(format!(
                "condition index {index} outside {instruments} instruments"
            )));
        }
        let mut z = vec![0; instruments];
        z[index] = 1;
        Ok(ConditionVector { z })
    }

    pub fn from_bits(z: Vec<u8>) -> Result<Self> {
        let ones = z.iter().filter(|&&v| v == 1).count();
        if ones != 1 || z.iter().any(|&v| v > 1) {
            return Err(Error::Validation(format!("condition {z:?} is not one-hot")));
        }
        Ok(ConditionVector { z })
    }

    pub fn by_name(name: &str, instruments: &[String]) -> Result<Self> {
        let index = instruments
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownInstrument {
                name: name.to_string(),
                valid: instruments.to_vec(),
            })?;
        Self::one_hot(index, instruments.len())
    }

    pub fn index(&self) -> usize {
        self.z.iter().position(|&v| v == 1).expect("one-hot invariant")
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.z
    }
}

/// Lookup table projecting a one-hot condition to its embedding `e_z ∈ R^E`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub instruments: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn build<T: Scalar>(b: &mut Builder<T>, name: impl Into<String>, instruments: usize, dim: usize) -> Result<Self> {
        let name = name.into();
        b.normal(&name, &[instruments, dim], 0.1)?;
        Ok(Embedding { name, instruments, dim })
    }

    /// `[N, E]` embeddings of a batch of conditions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &Ctx<T>, conds: &[ConditionVector]) -> Result<Var> {
        let mut rows = Vec::with_capacity(conds.len());
        for c in conds {
            if c.len() != self.instruments {
                return Err(Error::Validation(format!(
                    "condition has {} entries, vocabulary has {}",
                    c.len(),
                    self.instruments
                )));
            }
            rows.push(c.index());
        }
        let table = g.param(ctx.params, &self.name)?;
        g.gather(table, &rows)
    }
}

/// Which parameter family the generator emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// `(γ, β)`, each `C̄·L`.
    Film,
    /// `(ω, β)` of sizes `L·C̄²` and `L·C̄`.
    Pocm,
}

/// Generated modulation parameters for every decoder block, batched `[N, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams {
    pub kind: ParamKind,
    /// γ (FiLM) or ω (PoCM), flattened per example.
    pub weight: Var,
    pub beta: Var,
    pub blocks: usize,
    pub channels: usize,
}

impl ModulationParams {
    /// Block `i`'s parameters: `([N, C̄] | [N, C̄, C̄], [N, C̄])`.
    pub fn block<T: Scalar>(&self, g: &mut Graph<T>, i: usize) -> Result<(Var, Var)> {
        if i >= self.blocks {
            return Err(Error::config(format!("modulation block {i} of {}", self.blocks)));
        }
        let c = self.channels;
        let n = g.shape(self.beta)[0];
        let beta = g.slice_cols(self.beta, i * c, c)?;
        let weight = match self.kind {
            ParamKind::Film => g.slice_cols(self.weight, i * c, c)?,
            ParamKind::Pocm => {
                let flat = g.slice_cols(self.weight, i * c * c, c * c)?;
                g.reshape(flat, &[n, c, c])?
            }
        };
        Ok((weight, beta))
    }
}

/// Embedding → doubling fully-connected stack → parameter heads.
///
/// Hidden layers are `E → 2E → 4E`, each dense → ReLU → dropout(0.5) → BN.
#[derive(Clone, Debug)]
pub struct ConditionGenerator {
    pub kind: ParamKind,
    pub blocks: usize,
    pub channels: usize,
    hidden: Vec<(Linear, BatchNorm)>,
    weight_head: Linear,
    beta_head: Linear,
}

pub const GENERATOR_DROPOUT: f64 = 0.5;

impl ConditionGenerator {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        prefix: &str,
        embedding_dim: usize,
        blocks: usize,
        channels: usize,
        kind: ParamKind,
    ) -> Result<Self> {
        if embedding_dim == 0 || blocks == 0 || channels == 0 {
            return Err(Error::config("condition generator dimensions must be positive"));
        }
        let mut hidden = Vec::new();
        let mut width = embedding_dim;
        for i in 0..2 {
            let fc = Linear::build(b, format!("{prefix}.fc{i}"), width, 2 * width, true)?;
            let bn = BatchNorm::build(b, format!("{prefix}.bn{i}"), 2 * width, 1)?;
            hidden.push((fc, bn));
            width *= 2;
        }
        let (weight_name, weight_out, weight_bias) = match kind {
            ParamKind::Film => ("gamma", blocks * channels, 1.0),
            ParamKind::Pocm => ("omega", blocks * channels * channels, 0.0),
        };
        let weight_head = Self::head(b, &format!("{prefix}.{weight_name}"), width, weight_out, weight_bias)?;
        let beta_head = Self::head(b, &format!("{prefix}.beta"), width, blocks * channels, 0.0)?;
        Ok(ConditionGenerator {
            kind,
            blocks,
            channels,
            hidden,
            weight_head,
            beta_head,
        })
    }

    /// Head with small weights so the initial modulation sits near its bias.
    fn head<T: Scalar>(b: &mut Builder<T>, name: &str, fin: usize, fout: usize, bias: f64) -> Result<Linear> {
        let bound = 0.1 * (1.0 / fin as f64).sqrt();
        let rng = &mut *b.rng;
        let w = crate::numerics::Tensor::from_fn(vec![fout, fin], |_| T::c(rng.uniform_range(-bound, bound)));
        b.params.insert(format!("{name}.weight"), w)?;
        b.constant(&format!("{name}.bias"), &[fout], bias)?;
        Ok(Linear {
            name: name.to_string(),
            in_features: fin,
            out_features: fout,
            bias: true,
        })
    }

    pub fn generate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        embedding: Var,
        kind: ParamKind,
    ) -> Result<ModulationParams> {
        if kind != self.kind {
            return Err(Error::config(format!(
                "condition generator built for {:?} parameters, asked for {kind:?}",
                self.kind
            )));
        }
        let mut h = embedding;
        for (fc, bn) in &self.hidden {
            let y = fc.forward(g, ctx, h)?;
            let y = g.relu(y);
            let y = g.dropout(y, GENERATOR_DROPOUT, ctx.mode, ctx.rng)?;
            h = bn.forward(g, ctx, y)?;
        }
        let weight = self.weight_head.forward(g, ctx, h)?;
        let beta = self.beta_head.forward(g, ctx, h)?;
        Ok(ModulationParams {
            kind,
            weight,
            beta,
            blocks: self.blocks,
            channels: self.channels,
        })
    }
}

/// `γ_c·X_c + β_c`.
pub fn film_apply<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    g.film(x, gamma, beta)
}

/// `β_c + Σ_j ω_cj·X_j`.
pub fn pocm_apply<T: Scalar>(g: &mut Graph<T>, x: Var, omega: Var, beta: Var) -> Result<Var> {
    g.pocm(x, omega, beta)
}

/// `σ(PoCM(X)) ⊙ X`.
pub fn gpocm_apply<T: Scalar>(g: &mut Graph<T>, x: Var, omega: Var, beta: Var) -> Result<Var> {
    let p = g.pocm(x, omega, beta)?;
    let gate = g.sigmoid(p);
    g.mul(gate, x)
}
