//! Residual MLP noise predictor.
//!
//! The network input is the concatenation `[z_t, c_0..c_5, T_i, s(t)]`. The
//! first layer is stored as one weight block per input segment, which is the
//! same linear map as a single matrix over the concatenation but lets the
//! sampler reuse the condition part across all reverse steps.

use serde::{Deserialize, Serialize};

use super::condition::{sinusoidal, ConditionSequence};
use crate::cohort::GRID_LEN;
use crate::error::{Error, Result};
use crate::numkernel::{ones_column, randn, Tape, Tensor, Var};
use crate::seed::Rng;

/// Rows of the learned embedding table.
const EMB_MASKED: usize = 0;
const EMB_PRESENT: usize = 1;
const EMB_ABSENT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub latent_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub shape: DenoiserShape,
    w_z: Tensor,
    w_cond: Vec<Tensor>,
    w_target: Tensor,
    w_step: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    /// `[Z_masked; M_present; M_absent]`, 3×D.
    embed: Tensor,
}

/// Named parameter tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(shape: DenoiserShape, rng: &mut Rng) -> Result<Self> {
        let DenoiserShape { latent_dim: d, hidden: h } = shape;
        if d == 0 || h == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        let in_std = 1.0 / ((d * (GRID_LEN + 3)) as f64).sqrt();
        let h_std = 1.0 / (h as f64).sqrt();
        let w_z = randn(d, h, in_std, rng);
        let w_cond = (0..GRID_LEN).map(|_| randn(d, h, in_std, rng)).collect();
        let w_target = randn(d, h, in_std, rng);
        let w_step = randn(d, h, in_std, rng);
        let w2 = randn(h, h, h_std, rng);
        let w3 = randn(h, h, h_std, rng);
        let w_out = randn(h, d, 0.1 * h_std, rng);
        let mut embed = randn(3, d, 0.1, rng);
        embed.data_mut()[EMB_MASKED * d..(EMB_MASKED + 1) * d].fill(0.0);
        Ok(Self {
            shape,
            w_z,
            w_cond,
            w_target,
            w_step,
            b1: Tensor::zeros(&[1, h]),
            w2,
            b2: Tensor::zeros(&[1, h]),
            w3,
            b3: Tensor::zeros(&[1, h]),
            w_out,
            b_out: Tensor::zeros(&[1, d]),
            embed,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_z];
        v.extend(self.w_cond.iter());
        v.extend([
            &self.w_target,
            &self.w_step,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.w_out,
            &self.b_out,
            &self.embed,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_z];
        v.extend(self.w_cond.iter_mut());
        v.extend([
            &mut self.w_target,
            &mut self.w_step,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.embed,
        ]);
        v
    }

    pub fn names() -> Vec<String> {
        let mut v = vec!["w_z".to_string()];
        v.extend((0..GRID_LEN).map(|i| format!("w_cond_{i}")));
        v.extend(
            ["w_target", "w_step", "b1", "w2", "b2", "w3", "b3", "w_out", "b_out", "embed"]
                .iter()
                .map(|s| s.to_string()),
        );
        v
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        Self::names()
            .into_iter()
            .zip(self.tensors())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Rebuild from named tensors, verifying every name and shape.
    pub fn from_named(shape: DenoiserShape, named: &[NamedTensor]) -> Result<Self> {
        let mut p = Self::init(shape, &mut crate::seed::rng(0))?;
        let names = Self::names();
        if named.len() != names.len() {
            return Err(Error::Invalid(format!("expected {} tensors, found {}", names.len(), named.len())));
        }
        for ((want, slot), nt) in names.iter().zip(p.tensors_mut()).zip(named) {
            if &nt.name != want || nt.shape != slot.shape() {
                return Err(Error::Invalid(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    nt.name,
                    nt.shape,
                    want,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(nt.shape.clone(), nt.data.clone())?;
            if !slot.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {want}")));
            }
        }
        Ok(p)
    }

    fn embedding(&self, row: usize) -> &[f64] {
        self.embed.row(row)
    }

    /// The condition sequence values `c_τ = Z_τ + P_τ + M_τ`, with
    /// `Z_masked` and `M_absent` at masked slots.
    pub fn condition_values(&self, cond: &ConditionSequence) -> Vec<Vec<f64>> {
        let d = self.shape.latent_dim;
        (0..GRID_LEN)
            .map(|pos| {
                let p = sinusoidal(pos as f64, d);
                match cond.latent(pos) {
                    Some(z) => (0..d).map(|k| (z[k] + p[k]) + self.embedding(EMB_PRESENT)[k]).collect(),
                    None => (0..d)
                        .map(|k| p[k] + (self.embedding(EMB_MASKED)[k] + self.embedding(EMB_ABSENT)[k]))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        ParamVars {
            w_z: tape.param(&self.w_z),
            w_cond: self.w_cond.iter().map(|w| tape.param(w)).collect(),
            w_target: tape.param(&self.w_target),
            w_step: tape.param(&self.w_step),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
            w3: tape.param(&self.w3),
            b3: tape.param(&self.b3),
            w_out: tape.param(&self.w_out),
            b_out: tape.param(&self.b_out),
            embed: tape.param(&self.embed),
        }
    }
}

pub struct ParamVars {
    w_z: Var,
    w_cond: Vec<Var>,
    w_target: Var,
    w_step: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
    w_out: Var,
    b_out: Var,
    embed: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w_z];
        v.extend(self.w_cond.iter().copied());
        v.extend([
            self.w_target,
            self.w_step,
            self.b1,
            self.w2,
            self.b2,
            self.w3,
            self.b3,
            self.w_out,
            self.b_out,
            self.embed,
        ]);
        v
    }
}

/// Constant inputs describing a batch of conditions.
pub struct ConditionBatch {
    rows: usize,
    /// Per slot: `Z_τ + P_τ` at unmasked rows, `P_τ` at masked rows.
    slot_const: Vec<Tensor>,
    /// Per slot: B×3 selector into the embedding table.
    slot_select: Vec<Tensor>,
    target_enc: Tensor,
}

impl ConditionBatch {
    pub fn new(conds: &[ConditionSequence], latent_dim: usize) -> Result<Self> {
        let rows = conds.len();
        if rows == 0 {
            return Err(Error::Empty("condition batch"));
        }
        let d = latent_dim;
        let mut slot_const = Vec::with_capacity(GRID_LEN);
        let mut slot_select = Vec::with_capacity(GRID_LEN);
        for pos in 0..GRID_LEN {
            let p = sinusoidal(pos as f64, d);
            let mut c = Vec::with_capacity(rows * d);
            let mut s = Vec::with_capacity(rows * 3);
            for cond in conds {
                match cond.latent(pos) {
                    Some(z) => {
                        if z.len() != d {
                            return Err(Error::shape("condition", format!("latent dim {} vs {d}", z.len())));
                        }
                        c.extend(z.iter().zip(&p).map(|(a, b)| a + b));
                        s.extend([0.0, 1.0, 0.0]);
                    }
                    None => {
                        c.extend_from_slice(&p);
                        s.extend([1.0, 0.0, 1.0]);
                    }
                }
            }
            slot_const.push(Tensor::matrix(rows, d, c)?);
            slot_select.push(Tensor::matrix(rows, 3, s)?);
        }
        let target_enc = Tensor::matrix(
            rows,
            d,
            conds.iter().flat_map(|c| sinusoidal(c.target() as f64, d)).collect(),
        )?;
        Ok(Self {
            rows,
            slot_const,
            slot_select,
            target_enc,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

pub fn step_encoding(t: usize, rows: usize, latent_dim: usize) -> Tensor {
    let e = sinusoidal(t as f64, latent_dim);
    Tensor::matrix(rows, latent_dim, e.repeat(rows)).expect("nonzero rows")
}

/// First-layer pre-activation contributed by the condition and target
/// embedding (bias included).
pub fn condition_preactivation(tape: &mut Tape<'_>, pv: &ParamVars, batch: &ConditionBatch) -> Result<Var> {
    let ones = tape.constant(ones_column(batch.rows));
    let mut acc = tape.matmul(ones, pv.b1)?;
    for pos in 0..GRID_LEN {
        let base = tape.constant(batch.slot_const[pos].clone());
        let sel = tape.constant(batch.slot_select[pos].clone());
        let learned = tape.matmul(sel, pv.embed)?;
        let c = tape.add(base, learned)?;
        let contrib = tape.matmul(c, pv.w_cond[pos])?;
        acc = tape.add(acc, contrib)?;
    }
    let te = tape.constant(batch.target_enc.clone());
    let contrib = tape.matmul(te, pv.w_target)?;
    tape.add(acc, contrib)
}

/// Remaining network given the condition pre-activation.
pub fn network_head(tape: &mut Tape<'_>, pv: &ParamVars, cond_pre: Var, z_t: Var, step_enc: Var) -> Result<Var> {
    let rows = tape.value(z_t).rows();
    let a = tape.matmul(z_t, pv.w_z)?;
    let b = tape.matmul(step_enc, pv.w_step)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add(pre, cond_pre)?;
    let h0 = tape.activation(pre)?;
    let ones = tape.constant(ones_column(rows));

    let mut h = h0;
    for (w, b) in [(pv.w2, pv.b2), (pv.w3, pv.b3)] {
        let lin = tape.matmul(h, w)?;
        let bias = tape.matmul(ones, b)?;
        let lin = tape.add(lin, bias)?;
        let act = tape.activation(lin)?;
        h = tape.add(h, act)?;
    }
    let out = tape.matmul(h, pv.w_out)?;
    let bias = tape.matmul(ones, pv.b_out)?;
    tape.add(out, bias)
}

/// Anything that predicts the injected noise from a noisy target and a
/// condition. Sampling and training only go through this interface.
pub trait NoisePredictor: Sync {
    /// Per-batch precomputation that does not depend on the reverse step.
    type Context;

    fn latent_dim(&self) -> usize;
    fn prepare(&self, conds: &[ConditionSequence]) -> Result<Self::Context>;
    /// `z_t` is B×D; returns B×D.
    fn predict(&self, ctx: &Self::Context, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserParams {
    type Context = Tensor;

    fn latent_dim(&self) -> usize {
        self.shape.latent_dim
    }

    fn prepare(&self, conds: &[ConditionSequence]) -> Result<Tensor> {
        let batch = ConditionBatch::new(conds, self.shape.latent_dim)?;
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let pre = condition_preactivation(&mut tape, &pv, &batch)?;
        Ok(tape.value(pre).clone())
    }

    fn predict(&self, ctx: &Tensor, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let d = self.shape.latent_dim;
        if z_t.cols() != d || z_t.rows() != ctx.rows() {
            return Err(Error::shape("predict_noise", format!("{:?} with {} condition rows", z_t.shape(), ctx.rows())));
        }
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let pre = tape.constant(ctx.clone());
        let z = tape.constant(z_t.clone());
        let s = tape.constant(step_encoding(t, z_t.rows(), d));
        let out = network_head(&mut tape, &pv, pre, z, s)?;
        Ok(tape.value(out).clone())
    }
}
