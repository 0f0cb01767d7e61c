//! Stage-1 multiple-instance classifier.
//!
//! Each core is a bag of patch feature vectors. Patches are projected to a
//! shared embedding space, pooled by a softmax over per-patch self-scores
//! `q_i·k_i / sqrt(d_k)`, passed through a patient-level projector and
//! classified with a sigmoid unit.

mod adam;
mod train;

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bound, ParamStore, Tape, Tensor, Var};
use crate::nn::{Linear, TwoLayer};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use train::{
    stratified_split, train_stage1, EarlyStopping, EpochRecord, TrainConfig, TrainHistory,
};

/// Lower clamp applied to predictions before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MilError {
    #[error("feature width mismatch: model expects D={expected}, bag has D={actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("bag {core_id}: {reason}")]
    InvalidBag { core_id: String, reason: String },
    #[error("training split contains only class {class}")]
    SingleClass { class: u8 },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter {param} (element {index})")]
    NonFiniteGradient { param: String, index: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One core: `N × D` patch features and a binary label (1 = tumour).
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub core_id: String,
    pub patch_embeddings: Tensor,
    pub label: u8,
}

impl Bag {
    pub fn new(
        core_id: impl Into<String>,
        patch_embeddings: Tensor,
        label: u8,
    ) -> Result<Self, MilError> {
        let core_id = core_id.into();
        let bad = |reason: &str| MilError::InvalidBag {
            core_id: core_id.clone(),
            reason: reason.to_string(),
        };
        if patch_embeddings.shape().len() != 2 || patch_embeddings.rows() == 0 {
            return Err(bad("expected a non-empty N x D matrix"));
        }
        if label > 1 {
            return Err(bad("label must be 0 or 1"));
        }
        if !patch_embeddings.is_finite() {
            return Err(bad("non-finite feature"));
        }
        Ok(Self {
            core_id,
            patch_embeddings,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.patch_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patch_embeddings.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub patient_hidden_dim: usize,
}

impl MilDims {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 512,
            embed_dim: 128,
            key_dim: 128,
            patient_hidden_dim: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MilModel {
    dims: MilDims,
    params: ParamStore,
    patch_projector: TwoLayer,
    query: Linear,
    key: Linear,
    value: Linear,
    patient_projector: TwoLayer,
    classifier: Linear,
}

/// Tape handles produced by one forward pass over a bag.
#[derive(Debug, Clone, Copy)]
pub struct MilForward<'t> {
    pub embeddings: Var<'t>,
    pub alpha: Var<'t>,
    pub z: Var<'t>,
    pub yhat: Var<'t>,
}

/// Plain values from inference on one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    pub core_id: String,
    pub label: u8,
    pub yhat: f64,
    pub alpha: Vec<f64>,
}

impl MilModel {
    pub fn new(dims: MilDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = dims;
        let patch_projector = TwoLayer::new(
            &mut p,
            "patch_projector",
            (d.input_dim, d.hidden_dim, d.embed_dim),
            &mut rng,
        );
        let query = Linear::new(&mut p, "query", d.embed_dim, d.key_dim, &mut rng);
        let key = Linear::new(&mut p, "key", d.embed_dim, d.key_dim, &mut rng);
        let value = Linear::new(&mut p, "value", d.embed_dim, d.key_dim, &mut rng);
        let patient_projector = TwoLayer::new(
            &mut p,
            "patient_projector",
            (d.key_dim, d.patient_hidden_dim, d.embed_dim),
            &mut rng,
        );
        let classifier = Linear::new(&mut p, "classifier", d.embed_dim, 1, &mut rng);
        Self {
            dims,
            params: p,
            patch_projector,
            query,
            key,
            value,
            patient_projector,
            classifier,
        }
    }

    /// Same layout as [`MilModel::new`] with every parameter set to zero.
    pub fn zeros(dims: MilDims) -> Self {
        let mut m = Self::new(dims, 0);
        m.params
            .tensors_mut()
            .iter_mut()
            .for_each(|t| t.data_mut().fill(0.0));
        m
    }

    pub fn dims(&self) -> &MilDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Overwrites the named parameter; shapes must match.
    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<(), MilError> {
        let id = self.params.find(name).ok_or_else(|| {
            MilError::InvalidConfig(format!("unknown parameter {name}"))
        })?;
        let t = self.params.get_mut(id);
        if t.numel() != data.len() {
            return Err(AutodiffError::Shape {
                op: "set_param",
                left: t.shape().to_vec(),
                right: vec![data.len()],
            }
            .into());
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    fn check_width(&self, x: &Tensor) -> Result<(), MilError> {
        let actual = if x.shape().len() == 2 { x.cols() } else { x.numel() };
        if x.shape().len() != 2 || actual != self.dims.input_dim {
            return Err(MilError::WidthMismatch {
                expected: self.dims.input_dim,
                actual,
            });
        }
        Ok(())
    }

    pub fn project<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.patch_projector.forward(p, x)
    }

    /// Self-scored attention pooling; returns `(alpha [N], z [1, d_k])`.
    pub fn attend<'t>(
        &self,
        p: &Bound<'t>,
        e: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), AutodiffError> {
        let q = self.query.forward(p, e)?;
        let k = self.key.forward(p, e)?;
        let v = self.value.forward(p, e)?;
        let n = e.shape()[0];
        let scores = q
            .mul(k)?
            .sum_axis(1)?
            .scale(1.0 / (self.dims.key_dim as f64).sqrt());
        let alpha = scores.softmax(0)?;
        let z = alpha.reshape(vec![1, n])?.matmul(v)?;
        Ok((alpha, z))
    }

    /// `sigmoid(classifier(patient_projector(z)))` as a `[1, 1]` variable.
    pub fn classify<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let pj = self.patient_projector.forward(p, z)?;
        Ok(self.classifier.forward(p, pj)?.sigmoid())
    }

    pub fn forward_embeddings<'t>(
        &self,
        p: &Bound<'t>,
        e: Var<'t>,
    ) -> Result<MilForward<'t>, AutodiffError> {
        let (alpha, z) = self.attend(p, e)?;
        let yhat = self.classify(p, z)?;
        Ok(MilForward {
            embeddings: e,
            alpha,
            z,
            yhat,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        bag: &Bag,
    ) -> Result<MilForward<'t>, MilError> {
        self.check_width(&bag.patch_embeddings)?;
        let x = tape.constant(&bag.patch_embeddings);
        let e = self.project(p, x)?;
        Ok(self.forward_embeddings(p, e)?)
    }

    pub fn predict(&self, bag: &Bag) -> Result<BagOutput, MilError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let f = self.forward(&tape, &p, bag)?;
        let alpha = f.alpha.data().to_vec();
        Ok(BagOutput {
            core_id: bag.core_id.clone(),
            label: bag.label,
            yhat: f.yhat.item(),
            alpha,
        })
    }

    /// Inference over many bags in parallel; output order follows input order.
    pub fn predict_all(&self, bags: &[Bag]) -> Result<Vec<BagOutput>, MilError> {
        bags.par_iter().map(|b| self.predict(b)).collect()
    }

    /// Scores each patch as a bag of its own: with one patch `alpha = 1`, so
    /// the prediction is `classify(v_i)`.
    pub fn instance_scores(&self, bag: &Bag) -> Result<Vec<f64>, MilError> {
        self.check_width(&bag.patch_embeddings)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let x = tape.constant(&bag.patch_embeddings);
        let e = self.project(&p, x)?;
        let v = self.value.forward(&p, e)?;
        let y = self.classify(&p, v)?;
        let out = y.data().to_vec();
        Ok(out)
    }

    /// Per-patch L2 norm of `d yhat / d e_i`, taken with respect to the
    /// projected embeddings.
    pub fn embedding_gradient_norms(&self, bag: &Bag) -> Result<Vec<f64>, MilError> {
        self.check_width(&bag.patch_embeddings)?;
        let e_val = {
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let x = tape.constant(&bag.patch_embeddings);
            self.project(&p, x)?.value()
        };
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let e = tape.leaf(&e_val);
        let f = self.forward_embeddings(&p, e)?;
        let g = tape.backward(f.yhat.sum())?.get_or_zeros(e);
        Ok(g.chunks(e_val.cols())
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }
}

/// `N × embed_dim` projected patch embeddings.
pub fn project_patches(model: &MilModel, bag: &Bag) -> Result<Tensor, MilError> {
    model.check_width(&bag.patch_embeddings)?;
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let x = tape.constant(&bag.patch_embeddings);
    Ok(model.project(&p, x)?.value())
}

/// Pools projected embeddings; returns `(z, alpha)`.
pub fn mil_attention(model: &MilModel, embeddings: &Tensor) -> Result<(Vec<f64>, Vec<f64>), MilError> {
    if embeddings.shape().len() != 2 || embeddings.cols() != model.dims.embed_dim {
        return Err(MilError::WidthMismatch {
            expected: model.dims.embed_dim,
            actual: embeddings.shape().last().copied().unwrap_or(0),
        });
    }
    if embeddings.rows() == 0 {
        return Err(AutodiffError::Empty { op: "mil_attention" }.into());
    }
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let (alpha, z) = model.attend(&p, tape.constant(embeddings))?;
    let z = z.data().to_vec();
    let alpha = alpha.data().to_vec();
    Ok((z, alpha))
}

pub fn classify_core(model: &MilModel, z: &[f64]) -> Result<f64, MilError> {
    if z.len() != model.dims.key_dim {
        return Err(MilError::WidthMismatch {
            expected: model.dims.key_dim,
            actual: z.len(),
        });
    }
    let tape = Tape::new();
    let p = model.params.bind_frozen(&tape);
    let zv = tape.constant_data(vec![1, z.len()], z.to_vec())?;
    Ok(model.classify(&p, zv)?.item())
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(predictions: &[f64], labels: &[u8]) -> Result<f64, MilError> {
    if predictions.len() != labels.len() {
        return Err(MilError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(AutodiffError::Empty { op: "bce_loss" }.into());
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Tape version of [`bce_loss`] over `[1, 1]` prediction variables.
pub fn bce_loss_var<'t>(
    tape: &'t Tape,
    predictions: &[Var<'t>],
    labels: &[u8],
) -> Result<Var<'t>, MilError> {
    if predictions.len() != labels.len() {
        return Err(MilError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let p = Var::concat(predictions)?.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let k = labels.len();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let yv = tape.constant_data(vec![1, k], y)?;
    let nyv = tape.constant_data(vec![1, k], not_y)?;
    let pos = yv.mul(p.ln())?;
    let neg = nyv.mul(p.scale(-1.0).add_scalar(1.0).ln())?;
    Ok(pos.add(neg)?.mean().neg())
}

#[cfg(test)]
mod tests;
