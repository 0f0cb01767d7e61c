//! Stage-2 self-supervised graph model.
//!
//! A single graph attention layer with separate spatial and cross-scale
//! weights produces node embeddings. A scalewise attention network then
//! weighs each level per aligned patch position (`s^m`) and across the
//! whole core (`c^m`) to form fused multiscale embeddings.

mod graph;
mod losses;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::milnet::{MilError, TrainConfig};
use crate::nn::{glorot_vector, Linear};

pub use graph::{EdgeList, GraphSample, LevelAlignment};
pub use losses::{infomax_loss, infomax_loss_var, scalewise_loss, scalewise_loss_var, SCALE_EPS};
pub use train::{evaluate_loss, sample_loss, sample_loss_with_weights, train_stage2};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatError {
    #[error("feature width mismatch: layer expects {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("feature rows ({rows}) do not match graph nodes ({nodes})")]
    NodeCountMismatch { rows: usize, nodes: usize },
    #[error("model has {expected} levels, graph has {actual}")]
    LevelMismatch { expected: usize, actual: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("graph set is empty")]
    EmptyGraphSet,
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Train(#[from] MilError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
    pub leaky_slope: f64,
    pub self_loops: bool,
    pub tau: f64,
    pub scale_loss_contrastive: bool,
    pub train: TrainConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 32,
            out_dim: 128,
            leaky_slope: crate::autodiff::DEFAULT_LEAKY_SLOPE,
            self_loops: true,
            tau: DEFAULT_TAU,
            scale_loss_contrastive: false,
            train: TrainConfig::stage2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Head {
    spatial: Linear,
    cross: Linear,
    a_spatial: ParamId,
    a_cross: ParamId,
}

/// Parameter handles for the dual-edge-type attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    heads: Vec<Head>,
    combine: Linear,
    in_dim: usize,
    head_dim: usize,
    leaky_slope: f64,
}

/// Layer output with attention coefficients per edge type and head,
/// aligned with the sample's edge lists.
#[derive(Debug, Clone, PartialEq)]
pub struct GatOutput {
    pub h: Tensor,
    pub psi_spatial: Vec<Vec<f64>>,
    pub psi_cross: Vec<Vec<f64>>,
}

impl GatLayer {
    fn new(store: &mut ParamStore, in_dim: usize, cfg: &Stage2Config, rng: &mut ChaCha8Rng) -> Self {
        let heads = (0..cfg.heads)
            .map(|h| Head {
                spatial: Linear::new(store, &format!("gat.head{h}.spatial"), in_dim, cfg.head_dim, rng),
                cross: Linear::new(store, &format!("gat.head{h}.cross"), in_dim, cfg.head_dim, rng),
                a_spatial: store.add(format!("gat.head{h}.a_spatial"), glorot_vector(2 * cfg.head_dim, rng)),
                a_cross: store.add(format!("gat.head{h}.a_cross"), glorot_vector(2 * cfg.head_dim, rng)),
            })
            .collect();
        let combine = Linear::new(store, "gat.combine", cfg.heads * cfg.head_dim, cfg.out_dim, rng);
        Self {
            heads,
            combine,
            in_dim,
            head_dim: cfg.head_dim,
            leaky_slope: cfg.leaky_slope,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// One edge type for one head: `sum_j psi_ij W x_j` with `psi` a softmax of
    /// `LeakyReLU(a . [W x_i || W x_j])` over each target's neighbours.
    fn typed<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        w: &Linear,
        a: ParamId,
        edges: &EdgeList,
        n: usize,
    ) -> Result<(Var<'t>, Option<Var<'t>>), AutodiffError> {
        let tape = x.tape();
        let wx = w.forward(p, x)?;
        if edges.is_empty() {
            let zero = tape.constant(&Tensor::zeros(vec![n, self.head_dim]));
            return Ok((zero, None));
        }
        let a2 = p[a].reshape(vec![2, self.head_dim])?.transpose()?;
        let parts = wx.matmul(a2)?;
        let pick_dst = tape.constant_data(vec![2, 1], vec![1.0, 0.0])?;
        let pick_src = tape.constant_data(vec![2, 1], vec![0.0, 1.0])?;
        let logits = parts
            .gather_rows(&edges.dst)?
            .matmul(pick_dst)?
            .add(parts.gather_rows(&edges.src)?.matmul(pick_src)?)?
            .leaky_relu(self.leaky_slope);
        let psi = logits.segment_softmax(&edges.dst, n)?;
        let msg = wx.gather_rows(&edges.src)?.mul_rows(psi)?;
        Ok((msg.scatter_add_rows(&edges.dst, n)?, Some(psi)))
    }

    /// Returns updated features plus `psi` variables per head for each edge type.
    #[allow(clippy::type_complexity)]
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        spatial: &EdgeList,
        cross: &EdgeList,
    ) -> Result<(Var<'t>, Vec<Option<Var<'t>>>, Vec<Option<Var<'t>>>), AutodiffError> {
        let n = x.shape()[0];
        let mut outs = Vec::with_capacity(self.heads.len());
        let (mut ps, mut pc) = (Vec::new(), Vec::new());
        for head in &self.heads {
            let (hs, psi_s) = self.typed(p, x, &head.spatial, head.a_spatial, spatial, n)?;
            let (hc, psi_c) = self.typed(p, x, &head.cross, head.a_cross, cross, n)?;
            outs.push(hs.add(hc)?);
            ps.push(psi_s);
            pc.push(psi_c);
        }
        let h = self.combine.forward(p, Var::concat(&outs)?)?;
        Ok((h, ps, pc))
    }
}

/// Per-level scorers `a^m` and the shared scorer producing `c^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SanModel {
    level_scorers: Vec<Linear>,
    cross_scorer: Linear,
}

/// Tape handles from one SAN pass.
#[derive(Debug, Clone, Copy)]
pub struct SanForward<'t> {
    /// `s` for each alignment entry (position, level).
    pub s: Var<'t>,
    /// `[1, M]` cross-scale weights.
    pub c: Var<'t>,
    /// `[P, E]` fused embedding per aligned position.
    pub h_multi: Var<'t>,
}

impl SanModel {
    fn new(store: &mut ParamStore, dim: usize, levels: usize, rng: &mut ChaCha8Rng) -> Self {
        let level_scorers = (0..levels)
            .map(|m| Linear::new(store, &format!("san.level{m}"), dim, 1, rng))
            .collect();
        let cross_scorer = Linear::new(store, "san.cross", dim, 1, rng);
        Self {
            level_scorers,
            cross_scorer,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.level_scorers.len()
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        h: Var<'t>,
        align: &LevelAlignment,
    ) -> Result<SanForward<'t>, AutodiffError> {
        let mut node_scores = Vec::new();
        let mut pooled = Vec::new();
        for (m, range) in align.level_ranges.iter().enumerate() {
            let idx: Vec<usize> = range.clone().collect();
            let hm = h.gather_rows(&idx)?;
            node_scores.push(self.level_scorers[m].forward(p, hm)?.transpose()?);
            let pm = hm.mean_axis(0)?;
            pooled.push(self.cross_scorer.forward(p, pm)?);
        }
        let n = h.shape()[0];
        let t = Var::concat(&node_scores)?.reshape(vec![n, 1])?;
        let s = t
            .gather_rows(&align.entry_node)?
            .segment_softmax(&align.entry_position, align.num_positions)?;
        let c = Var::concat(&pooled)?.softmax(1)?;
        let m = align.level_ranges.len();
        let c_entry = c.reshape(vec![m, 1])?.gather_rows(&align.entry_level)?;
        let weight = s.mul(c_entry)?;
        let h_multi = h
            .gather_rows(&align.entry_node)?
            .mul_rows(weight)?
            .scatter_add_rows(&align.entry_position, align.num_positions)?;
        Ok(SanForward { s, c, h_multi })
    }
}

/// Everything Stage 2 produces for one core, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub gat: GatOutput,
    /// `s` per alignment entry.
    pub s_entries: Vec<f64>,
    /// `s` per node, averaged over the positions that include it.
    pub s_node: Vec<f64>,
    pub c: Vec<f64>,
    pub h_multi: Tensor,
    pub graph_embedding: Vec<f64>,
}

/// GAT layer and SAN sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    config: Stage2Config,
    params: ParamStore,
    gat: GatLayer,
    san: SanModel,
}

/// Tape handles from a full Stage-2 forward pass.
#[derive(Debug, Clone)]
pub struct Stage2Forward<'t> {
    pub h: Var<'t>,
    pub psi_spatial: Vec<Option<Var<'t>>>,
    pub psi_cross: Vec<Option<Var<'t>>>,
    pub san: SanForward<'t>,
    /// `[1, E]` mean of the fused position embeddings.
    pub g: Var<'t>,
}

impl Stage2Model {
    pub fn new(in_dim: usize, num_levels: usize, config: Stage2Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gat = GatLayer::new(&mut params, in_dim, &config, &mut rng);
        let san = SanModel::new(&mut params, config.out_dim, num_levels, &mut rng);
        Self {
            config,
            params,
            gat,
            san,
        }
    }

    pub fn config(&self) -> &Stage2Config {
        &self.config
    }

    pub fn gat(&self) -> &GatLayer {
        &self.gat
    }

    pub fn san(&self) -> &SanModel {
        &self.san
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<(), GatError> {
        let id = self
            .params
            .find(name)
            .ok_or(GatError::Empty("set_param: unknown parameter"))?;
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

    pub fn check(&self, sample: &GraphSample) -> Result<(), GatError> {
        let f = &sample.features;
        if f.cols() != self.gat.in_dim {
            return Err(GatError::WidthMismatch {
                expected: self.gat.in_dim,
                actual: f.cols(),
            });
        }
        if sample.alignment.level_ranges.len() != self.san.num_levels() {
            return Err(GatError::LevelMismatch {
                expected: self.san.num_levels(),
                actual: sample.alignment.level_ranges.len(),
            });
        }
        Ok(())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        sample: &GraphSample,
    ) -> Result<Stage2Forward<'t>, GatError> {
        self.check(sample)?;
        let x = tape.constant(&sample.features);
        let (h, psi_spatial, psi_cross) =
            self.gat.forward(p, x, sample.spatial(self.config.self_loops), &sample.cross)?;
        let san = self.san.forward(p, h, &sample.alignment)?;
        let g = san.h_multi.mean_axis(0)?;
        Ok(Stage2Forward {
            h,
            psi_spatial,
            psi_cross,
            san,
            g,
        })
    }

    /// Inference on one core with frozen parameters.
    pub fn encode(&self, sample: &GraphSample) -> Result<Stage2Output, GatError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let f = self.forward(&tape, &p, sample)?;
        let values = |v: &[Option<Var<'_>>]| {
            v.iter()
                .map(|x| x.map(|x| x.data().to_vec()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        let s_entries = f.san.s.data().to_vec();
        let n = sample.features.rows();
        let mut s_node = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (k, &node) in sample.alignment.entry_node.iter().enumerate() {
            s_node[node] += s_entries[k];
            counts[node] += 1;
        }
        for (s, c) in s_node.iter_mut().zip(&counts) {
            if *c > 0 {
                *s /= *c as f64;
            }
        }
        let out = Stage2Output {
            gat: GatOutput {
                h: f.h.value(),
                psi_spatial: values(&f.psi_spatial),
                psi_cross: values(&f.psi_cross),
            },
            s_entries,
            s_node,
            c: f.san.c.data().to_vec(),
            h_multi: f.san.h_multi.value(),
            graph_embedding: f.g.data().to_vec(),
        };
        Ok(out)
    }
}
