//! Multiscale patch grids and hierarchical graph construction.
//!
//! Level `m` has half the resolution of level `m - 1`: one level-`m` pixel
//! spans `2^m` level-0 pixels. Patch centers are kept in level-local pixels.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PATCH_SIZE: usize = 224;
const HALF_PATCH: f64 = 112.0;

pub const DEFAULT_SPATIAL_THRESHOLD: f64 = 1.5;
pub const DEFAULT_SCALE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("extent {width}x{height} holds no {size}px patch at level {level}")]
    EmptyLevel {
        width: usize,
        height: usize,
        level: usize,
        size: usize,
    },
    #[error("spatial distance needs equal levels, got {0} and {1}")]
    LevelMismatch(usize, usize),
    #[error("scale distance needs the first patch at a coarser level, got {coarse} vs {fine}")]
    NotCoarser { coarse: usize, fine: usize },
    #[error("graph needs at least one node")]
    NoNodes,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("duplicate patch at level {level}, row {row}, col {col}")]
    DuplicatePatch { level: usize, row: usize, col: usize },
}

/// One patch at one magnification level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchNode {
    pub node_id: usize,
    pub core_id: String,
    pub level: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub center_x: f64,
    pub center_y: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub embedding: Vec<f64>,
}

impl PatchNode {
    pub fn new(core_id: impl Into<String>, level: usize, grid_row: usize, grid_col: usize) -> Self {
        Self {
            node_id: 0,
            core_id: core_id.into(),
            level,
            grid_row,
            grid_col,
            center_x: (grid_col * PATCH_SIZE) as f64 + HALF_PATCH,
            center_y: (grid_row * PATCH_SIZE) as f64 + HALF_PATCH,
            embedding: Vec::new(),
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = embedding;
        self
    }

    /// Footprint in level-0 pixels: `(x0, y0, side)`.
    pub fn level0_footprint(&self) -> (usize, usize, usize) {
        let side = PATCH_SIZE << self.level;
        (self.grid_col * side, self.grid_row * side, side)
    }
}

/// Patch grid of one level for a core whose level-0 extent is `width × height`.
/// Partial boundary patches are dropped.
pub fn build_level_grid(
    core_id: &str,
    width: usize,
    height: usize,
    level: usize,
) -> Result<Vec<PatchNode>, GraphError> {
    let side = PATCH_SIZE << level;
    let (cols, rows) = (width / side, height / side);
    if cols == 0 || rows == 0 {
        return Err(GraphError::EmptyLevel {
            width,
            height,
            level,
            size: side,
        });
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut node = PatchNode::new(core_id, level, r, c);
            node.node_id = out.len();
            out.push(node);
        }
    }
    Ok(out)
}

/// Euclidean center distance in patch units; both patches on one level.
pub fn spatial_distance(a: &PatchNode, b: &PatchNode) -> Result<f64, GraphError> {
    if a.level != b.level {
        return Err(GraphError::LevelMismatch(a.level, b.level));
    }
    Ok(((a.center_x - b.center_x).powi(2) + (a.center_y - b.center_y).powi(2)).sqrt()
        / PATCH_SIZE as f64)
}

/// Pixel distance after lifting the coarse center into the fine level's frame.
pub fn scale_distance(coarse: &PatchNode, fine: &PatchNode) -> Result<f64, GraphError> {
    if coarse.level <= fine.level {
        return Err(GraphError::NotCoarser {
            coarse: coarse.level,
            fine: fine.level,
        });
    }
    let factor = (1u64 << (coarse.level - fine.level)) as f64;
    Ok(((coarse.center_x * factor - fine.center_x).powi(2)
        + (coarse.center_y * factor - fine.center_y).powi(2))
    .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossEdge {
    pub coarse: usize,
    pub fine: usize,
    pub delta: usize,
}

/// Nodes across all levels plus spatial (same level) and cross-scale edges.
/// Node ids equal positions in `nodes`, which is sorted by `(level, row, col)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalGraph {
    pub core_id: String,
    pub num_levels: usize,
    pub nodes: Vec<PatchNode>,
    /// Unordered pairs stored as `(lo, hi)` with `lo < hi`.
    pub spatial_edges: Vec<(usize, usize)>,
    pub cross_edges: Vec<CrossEdge>,
    pub spatial_threshold: f64,
    pub scale_threshold: f64,
}

/// Flattens per-level node lists, sorts them canonically and connects
/// every pair within the thresholds.
pub fn build_hierarchical_graph(
    levels: Vec<Vec<PatchNode>>,
    spatial_threshold: f64,
    scale_threshold: f64,
) -> Result<HierarchicalGraph, GraphError> {
    for th in [spatial_threshold, scale_threshold] {
        if !(th > 0.0) {
            return Err(GraphError::BadThreshold(th));
        }
    }
    let mut nodes: Vec<PatchNode> = levels.into_iter().flatten().collect();
    if nodes.is_empty() {
        return Err(GraphError::NoNodes);
    }
    nodes.sort_by_key(|n| (n.level, n.grid_row, n.grid_col));
    for w in nodes.windows(2) {
        if (w[0].level, w[0].grid_row, w[0].grid_col) == (w[1].level, w[1].grid_row, w[1].grid_col) {
            return Err(GraphError::DuplicatePatch {
                level: w[1].level,
                row: w[1].grid_row,
                col: w[1].grid_col,
            });
        }
    }
    for (i, n) in nodes.iter_mut().enumerate() {
        n.node_id = i;
    }
    let num_levels = nodes.iter().map(|n| n.level).max().unwrap_or(0) + 1;
    let core_id = nodes[0].core_id.clone();

    // (level, row, col) -> node id
    let index: HashMap<(usize, usize, usize), usize> = nodes
        .iter()
        .map(|n| ((n.level, n.grid_row, n.grid_col), n.node_id))
        .collect();

    let mut spatial = BTreeSet::new();
    let reach = spatial_threshold.floor() as isize + 1;
    for a in &nodes {
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (a.grid_row as isize + dr, a.grid_col as isize + dc);
                if r < 0 || c < 0 || (dr == 0 && dc == 0) {
                    continue;
                }
                let Some(&j) = index.get(&(a.level, r as usize, c as usize)) else {
                    continue;
                };
                if spatial_distance(a, &nodes[j])? <= spatial_threshold {
                    spatial.insert((a.node_id.min(j), a.node_id.max(j)));
                }
            }
        }
    }

    let mut cross = BTreeSet::new();
    let radius = scale_threshold * PATCH_SIZE as f64;
    for coarse in nodes.iter().filter(|n| n.level > 0) {
        for fine_level in 0..coarse.level {
            let delta = coarse.level - fine_level;
            let factor = (1u64 << delta) as f64;
            let (x, y) = (coarse.center_x * factor, coarse.center_y * factor);
            let span = |center: f64| {
                let lo = ((center - radius - HALF_PATCH) / PATCH_SIZE as f64).floor() as isize - 1;
                let hi = ((center + radius - HALF_PATCH) / PATCH_SIZE as f64).ceil() as isize + 1;
                (lo.max(0), hi)
            };
            let (c0, c1) = span(x);
            let (r0, r1) = span(y);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let Some(&j) = index.get(&(fine_level, r as usize, c as usize)) else {
                        continue;
                    };
                    if scale_distance(coarse, &nodes[j])? <= radius {
                        cross.insert(CrossEdge {
                            coarse: coarse.node_id,
                            fine: j,
                            delta,
                        });
                    }
                }
            }
        }
    }

    Ok(HierarchicalGraph {
        core_id,
        num_levels,
        nodes,
        spatial_edges: spatial.into_iter().collect(),
        cross_edges: cross.into_iter().collect(),
        spatial_threshold,
        scale_threshold,
    })
}

impl HierarchicalGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn level_of(&self, id: usize) -> usize {
        self.nodes[id].level
    }

    pub fn nodes_at_level(&self, level: usize) -> impl Iterator<Item = &PatchNode> {
        self.nodes.iter().filter(move |n| n.level == level)
    }

    /// Typed neighborhoods: spatial lists (optionally with a self loop) and
    /// cross lists treating stored coarse→fine edges as bidirectional.
    pub fn neighborhoods(&self, self_loops: bool) -> Neighborhoods {
        let n = self.nodes.len();
        let mut spatial = vec![Vec::new(); n];
        let mut cross = vec![Vec::new(); n];
        if self_loops {
            for (i, s) in spatial.iter_mut().enumerate() {
                s.push(i);
            }
        }
        for &(a, b) in &self.spatial_edges {
            spatial[a].push(b);
            spatial[b].push(a);
        }
        for e in &self.cross_edges {
            cross[e.coarse].push(e.fine);
            cross[e.fine].push(e.coarse);
        }
        for l in spatial.iter_mut().chain(cross.iter_mut()) {
            l.sort_unstable();
        }
        Neighborhoods { spatial, cross }
    }

    /// Closest coarser node one level up for each node, via cross edges
    /// with `delta == 1`. Ties go to the lower node id.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut best: Vec<Option<(f64, usize)>> = vec![None; self.nodes.len()];
        for e in self.cross_edges.iter().filter(|e| e.delta == 1) {
            let d = scale_distance(&self.nodes[e.coarse], &self.nodes[e.fine])
                .expect("cross edges join distinct levels");
            let slot = &mut best[e.fine];
            match slot {
                Some((bd, bid)) if (*bd, *bid) <= (d, e.coarse) => {}
                _ => *slot = Some((d, e.coarse)),
            }
        }
        best.into_iter().map(|b| b.map(|(_, id)| id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    pub spatial: Vec<Vec<usize>>,
    pub cross: Vec<Vec<usize>>,
}
