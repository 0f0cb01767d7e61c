use std::ops::Range;

use super::GatError;
use crate::autodiff::Tensor;
use crate::graphbuild::HierarchicalGraph;
use crate::milnet::{project_patches, Bag, MilModel};

/// Directed edges `src -> dst`, grouped by destination.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeList {
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
}

impl EdgeList {
    /// Builds from per-node neighbour lists (`lists[i]` = sources feeding `i`).
    pub fn from_neighbors(lists: &[Vec<usize>]) -> Self {
        let mut e = Self::default();
        for (i, nb) in lists.iter().enumerate() {
            for &j in nb {
                e.dst.push(i);
                e.src.push(j);
            }
        }
        e
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

/// Aligned patch positions across levels.
///
/// Every node without a finer child starts a position; the position then
/// collects that node and its chain of coarser parents. Each `(position,
/// node)` pair is one entry, and `s` is normalised over a position's entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LevelAlignment {
    pub level_ranges: Vec<Range<usize>>,
    pub num_positions: usize,
    pub entry_position: Vec<usize>,
    pub entry_node: Vec<usize>,
    pub entry_level: Vec<usize>,
}

impl LevelAlignment {
    /// `levels[i]` must be non-decreasing; `parents[i]` points one level up.
    pub fn new(levels: &[usize], parents: &[Option<usize>], num_levels: usize) -> Result<Self, GatError> {
        let n = levels.len();
        if n == 0 {
            return Err(GatError::Empty("alignment"));
        }
        let mut level_ranges = Vec::with_capacity(num_levels);
        let mut start = 0;
        for m in 0..num_levels {
            let end = start + levels[start..].iter().take_while(|&&l| l == m).count();
            if end == start {
                return Err(GatError::Empty("alignment level"));
            }
            level_ranges.push(start..end);
            start = end;
        }
        if start != n {
            return Err(GatError::LevelMismatch {
                expected: num_levels,
                actual: levels[n - 1] + 1,
            });
        }
        let mut has_child = vec![false; n];
        for p in parents.iter().flatten() {
            has_child[*p] = true;
        }
        let mut a = Self {
            level_ranges,
            ..Self::default()
        };
        for leaf in (0..n).filter(|&i| !has_child[i]) {
            let pos = a.num_positions;
            a.num_positions += 1;
            let mut cur = Some(leaf);
            while let Some(i) = cur {
                a.entry_position.push(pos);
                a.entry_node.push(i);
                a.entry_level.push(levels[i]);
                cur = parents[i];
            }
        }
        Ok(a)
    }
}

/// A core's graph prepared for Stage 2: node features plus index arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub core_id: String,
    pub features: Tensor,
    pub spatial_with_loops: EdgeList,
    pub spatial_plain: EdgeList,
    pub cross: EdgeList,
    pub alignment: LevelAlignment,
}

impl GraphSample {
    pub fn new(graph: &HierarchicalGraph, features: Tensor) -> Result<Self, GatError> {
        if features.shape().len() != 2 || features.rows() != graph.len() {
            return Err(GatError::NodeCountMismatch {
                rows: features.shape().first().copied().unwrap_or(0),
                nodes: graph.len(),
            });
        }
        let with_loops = graph.neighborhoods(true);
        let plain = graph.neighborhoods(false);
        let levels: Vec<usize> = graph.nodes.iter().map(|n| n.level).collect();
        let alignment = LevelAlignment::new(&levels, &graph.parents(), graph.num_levels)?;
        Ok(Self {
            core_id: graph.core_id.clone(),
            features,
            spatial_with_loops: EdgeList::from_neighbors(&with_loops.spatial),
            spatial_plain: EdgeList::from_neighbors(&plain.spatial),
            cross: EdgeList::from_neighbors(&with_loops.cross),
            alignment,
        })
    }

    /// Uses the Stage-1 patch projector on each node's raw embedding.
    pub fn from_mil(graph: &HierarchicalGraph, model: &MilModel) -> Result<Self, GatError> {
        let rows: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.embedding.clone()).collect();
        let raw = Tensor::from_rows(&rows)?;
        let bag = Bag::new(graph.core_id.clone(), raw, 0)?;
        let features = project_patches(model, &bag)?;
        Self::new(graph, features)
    }

    pub fn spatial(&self, self_loops: bool) -> &EdgeList {
        if self_loops {
            &self.spatial_with_loops
        } else {
            &self.spatial_plain
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_levels(&self) -> usize {
        self.alignment.level_ranges.len()
    }
}
