//! Raster saliency maps: painting node scores onto a common grid,
//! Gaussian smoothing, multilevel fusion and confidence-weighted fusion.

mod export;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphbuild::{PatchNode, PATCH_SIZE};
use crate::milnet::{Bag, MilError, MilModel};

pub use export::{colorize, read_csv, write_color_png, write_csv, write_gray_png, write_overlay};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("map dimensions differ: {left:?} vs {right:?}")]
    DimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("node {node} (level {level}, row {row}, col {col}) falls outside the {width}x{height} grid")]
    FootprintOutside {
        node: usize,
        level: usize,
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("{count} scores for {nodes} nodes")]
    ScoreCount { count: usize, nodes: usize },
    #[error("non-finite score for node {0}")]
    NonFinite(usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("empty map")]
    Empty,
    #[error("{0} levels supplied but fusion is configured for {1}")]
    LevelCount(usize, usize),
    #[error("variant {variant} requires the {component} map")]
    MissingComponent {
        variant: &'static str,
        component: &'static str,
    },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed saliency csv: {0}")]
    Parse(String),
}

/// Dense `height × width` field of cells, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl RasterMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            normalized: false,
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, SaliencyError> {
        if values.len() != width * height {
            return Err(SaliencyError::DimMismatch {
                left: (width, height),
                right: (values.len(), 1),
            });
        }
        if width * height == 0 {
            return Err(SaliencyError::Empty);
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(SaliencyError::NonFinite(k));
        }
        Ok(Self {
            width,
            height,
            values,
            normalized: false,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            normalized: false,
            ..*self
        }
    }

    /// `(x - min) / (max - min + eps)`; a constant map becomes all zeros.
    pub fn min_max(&self, eps: f64) -> Self {
        let (lo, hi) = (self.min(), self.max());
        Self {
            values: self.values.iter().map(|v| (v - lo) / (hi - lo + eps)).collect(),
            normalized: true,
            ..*self
        }
    }

    fn same_dims(&self, other: &Self) -> Result<(), SaliencyError> {
        if self.dims() != other.dims() {
            return Err(SaliencyError::DimMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &Self, k: f64) {
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += k * b);
        self.normalized = false;
    }
}

/// `(x - min) / (max - min + eps)` on a plain list.
pub fn min_max_normalize(values: &[f64], eps: f64) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| (v - lo) / (hi - lo + eps)).collect()
}

/// Common raster grid: level-0 pixels divided by `downsample`, rounded up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub downsample: usize,
}

impl RasterGrid {
    pub fn for_extent(width_px: usize, height_px: usize, downsample: usize) -> Self {
        let ds = downsample.max(1);
        Self {
            width: width_px.div_ceil(ds),
            height: height_px.div_ceil(ds),
            downsample: ds,
        }
    }

    /// Cell range `[x0, x1) × [y0, y1)` covered by a node's level-0 footprint.
    pub fn footprint(&self, node: &PatchNode) -> (usize, usize, usize, usize) {
        let side = PATCH_SIZE << node.level;
        let (x0, y0) = (node.grid_col * side, node.grid_row * side);
        let ds = self.downsample;
        (x0 / ds, (x0 + side).div_ceil(ds), y0 / ds, (y0 + side).div_ceil(ds))
    }
}

/// Paints each node's score over its footprint; overlapping paint is averaged
/// and untouched cells stay 0.
pub fn rasterize(nodes: &[&PatchNode], scores: &[f64], grid: &RasterGrid) -> Result<RasterMap, SaliencyError> {
    if nodes.len() != scores.len() {
        return Err(SaliencyError::ScoreCount {
            count: scores.len(),
            nodes: nodes.len(),
        });
    }
    if grid.width == 0 || grid.height == 0 {
        return Err(SaliencyError::Empty);
    }
    let mut sum = vec![0.0; grid.width * grid.height];
    let mut count = vec![0u32; grid.width * grid.height];
    for (node, &score) in nodes.iter().zip(scores) {
        if !score.is_finite() {
            return Err(SaliencyError::NonFinite(node.node_id));
        }
        let (x0, x1, y0, y1) = grid.footprint(node);
        if x1 > grid.width || y1 > grid.height {
            return Err(SaliencyError::FootprintOutside {
                node: node.node_id,
                level: node.level,
                row: node.grid_row,
                col: node.grid_col,
                width: grid.width,
                height: grid.height,
            });
        }
        for y in y0..y1 {
            for x in x0..x1 {
                sum[y * grid.width + x] += score;
                count[y * grid.width + x] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / f64::from(c) })
        .collect();
    RasterMap::from_values(grid.width, grid.height, values)
}

/// Normalised 1D Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Symmetric reflection about the edges (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let j = i.rem_euclid(2 * n);
    (if j >= n { 2 * n - 1 - j } else { j }) as usize
}

/// Separable Gaussian blur with reflective boundaries.
pub fn gaussian_smooth(map: &RasterMap, sigma: f64) -> Result<RasterMap, SaliencyError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SaliencyError::BadSigma(sigma));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = map.dims();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &map.values[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * row[reflect(x as i64 + t as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(y as i64 + t as i64 - r, h) * w + x])
                .sum();
        }
    }
    RasterMap::from_values(w, h, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Base coefficients for (combined, MIL, gradient).
    pub base: [f64; 3],
    pub confidence_percentile: f64,
    pub sigma_mil: f64,
    pub sigma_gradient: f64,
    pub eps_norm: f64,
    pub raster_downsample: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rho: vec![0.5, 0.3, 0.2],
            sigma: vec![1.0, 2.0, 4.0],
            base: [0.6, 0.3, 0.1],
            confidence_percentile: 90.0,
            sigma_mil: 2.0,
            sigma_gradient: 1.0,
            eps_norm: 1e-8,
            raster_downsample: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        let bad = |s: &str| Err(SaliencyError::InvalidConfig(s.into()));
        if self.rho.len() != self.sigma.len() || self.rho.is_empty() {
            return bad("rho and sigma need the same non-zero length");
        }
        if self.rho.iter().chain(&self.sigma).any(|v| !(*v > 0.0)) {
            return bad("rho and sigma entries must be positive");
        }
        if self.base.iter().any(|v| !(*v > 0.0)) {
            return bad("base coefficients must be positive");
        }
        if !(0.0..=100.0).contains(&self.confidence_percentile) {
            return bad("percentile must lie in [0, 100]");
        }
        if !(self.sigma_mil > 0.0 && self.sigma_gradient > 0.0 && self.eps_norm > 0.0) {
            return bad("method sigmas and eps_norm must be positive");
        }
        if self.raster_downsample == 0 {
            return bad("raster_downsample must be at least 1");
        }
        Ok(())
    }
}

/// `sum_m rho_m * Gaussian(A_m, sigma_m)`.
pub fn multilevel_fuse(levels: &[RasterMap], config: &FusionConfig) -> Result<RasterMap, SaliencyError> {
    let first = levels.first().ok_or(SaliencyError::Empty)?;
    if levels.len() > config.rho.len() {
        return Err(SaliencyError::LevelCount(levels.len(), config.rho.len()));
    }
    let mut out = RasterMap::zeros(first.width, first.height);
    for (m, a) in levels.iter().enumerate() {
        first.same_dims(a)?;
        out.add_scaled(&gaussian_smooth(a, config.sigma[m])?, config.rho[m]);
    }
    Ok(out)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mean of the values strictly above the given percentile, or the maximum
/// when nothing lies strictly above it.
pub fn confidence_score_at(map: &RasterMap, pct: f64) -> f64 {
    let t = percentile(&map.values, pct);
    let (sum, n) = map
        .values
        .iter()
        .filter(|&&v| v > t)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        map.max()
    } else {
        sum / n as f64
    }
}

pub fn confidence_score(map: &RasterMap) -> f64 {
    confidence_score_at(map, 90.0)
}

/// Weights and intermediate values of a confidence-weighted fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub map: RasterMap,
    pub confidences: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `v_x = base_x * C_x / C_total`, then `sum v_x M_x` min-max normalised.
/// When `C_total` is zero the base coefficients, renormalised to sum 1, are
/// used directly.
pub fn weighted_confidence_fuse(
    maps: &[&RasterMap],
    base: &[f64],
    pct: f64,
    eps: f64,
) -> Result<FusedMap, SaliencyError> {
    let first = maps.first().ok_or(SaliencyError::Empty)?;
    for m in maps {
        first.same_dims(m)?;
    }
    let confidences: Vec<f64> = maps.iter().map(|m| confidence_score_at(m, pct)).collect();
    let total: f64 = confidences.iter().sum();
    let weights: Vec<f64> = if total == 0.0 {
        let b: f64 = base.iter().sum();
        base.iter().map(|x| x / b).collect()
    } else {
        base.iter().zip(&confidences).map(|(b, c)| b * c / total).collect()
    };
    let mut fused = RasterMap::zeros(first.width, first.height);
    for (m, w) in maps.iter().zip(&weights) {
        fused.add_scaled(m, *w);
    }
    Ok(FusedMap {
        map: fused.min_max(eps),
        confidences,
        weights,
    })
}

pub fn confidence_fuse(
    combined: &RasterMap,
    mil: &RasterMap,
    gradient: &RasterMap,
    config: &FusionConfig,
) -> Result<FusedMap, SaliencyError> {
    weighted_confidence_fuse(
        &[combined, mil, gradient],
        &config.base,
        config.confidence_percentile,
        config.eps_norm,
    )
}

/// Min-max normalise per-patch values, paint them and smooth.
fn method_map(
    values: &[f64],
    nodes: &[&PatchNode],
    grid: &RasterGrid,
    sigma: f64,
    eps: f64,
) -> Result<RasterMap, SaliencyError> {
    let norm = min_max_normalize(values, eps);
    gaussian_smooth(&rasterize(nodes, &norm, grid)?, sigma)
}

/// Stage-1 attention weights over the bag's patches. `nodes[i]` is the
/// patch behind row `i` of the bag.
pub fn mil_attention_map(
    model: &MilModel,
    bag: &Bag,
    nodes: &[&PatchNode],
    grid: &RasterGrid,
    config: &FusionConfig,
) -> Result<RasterMap, SaliencyError> {
    let alpha = model.predict(bag)?.alpha;
    method_map(&alpha, nodes, grid, config.sigma_mil, config.eps_norm)
}

/// Gradient saliency: per-patch L2 norm of `d yhat / d e_i` on the projected
/// embeddings. Stands in for CNN FullGrad, which needs image-level features.
pub fn gradient_saliency_map(
    model: &MilModel,
    bag: &Bag,
    nodes: &[&PatchNode],
    grid: &RasterGrid,
    config: &FusionConfig,
) -> Result<RasterMap, SaliencyError> {
    let g = model.embedding_gradient_norms(bag)?;
    method_map(&g, nodes, grid, config.sigma_gradient, config.eps_norm)
}

/// Per-level maps from node scores, each min-max normalised after painting.
pub fn level_maps(
    nodes: &[PatchNode],
    scores: &[f64],
    num_levels: usize,
    grid: &RasterGrid,
    eps: f64,
) -> Result<Vec<RasterMap>, SaliencyError> {
    if nodes.len() != scores.len() {
        return Err(SaliencyError::ScoreCount {
            count: scores.len(),
            nodes: nodes.len(),
        });
    }
    (0..num_levels)
        .map(|m| {
            let (sel, sc): (Vec<&PatchNode>, Vec<f64>) = nodes
                .iter()
                .zip(scores)
                .filter(|(n, _)| n.level == m)
                .map(|(n, s)| (n, *s))
                .unzip();
            Ok(rasterize(&sel, &sc, grid)?.min_max(eps))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    V1,
    V2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::V1, Variant::V2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "GRAPHITE-Base",
            Variant::V1 => "GRAPHITE-V1",
            Variant::V2 => "GRAPHITE-V2",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = SaliencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "graphite-base" => Ok(Variant::Base),
            "v1" | "graphite-v1" => Ok(Variant::V1),
            "v2" | "graphite-v2" => Ok(Variant::V2),
            _ => Err(SaliencyError::InvalidConfig(format!("unknown variant {s:?} (expected base, v1 or v2)"))),
        }
    }
}

/// Inputs to the variant maps for one core.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyComponents {
    pub combined: RasterMap,
    pub mil: Option<RasterMap>,
    pub gradient: Option<RasterMap>,
}

pub fn graphite_variant(
    variant: Variant,
    c: &SaliencyComponents,
    config: &FusionConfig,
) -> Result<FusedMap, SaliencyError> {
    let need = |m: &Option<RasterMap>, component| {
        m.clone().ok_or(SaliencyError::MissingComponent {
            variant: variant.name(),
            component,
        })
    };
    let pct = config.confidence_percentile;
    match variant {
        Variant::Base => Ok(FusedMap {
            map: c.combined.min_max(config.eps_norm),
            confidences: vec![confidence_score_at(&c.combined, pct)],
            weights: vec![1.0],
        }),
        Variant::V1 => {
            let mil = need(&c.mil, "MIL attention")?;
            let b = &config.base;
            let base = [b[0] / (b[0] + b[1]), b[1] / (b[0] + b[1])];
            weighted_confidence_fuse(&[&c.combined, &mil], &base, pct, config.eps_norm)
        }
        Variant::V2 => {
            let mil = need(&c.mil, "MIL attention")?;
            let grad = need(&c.gradient, "gradient")?;
            confidence_fuse(&c.combined, &mil, &grad, config)
        }
    }
}

#[cfg(test)]
mod tests;
