use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{CoreEntry, CoreRecord, DatasetManifest, FeatureDataset, Mask, PatchRecord, Split, FORMAT_VERSION};
use super::DataError;
use crate::graphbuild::PATCH_SIZE;

/// Semi-axis range of the tumour ellipse, in level-0 patch units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            min_radius: 1.5,
            max_radius: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub feature_dim: usize,
    pub num_levels: usize,
    /// Class means are `+mu` (tumour) and `-mu` (background) on every coordinate.
    pub mu: f64,
    pub sigma: f64,
    pub tumour_fraction: f64,
    pub blob: BlobSpec,
    pub raster_downsample: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 60,
            n_test: 20,
            grid_rows: 8,
            grid_cols: 8,
            feature_dim: 32,
            num_levels: 3,
            mu: 1.0,
            sigma: 0.3,
            tumour_fraction: 0.5,
            blob: BlobSpec::default(),
            raster_downsample: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Synth(m.to_string()));
        if self.n_train + self.n_test < 2 {
            return bad("need at least 2 cores");
        }
        if self.n_train == 1 || self.n_test == 1 {
            return bad("each non-empty split needs at least 2 cores to hold both labels");
        }
        if !(self.sigma > 0.0) || !self.mu.is_finite() {
            return bad("sigma must be positive and mu finite");
        }
        if !(0.0..=1.0).contains(&self.tumour_fraction) {
            return bad("tumour_fraction must lie in [0, 1]");
        }
        if self.feature_dim == 0 || self.num_levels == 0 || self.raster_downsample == 0 {
            return bad("feature_dim, num_levels and raster_downsample must be positive");
        }
        let coarsest = 1usize << (self.num_levels - 1);
        if self.grid_rows < coarsest || self.grid_cols < coarsest {
            return bad("grid too small for the coarsest level");
        }
        let b = self.blob;
        if !(b.min_radius >= 0.75 && b.min_radius <= b.max_radius) {
            return bad("blob radii need 0.75 <= min_radius <= max_radius");
        }
        if 2.0 * b.max_radius > self.grid_rows.min(self.grid_cols) as f64 {
            return Err(DataError::Synth(format!(
                "blob diameter {} exceeds the {}x{} grid",
                2.0 * b.max_radius,
                self.grid_rows,
                self.grid_cols
            )));
        }
        Ok(())
    }
}

fn labels_for(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < k)).collect();
    labels.shuffle(rng);
    labels
}

/// Elliptical blob membership per level-0 patch, row-major.
fn blob_cells(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (rows, cols) = (cfg.grid_rows as f64, cfg.grid_cols as f64);
    let rx = rng.random_range(cfg.blob.min_radius..=cfg.blob.max_radius);
    let ry = rng.random_range(cfg.blob.min_radius..=cfg.blob.max_radius);
    let cx = rng.random_range(rx..=cols - rx);
    let cy = rng.random_range(ry..=rows - ry);
    let mut cells = Vec::with_capacity(cfg.grid_rows * cfg.grid_cols);
    for r in 0..cfg.grid_rows {
        for c in 0..cfg.grid_cols {
            let dx = (c as f64 + 0.5 - cx) / rx;
            let dy = (r as f64 + 0.5 - cy) / ry;
            cells.push(dx * dx + dy * dy <= 1.0);
        }
    }
    cells
}

fn draw(mean: f64, noise: &Normal<f64>, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| mean + noise.sample(rng)).collect()
}

/// Seeded synthetic cores. Tumour cores hold one elliptical blob of level-0
/// patches drawn around `+mu`; every other patch is drawn around `-mu`.
/// A coarse patch is the mean of its level-0 children plus fresh noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<FeatureDataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| DataError::Synth(e.to_string()))?;
    let width_px = cfg.grid_cols * PATCH_SIZE;
    let height_px = cfg.grid_rows * PATCH_SIZE;
    let mut manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        feature_dim: cfg.feature_dim,
        num_levels: cfg.num_levels,
        patch_size: PATCH_SIZE,
        raster_downsample: cfg.raster_downsample,
        width_px,
        height_px,
        cores: Vec::new(),
    };
    let grid = manifest.grid();
    let mut splits = Vec::new();
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)] {
        for label in labels_for(n, cfg.tumour_fraction, &mut rng) {
            splits.push((split, label));
        }
    }
    let mut cores = Vec::with_capacity(splits.len());
    for (i, (split, label)) in splits.into_iter().enumerate() {
        let core_id = format!("core_{i:03}");
        let blob = if label == 1 {
            blob_cells(cfg, &mut rng)
        } else {
            vec![false; cfg.grid_rows * cfg.grid_cols]
        };
        let mut patches = Vec::new();
        let mut level0 = Vec::with_capacity(blob.len());
        for r in 0..cfg.grid_rows {
            for c in 0..cfg.grid_cols {
                let mean = if blob[r * cfg.grid_cols + c] { cfg.mu } else { -cfg.mu };
                let f = draw(mean, &noise, cfg.feature_dim, &mut rng);
                level0.push(f.clone());
                patches.push(PatchRecord {
                    level: 0,
                    grid_row: r,
                    grid_col: c,
                    features: f,
                });
            }
        }
        for level in 1..cfg.num_levels {
            let k = 1usize << level;
            for r in 0..cfg.grid_rows / k {
                for c in 0..cfg.grid_cols / k {
                    let mut mean = vec![0.0; cfg.feature_dim];
                    for rr in r * k..(r + 1) * k {
                        for cc in c * k..(c + 1) * k {
                            for (m, v) in mean.iter_mut().zip(&level0[rr * cfg.grid_cols + cc]) {
                                *m += v;
                            }
                        }
                    }
                    let features = mean
                        .iter()
                        .map(|m| m / (k * k) as f64 + noise.sample(&mut rng))
                        .collect();
                    patches.push(PatchRecord {
                        level,
                        grid_row: r,
                        grid_col: c,
                        features,
                    });
                }
            }
        }
        let mut mask = Mask::empty(grid.width, grid.height);
        let ds = cfg.raster_downsample;
        for r in 0..cfg.grid_rows {
            for c in 0..cfg.grid_cols {
                if !blob[r * cfg.grid_cols + c] {
                    continue;
                }
                let (x0, y0) = (c * PATCH_SIZE, r * PATCH_SIZE);
                for y in y0 / ds..(y0 + PATCH_SIZE).div_ceil(ds) {
                    for x in x0 / ds..(x0 + PATCH_SIZE).div_ceil(ds) {
                        mask.values[y * grid.width + x] = true;
                    }
                }
            }
        }
        manifest.cores.push(CoreEntry {
            core_id: core_id.clone(),
            label,
            split,
            has_mask: true,
        });
        cores.push(CoreRecord {
            core_id,
            label,
            split,
            patches,
            mask: Some(mask),
        });
    }
    let ds = FeatureDataset { manifest, cores };
    ds.validate()?;
    Ok(ds)
}
