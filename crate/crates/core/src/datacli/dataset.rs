use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autodiff::Tensor;
use crate::graphbuild::{build_hierarchical_graph, HierarchicalGraph, PatchNode, PATCH_SIZE};
use crate::milnet::Bag;
use crate::saliency::RasterGrid;
use crate::xmetrics::ScoredPixels;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreEntry {
    pub core_id: String,
    pub label: u8,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub has_mask: bool,
}

/// Dataset-wide metadata. Every core shares one level-0 extent and
/// therefore one raster grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub feature_dim: usize,
    pub num_levels: usize,
    pub patch_size: usize,
    pub raster_downsample: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub cores: Vec<CoreEntry>,
}

impl DatasetManifest {
    pub fn grid(&self) -> RasterGrid {
        RasterGrid::for_extent(self.width_px, self.height_px, self.raster_downsample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub level: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub features: Vec<f64>,
}

/// Binary tumour mask on the common raster grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![false; width * height],
        }
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreRecord {
    pub core_id: String,
    pub label: u8,
    pub split: Split,
    pub patches: Vec<PatchRecord>,
    pub mask: Option<Mask>,
}

impl CoreRecord {
    fn nodes(&self) -> Vec<PatchNode> {
        self.patches
            .iter()
            .map(|p| PatchNode::new(&self.core_id, p.level, p.grid_row, p.grid_col).with_embedding(p.features.clone()))
            .collect()
    }

    /// Level-0 patches in row-major order, as a Stage-1 bag with the
    /// matching patch nodes.
    pub fn level0_bag(&self) -> Result<(Bag, Vec<PatchNode>), DataError> {
        let mut nodes: Vec<PatchNode> = self.nodes().into_iter().filter(|n| n.level == 0).collect();
        nodes.sort_by_key(|n| (n.grid_row, n.grid_col));
        for (i, n) in nodes.iter_mut().enumerate() {
            n.node_id = i;
        }
        let rows: Vec<Vec<f64>> = nodes.iter().map(|n| n.embedding.clone()).collect();
        let x = Tensor::from_rows(&rows).map_err(|e| self.err(e.to_string()))?;
        let bag = Bag::new(self.core_id.clone(), x, self.label).map_err(|e| self.err(e.to_string()))?;
        Ok((bag, nodes))
    }

    pub fn graph(&self, spatial_threshold: f64, scale_threshold: f64) -> Result<HierarchicalGraph, DataError> {
        let max_level = self.patches.iter().map(|p| p.level).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); max_level + 1];
        for n in self.nodes() {
            levels[n.level].push(n);
        }
        build_hierarchical_graph(levels, spatial_threshold, scale_threshold).map_err(|e| self.err(e.to_string()))
    }

    /// Pairs saliency values with this core's mask.
    pub fn scored(&self, saliency: &[f64]) -> Result<ScoredPixels, DataError> {
        let mask = self.mask.as_ref().ok_or_else(|| self.err("no mask".into()))?;
        ScoredPixels::new(saliency.to_vec(), mask.values.clone()).map_err(|e| self.err(e.to_string()))
    }

    fn err(&self, msg: String) -> DataError {
        DataError::Core {
            core_id: self.core_id.clone(),
            msg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub manifest: DatasetManifest,
    pub cores: Vec<CoreRecord>,
}

impl FeatureDataset {
    pub fn grid(&self) -> RasterGrid {
        self.manifest.grid()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CoreRecord> {
        self.cores.iter().filter(move |c| c.split == split)
    }

    pub fn core(&self, core_id: &str) -> Option<&CoreRecord> {
        self.cores.iter().find(|c| c.core_id == core_id)
    }

    /// Checks every invariant, reporting the first failure with its core id.
    pub fn validate(&self) -> Result<(), DataError> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(DataError::Manifest(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.patch_size != PATCH_SIZE {
            return Err(DataError::Manifest(format!("patch_size must be {PATCH_SIZE}, got {}", m.patch_size)));
        }
        if m.feature_dim == 0 || m.num_levels == 0 || m.raster_downsample == 0 {
            return Err(DataError::Manifest("feature_dim, num_levels and raster_downsample must be positive".into()));
        }
        if m.cores.len() != self.cores.len() {
            return Err(DataError::Manifest(format!(
                "manifest lists {} cores, {} loaded",
                m.cores.len(),
                self.cores.len()
            )));
        }
        let grid = m.grid();
        let mut seen = BTreeSet::new();
        for (entry, core) in m.cores.iter().zip(&self.cores) {
            let fail = |msg: String| DataError::Core {
                core_id: core.core_id.clone(),
                msg,
            };
            if entry.core_id != core.core_id || entry.label != core.label || entry.split != core.split {
                return Err(fail("record disagrees with its manifest entry".into()));
            }
            if !seen.insert(core.core_id.as_str()) {
                return Err(fail("duplicate core id".into()));
            }
            if core.label > 1 {
                return Err(fail(format!("label must be 0 or 1, got {}", core.label)));
            }
            if !core.patches.iter().any(|p| p.level == 0) {
                return Err(fail("no level-0 patches".into()));
            }
            let mut cells = BTreeSet::new();
            for p in &core.patches {
                if p.level >= m.num_levels {
                    return Err(fail(format!("patch at level {} but dataset has {} levels", p.level, m.num_levels)));
                }
                if p.features.len() != m.feature_dim {
                    return Err(fail(format!(
                        "level {} patch ({}, {}) has D={}, manifest D={}",
                        p.level,
                        p.grid_row,
                        p.grid_col,
                        p.features.len(),
                        m.feature_dim
                    )));
                }
                if let Some(i) = p.features.iter().position(|v| !v.is_finite()) {
                    return Err(fail(format!("non-finite feature {i} at level {} ({}, {})", p.level, p.grid_row, p.grid_col)));
                }
                let side = PATCH_SIZE << p.level;
                if (p.grid_col + 1) * side > m.width_px || (p.grid_row + 1) * side > m.height_px {
                    return Err(fail(format!(
                        "level {} patch ({}, {}) lies outside the {}x{} extent",
                        p.level, p.grid_row, p.grid_col, m.width_px, m.height_px
                    )));
                }
                if !cells.insert((p.level, p.grid_row, p.grid_col)) {
                    return Err(fail(format!("duplicate patch at level {} ({}, {})", p.level, p.grid_row, p.grid_col)));
                }
            }
            if entry.has_mask != core.mask.is_some() {
                return Err(fail("mask presence disagrees with manifest".into()));
            }
            if let Some(mask) = &core.mask {
                if (mask.width, mask.height) != (grid.width, grid.height) || mask.values.len() != grid.width * grid.height {
                    return Err(fail(format!(
                        "mask is {}x{}, manifest grid is {}x{}",
                        mask.width, mask.height, grid.width, grid.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        self.validate()?;
        let cores_dir = dir.join("cores");
        fs::create_dir_all(&cores_dir).map_err(io(&cores_dir))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest + "\n").map_err(io(&path))?;
        for core in &self.cores {
            let cdir = cores_dir.join(&core.core_id);
            fs::create_dir_all(&cdir).map_err(io(&cdir))?;
            let mut by_level: BTreeMap<usize, Vec<&PatchRecord>> = BTreeMap::new();
            for p in &core.patches {
                by_level.entry(p.level).or_default().push(p);
            }
            for (level, patches) in by_level {
                let mut text = String::new();
                for p in patches {
                    let _ = write!(text, "{},{}", p.grid_row, p.grid_col);
                    for v in &p.features {
                        let _ = write!(text, ",{v}");
                    }
                    text.push('\n');
                }
                let path = cdir.join(format!("level{level}.csv"));
                fs::write(&path, text).map_err(io(&path))?;
            }
            if let Some(mask) = &core.mask {
                let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
                    Luma([if mask.values[y as usize * mask.width + x as usize] { 255 } else { 0 }])
                });
                let path = cdir.join("mask.png");
                img.save(&path).map_err(|e| DataError::Core {
                    core_id: core.core_id.clone(),
                    msg: format!("writing {}: {e}", path.display()),
                })?;
            }
        }
        Ok(())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_level_file(core_id: &str, path: &Path, level: usize, dim: usize) -> Result<Vec<PatchRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| DataError::Core {
            core_id: core_id.to_string(),
            msg: format!("{name} line {}: {msg}", i + 1),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(fail(format!("expected {} fields (row, col, D={dim}), got {}", dim + 2, fields.len())));
        }
        let idx = |k: usize| fields[k].parse::<usize>().map_err(|e| fail(format!("field {}: {e}", k + 1)));
        let (grid_row, grid_col) = (idx(0)?, idx(1)?);
        let features = fields[2..]
            .iter()
            .enumerate()
            .map(|(k, f)| f.parse::<f64>().map_err(|e| fail(format!("field {}: {e}", k + 3))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(PatchRecord {
            level,
            grid_row,
            grid_col,
            features,
        });
    }
    Ok(out)
}

fn read_mask(core_id: &str, path: &Path) -> Result<Mask, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Core {
            core_id: core_id.to_string(),
            msg: format!("reading {}: {e}", path.display()),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        values: img.pixels().map(|p| p.0[0] >= 128).collect(),
    })
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<FeatureDataset, DataError> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(DataError::NoManifest(dir.display().to_string()));
    }
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Manifest(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut cores = Vec::with_capacity(manifest.cores.len());
    for entry in &manifest.cores {
        let cdir: PathBuf = dir.join("cores").join(&entry.core_id);
        if !cdir.is_dir() {
            return Err(DataError::Core {
                core_id: entry.core_id.clone(),
                msg: format!("missing directory {}", cdir.display()),
            });
        }
        let mut patches = Vec::new();
        for level in 0..manifest.num_levels {
            let path = cdir.join(format!("level{level}.csv"));
            if path.is_file() {
                patches.extend(parse_level_file(&entry.core_id, &path, level, manifest.feature_dim)?);
            } else if level == 0 {
                return Err(DataError::Core {
                    core_id: entry.core_id.clone(),
                    msg: "no level-0 patches (level0.csv missing)".into(),
                });
            }
        }
        let mask_path = cdir.join("mask.png");
        let mask = if entry.has_mask {
            Some(read_mask(&entry.core_id, &mask_path)?)
        } else {
            None
        };
        cores.push(CoreRecord {
            core_id: entry.core_id.clone(),
            label: entry.label,
            split: entry.split,
            patches,
            mask,
        });
    }
    let ds = FeatureDataset { manifest, cores };
    ds.validate()?;
    Ok(ds)
}
