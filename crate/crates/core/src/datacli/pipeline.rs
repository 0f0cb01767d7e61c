use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_stage1, load_stage2, save_stage1, save_stage2};
use super::dataset::{CoreRecord, FeatureDataset, Split};
use super::{DataError, LevelScore, RunConfig};
use crate::autodiff::Tensor;
use crate::gatsan::{train_stage2, GraphSample, Stage2Model};
use crate::graphbuild::HierarchicalGraph;
use crate::milnet::{stratified_split, train_stage1, Bag, MilModel, TrainHistory};
use crate::saliency::{
    gradient_saliency_map, graphite_variant, level_maps, mil_attention_map, multilevel_fuse, write_color_png,
    write_csv, write_gray_png, RasterMap, SaliencyComponents, Variant,
};
use crate::xmetrics::{
    auroc, compare_methods, evaluate_method, write_curve_csv, write_report_csv, Curves, MetricReport, ScoredPixels,
};

pub const METHOD_MIL: &str = "mil";
pub const METHOD_GRADIENT: &str = "gradient";
pub const METHOD_UNIFORM: &str = "uniform";
pub const METHOD_RANDOM: &str = "random";

/// Every method, in report order before ranking.
pub fn all_methods() -> Vec<&'static str> {
    let mut m: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    m.extend([METHOD_MIL, METHOD_GRADIENT, METHOD_UNIFORM, METHOD_RANDOM]);
    m
}

/// Directory-safe form of a method name: `GRAPHITE-V2` becomes `graphite-v2`.
pub fn method_dir(method: &str) -> String {
    method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Paths of every artifact under one output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("stage1.ckpt")
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("stage2.ckpt")
    }

    pub fn history(&self, stage: &str) -> PathBuf {
        self.root.join("history").join(format!("{stage}.json"))
    }

    pub fn graphs_dir(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn saliency_dir(&self, method: &str) -> PathBuf {
        self.root.join("saliency").join(method_dir(method))
    }

    pub fn saliency_index(&self) -> PathBuf {
        self.root.join("saliency").join("index.json")
    }

    pub fn metrics_file(&self, method: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{}.json", method_dir(method)))
    }

    pub fn curve_file(&self, method: &str, curve: &str) -> PathBuf {
        self.root.join("curves").join(format!("{}_{curve}.csv", method_dir(method)))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), DataError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(io(p))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Stage {
        stage: "export",
        msg: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Config(format!("{}: {e}", path.display())))
}

fn check_grid(ds: &FeatureDataset, cfg: &RunConfig) -> Result<(), DataError> {
    if cfg.fusion.raster_downsample != ds.manifest.raster_downsample {
        return Err(DataError::Config(format!(
            "fusion.raster_downsample {} differs from the dataset's {}",
            cfg.fusion.raster_downsample, ds.manifest.raster_downsample
        )));
    }
    Ok(())
}

/// Hierarchical graphs for every core, in dataset order.
pub fn build_graphs(ds: &FeatureDataset, cfg: &RunConfig) -> Result<Vec<HierarchicalGraph>, DataError> {
    ds.cores
        .par_iter()
        .map(|c| c.graph(cfg.spatial_threshold, cfg.scale_threshold))
        .collect()
}

/// Writes one `graphs/<core_id>.json` per graph.
pub fn export_graphs(layout: &RunLayout, graphs: &[HierarchicalGraph]) -> Result<(), DataError> {
    for g in graphs {
        write_json(&layout.graphs_dir().join(format!("{}.json", g.core_id)), g)?;
    }
    Ok(())
}

/// Training-split cores divided into fitting and early-stopping sets.
fn train_val<'a>(ds: &'a FeatureDataset, cfg: &RunConfig) -> Result<(Vec<&'a CoreRecord>, Vec<&'a CoreRecord>), DataError> {
    let train: Vec<&CoreRecord> = ds.split(Split::Train).collect();
    if train.len() < 2 {
        return Err(DataError::Config("need at least 2 training cores".into()));
    }
    let labels: Vec<u8> = train.iter().map(|c| c.label).collect();
    let (fit, val) = stratified_split(&labels, cfg.val_fraction, cfg.seed.wrapping_add(2));
    Ok((fit.iter().map(|&i| train[i]).collect(), val.iter().map(|&i| train[i]).collect()))
}

pub fn train_mil(ds: &FeatureDataset, cfg: &RunConfig) -> Result<(MilModel, TrainHistory), DataError> {
    cfg.validate()?;
    let (fit, val) = train_val(ds, cfg)?;
    let bags = |cores: &[&CoreRecord]| -> Result<Vec<_>, DataError> {
        cores.iter().map(|c| c.level0_bag().map(|(b, _)| b)).collect()
    };
    let (fit, val) = (bags(&fit)?, bags(&val)?);
    let dims = cfg.mil.dims(ds.manifest.feature_dim);
    log::info!("stage 1: {} training bags, {} validation bags", fit.len(), val.len());
    train_stage1(&fit, &val, dims, &cfg.stage1_config()).map_err(|e| DataError::stage("stage 1")(e.to_string()))
}

pub fn train_ssl(ds: &FeatureDataset, cfg: &RunConfig, mil: &MilModel) -> Result<(Stage2Model, TrainHistory), DataError> {
    cfg.validate()?;
    let (fit, val) = train_val(ds, cfg)?;
    let samples = |cores: &[&CoreRecord]| -> Result<Vec<GraphSample>, DataError> {
        cores
            .par_iter()
            .map(|c| {
                let g = c.graph(cfg.spatial_threshold, cfg.scale_threshold)?;
                GraphSample::from_mil(&g, mil).map_err(|e| DataError::Core {
                    core_id: c.core_id.clone(),
                    msg: e.to_string(),
                })
            })
            .collect()
    };
    let (fit, val) = (samples(&fit)?, samples(&val)?);
    log::info!("stage 2: {} training graphs, {} validation graphs", fit.len(), val.len());
    train_stage2(&fit, &val, &cfg.stage2_config()).map_err(|e| DataError::stage("stage 2")(e.to_string()))
}

/// Every method's map for one core, in [`all_methods`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreSaliency {
    pub core_id: String,
    pub maps: Vec<(String, RasterMap)>,
    /// Adaptive fusion weights of the V2 map (combined, MIL, gradient).
    pub v2_weights: Vec<f64>,
}

impl CoreSaliency {
    pub fn map(&self, method: &str) -> Option<&RasterMap> {
        self.maps.iter().find(|(m, _)| m == method).map(|(_, r)| r)
    }
}

fn core_saliency(
    ds: &FeatureDataset,
    index: usize,
    cfg: &RunConfig,
    mil: &MilModel,
    stage2: &Stage2Model,
) -> Result<CoreSaliency, DataError> {
    let core = &ds.cores[index];
    let fail = |e: String| DataError::Stage {
        stage: "saliency",
        msg: format!("core {}: {e}", core.core_id),
    };
    let grid = ds.grid();
    let fusion = &cfg.fusion;
    let graph = core.graph(cfg.spatial_threshold, cfg.scale_threshold)?;
    let sample = GraphSample::from_mil(&graph, mil).map_err(|e| fail(e.to_string()))?;
    let out = stage2.encode(&sample).map_err(|e| fail(e.to_string()))?;
    let scores = match cfg.level_scores {
        LevelScore::San => out.s_node,
        LevelScore::SanRelevance => {
            let rows: Vec<Vec<f64>> = graph.nodes.iter().map(|n| n.embedding.clone()).collect();
            let raw = Tensor::from_rows(&rows).map_err(|e| fail(e.to_string()))?;
            let bag = Bag::new(core.core_id.clone(), raw, core.label).map_err(|e| fail(e.to_string()))?;
            let rel = mil.instance_scores(&bag).map_err(|e| fail(e.to_string()))?;
            out.s_node.iter().zip(&rel).map(|(s, r)| s * r).collect()
        }
    };
    let levels = level_maps(&graph.nodes, &scores, graph.num_levels, &grid, fusion.eps_norm)
        .map_err(|e| fail(e.to_string()))?;
    let combined = multilevel_fuse(&levels, fusion).map_err(|e| fail(e.to_string()))?;

    let (bag, nodes) = core.level0_bag()?;
    let refs: Vec<_> = nodes.iter().collect();
    let mil_map = mil_attention_map(mil, &bag, &refs, &grid, fusion).map_err(|e| fail(e.to_string()))?;
    let grad_map = gradient_saliency_map(mil, &bag, &refs, &grid, fusion).map_err(|e| fail(e.to_string()))?;
    let components = SaliencyComponents {
        combined,
        mil: Some(mil_map.clone()),
        gradient: Some(grad_map.clone()),
    };
    let mut maps = Vec::new();
    let mut v2_weights = Vec::new();
    for v in Variant::ALL {
        let fused = graphite_variant(v, &components, fusion).map_err(|e| fail(e.to_string()))?;
        if v == Variant::V2 {
            v2_weights = fused.weights.clone();
        }
        maps.push((v.name().to_string(), fused.map));
    }
    maps.push((METHOD_MIL.into(), mil_map));
    maps.push((METHOD_GRADIENT.into(), grad_map));
    maps.push((METHOD_UNIFORM.into(), RasterMap::filled(grid.width, grid.height, 0.5)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    rng.set_stream(index as u64);
    let noise: Vec<f64> = (0..grid.width * grid.height).map(|_| rng.random::<f64>()).collect();
    let random = RasterMap::from_values(grid.width, grid.height, noise).map_err(|e| fail(e.to_string()))?;
    maps.push((METHOD_RANDOM.into(), random));
    Ok(CoreSaliency {
        core_id: core.core_id.clone(),
        maps,
        v2_weights,
    })
}

/// Cores whose maps are scored: test-split cores if the dataset has any,
/// otherwise all cores.
pub fn saliency_cores(ds: &FeatureDataset) -> Vec<usize> {
    let test: Vec<usize> = (0..ds.cores.len()).filter(|&i| ds.cores[i].split == Split::Test).collect();
    if test.is_empty() {
        (0..ds.cores.len()).collect()
    } else {
        test
    }
}

/// Maps for the given cores (dataset indices), computed in parallel and
/// returned in input order.
pub fn compute_saliency(
    ds: &FeatureDataset,
    cfg: &RunConfig,
    mil: &MilModel,
    stage2: &Stage2Model,
    cores: &[usize],
) -> Result<Vec<CoreSaliency>, DataError> {
    check_grid(ds, cfg)?;
    cores.par_iter().map(|&i| core_saliency(ds, i, cfg, mil, stage2)).collect()
}

/// Scores every method over the cores that have a mask with tumour pixels.
/// Returns reports in method order, unranked, with their pooled curves.
pub fn evaluate_saliency(
    ds: &FeatureDataset,
    saliency: &[CoreSaliency],
    cfg: &RunConfig,
) -> Result<Vec<(MetricReport, Curves)>, DataError> {
    let mut by_method: BTreeMap<String, Vec<(String, ScoredPixels)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for cs in saliency {
        let core = ds.core(&cs.core_id).ok_or_else(|| DataError::Core {
            core_id: cs.core_id.clone(),
            msg: "not in dataset".into(),
        })?;
        match &core.mask {
            Some(m) if m.positives() > 0 => {}
            _ => continue,
        }
        for (method, map) in &cs.maps {
            if !order.contains(method) {
                order.push(method.clone());
            }
            let px = core.scored(map.values())?;
            by_method.entry(method.clone()).or_default().push((cs.core_id.clone(), px));
        }
    }
    if order.is_empty() {
        return Err(DataError::Stage {
            stage: "evaluation",
            msg: "no scored core has a mask with tumour pixels".into(),
        });
    }
    order
        .par_iter()
        .map(|m| {
            evaluate_method(m, &by_method[m], &cfg.grid, cfg.averaging).map_err(|e| DataError::Stage {
                stage: "evaluation",
                msg: format!("{m}: {e}"),
            })
        })
        .collect()
}

pub fn compare_reports(reports: Vec<MetricReport>) -> Vec<MetricReport> {
    compare_methods(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyIndexEntry {
    pub method: String,
    pub dir: String,
    pub cores: Vec<String>,
}

/// Writes CSV and grayscale PNG per core and method, colour PNGs for the
/// GRAPHITE variants, and an index of what was written.
pub fn export_saliency(layout: &RunLayout, saliency: &[CoreSaliency]) -> Result<(), DataError> {
    let mut index: Vec<SaliencyIndexEntry> = Vec::new();
    let variant_names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    for cs in saliency {
        for (method, map) in &cs.maps {
            let dir = layout.saliency_dir(method);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let fail = |e: crate::saliency::SaliencyError| DataError::Stage {
                stage: "export",
                msg: e.to_string(),
            };
            write_csv(map, &dir.join(format!("{}.csv", cs.core_id))).map_err(fail)?;
            write_gray_png(map, &dir.join(format!("{}.png", cs.core_id))).map_err(fail)?;
            if variant_names.contains(&method.as_str()) {
                write_color_png(map, &dir.join(format!("{}_color.png", cs.core_id))).map_err(fail)?;
            }
            match index.iter_mut().find(|e| &e.method == method) {
                Some(e) => e.cores.push(cs.core_id.clone()),
                None => index.push(SaliencyIndexEntry {
                    method: method.clone(),
                    dir: method_dir(method),
                    cores: vec![cs.core_id.clone()],
                }),
            }
        }
    }
    write_json(&layout.saliency_index(), &index)
}

/// Reads maps written by [`export_saliency`].
pub fn import_saliency(layout: &RunLayout) -> Result<Vec<CoreSaliency>, DataError> {
    let path = layout.saliency_index();
    if !path.is_file() {
        return Err(DataError::Config(format!("no saliency index at {}", path.display())));
    }
    let index: Vec<SaliencyIndexEntry> = read_json(&path)?;
    let mut cores: Vec<CoreSaliency> = Vec::new();
    for entry in &index {
        for core_id in &entry.cores {
            let p = layout.root.join("saliency").join(&entry.dir).join(format!("{core_id}.csv"));
            let map = crate::saliency::read_csv(&p).map_err(|e| DataError::Core {
                core_id: core_id.clone(),
                msg: e.to_string(),
            })?;
            match cores.iter_mut().find(|c| &c.core_id == core_id) {
                Some(c) => c.maps.push((entry.method.clone(), map)),
                None => cores.push(CoreSaliency {
                    core_id: core_id.clone(),
                    maps: vec![(entry.method.clone(), map)],
                    v2_weights: Vec::new(),
                }),
            }
        }
    }
    Ok(cores)
}

/// Writes per-method metric JSON and curves, then the ranked report.
pub fn export_metrics(layout: &RunLayout, results: &[(MetricReport, Curves)]) -> Result<Vec<MetricReport>, DataError> {
    let fail = |e: crate::xmetrics::MetricError| DataError::Stage {
        stage: "export",
        msg: e.to_string(),
    };
    for (report, curves) in results {
        write_json(&layout.metrics_file(&report.method), report)?;
        let series = [
            ("roc", &curves.roc, "fpr", "tpr"),
            ("pr", &curves.pr, "recall", "precision"),
            ("f1", &curves.f1, "threshold", "f1"),
            ("nb", &curves.net_benefit, "threshold", "net_benefit"),
        ];
        for (name, pts, x, y) in series {
            let path = layout.curve_file(&report.method, name);
            ensure_parent(&path)?;
            write_curve_csv(pts, x, y, &path).map_err(fail)?;
        }
    }
    let ranked = compare_reports(results.iter().map(|(r, _)| r.clone()).collect());
    write_report_csv(&ranked, &layout.report()).map_err(fail)?;
    Ok(ranked)
}

/// Reads every `metrics/*.json` under the given run directories.
pub fn import_reports(roots: &[PathBuf]) -> Result<Vec<MetricReport>, DataError> {
    let mut out = Vec::new();
    for root in roots {
        let dir = root.join("metrics");
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            out.push(read_json(&f)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Bag-level AUROC of Stage 1 on the scored cores, when both labels occur.
    pub stage1_auroc: Option<f64>,
    pub stage1_history: Option<TrainHistory>,
    pub stage2_history: Option<TrainHistory>,
    pub variant: Variant,
    pub scored_cores: Vec<String>,
    /// Ranked comparison table.
    pub reports: Vec<MetricReport>,
}

impl RunSummary {
    pub fn report(&self, method: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArtifactHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    config: RunConfig,
    seed: u64,
    dataset_sha256: String,
    artifacts: Vec<ArtifactHash>,
}

fn dataset_hash(ds: &FeatureDataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ds.manifest).unwrap_or_default());
    for c in &ds.cores {
        h.update(c.core_id.as_bytes());
        for p in &c.patches {
            for x in [p.level, p.grid_row, p.grid_col] {
                h.update((x as u64).to_le_bytes());
            }
            for v in &p.features {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(m) = &c.mask {
            h.update(m.values.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
        }
    }
    hex::encode(h.finalize())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DataError> {
    for e in fs::read_dir(dir).map_err(io(dir))? {
        let p = e.map_err(io(dir))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every artifact under the root (except the manifest itself) and
/// writes the run manifest.
pub fn write_run_manifest(layout: &RunLayout, ds: &FeatureDataset, cfg: &RunConfig) -> Result<(), DataError> {
    let mut files = Vec::new();
    collect_files(&layout.root, &mut files)?;
    files.retain(|p| p != &layout.manifest());
    files.sort();
    let mut artifacts = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(&f).map_err(io(&f))?;
        let rel = f.strip_prefix(&layout.root).unwrap_or(&f);
        artifacts.push(ArtifactHash {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        dataset_sha256: dataset_hash(ds),
        artifacts,
    };
    write_json(&layout.manifest(), &manifest)
}

fn save_mil(layout: &RunLayout, mil: &MilModel, h: &TrainHistory) -> Result<(), DataError> {
    ensure_parent(&layout.stage1_checkpoint())?;
    save_stage1(mil, &layout.stage1_checkpoint())?;
    write_json(&layout.history("stage1"), h)
}

fn save_ssl(layout: &RunLayout, stage2: &Stage2Model, h: &TrainHistory) -> Result<(), DataError> {
    ensure_parent(&layout.stage2_checkpoint())?;
    save_stage2(stage2, &layout.stage2_checkpoint())?;
    write_json(&layout.history("stage2"), h)
}

fn prepare(ds: &FeatureDataset, cfg: &RunConfig) -> Result<RunLayout, DataError> {
    cfg.validate()?;
    check_grid(ds, cfg)?;
    let layout = RunLayout::new(cfg.resolved_output_dir());
    fs::create_dir_all(&layout.root).map_err(io(&layout.root))?;
    Ok(layout)
}

/// Builds and writes every core's graph.
pub fn stage_build_graphs(ds: &FeatureDataset, cfg: &RunConfig) -> Result<Vec<HierarchicalGraph>, DataError> {
    let layout = prepare(ds, cfg)?;
    let graphs = build_graphs(ds, cfg)?;
    export_graphs(&layout, &graphs)?;
    Ok(graphs)
}

/// Trains Stage 1 and writes its checkpoint and history.
pub fn stage_train_mil(ds: &FeatureDataset, cfg: &RunConfig) -> Result<TrainHistory, DataError> {
    let layout = prepare(ds, cfg)?;
    let (mil, h) = train_mil(ds, cfg)?;
    save_mil(&layout, &mil, &h)?;
    Ok(h)
}

/// Trains Stage 2 on top of the saved Stage-1 checkpoint.
pub fn stage_train_ssl(ds: &FeatureDataset, cfg: &RunConfig) -> Result<TrainHistory, DataError> {
    let layout = prepare(ds, cfg)?;
    let mil = load_stage1(&layout.stage1_checkpoint())?;
    let (stage2, h) = train_ssl(ds, cfg, &mil)?;
    save_ssl(&layout, &stage2, &h)?;
    Ok(h)
}

/// Computes and exports maps for the scored cores from saved checkpoints.
pub fn stage_saliency(ds: &FeatureDataset, cfg: &RunConfig) -> Result<Vec<CoreSaliency>, DataError> {
    let layout = prepare(ds, cfg)?;
    let mil = load_stage1(&layout.stage1_checkpoint())?;
    let stage2 = load_stage2(&layout.stage2_checkpoint())?;
    let saliency = compute_saliency(ds, cfg, &mil, &stage2, &saliency_cores(ds))?;
    export_saliency(&layout, &saliency)?;
    Ok(saliency)
}

/// Scores previously exported maps and writes metrics, curves and the
/// ranked report.
pub fn stage_eval(ds: &FeatureDataset, cfg: &RunConfig) -> Result<Vec<MetricReport>, DataError> {
    let layout = prepare(ds, cfg)?;
    let saliency = import_saliency(&layout)?;
    let results = evaluate_saliency(ds, &saliency, cfg)?;
    export_metrics(&layout, &results)
}

fn load_or_train(ds: &FeatureDataset, cfg: &RunConfig, layout: &RunLayout) -> Result<Trained, DataError> {
    if cfg.skip_train {
        let mil = load_stage1(&layout.stage1_checkpoint())?;
        let stage2 = load_stage2(&layout.stage2_checkpoint())?;
        return Ok(Trained {
            mil,
            stage2,
            h1: None,
            h2: None,
        });
    }
    let (mil, h1) = train_mil(ds, cfg)?;
    save_mil(layout, &mil, &h1)?;
    let (stage2, h2) = train_ssl(ds, cfg, &mil)?;
    save_ssl(layout, &stage2, &h2)?;
    Ok(Trained {
        mil,
        stage2,
        h1: Some(h1),
        h2: Some(h2),
    })
}

struct Trained {
    mil: MilModel,
    stage2: Stage2Model,
    h1: Option<TrainHistory>,
    h2: Option<TrainHistory>,
}

fn stage1_auroc(ds: &FeatureDataset, mil: &MilModel, cores: &[usize]) -> Result<Option<f64>, DataError> {
    let bags = cores
        .iter()
        .map(|&i| ds.cores[i].level0_bag().map(|(b, _)| b))
        .collect::<Result<Vec<_>, _>>()?;
    let out = mil.predict_all(&bags).map_err(|e| DataError::stage("stage 1")(e.to_string()))?;
    let px = ScoredPixels::new(
        out.iter().map(|o| o.yhat).collect(),
        out.iter().map(|o| o.label == 1).collect(),
    );
    Ok(px.ok().and_then(|p| auroc(&p).ok()))
}

/// Train (or load) both stages, build every saliency map for the scored
/// cores, evaluate and write all artifacts under the output directory.
pub fn run_pipeline(ds: &FeatureDataset, cfg: &RunConfig) -> Result<RunSummary, DataError> {
    ds.validate()?;
    let layout = prepare(ds, cfg)?;
    let t = load_or_train(ds, cfg, &layout)?;

    let cores = saliency_cores(ds);
    let stage1_auroc = stage1_auroc(ds, &t.mil, &cores)?;
    let saliency = compute_saliency(ds, cfg, &t.mil, &t.stage2, &cores)?;
    export_saliency(&layout, &saliency)?;
    let results = evaluate_saliency(ds, &saliency, cfg)?;
    let ranked = export_metrics(&layout, &results)?;
    let scored_cores = results
        .first()
        .map(|(r, _)| r.per_core.iter().map(|c| c.core_id.clone()).collect())
        .unwrap_or_default();
    let summary = RunSummary {
        stage1_auroc,
        stage1_history: t.h1,
        stage2_history: t.h2,
        variant: cfg.variant,
        scored_cores,
        reports: ranked,
    };
    write_json(&layout.summary(), &summary)?;
    write_run_manifest(&layout, ds, cfg)?;
    Ok(summary)
}
