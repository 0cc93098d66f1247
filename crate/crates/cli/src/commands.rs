//! The five commands as library functions. Each writes its artifacts under
//! an output directory and returns a summary for printing or testing.

use std::fs;
use std::path::{Path, PathBuf};

use mstr_core::evaluation::{bin_csv, class_csv, detections, write_detections, ApReport};
use mstr_core::gradsuite::{configured_model_case, corrupted_backward_case, full_suite, report_csv, GradResult};
use mstr_core::model::{AttentionRecord, Model};
use mstr_core::numerics::{Graph, ParamStore};
use mstr_core::synth::{assign_bins, generate_dataset, gray_to_rgb, read_manifest, records, write_manifest, write_ppm, Scene};
use mstr_core::train::{curve_csv, evaluate_model, loss_csv, train, TrainReport};
use mstr_core::{Error, Result};

use crate::config::RunConfig;
use crate::overlay::render_level;

pub const MANIFEST: &str = "manifest.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const CURVE_CSV: &str = "convergence.csv";
pub const DETECTIONS: &str = "detections.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BINS_CSV: &str = "bins.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const NAN_DUMP: &str = "nan-dump.txt";

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    Ok(())
}

/// Scenes of a manifest, regenerated from their seeds and checked against
/// the model's input size and label spaces.
pub fn load_scenes(cfg: &RunConfig, manifest: &Path) -> Result<Vec<Scene>> {
    let recs = read_manifest(manifest)?;
    if recs.is_empty() {
        return Err(Error::Argument(format!("{} holds no scenes", manifest.display())));
    }
    recs.iter()
        .map(|r| {
            cfg.check_scene_config(&r.config)?;
            r.regenerate()
        })
        .collect()
}

/// A model from `cfg` with weights from `checkpoint`.
pub fn load_model(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let stored = ParamStore::load(checkpoint)?;
    model.store.load_values_from(&stored)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinCount {
    pub category: String,
    pub bin: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub scenes: usize,
    pub triplets: usize,
    pub bins: Vec<BinCount>,
}

impl GenerateSummary {
    pub fn table(&self) -> String {
        let mut s = format!("{} scenes, {} triplets\ncategory,bin,count\n", self.scenes, self.triplets);
        for b in &self.bins {
            s.push_str(&format!("{},{},{}\n", b.category, b.bin, b.count));
        }
        s
    }
}

/// Writes `manifest.jsonl` and, with `images`, one PPM per scene under
/// `images/`.
pub fn generate(cfg: &RunConfig, seed: u64, out: &Path, images: bool) -> Result<GenerateSummary> {
    prepare(cfg, out)?;
    let scenes = generate_dataset(cfg.data.scenes, seed, &cfg.data.scene)?;
    write_manifest(&out.join(MANIFEST), &records(&scenes, &cfg.data.scene))?;
    if images {
        let dir = out.join("images");
        fs::create_dir_all(&dir)?;
        let size = cfg.data.scene.image_size;
        for (i, s) in scenes.iter().enumerate() {
            write_ppm(&dir.join(format!("scene-{i}.ppm")), size, size, &gray_to_rgb(&s.image))?;
        }
    }
    let gts: Vec<_> = scenes.iter().flat_map(|s| s.triplets.iter().cloned()).collect();
    let labels = assign_bins(&gts, &cfg.bin_config())?;
    let mut bins: Vec<BinCount> = Vec::new();
    for l in &labels {
        for (category, bin) in l.names() {
            match bins.iter_mut().find(|b| b.category == category && b.bin == bin) {
                Some(b) => b.count += 1,
                None => bins.push(BinCount {
                    category: category.into(),
                    bin: bin.into(),
                    count: 1,
                }),
            }
        }
    }
    bins.sort_by(|a, b| (&a.category, &a.bin).cmp(&(&b.category, &b.bin)));
    Ok(GenerateSummary {
        scenes: scenes.len(),
        triplets: gts.len(),
        bins,
    })
}

/// Trains on the scenes of `manifest`. Writes the final checkpoint,
/// intermediate checkpoints, the per-step loss log and the convergence
/// curve. A non-finite loss aborts with the offending batch described in
/// `nan-dump.txt`.
pub fn train_cmd(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    manifest: &Path,
    mut progress: impl FnMut(&mstr_core::train::StepLog),
) -> Result<TrainReport> {
    prepare(cfg, out)?;
    let scenes = load_scenes(cfg, manifest)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    let mut tcfg = cfg.train.core.clone();
    tcfg.seed = seed;
    let every = cfg.train.checkpoint_every;
    let mut save_error = None;
    let result = train(&mut model, &scenes, &tcfg, |log, m| {
        progress(log);
        if every > 0 && log.step % every == 0 && log.step < tcfg.steps {
            let path = out.join(format!("checkpoint-step-{:06}.bin", log.step));
            if let Err(e) = m.store.save(&path) {
                save_error = Some(e);
                return false;
            }
        }
        true
    });
    if let Some(e) = save_error {
        return Err(e);
    }
    let report = match result {
        Ok(r) => r,
        Err(Error::Numeric(msg)) => {
            fs::write(out.join(NAN_DUMP), format!("{msg}\n"))?;
            return Err(Error::Numeric(msg));
        }
        Err(e) => return Err(e),
    };
    model.store.save(&out.join(CHECKPOINT))?;
    fs::write(out.join(LOSS_CSV), loss_csv(&report.log))?;
    fs::write(out.join(CURVE_CSV), curve_csv(&report.curve))?;
    Ok(report)
}

/// Detections and AP tables of a checkpoint on the scenes of `manifest`.
pub fn eval_cmd(cfg: &RunConfig, seed: u64, out: &Path, manifest: &Path, checkpoint: &Path) -> Result<ApReport> {
    prepare(cfg, out)?;
    let scenes = load_scenes(cfg, manifest)?;
    let model = load_model(cfg, seed, checkpoint)?;
    let (dets, report) = evaluate_model(&model, &scenes, Some(&cfg.bin_config()))?;
    write_detections(&out.join(DETECTIONS), &dets)?;
    fs::write(out.join(METRICS_CSV), class_csv(&report))?;
    fs::write(out.join(BINS_CSV), bin_csv(&report))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<GradResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&GradResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }
}

/// Every operation and module check, plus the training loss of the
/// configured model on one generated scene. `control` adds a case with a
/// deliberately wrong backward pass, which must fail.
pub fn gradcheck_cmd(cfg: &RunConfig, seed: u64, out: &Path, control: bool) -> Result<GradcheckReport> {
    prepare(cfg, out)?;
    let mut cases = full_suite(seed);
    let scene = generate_dataset(1, seed, &cfg.data.scene)?.remove(0);
    cases.push(configured_model_case(cfg.model.clone(), scene, seed, 2));
    if control {
        cases.push(corrupted_backward_case());
    }
    let results = cases.iter().map(|c| c.run()).collect::<Result<Vec<_>>>()?;
    fs::write(out.join(GRADCHECK_CSV), report_csv(&results))?;
    Ok(GradcheckReport { results })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeSummary {
    pub query: usize,
    pub score: f64,
    pub record: AttentionRecord,
    pub files: Vec<PathBuf>,
}

/// Per-level overlays `scene-{id}-level-{l}.ppm` for the top-scoring query
/// of one scene, and its sampling record as `scene-{id}-attention.json`.
pub fn visualize_cmd(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    manifest: &Path,
    checkpoint: &Path,
    scene: usize,
    scale: usize,
) -> Result<VisualizeSummary> {
    prepare(cfg, out)?;
    if scale == 0 {
        return Err(Error::Argument("scale must be positive".into()));
    }
    let recs = read_manifest(manifest)?;
    let rec = recs.get(scene).ok_or_else(|| {
        Error::Argument(format!("scene {scene} out of range; manifest holds {} scenes", recs.len()))
    })?;
    cfg.check_scene_config(&rec.config)?;
    let image = rec.regenerate()?.image;
    let model = load_model(cfg, seed, checkpoint)?;

    let mut g = Graph::with_params(&model.store);
    let fwd = model.forward(&mut g, &image)?;
    let preds = mstr_core::model::read_predictions(&g, &fwd.last(), fwd.refs_h, fwd.refs_o);
    let best = detections(scene, &preds)
        .into_iter()
        .fold(None::<(usize, f64)>, |best, d| match best {
            Some((_, s)) if s >= d.score => best,
            _ => Some((d.query, d.score)),
        })
        .expect("model has at least one query");
    let record = model.attention_record(&g, &fwd, best.0)?;

    let mut files = Vec::new();
    for level in 1..=fwd.level_dims.len() {
        let path = out.join(format!("scene-{scene}-level-{level}.ppm"));
        render_level(&image, scale, &record, level).save(&path)?;
        files.push(path);
    }
    fs::write(
        out.join(format!("scene-{scene}-attention.json")),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(VisualizeSummary {
        query: best.0,
        score: best.1,
        record,
        files,
    })
}
