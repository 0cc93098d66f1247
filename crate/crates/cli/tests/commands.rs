use std::fs;
use std::path::Path;
use std::process::Command;

use mstr_cli::commands::{
    eval_cmd, generate, gradcheck_cmd, load_scenes, train_cmd, visualize_cmd, CHECKPOINT, GRADCHECK_CSV, MANIFEST,
    NAN_DUMP,
};
use mstr_cli::config::RunConfig;
use mstr_cli::overlay::{marker_position, pixel_of, render_level, CONTEXT_REF, HUMAN_REF, OBJECT_REF};
use mstr_core::evaluation::{evaluate, DetectionRecord};
use mstr_core::model::{DecoderVariant, Model, SamplingPath, Toggles};
use mstr_core::numerics::{ParamStore, OP_NAMES};
use mstr_core::synth::Preset;
use mstr_core::Error;

fn mstr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mstr")).args(args).output().expect("binary runs")
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.scenes = 8;
    c.train.core.steps = 0;
    c
}

fn count(summary: &mstr_cli::commands::GenerateSummary, category: &str, bin: &str) -> usize {
    summary
        .bins
        .iter()
        .find(|b| b.category == category && b.bin == bin)
        .map_or(0, |b| b.count)
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.scenes = 32;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate(&cfg, 7, &a, false).unwrap();
    generate(&cfg, 7, &b, false).unwrap();
    assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
    generate(&cfg, 8, &b, false).unwrap();
    assert_ne!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
}

#[test]
fn distant_preset_lands_in_top_distance_band() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.scenes = 12;
    cfg.data.scene.preset = Preset::Distant;
    let s = generate(&cfg, 3, dir.path(), false).unwrap();
    assert_eq!(count(&s, "distance", "remote"), 12);
}

#[test]
fn mixed_preset_splits_distance_bands_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.scenes = 30;
    let s = generate(&cfg, 5, dir.path(), true).unwrap();
    for bin in ["adjacent", "distant", "remote"] {
        assert_eq!(count(&s, "distance", bin), 10, "{bin}");
    }
    assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 30);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    let err = generate(&small_config(), 0, &file.join("sub"), false).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err}");
    let out = mstr(&["generate", "--out", file.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    generate(&cfg, 4, dir.path(), false).unwrap();
    let r = train_cmd(&cfg, 4, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
    assert_eq!(r.steps_run, 0);
    let init = Model::new(cfg.model.clone(), 4).unwrap();
    let mut bytes = Vec::new();
    init.store.write_to(&mut bytes).unwrap();
    assert_eq!(fs::read(dir.path().join(CHECKPOINT)).unwrap(), bytes);
}

#[test]
fn intermediate_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.scenes = 4;
    cfg.train.core.steps = 6;
    cfg.train.core.batch_size = 2;
    cfg.train.core.eval_every = 0;
    cfg.train.checkpoint_every = 2;
    generate(&cfg, 1, dir.path(), false).unwrap();
    train_cmd(&cfg, 1, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
    for step in [2, 4] {
        assert!(dir.path().join(format!("checkpoint-step-{step:06}.bin")).exists());
    }
    // The final step goes to checkpoint.bin only.
    assert!(!dir.path().join("checkpoint-step-000006.bin").exists());
    let loss = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 7);
}

#[test]
fn fixed_batch_loss_decreases_over_fifty_steps() {
    // Eight scenes with batch size eight: every step sees the same batch.
    let mut drops = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.train.core.steps = 50;
        cfg.train.core.eval_every = 0;
        cfg.train.checkpoint_every = 0;
        generate(&cfg, seed, dir.path(), false).unwrap();
        let r = train_cmd(&cfg, seed, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
        drops.push(r.log[0].total - r.log[49].total);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "{drops:?}");
}

#[test]
fn exploding_learning_rate_aborts_with_numeric_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let gen = mstr(&["generate", "--out", d, "--scenes", "4", "--seed", "2"]);
    assert!(gen.status.success());
    let out = mstr(&["train", "--out", d, "--seed", "2", "--steps", "20", "--lr", "1e300"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = fs::read_to_string(dir.path().join(NAN_DUMP)).unwrap();
    assert!(dump.contains("batch scene seeds"), "{dump}");
}

#[test]
fn ground_truth_detections_score_one_on_generated_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.scenes = 20;
    cfg.data.scene.pairs = 2;
    generate(&cfg, 9, dir.path(), false).unwrap();
    let scenes = load_scenes(&cfg, &dir.path().join(MANIFEST)).unwrap();
    let gts: Vec<_> = scenes.iter().map(|s| s.triplets.clone()).collect();
    let dets: Vec<DetectionRecord> = gts
        .iter()
        .enumerate()
        .flat_map(|(s, l)| {
            l.iter().enumerate().flat_map(move |(q, t)| {
                t.actions.iter().map(move |&a| DetectionRecord {
                    scene: s,
                    query: q,
                    triplet: mstr_core::matching::HoiTriplet {
                        actions: vec![a],
                        ..t.clone()
                    },
                    score: 1.0,
                })
            })
        })
        .collect();
    let report = evaluate(&dets, &gts, Some(&cfg.bin_config())).unwrap();
    assert_eq!(report.map, 1.0);
    assert!(report.bins.iter().filter(|b| b.num_gt > 0).all(|b| b.map == 1.0));
}

#[test]
fn untrained_model_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.data.scenes = 32;
    generate(&cfg, 11, dir.path(), false).unwrap();
    train_cmd(&cfg, 11, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
    let report = eval_cmd(&cfg, 11, dir.path(), &dir.path().join(MANIFEST), &dir.path().join(CHECKPOINT)).unwrap();
    assert!(report.map < 0.05, "{}", report.map);
    for f in ["detections.jsonl", "metrics.csv", "bins.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_dimension_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    generate(&cfg, 0, dir.path(), false).unwrap();
    train_cmd(&cfg, 0, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
    let mut other = cfg.clone();
    other.model.channels = 16;
    other.model.ffn_hidden = 32;
    let err = eval_cmd(&other, 0, dir.path(), &dir.path().join(MANIFEST), &dir.path().join(CHECKPOINT)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let cfg_path = dir.path().join("narrow.toml");
    fs::write(&cfg_path, "[model]\nchannels = 16\nffn_hidden = 32\n").unwrap();
    let out = mstr(&["eval", "--out", dir.path().to_str().unwrap(), "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn inconsistent_toggles_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstr(&["generate", "--out", dir.path().to_str().unwrap(), "--disable", "de"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("entity_context requires dual_entity"), "{err}");
}

#[test]
fn gradcheck_reports_every_op_once_and_catches_a_broken_backward() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.model.channels = 8;
    cfg.model.ffn_hidden = 8;
    cfg.model.queries = 2;
    let report = gradcheck_cmd(&cfg, 0, dir.path(), false).unwrap();
    assert!(report.all_passed(), "{:?}", report.failures());
    let csv = fs::read_to_string(dir.path().join(GRADCHECK_CSV)).unwrap();
    for op in OP_NAMES {
        let rows = csv.lines().filter(|l| l.starts_with(&format!("op,{op},"))).count();
        assert_eq!(rows, 1, "{op}");
    }
    assert_eq!(csv.lines().filter(|l| l.starts_with("op,")).count(), OP_NAMES.len());

    let with_control = gradcheck_cmd(&cfg, 0, dir.path(), true).unwrap();
    let failed: Vec<&str> = with_control.failures().iter().map(|r| r.name.as_str()).collect();
    assert_eq!(failed, ["corrupted_sigmoid"]);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, "[model]\nchannels = 8\nffn_hidden = 8\nqueries = 2\n").unwrap();
    let d = dir.path().to_str().unwrap();
    let c = cfg_path.to_str().unwrap();
    assert_eq!(mstr(&["gradcheck", "--out", d, "--config", c]).status.code(), Some(0));
    let out = mstr(&["gradcheck", "--out", d, "--config", c, "--control"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("corrupted_sigmoid"));
}

fn trained_run(dir: &Path, cfg: &RunConfig) {
    generate(cfg, 2, dir, false).unwrap();
    train_cmd(cfg, 2, dir, &dir.join(MANIFEST), |_| {}).unwrap();
}

#[test]
fn visualize_writes_one_overlay_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    trained_run(dir.path(), &cfg);
    let (m, c) = (dir.path().join(MANIFEST), dir.path().join(CHECKPOINT));
    let out = dir.path().join("vis");
    let s = visualize_cmd(&cfg, 2, &out, &m, &c, 5, 4).unwrap();
    let names: Vec<String> = s.files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    assert_eq!(names, ["scene-5-level-1.ppm", "scene-5-level-2.ppm", "scene-5-level-3.ppm"]);
    assert!(out.join("scene-5-attention.json").exists());
    let paths: Vec<SamplingPath> = s.record.paths.iter().map(|p| p.path).collect();
    assert_eq!(paths, [SamplingPath::Human, SamplingPath::Object, SamplingPath::Context]);

    // The context marker sits at the midpoint of the two entity markers.
    let size = cfg.model.image_size * 4;
    let r = &s.record;
    let h = marker_position(r.human_ref, size, size);
    let o = marker_position(r.object_ref, size, size);
    let ctx = marker_position(r.context_ref.unwrap(), size, size);
    assert!((ctx.0 - (h.0 + o.0) / 2.0).abs() <= 1e-9 && (ctx.1 - (h.1 + o.1) / 2.0).abs() <= 1e-9);
    let canvas = render_level(&mstr_core::synth::read_manifest(&m).unwrap()[5].regenerate().unwrap().image, 4, r, 1);
    for (p, color) in [(h, HUMAN_REF), (o, OBJECT_REF), (ctx, CONTEXT_REF)] {
        let (x, y) = pixel_of(p, size, size).unwrap();
        // Drawn last, unless a later reference covers it.
        let got = canvas.get(x, y);
        assert!(got == color || got == CONTEXT_REF || got == OBJECT_REF, "{got:?}");
    }

    // A single-scale model attends one level.
    let mut ss = cfg.clone();
    ss.model.toggles.multi_scale = false;
    let dir2 = tempfile::tempdir().unwrap();
    trained_run(dir2.path(), &ss);
    let s = visualize_cmd(&ss, 2, &dir2.path().join("vis"), &dir2.path().join(MANIFEST), &dir2.path().join(CHECKPOINT), 0, 2)
        .unwrap();
    assert_eq!(s.files.len(), 1);
}

#[test]
fn zero_offsets_put_samples_on_their_references() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    trained_run(dir.path(), &cfg);
    let ckpt = dir.path().join(CHECKPOINT);
    let mut store = ParamStore::load(&ckpt).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).name.contains(".offsets.") {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
    }
    let zeroed = dir.path().join("zero.bin");
    store.save(&zeroed).unwrap();
    let s = visualize_cmd(&cfg, 2, &dir.path().join("vis"), &dir.path().join(MANIFEST), &zeroed, 1, 4).unwrap();
    let size = cfg.model.image_size * 4;
    for path in &s.record.paths {
        let reference = marker_position(path.reference, size, size);
        for sample in &path.samples {
            let p = marker_position(mstr_core::features::NormalizedPoint { x: sample.x, y: sample.y }, size, size);
            assert!((p.0 - reference.0).abs() < 1e-9 && (p.1 - reference.1).abs() < 1e-9, "{path:?}");
        }
    }
}

#[test]
fn visualize_rejects_out_of_range_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    trained_run(dir.path(), &cfg);
    let err = visualize_cmd(
        &cfg,
        2,
        &dir.path().join("vis"),
        &dir.path().join(MANIFEST),
        &dir.path().join(CHECKPOINT),
        8,
        4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Argument(_)), "{err}");
}

#[test]
fn naive_and_dense_layouts_run_end_to_end() {
    for (variant, toggles) in [
        (
            DecoderVariant::NaiveDeformable,
            Toggles {
                dual_entity: false,
                entity_context: false,
                ..Toggles::default()
            },
        ),
        (
            DecoderVariant::NaiveDeformable,
            Toggles {
                multi_scale: false,
                deformable: false,
                dual_entity: false,
                entity_context: false,
            },
        ),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.model.variant = variant;
        cfg.model.toggles = toggles;
        cfg.train.core.steps = 2;
        cfg.train.core.batch_size = 2;
        trained_run(dir.path(), &cfg);
        eval_cmd(&cfg, 2, dir.path(), &dir.path().join(MANIFEST), &dir.path().join(CHECKPOINT)).unwrap();
        let s = visualize_cmd(&cfg, 2, &dir.path().join("vis"), &dir.path().join(MANIFEST), &dir.path().join(CHECKPOINT), 0, 2)
            .unwrap();
        assert!(!s.files.is_empty());
    }
}

#[test]
#[ignore = "trains ten models; about a quarter hour"]
fn full_model_reaches_target_no_later_than_naive_on_stress_scenes() {
    let steps_to_target = |cfg: &RunConfig, seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        generate(cfg, seed, dir.path(), false).unwrap();
        let r = train_cmd(cfg, seed, dir.path(), &dir.path().join(MANIFEST), |_| {}).unwrap();
        // Never reaching the target counts as one step past the budget.
        r.reached_target_at.unwrap_or(cfg.train.core.steps + 1)
    };
    let mut full = RunConfig::default();
    full.data.scene.preset = Preset::MultiscaleStress;
    full.train.checkpoint_every = 0;
    let mut naive = full.clone();
    naive.model.variant = DecoderVariant::NaiveDeformable;
    naive.model.toggles.dual_entity = false;
    naive.model.toggles.entity_context = false;
    let (mut f, mut n): (Vec<usize>, Vec<usize>) = (0..5).map(|s| (steps_to_target(&full, s), steps_to_target(&naive, s))).unzip();
    println!("steps to target: full {f:?}, naive {n:?}");
    f.sort_unstable();
    n.sort_unstable();
    assert!(f[2] <= n[2], "median {} vs {}", f[2], n[2]);
}
