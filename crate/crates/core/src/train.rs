//! Minibatch training with AdamW and set-matching losses, and dataset-level
//! evaluation of a model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{detections, evaluate, ApReport, DetectionRecord};
use crate::matching::{set_loss, LossTerms, LossWeights};
use crate::model::Model;
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Graph};
use crate::synth::{BinConfig, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Train-set mAP is measured every this many steps (0 disables).
    pub eval_every: usize,
    /// Stop once a measured train-set mAP reaches this value.
    pub target_map: Option<f64>,
    /// Seed of the batch order.
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            steps: 2000,
            batch_size: 8,
            clip_norm: 0.1,
            eval_every: 100,
            target_map: Some(0.95),
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Loss components of one step: summed over decoder layers, averaged over
/// the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loc: f64,
    pub cls: f64,
    pub act: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Total loss of the most recent step (NaN before the first).
    pub loss: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub log: Vec<StepLog>,
    pub curve: Vec<CurvePoint>,
    /// First measured step whose train-set mAP met the target.
    pub reached_target_at: Option<usize>,
}

/// Total loss of one scene and its parameter gradients added into `acc`.
fn accumulate_scene(
    model: &Model,
    scene: &Scene,
    w: &LossWeights,
    acc: &mut [Vec<f64>],
    scale: f64,
) -> Result<LossTerms<f64>> {
    let mut g = Graph::with_params(&model.store);
    let out = model.forward(&mut g, &scene.image)?;
    for (i, l) in out.layers.iter().enumerate() {
        for v in [l.hbox, l.obox, l.cls_logits, l.act_logits] {
            if g.data(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite decoder layer {i} output on scene seed {}",
                    scene.seed
                )));
            }
        }
    }
    let (loss, parts) = set_loss(&mut g, &out, &scene.triplets, w)?;
    let value = g.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on scene seed {} (per-layer terms {parts:?})",
            scene.seed
        )));
    }
    g.backward(loss)?.accumulate_into(acc, scale);
    Ok(parts.iter().fold(
        LossTerms {
            loc: 0.0,
            cls: 0.0,
            act: 0.0,
            total: 0.0,
        },
        |a, p| LossTerms {
            loc: a.loc + p.loc,
            cls: a.cls + p.cls,
            act: a.act + p.act,
            total: a.total + p.total,
        },
    ))
}

/// Trains `model` in place. `on_step` sees every step's log and the updated
/// model, and may stop training early by returning `false`.
pub fn train(
    model: &mut Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Model) -> bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Argument("no training scenes".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport {
        steps_run: 0,
        log: Vec::with_capacity(cfg.steps),
        curve: Vec::new(),
        reached_target_at: None,
    };
    let mut last_loss = f64::NAN;
    let measure = |model: &Model, step: usize, loss: f64, report: &mut TrainReport| -> Result<bool> {
        let map = evaluate_model(model, scenes, None)?.1.map;
        report.curve.push(CurvePoint { step, loss, map });
        let hit = cfg.target_map.is_some_and(|t| map >= t);
        if hit && report.reached_target_at.is_none() {
            report.reached_target_at = Some(step);
        }
        Ok(hit)
    };
    if cfg.eval_every > 0 && measure(model, 0, last_loss, &mut report)? {
        return Ok(report);
    }
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let mut grads = model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut sum = StepLog {
            step,
            loc: 0.0,
            cls: 0.0,
            act: 0.0,
            total: 0.0,
        };
        for &i in &batch {
            let t = accumulate_scene(model, &scenes[i], &cfg.loss, &mut grads, scale).map_err(|e| match e {
                Error::Numeric(msg) => {
                    let seeds: Vec<u64> = batch.iter().map(|&j| scenes[j].seed).collect();
                    Error::Numeric(format!("step {step}: {msg}; batch scene seeds {seeds:?}"))
                }
                other => other,
            })?;
            sum.loc += t.loc * scale;
            sum.cls += t.cls * scale;
            sum.act += t.act * scale;
            sum.total += t.total * scale;
        }
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        opt.step(&mut model.store, &grads);
        report.steps_run = step;
        report.log.push(sum);
        last_loss = sum.total;
        let keep_going = on_step(&sum, model);
        let due = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        if due && measure(model, step, last_loss, &mut report)? {
            break;
        }
        if !keep_going {
            break;
        }
    }
    Ok(report)
}

/// Final-layer detections on every scene and their scores.
pub fn evaluate_model(
    model: &Model,
    scenes: &[Scene],
    bins: Option<&BinConfig>,
) -> Result<(Vec<DetectionRecord>, ApReport)> {
    let mut dets = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        dets.extend(detections(i, &model.predict(&s.image)?));
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.triplets.clone()).collect();
    let report = evaluate(&dets, &gts, bins)?;
    Ok((dets, report))
}

/// `step,loc,cls,act,total`.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loc,cls,act,total\n");
    for l in log {
        s.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", l.step, l.loc, l.cls, l.act, l.total));
    }
    s
}

/// `step,loss,map`.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,map\n");
    for c in curve {
        s.push_str(&format!("{},{:.6},{:.6}\n", c.step, c.loss, c.map));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderVariant, ModelConfig, Toggles};
    use crate::synth::{generate_dataset, SceneConfig};

    fn tiny() -> (Model, Vec<Scene>) {
        let mcfg = ModelConfig {
            image_size: 32,
            channels: 8,
            levels: 2,
            queries: 3,
            ffn_hidden: 16,
            variant: DecoderVariant::MergeOutput,
            toggles: Toggles::default(),
            ..ModelConfig::default()
        };
        let scfg = SceneConfig {
            image_size: 32,
            ..SceneConfig::default()
        };
        (Model::new(mcfg, 1).unwrap(), generate_dataset(4, 2, &scfg).unwrap())
    }

    #[test]
    fn zero_steps_leave_parameters_untouched() {
        let (mut model, scenes) = tiny();
        let before = model.store.clone();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &scenes, &cfg, |_, _| true).unwrap();
        assert_eq!(r.steps_run, 0);
        for (id, p) in before.iter() {
            assert_eq!(model.store.get(id).tensor, p.tensor);
        }
    }

    #[test]
    fn fixed_batch_loss_decreases() {
        let (mut model, scenes) = tiny();
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 4,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &scenes, &cfg, |_, _| true).unwrap();
        let head: f64 = r.log[..5].iter().map(|l| l.total).sum();
        let tail: f64 = r.log[35..].iter().map(|l| l.total).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let (mut a, scenes) = tiny();
        let (mut b, _) = tiny();
        let ra = train(&mut a, &scenes, &cfg, |_, _| true).unwrap();
        let rb = train(&mut b, &scenes, &cfg, |_, _| true).unwrap();
        assert_eq!(loss_csv(&ra.log), loss_csv(&rb.log));
        assert_eq!(curve_csv(&ra.curve), curve_csv(&rb.curve));
        assert_eq!(ra.curve.len(), 2);
    }

    #[test]
    fn callback_can_stop_training() {
        let (mut model, scenes) = tiny();
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 1,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &scenes, &cfg, |l, _| l.step < 3).unwrap();
        assert_eq!(r.steps_run, 3);
    }
}
