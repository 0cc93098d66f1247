//! Finite-difference checks of every tape operation and of the composite
//! modules built from them, packaged as named cases so the command line and
//! the tests run the same suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, ContextAttn, DualEntityAttn, MsDeformAttn, MultiHeadAttention};
use crate::error::Result;
use crate::matching::{compute_losses, set_loss, Assignment, HoiTriplet, LossWeights};
use crate::model::{DecoderVariant, LayerOutputs, Model, ModelConfig, Toggles};
use crate::numerics::{check_graph_fn, check_inputs, check_params, Graph, LevelDims, ParamStore, Tensor, Var, INV_SIGMOID_EPS};

/// Largest accepted relative error between reverse-mode and central
/// finite-difference gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Module,
}

impl CaseKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Op => "op",
            CaseKind::Module => "module",
        }
    }
}

pub struct GradCase {
    pub name: String,
    pub kind: CaseKind,
    check: Box<dyn Fn() -> Result<f64>>,
}

impl GradCase {
    /// `check` returns the largest relative error it observed.
    pub fn new(name: impl Into<String>, kind: CaseKind, check: impl Fn() -> Result<f64> + 'static) -> Self {
        Self {
            name: name.into(),
            kind,
            check: Box::new(check),
        }
    }

    pub fn run(&self) -> Result<GradResult> {
        let max_rel_error = (self.check)()?;
        Ok(GradResult {
            name: self.name.clone(),
            kind: self.kind,
            max_rel_error,
            passed: max_rel_error <= GRAD_TOLERANCE,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub name: String,
    pub kind: CaseKind,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    // NaN must not hide behind max.
    errs.into_iter().fold(0.0f64, |m, e| if e.is_nan() || m.is_nan() { f64::NAN } else { m.max(e) })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn op_case(
    name: &str,
    seed: u64,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Clone + 'static,
) -> GradCase {
    GradCase::new(name, CaseKind::Op, move || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut errs = Vec::new();
        for trial in 0..3 {
            let xs = inputs(&mut rng);
            errs.extend(check_graph_fn(&xs, seed + trial, build.clone())?);
        }
        Ok(worst(errs))
    })
}

/// One case per tape operation, named as in [`crate::numerics::OP_NAMES`].
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let s = seed;
    let pair = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
    let one = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -1.0, 1.0)];
    let positive = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], 0.2, 2.0)];
    // Keeps elementwise kinks (relu, abs) more than a step away.
    let off_zero = |r: &mut ChaCha8Rng| {
        let t = uniform(r, &[3, 4], 0.05, 1.0);
        let signs = uniform(r, &[3, 4], -1.0, 1.0);
        vec![Tensor::from_parts(vec![3, 4], t.data().iter().zip(signs.data()).map(|(v, s)| v * s.signum()).collect())]
    };
    let level_dims = LevelDims { height: 4, width: 5 };
    vec![
        op_case("add", s, pair, |g, v| g.add(v[0], v[1])),
        op_case("sub", s + 1, pair, |g, v| g.sub(v[0], v[1])),
        op_case("mul", s + 2, pair, |g, v| g.mul(v[0], v[1])),
        op_case(
            "div",
            s + 3,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)],
            |g, v| g.div(v[0], v[1]),
        ),
        op_case(
            "add_broadcast",
            s + 4,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, v| g.add_broadcast(v[0], v[1]),
        ),
        op_case("scale", s + 5, one, |g, v| Ok(g.scale(v[0], -1.7))),
        op_case("offset", s + 6, one, |g, v| Ok(g.offset(v[0], 0.3))),
        op_case(
            "matmul",
            s + 7,
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        op_case(
            "linear",
            s + 8,
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[5, 4], -1.0, 1.0),
                    uniform(r, &[5], -1.0, 1.0),
                ]
            },
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        op_case(
            "head_linear",
            s + 9,
            |r| vec![uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)],
            |g, v| g.head_linear(v[0], v[1], 2),
        ),
        op_case("relu", s + 10, off_zero, |g, v| Ok(g.relu(v[0]))),
        op_case("sigmoid", s + 11, one, |g, v| Ok(g.sigmoid(v[0]))),
        op_case(
            "inverse_sigmoid",
            s + 12,
            |r| vec![uniform(r, &[3, 4], 0.1, 0.9)],
            |g, v| Ok(g.inverse_sigmoid(v[0], INV_SIGMOID_EPS)),
        ),
        op_case(
            "shifted_sigmoid",
            s + 13,
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], 0.1, 0.9)],
            |g, v| g.shifted_sigmoid(v[0], v[1], INV_SIGMOID_EPS),
        ),
        op_case("exp", s + 14, one, |g, v| Ok(g.exp(v[0]))),
        op_case("ln", s + 15, positive, |g, v| Ok(g.ln(v[0]))),
        op_case("abs", s + 16, off_zero, |g, v| Ok(g.abs(v[0]))),
        op_case("sqrt", s + 17, positive, |g, v| Ok(g.sqrt(v[0]))),
        op_case("minimum", s + 18, pair, |g, v| g.minimum(v[0], v[1])),
        op_case("maximum", s + 19, pair, |g, v| g.maximum(v[0], v[1])),
        op_case("softmax", s + 20, one, |g, v| {
            let a = g.softmax(v[0], 0)?;
            let b = g.softmax(v[0], 1)?;
            g.add(a, b)
        }),
        op_case(
            "layer_norm",
            s + 21,
            |r| {
                vec![
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[4], 0.5, 1.5),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        op_case("sum", s + 22, one, |g, v| Ok(g.sum(v[0]))),
        op_case("reshape", s + 23, one, |g, v| g.reshape(v[0], &[2, 6])),
        op_case("transpose", s + 24, one, |g, v| g.transpose(v[0])),
        op_case("slice_cols", s + 25, one, |g, v| g.slice_cols(v[0], 1, 2)),
        op_case("concat_cols", s + 26, pair, |g, v| g.concat_cols(&[v[0], v[1]])),
        op_case("concat_rows", s + 27, pair, |g, v| g.concat_rows(&[v[0], v[1]])),
        op_case("gather", s + 28, one, |g, v| g.gather(v[0], vec![0, 5, 5, 11, 3, 2], &[2, 3])),
        op_case(
            "bilinear_sample",
            s + 29,
            move |r| {
                // Coordinates on a (k + 0.1 .. k + 0.9) grid stay clear of the
                // integer kinks; a few fall outside the map.
                let coords: Vec<f64> = (0..12)
                    .map(|_| r.gen_range(-1i32..5) as f64 + r.gen_range(0.1..0.9))
                    .collect();
                vec![
                    uniform(r, &[level_dims.height * level_dims.width, 3], -1.0, 1.0),
                    Tensor::from_parts(vec![6, 2], coords),
                ]
            },
            move |g, v| g.bilinear_sample(v[0], level_dims, v[1]),
        ),
        deform_sample_case(s + 30),
        op_case(
            "bce_with_logits",
            s + 31,
            |r| vec![uniform(r, &[3, 4], -3.0, 3.0)],
            |g, v| {
                let t: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
                let w: Vec<f64> = (0..12).map(|i| 0.1 + 0.1 * i as f64).collect();
                g.bce_with_logits(v[0], t, w)
            },
        ),
    ]
}

fn deform_sample_case(seed: u64) -> GradCase {
    GradCase::new("deform_sample", CaseKind::Op, move || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [LevelDims { height: 4, width: 5 }, LevelDims { height: 2, width: 3 }];
        let (q, heads, points, c) = (3, 2, 2, 3);
        let per = heads * dims.len() * points;
        let mut errs = Vec::new();
        for trial in 0..3 {
            let l1 = uniform(&mut rng, &[20, c], -1.0, 1.0);
            let l2 = uniform(&mut rng, &[6, c], -1.0, 1.0);
            let refs = uniform(&mut rng, &[q, 2], 0.1, 0.9);
            let offsets = uniform(&mut rng, &[q, per * 2], -1.5, 1.5);
            let weights = uniform(&mut rng, &[q, per], 0.0, 1.0);
            errs.extend(check_graph_fn(&[l1, l2, refs, offsets, weights], seed + trial, |g, v| {
                g.deform_sample(&[v[0], v[1]], &dims, v[2], v[3], v[4], heads, points)
            })?);
        }
        Ok(worst(errs))
    })
}

/// Moves every parameter slightly: the initial offsets put samples exactly
/// on pixel centers, where bilinear sampling is not differentiable.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn module_case(name: &str, check: impl Fn() -> Result<f64> + 'static) -> GradCase {
    GradCase::new(name, CaseKind::Module, check)
}

/// Composite checks: attention modules, prediction heads, losses and the full
/// model, each against parameters and inputs.
pub fn module_cases(seed: u64) -> Vec<GradCase> {
    let acfg = AttentionConfig {
        heads: 2,
        points: 2,
        levels: 2,
        channels: 4,
    };
    let dims = [LevelDims { height: 4, width: 5 }, LevelDims { height: 2, width: 3 }];
    let attn_inputs = move |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[20, 4], -1.0, 1.0),
            uniform(rng, &[6, 4], -1.0, 1.0),
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[3, 2], 0.15, 0.85),
            uniform(rng, &[3, 2], 0.15, 0.85),
        ]
    };
    vec![
        module_case("dense_attention", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", 4, 2)?;
            let q = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let kv = uniform(&mut rng, &[5, 4], -1.0, 1.0);
            let mut errs = check_inputs(&store, &[q.clone(), kv.clone()], seed, |g, v| {
                Ok(mha.forward(g, v[0], v[1], v[1])?.out)
            })?;
            let report = check_params(&store, seed + 1, None, |g| {
                let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
                Ok(mha.forward(g, qv, kvv, kvv)?.out)
            })?;
            errs.extend(report.into_iter().map(|r| r.1));
            Ok(worst(errs))
        }),
        module_case("multi_scale_deformable_attention", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut store = ParamStore::new();
            let a = MsDeformAttn::new(&mut store, &mut rng, "a", acfg)?;
            jitter(&mut store, &mut rng, 0.3);
            let xs = attn_inputs(&mut rng);
            let mut errs = check_inputs(&store, &xs[..4], seed, |g, v| {
                Ok(a.forward(g, v[2], v[3], &[v[0], v[1]], &dims)?.out)
            })?;
            let report = check_params(&store, seed + 1, None, |g| {
                let v: Vec<Var> = xs[..4].iter().map(|t| g.constant(t.clone())).collect();
                Ok(a.forward(g, v[2], v[3], &[v[0], v[1]], &dims)?.out)
            })?;
            errs.extend(report.into_iter().map(|r| r.1));
            Ok(worst(errs))
        }),
        module_case("dual_entity_attention", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let mut store = ParamStore::new();
            let de = DualEntityAttn::new(&mut store, &mut rng, "de", acfg)?;
            jitter(&mut store, &mut rng, 0.3);
            let xs = attn_inputs(&mut rng);
            let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let out = de.forward(g, v[2], v[3], v[4], &[v[0], v[1]], &dims)?;
                g.concat_cols(&[out.human.out, out.object.out])
            };
            let mut errs = check_inputs(&store, &xs, seed, build)?;
            let report = check_params(&store, seed + 1, None, |g| {
                let v: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                build(g, &v)
            })?;
            errs.extend(report.into_iter().map(|r| r.1));
            Ok(worst(errs))
        }),
        module_case("entity_context_attention", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
            let mut store = ParamStore::new();
            let ctx = ContextAttn::new(&mut store, &mut rng, "ctx", acfg)?;
            jitter(&mut store, &mut rng, 0.3);
            let xs = attn_inputs(&mut rng);
            let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                Ok(ctx.forward(g, v[2], v[3], v[4], &[v[0], v[1]], &dims)?.attn.out)
            };
            let mut errs = check_inputs(&store, &xs, seed, build)?;
            let report = check_params(&store, seed + 1, None, |g| {
                let v: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                build(g, &v)
            })?;
            errs.extend(report.into_iter().map(|r| r.1));
            Ok(worst(errs))
        }),
        module_case("prediction_heads", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
            let mut model = Model::new(small_config(DecoderVariant::MergeOutput), seed)?;
            jitter(&mut model.store, &mut rng, 0.1);
            let c = model.config.channels;
            let xs = vec![
                uniform(&mut rng, &[3, c], -1.0, 1.0),
                uniform(&mut rng, &[3, c], -1.0, 1.0),
                uniform(&mut rng, &[3, c], -1.0, 1.0),
                uniform(&mut rng, &[3, 2], 0.1, 0.9),
                uniform(&mut rng, &[3, 2], 0.1, 0.9),
            ];
            let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let out = model.predict_heads(g, &v[..3], v[3], v[4])?;
                flatten_outputs(g, &out)
            };
            let mut errs = check_inputs(&model.store, &xs, seed, build)?;
            let report = check_params(&model.store, seed + 1, None, |g| {
                let v: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                build(g, &v)
            })?;
            errs.extend(report.into_iter().map(|r| r.1));
            Ok(worst(errs))
        }),
        module_case("set_losses", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
            let gts = vec![
                HoiTriplet {
                    human: [0.3, 0.4, 0.2, 0.3],
                    object: [0.6, 0.5, 0.25, 0.2],
                    class: 1,
                    actions: vec![0],
                },
                HoiTriplet {
                    human: [0.7, 0.3, 0.15, 0.35],
                    object: [0.2, 0.7, 0.2, 0.2],
                    class: 0,
                    actions: vec![1, 2],
                },
            ];
            let boxes = |rng: &mut ChaCha8Rng| {
                let mut t = uniform(rng, &[3, 4], 0.2, 0.8);
                for row in t.data_mut().chunks_mut(4) {
                    row[2] *= 0.4;
                    row[3] *= 0.4;
                }
                t
            };
            let xs = vec![
                boxes(&mut rng),
                boxes(&mut rng),
                uniform(&mut rng, &[3, 2], -2.0, 2.0),
                uniform(&mut rng, &[3, 3], -2.0, 2.0),
            ];
            let assignment = Assignment {
                perm: vec![2, 0, 1],
                cost: 0.0,
            };
            let w = LossWeights::default();
            let errs = check_graph_fn(&xs, seed, |g, v| {
                let out = LayerOutputs {
                    hbox: v[0],
                    obox: v[1],
                    cls_logits: v[2],
                    act_logits: v[3],
                };
                Ok(compute_losses(g, &out, &gts, &assignment, &w)?.total)
            })?;
            Ok(worst(errs))
        }),
        module_case("full_model", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
            let mut errs = Vec::new();
            let mut configs: Vec<ModelConfig> = DecoderVariant::ALL.into_iter().map(small_config).collect();
            let mut dense = small_config(DecoderVariant::NaiveDeformable);
            dense.toggles = Toggles {
                multi_scale: false,
                deformable: false,
                dual_entity: false,
                entity_context: false,
            };
            configs.push(dense);
            for cfg in configs {
                let mut model = Model::new(cfg, seed)?;
                jitter(&mut model.store, &mut rng, 0.05);
                let image = uniform(&mut rng, &[1, 16, 16], 0.0, 1.0);
                let report = check_params(&model.store, seed, Some(3), |g| {
                    let out = model.forward(g, &image)?;
                    flatten_outputs(g, &out.last())
                })?;
                // Every parameter must receive a gradient.
                if report.len() != model.store.len() {
                    return Ok(f64::INFINITY);
                }
                errs.extend(report.into_iter().map(|r| r.1));
            }
            Ok(worst(errs))
        }),
        module_case("full_model_training_loss", move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let mut model = Model::new(small_config(DecoderVariant::MergeOutput), seed)?;
            jitter(&mut model.store, &mut rng, 0.05);
            let image = uniform(&mut rng, &[1, 16, 16], 0.0, 1.0);
            let gts = vec![HoiTriplet {
                human: [0.3, 0.4, 0.2, 0.3],
                object: [0.6, 0.5, 0.25, 0.2],
                class: 1,
                actions: vec![1],
            }];
            let report = check_params(&model.store, seed, Some(3), |g| {
                let out = model.forward(g, &image)?;
                Ok(set_loss(g, &out, &gts, &LossWeights::default())?.0)
            })?;
            Ok(worst(report.into_iter().map(|r| r.1)))
        }),
    ]
}

/// Training loss of a model built from `cfg` on one generated scene, probing
/// `entries` evenly spaced values of every parameter.
pub fn configured_model_case(cfg: ModelConfig, scene: crate::synth::Scene, seed: u64, entries: usize) -> GradCase {
    module_case("configured_model_training_loss", move || {
        let mut model = Model::new(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        jitter(&mut model.store, &mut rng, 0.01);
        let report = check_params(&model.store, seed, Some(entries), |g| {
            let out = model.forward(g, &scene.image)?;
            Ok(set_loss(g, &out, &scene.triplets, &LossWeights::default())?.0)
        })?;
        if report.len() != model.store.len() {
            return Ok(f64::INFINITY);
        }
        Ok(worst(report.into_iter().map(|r| r.1)))
    })
}

fn small_config(variant: DecoderVariant) -> ModelConfig {
    let toggles = match variant {
        DecoderVariant::MergeOutput | DecoderVariant::MergeInput => Toggles::default(),
        DecoderVariant::NaiveDeformable => Toggles {
            dual_entity: false,
            entity_context: false,
            ..Toggles::default()
        },
        DecoderVariant::DoubleStream | DecoderVariant::StandardContext => Toggles {
            entity_context: false,
            ..Toggles::default()
        },
    };
    ModelConfig {
        image_size: 16,
        channels: 4,
        levels: 2,
        decoder_layers: 1,
        queries: 2,
        heads: 2,
        points: 1,
        ffn_hidden: 4,
        num_classes: 2,
        num_actions: 3,
        variant,
        toggles,
        ..ModelConfig::default()
    }
}

fn flatten_outputs(g: &mut Graph, out: &LayerOutputs) -> Result<Var> {
    let parts = [out.hbox, out.obox, out.cls_logits, out.act_logits];
    let flat: Vec<Var> = parts
        .iter()
        .map(|&v| {
            let n = g.value(v).len();
            g.reshape(v, &[1, n])
        })
        .collect::<Result<_>>()?;
    g.concat_cols(&flat)
}

/// Every operation case followed by every module case.
pub fn full_suite(seed: u64) -> Vec<GradCase> {
    let mut cases = op_cases(seed);
    cases.extend(module_cases(seed + 1000));
    cases
}

/// A sigmoid whose denominator is recorded as a constant: values are exact,
/// the backward pass is wrong. The suite must flag it.
pub fn corrupted_backward_case() -> GradCase {
    GradCase::new("corrupted_sigmoid", CaseKind::Op, || {
        let x = Tensor::vector(&[-1.0, 0.2, 0.7, 2.0]);
        let errs = check_graph_fn(&[x], 3, |g, v| {
            let e = g.exp(v[0]);
            let denom = g.value(e).map(|t| 1.0 / (1.0 + t));
            let d = g.constant(denom);
            g.mul(e, d)
        })?;
        Ok(worst(errs))
    })
}

/// `kind,name,max_rel_error,status` rows.
pub fn report_csv(results: &[GradResult]) -> String {
    let mut s = String::from("kind,name,max_rel_error,status\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{:.3e},{}\n",
            r.kind.name(),
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "fail" }
        ));
    }
    s
}
