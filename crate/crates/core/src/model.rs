//! The detector: backbone pyramid, deformable encoder, HOI-query decoder with
//! selectable layouts, and the box/class/action heads.
//!
//! Decoder layouts differ only in how per-query semantics are combined before
//! cross-attention and which sampling paths cross-attention uses:
//!
//! - `merge_output`: every semantic gets its own self-attention; the results are
//!   summed, `LN(Σ_s (s + SA_s(s)))`.
//! - `merge_input`: semantics are summed first, `LN(m + SA(m))`.
//! - `double_stream`: human and object run as two independent stacks.
//! - `naive_deformable`: one semantic, one reference, one sampling path.
//! - `standard_context`: like `merge_input`, but the context reference is a
//!   learned projection of the query instead of the human–object midpoint.
//!
//! Each cross-attention output passes through `LN(query + attn)` and a
//! feed-forward block. Reference points are computed once from the query
//! embeddings and shared by all decoder layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, DeformOutput, MsDeformAttn, MultiHeadAttention, SamplingGrid};
use crate::error::{Error, Result};
use crate::features::{pixel_centers, positional_encoding, Backbone, BackboneConfig, NormalizedPoint};
use crate::layers::{FeedForward, LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, LevelDims, ParamId, ParamStore, Tensor, Var, INV_SIGMOID_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    MergeOutput,
    MergeInput,
    DoubleStream,
    NaiveDeformable,
    StandardContext,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 5] = [
        Self::MergeOutput,
        Self::MergeInput,
        Self::DoubleStream,
        Self::NaiveDeformable,
        Self::StandardContext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MergeOutput => "merge_output",
            Self::MergeInput => "merge_input",
            Self::DoubleStream => "double_stream",
            Self::NaiveDeformable => "naive_deformable",
            Self::StandardContext => "standard_context",
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant {s:?}")))
    }
}

/// Ablation switches: multi-scale input, deformable attention, separate
/// human/object sampling, and midpoint-anchored context sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    #[serde(alias = "ms")]
    pub multi_scale: bool,
    #[serde(alias = "da")]
    pub deformable: bool,
    #[serde(alias = "de")]
    pub dual_entity: bool,
    #[serde(alias = "ec")]
    pub entity_context: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            multi_scale: true,
            deformable: true,
            dual_entity: true,
            entity_context: true,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if self.dual_entity && !self.deformable {
            return Err(Error::Config("dual_entity requires deformable".into()));
        }
        if self.entity_context && !self.dual_entity {
            return Err(Error::Config("entity_context requires dual_entity".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub levels: usize,
    pub first_stride: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub num_actions: usize,
    pub variant: DecoderVariant,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            channels: 32,
            levels: 3,
            first_stride: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 8,
            heads: 2,
            points: 2,
            ffn_hidden: 64,
            num_classes: 3,
            num_actions: 3,
            variant: DecoderVariant::MergeOutput,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    /// Toggle dependencies first, then layout compatibility, then dimensions.
    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        let t = self.toggles;
        let v = self.variant;
        match v {
            DecoderVariant::NaiveDeformable => {
                if t.dual_entity || t.entity_context {
                    return Err(Error::Config(
                        "naive_deformable uses a single sampling path; disable dual_entity and entity_context".into(),
                    ));
                }
            }
            DecoderVariant::MergeOutput | DecoderVariant::MergeInput => {
                if !t.dual_entity {
                    return Err(Error::Config(format!("{} requires dual_entity", v.name())));
                }
            }
            DecoderVariant::DoubleStream | DecoderVariant::StandardContext => {
                if !t.dual_entity {
                    return Err(Error::Config(format!("{} requires dual_entity", v.name())));
                }
                if t.entity_context {
                    return Err(Error::Config(format!("{} is incompatible with entity_context", v.name())));
                }
            }
        }
        if self.decoder_layers == 0 || self.queries == 0 {
            return Err(Error::Config("need at least one decoder layer and one query".into()));
        }
        if self.num_classes == 0 || self.num_actions == 0 {
            return Err(Error::Config("need at least one object class and one action".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config("channels must be divisible by 4 for positional encoding".into()));
        }
        self.attention_config().validate()?;
        self.backbone_config().level_dims(self.image_size, self.image_size)?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            channels: self.channels,
            levels: self.levels,
            first_stride: self.first_stride,
        }
    }

    /// Levels the attention modules see: all of them, or only the coarsest.
    pub fn attended_levels(&self) -> usize {
        if self.toggles.multi_scale {
            self.levels
        } else {
            1
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            points: self.points,
            levels: self.attended_levels(),
            channels: self.channels,
        }
    }

    /// Per-query semantics carried between decoder layers.
    pub fn semantics(&self) -> usize {
        match self.variant {
            DecoderVariant::NaiveDeformable => 1,
            DecoderVariant::DoubleStream => 2,
            DecoderVariant::StandardContext => 3,
            DecoderVariant::MergeOutput | DecoderVariant::MergeInput => {
                if self.toggles.entity_context {
                    3
                } else {
                    2
                }
            }
        }
    }
}

/// Logit bias for class and action heads at initialization.
const PRIOR_LOGIT: f64 = -2.0;

#[derive(Clone, Debug)]
enum TokenMixer {
    Deformable(MsDeformAttn),
    Dense(MultiHeadAttention),
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: TokenMixer,
    norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
enum Cross {
    Single(TokenMixer),
    Dual {
        project_h: Linear,
        project_o: Linear,
        human: MsDeformAttn,
        object: MsDeformAttn,
        context: Option<MsDeformAttn>,
    },
    Streams {
        human: MsDeformAttn,
        object: MsDeformAttn,
    },
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Vec<MultiHeadAttention>,
    sa_norm: Vec<LayerNorm>,
    cross: Cross,
    cross_norm: Vec<LayerNorm>,
    ffn: Vec<FeedForward>,
}

#[derive(Clone, Debug)]
struct Heads {
    hbox: Mlp,
    obox: Mlp,
    cls: Linear,
    act: Linear,
}

#[derive(Clone, Debug)]
enum References {
    Single(Linear),
    Dual {
        project_h: Linear,
        project_o: Linear,
        ref_h: Linear,
        ref_o: Linear,
        ref_c: Option<Linear>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    level_embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    query_embedding: ParamId,
    references: References,
    decoder: Vec<DecoderLayer>,
    heads: Heads,
}

/// Which sampling path an attention record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPath {
    Human,
    Object,
    Context,
    Single,
}

pub struct PathSampling {
    pub path: SamplingPath,
    pub refs: Var,
    pub attn: DeformOutput,
}

/// Head outputs of one decoder layer, all `[N, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutputs {
    /// `(cx, cy, w, h)` in `(0, 1)`.
    pub hbox: Var,
    pub obox: Var,
    pub cls_logits: Var,
    pub act_logits: Var,
}

pub struct ForwardOutput {
    /// One entry per decoder layer; the last is the final prediction.
    pub layers: Vec<LayerOutputs>,
    pub refs_h: Var,
    pub refs_o: Var,
    /// Context references when a context path exists.
    pub refs_c: Option<Var>,
    /// Sampling records per decoder layer (deformable cross-attention only).
    pub sampling: Vec<Vec<PathSampling>>,
    pub level_dims: Vec<LevelDims>,
}

impl ForwardOutput {
    pub fn last(&self) -> LayerOutputs {
        *self.layers.last().expect("at least one decoder layer")
    }
}

/// One query's prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub hbox: [f64; 4],
    pub obox: [f64; 4],
    pub cls: Vec<f64>,
    pub act: Vec<f64>,
    pub ref_h: NormalizedPoint,
    pub ref_o: NormalizedPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

/// Reads a layer's outputs into plain predictions.
pub fn read_predictions(g: &Graph, out: &LayerOutputs, refs_h: Var, refs_o: Var) -> PredictionSet {
    let n = g.shape(out.hbox)[0];
    let (nc, na) = (g.shape(out.cls_logits)[1], g.shape(out.act_logits)[1]);
    let (hb, ob) = (g.data(out.hbox), g.data(out.obox));
    let (cl, al) = (g.data(out.cls_logits), g.data(out.act_logits));
    let (rh, ro) = (g.data(refs_h), g.data(refs_o));
    let sig = crate::numerics::kernels::sigmoid;
    let entries = (0..n)
        .map(|q| Prediction {
            hbox: hb[4 * q..4 * q + 4].try_into().unwrap(),
            obox: ob[4 * q..4 * q + 4].try_into().unwrap(),
            cls: cl[q * nc..(q + 1) * nc].iter().map(|&z| sig(z)).collect(),
            act: al[q * na..(q + 1) * na].iter().map(|&z| sig(z)).collect(),
            ref_h: NormalizedPoint::new(rh[2 * q], rh[2 * q + 1]),
            ref_o: NormalizedPoint::new(ro[2 * q], ro[2 * q + 1]),
        })
        .collect();
    PredictionSet { entries }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let c = config.channels;
        let acfg = config.attention_config();
        let backbone = Backbone::new(config.backbone_config(), s, r)?;
        let nl = config.attended_levels();
        let level_embedding = s.add("level_embedding", uniform(r, &[nl, c], 1.0), true)?;
        let mixer = |s: &mut ParamStore, r: &mut ChaCha8Rng, name: &str| -> Result<TokenMixer> {
            Ok(if config.toggles.deformable {
                TokenMixer::Deformable(MsDeformAttn::new(s, r, name, acfg)?)
            } else {
                TokenMixer::Dense(MultiHeadAttention::new(s, r, name, c, config.heads)?)
            })
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                attn: mixer(s, r, &format!("{p}.attn"))?,
                norm: LayerNorm::new(s, &format!("{p}.norm"), c)?,
                ffn: FeedForward::new(s, r, &format!("{p}.ffn"), c, config.ffn_hidden)?,
            });
        }
        let query_embedding = s.add("query_embedding", uniform(r, &[config.queries, c], 1.0), true)?;
        let references = if config.variant == DecoderVariant::NaiveDeformable {
            References::Single(Linear::new(s, r, "reference", c, 2, true)?)
        } else {
            References::Dual {
                project_h: Linear::new(s, r, "query_project_h", c, c, true)?,
                project_o: Linear::new(s, r, "query_project_o", c, c, true)?,
                ref_h: Linear::new(s, r, "reference_h", c, 2, true)?,
                ref_o: Linear::new(s, r, "reference_o", c, 2, true)?,
                ref_c: if config.variant == DecoderVariant::StandardContext {
                    Some(Linear::new(s, r, "reference_c", c, 2, true)?)
                } else {
                    None
                },
            }
        };
        let ns = config.semantics();
        let n_sa = match config.variant {
            DecoderVariant::MergeOutput | DecoderVariant::DoubleStream => ns,
            _ => 1,
        };
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for k in 0..config.decoder_layers {
            let p = format!("decoder.{k}");
            let self_attn = (0..n_sa)
                .map(|i| MultiHeadAttention::new(s, r, &format!("{p}.self_attn.{i}"), c, config.heads))
                .collect::<Result<Vec<_>>>()?;
            let n_norm = if config.variant == DecoderVariant::DoubleStream { 2 } else { 1 };
            let sa_norm = (0..n_norm)
                .map(|i| LayerNorm::new(s, &format!("{p}.self_norm.{i}"), c))
                .collect::<Result<Vec<_>>>()?;
            let cross = match config.variant {
                DecoderVariant::NaiveDeformable => Cross::Single(mixer(s, r, &format!("{p}.cross"))?),
                DecoderVariant::DoubleStream => Cross::Streams {
                    human: MsDeformAttn::new(s, r, &format!("{p}.cross_h"), acfg)?,
                    object: MsDeformAttn::new(s, r, &format!("{p}.cross_o"), acfg)?,
                },
                _ => Cross::Dual {
                    project_h: Linear::new(s, r, &format!("{p}.project_h"), c, c, true)?,
                    project_o: Linear::new(s, r, &format!("{p}.project_o"), c, c, true)?,
                    human: MsDeformAttn::new(s, r, &format!("{p}.cross_h"), acfg)?,
                    object: MsDeformAttn::new(s, r, &format!("{p}.cross_o"), acfg)?,
                    context: if ns == 3 {
                        Some(MsDeformAttn::new(s, r, &format!("{p}.cross_c"), acfg)?)
                    } else {
                        None
                    },
                },
            };
            let cross_norm = (0..ns)
                .map(|i| LayerNorm::new(s, &format!("{p}.cross_norm.{i}"), c))
                .collect::<Result<Vec<_>>>()?;
            let ffn = (0..ns)
                .map(|i| FeedForward::new(s, r, &format!("{p}.ffn.{i}"), c, config.ffn_hidden))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLayer {
                self_attn,
                sa_norm,
                cross,
                cross_norm,
                ffn,
            });
        }
        let cls = Linear::from_tensors(
            s,
            "head.cls",
            crate::numerics::kaiming_uniform(r, &[config.num_classes, c], c),
            Some(Tensor::full(&[config.num_classes], PRIOR_LOGIT)),
        )?;
        let act = Linear::from_tensors(
            s,
            "head.act",
            crate::numerics::kaiming_uniform(r, &[config.num_actions, c], c),
            Some(Tensor::full(&[config.num_actions], PRIOR_LOGIT)),
        )?;
        let heads = Heads {
            hbox: Mlp::new(s, r, "head.hbox", &[c, c, c, 4], true)?,
            obox: Mlp::new(s, r, "head.obox", &[c, c, c, 4], true)?,
            cls,
            act,
        };
        Ok(Self {
            config,
            store,
            backbone,
            level_embedding,
            encoder,
            query_embedding,
            references,
            decoder,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Backbone levels the attention modules read, with their sizes.
    pub fn pyramid(&self, g: &mut Graph, image: &Tensor) -> Result<(Vec<Var>, Vec<LevelDims>)> {
        let img = g.constant(image.clone());
        let (levels, dims) = self.backbone.forward(g, img)?;
        if self.config.toggles.multi_scale {
            Ok((levels, dims))
        } else {
            let l = levels.len() - 1;
            Ok((vec![levels[l]], vec![dims[l]]))
        }
    }

    /// Positional encodings plus level embeddings for all tokens, `[T, C]`.
    fn token_positions(&self, g: &mut Graph, dims: &[LevelDims]) -> Result<Var> {
        let c = self.config.channels;
        let mut pos = Vec::new();
        let mut idx = Vec::new();
        for (l, d) in dims.iter().enumerate() {
            pos.extend_from_slice(positional_encoding(d.height, d.width, c)?.data());
            for _ in 0..d.height * d.width {
                idx.extend((0..c).map(|ch| l * c + ch));
            }
        }
        let t = idx.len() / c;
        let pos = g.constant(Tensor::new(&[t, c], pos)?);
        let table = g.param(self.level_embedding);
        let lvl = g.gather(table, idx, &[t, c])?;
        g.add(pos, lvl)
    }

    fn split_levels(g: &mut Graph, tokens: Var, dims: &[LevelDims]) -> Result<Vec<Var>> {
        if dims.len() == 1 {
            return Ok(vec![tokens]);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(dims.len());
        for d in dims {
            let n = d.height * d.width;
            out.push(g.slice_rows(tokens, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Runs the encoder over the pyramid; output levels have the input shapes.
    pub fn encode(&self, g: &mut Graph, levels: &[Var], dims: &[LevelDims]) -> Result<Vec<Var>> {
        if self.encoder.is_empty() {
            return Ok(levels.to_vec());
        }
        let pos = self.token_positions(g, dims)?;
        let refs = {
            let mut r = Vec::new();
            for d in dims {
                r.extend_from_slice(pixel_centers(d.height, d.width).data());
            }
            g.constant(Tensor::new(&[r.len() / 2, 2], r)?)
        };
        let mut src = if levels.len() == 1 {
            levels[0]
        } else {
            g.concat_rows(levels)?
        };
        let mut value_levels = levels.to_vec();
        for layer in &self.encoder {
            let query = g.add(src, pos)?;
            let attended = match &layer.attn {
                TokenMixer::Deformable(a) => a.forward(g, query, refs, &value_levels, dims)?.out,
                TokenMixer::Dense(a) => a.forward(g, query, query, src)?.out,
            };
            let res = g.add(src, attended)?;
            let normed = layer.norm.forward(g, res)?;
            src = layer.ffn.forward(g, normed)?;
            value_levels = Self::split_levels(g, src, dims)?;
        }
        Ok(value_levels)
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOutput> {
        let size = self.config.image_size;
        if image.shape() != [self.config.in_channels, size, size] {
            return Err(Error::Dimension(format!(
                "image {:?}, model expects [{}, {size}, {size}]",
                image.shape(),
                self.config.in_channels
            )));
        }
        let (levels, dims) = self.pyramid(g, image)?;
        let memory = self.encode(g, &levels, &dims)?;
        let dense_kv = if self.config.toggles.deformable {
            None
        } else {
            let pos = self.token_positions(g, &dims)?;
            let values = if memory.len() == 1 { memory[0] } else { g.concat_rows(&memory)? };
            Some((g.add(values, pos)?, values))
        };
        let z = g.param(self.query_embedding);

        let (mut state, refs_h, refs_o, refs_c) = match &self.references {
            References::Single(lin) => {
                let logits = lin.forward(g, z)?;
                let r = g.sigmoid(logits);
                (vec![z], r, r, None)
            }
            References::Dual {
                project_h,
                project_o,
                ref_h,
                ref_o,
                ref_c,
            } => {
                let zh = project_h.forward(g, z)?;
                let zo = project_o.forward(g, z)?;
                let lh = ref_h.forward(g, zh)?;
                let lo = ref_o.forward(g, zo)?;
                let (rh, ro) = (g.sigmoid(lh), g.sigmoid(lo));
                let rc = match ref_c {
                    Some(lin) => {
                        let lc = lin.forward(g, z)?;
                        Some(g.sigmoid(lc))
                    }
                    None if self.config.semantics() == 3 => {
                        let sum = g.add(rh, ro)?;
                        Some(g.scale(sum, 0.5))
                    }
                    None => None,
                };
                let state = if self.config.semantics() == 3 { vec![zh, zo, z] } else { vec![zh, zo] };
                (state, rh, ro, rc)
            }
        };

        let mut layers = Vec::with_capacity(self.decoder.len());
        let mut sampling = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let mut records = Vec::new();
            state = self.decoder_layer(
                g,
                layer,
                &state,
                (refs_h, refs_o, refs_c),
                &memory,
                &dims,
                dense_kv,
                &mut records,
            )?;
            layers.push(self.predict_heads(g, &state, refs_h, refs_o)?);
            sampling.push(records);
        }
        Ok(ForwardOutput {
            layers,
            refs_h,
            refs_o,
            refs_c,
            sampling,
            level_dims: dims,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &mut Graph,
        layer: &DecoderLayer,
        state: &[Var],
        (refs_h, refs_o, refs_c): (Var, Var, Option<Var>),
        memory: &[Var],
        dims: &[LevelDims],
        dense_kv: Option<(Var, Var)>,
        records: &mut Vec<PathSampling>,
    ) -> Result<Vec<Var>> {
        // Self-attention and merge.
        let merged: Vec<Var> = match self.config.variant {
            DecoderVariant::MergeOutput => {
                let mut terms = Vec::with_capacity(2 * state.len());
                for (s, sa) in state.iter().zip(&layer.self_attn) {
                    terms.push(*s);
                    terms.push(sa.self_attend(g, *s)?);
                }
                let sum = g.add_all(&terms)?;
                vec![layer.sa_norm[0].forward(g, sum)?]
            }
            DecoderVariant::DoubleStream => {
                let mut out = Vec::with_capacity(2);
                for ((s, sa), norm) in state.iter().zip(&layer.self_attn).zip(&layer.sa_norm) {
                    let a = sa.self_attend(g, *s)?;
                    let r = g.add(*s, a)?;
                    out.push(norm.forward(g, r)?);
                }
                out
            }
            _ => {
                let m = if state.len() == 1 { state[0] } else { g.add_all(state)? };
                let a = layer.self_attn[0].self_attend(g, m)?;
                let r = g.add(m, a)?;
                vec![layer.sa_norm[0].forward(g, r)?]
            }
        };

        // Cross-attention: (query used for the residual, attention output) per semantic.
        let mut paths: Vec<(Var, Var)> = Vec::with_capacity(3);
        match &layer.cross {
            Cross::Single(TokenMixer::Deformable(a)) => {
                let out = a.forward(g, merged[0], refs_h, memory, dims)?;
                paths.push((merged[0], out.out));
                records.push(PathSampling {
                    path: SamplingPath::Single,
                    refs: refs_h,
                    attn: out,
                });
            }
            Cross::Single(TokenMixer::Dense(a)) => {
                let (keys, values) = dense_kv.expect("dense memory prepared");
                let out = a.forward(g, merged[0], keys, values)?;
                paths.push((merged[0], out.out));
            }
            Cross::Dual {
                project_h,
                project_o,
                human,
                object,
                context,
            } => {
                let zbar = merged[0];
                let qh = project_h.forward(g, zbar)?;
                let qo = project_o.forward(g, zbar)?;
                let oh = human.forward(g, qh, refs_h, memory, dims)?;
                let oo = object.forward(g, qo, refs_o, memory, dims)?;
                paths.push((qh, oh.out));
                paths.push((qo, oo.out));
                records.push(PathSampling {
                    path: SamplingPath::Human,
                    refs: refs_h,
                    attn: oh,
                });
                records.push(PathSampling {
                    path: SamplingPath::Object,
                    refs: refs_o,
                    attn: oo,
                });
                if let Some(ctx) = context {
                    let rc = refs_c.expect("context references prepared");
                    let oc = ctx.forward(g, zbar, rc, memory, dims)?;
                    paths.push((zbar, oc.out));
                    records.push(PathSampling {
                        path: SamplingPath::Context,
                        refs: rc,
                        attn: oc,
                    });
                }
            }
            Cross::Streams { human, object } => {
                let oh = human.forward(g, merged[0], refs_h, memory, dims)?;
                let oo = object.forward(g, merged[1], refs_o, memory, dims)?;
                paths.push((merged[0], oh.out));
                paths.push((merged[1], oo.out));
                records.push(PathSampling {
                    path: SamplingPath::Human,
                    refs: refs_h,
                    attn: oh,
                });
                records.push(PathSampling {
                    path: SamplingPath::Object,
                    refs: refs_o,
                    attn: oo,
                });
            }
        }
        let mut next = Vec::with_capacity(paths.len());
        for (((q, a), norm), ffn) in paths.into_iter().zip(&layer.cross_norm).zip(&layer.ffn) {
            let r = g.add(q, a)?;
            let n = norm.forward(g, r)?;
            next.push(ffn.forward(g, n)?);
        }
        Ok(next)
    }

    /// Box, class and action heads on one layer's semantics.
    pub fn predict_heads(&self, g: &mut Graph, state: &[Var], refs_h: Var, refs_o: Var) -> Result<LayerOutputs> {
        let (fh, fo, fc) = match state.len() {
            1 => (state[0], state[0], state[0]),
            2 => {
                let s = g.add(state[0], state[1])?;
                (state[0], state[1], s)
            }
            _ => (state[0], state[1], state[2]),
        };
        let u = self.heads.hbox.forward(g, fh)?;
        let v = self.heads.obox.forward(g, fo)?;
        let hbox = boxes_from_offsets(g, u, refs_h)?;
        let obox = boxes_from_offsets(g, v, refs_o)?;
        let cls_logits = self.heads.cls.forward(g, fo)?;
        let act_logits = self.heads.act.forward(g, fc)?;
        Ok(LayerOutputs {
            hbox,
            obox,
            cls_logits,
            act_logits,
        })
    }

    /// Final-layer predictions for one image.
    pub fn predict(&self, image: &Tensor) -> Result<PredictionSet> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, image)?;
        Ok(read_predictions(&g, &out.last(), out.refs_h, out.refs_o))
    }

    /// Final-layer sampling geometry of query `q` on every deformable path.
    pub fn attention_record(&self, g: &Graph, out: &ForwardOutput, q: usize) -> Result<AttentionRecord> {
        let acfg = self.config.attention_config();
        let point = |v: Var| {
            let d = g.data(v);
            NormalizedPoint::new(d[2 * q], d[2 * q + 1])
        };
        let mut paths = Vec::new();
        for rec in out.sampling.last().map(Vec::as_slice).unwrap_or(&[]) {
            let grid: SamplingGrid = rec.attn.grids(g, rec.refs, &acfg)?.swap_remove(q);
            let norm = grid.normalized_locations(&out.level_dims)?;
            let mut samples = Vec::with_capacity(norm.len());
            let mut i = 0;
            for m in 0..grid.heads {
                for l in 0..grid.levels {
                    for k in 0..grid.points {
                        samples.push(SampleRecord {
                            head: m,
                            level: l + 1,
                            point: k,
                            x: norm[i].0,
                            y: norm[i].1,
                            weight: grid.weight(m, l, k),
                        });
                        i += 1;
                    }
                }
            }
            paths.push(PathRecord {
                path: rec.path,
                reference: grid.reference,
                samples,
            });
        }
        Ok(AttentionRecord {
            query: q,
            human_ref: point(out.refs_h),
            object_ref: point(out.refs_o),
            context_ref: out.refs_c.map(point),
            paths,
        })
    }
}

/// `(σ(u_x + σ⁻¹(r_x)), σ(u_y + σ⁻¹(r_y)), σ(u_w), σ(u_h))` per row.
fn boxes_from_offsets(g: &mut Graph, u: Var, refs: Var) -> Result<Var> {
    let uc = g.slice_cols(u, 0, 2)?;
    let uwh = g.slice_cols(u, 2, 2)?;
    let centers = g.shifted_sigmoid(uc, refs, INV_SIGMOID_EPS)?;
    let wh = g.sigmoid(uwh);
    g.concat_cols(&[centers, wh])
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("positive dims")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub head: usize,
    /// 1-based.
    pub level: usize,
    pub point: usize,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path: SamplingPath,
    pub reference: NormalizedPoint,
    pub samples: Vec<SampleRecord>,
}

/// Reference points and sampling locations of one query, for visualization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub query: usize,
    pub human_ref: NormalizedPoint,
    pub object_ref: NormalizedPoint,
    pub context_ref: Option<NormalizedPoint>,
    pub paths: Vec<PathRecord>,
}
