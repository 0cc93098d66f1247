//! Multi-scale feature pyramid: the toy strided-conv backbone, coordinate
//! rescaling between normalized image space and level pixels, bilinear
//! sampling, sinusoidal positional encodings and level embeddings.
//!
//! Pixel `(i, j)` of a `W × H` level covers normalized coordinates
//! `[i/W, (i+1)/W) × [j/H, (j+1)/H)` and has its center at continuous pixel
//! coordinate `(i, j)`. Level features are stored channels-last, as an
//! `[H·W, C]` matrix whose row `j·W + i` is the feature vector of pixel `(i, j)`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform, kernels, Graph, LevelDims, ParamId, ParamStore, Tensor, Var};

/// A point in `[0,1]²`, clamped at construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        }
    }

    pub fn midpoint(a: Self, b: Self) -> Self {
        Self::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    /// 1-based, 1 is the finest level.
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// `[height·width, C]`, channels-last.
    pub features: Tensor,
}

impl FeatureLevel {
    pub fn new(level: usize, height: usize, width: usize, features: Tensor) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("feature level must be at least 1x1".into()));
        }
        if features.shape().len() != 2 || features.shape()[0] != height * width {
            return Err(Error::Dimension(format!(
                "level {level}: features {:?} do not cover {height}x{width} pixels",
                features.shape()
            )));
        }
        Ok(Self {
            level,
            height,
            width,
            features,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dims(&self) -> LevelDims {
        LevelDims {
            height: self.height,
            width: self.width,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let c = self.channels();
        let i = y * self.width + x;
        &self.features.data()[i * c..(i + 1) * c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScalePyramid {
    pub levels: Vec<FeatureLevel>,
    /// Per level, `[H·W, C]` sinusoidal encodings.
    pub positional: Vec<Tensor>,
    /// `[L, C]`.
    pub level_embedding: Tensor,
}

impl MultiScalePyramid {
    pub fn new(levels: Vec<FeatureLevel>, positional: Vec<Tensor>, level_embedding: Tensor) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Dimension("pyramid needs at least one level".into()));
        }
        let c = levels[0].channels();
        for pair in levels.windows(2) {
            if pair[1].height > pair[0].height || pair[1].width > pair[0].width {
                return Err(Error::Dimension("pyramid levels must not grow in resolution".into()));
            }
        }
        if levels.iter().any(|l| l.channels() != c) {
            return Err(Error::Dimension("channel count differs across levels".into()));
        }
        if positional.len() != levels.len()
            || positional.iter().zip(&levels).any(|(p, l)| p.shape() != l.features.shape())
        {
            return Err(Error::Dimension("positional encodings must match level shapes".into()));
        }
        if level_embedding.shape() != [levels.len(), c] {
            return Err(Error::Dimension(format!(
                "level embedding {:?}, expected [{}, {c}]",
                level_embedding.shape(),
                levels.len()
            )));
        }
        Ok(Self {
            levels,
            positional,
            level_embedding,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn dims(&self) -> Vec<LevelDims> {
        self.levels.iter().map(FeatureLevel::dims).collect()
    }

    /// Features with positional encoding and level embedding added, per level.
    pub fn embedded_levels(&self) -> Vec<FeatureLevel> {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, lv)| {
                let with_pos = add(&lv.features, &self.positional[l]);
                let row = &self.level_embedding.data()[l * self.channels()..(l + 1) * self.channels()];
                FeatureLevel {
                    features: add_level_embedding(&with_pos, row),
                    ..lv.clone()
                }
            })
            .collect()
    }

    /// Writes one binary PGM per level per group of `group` channels, named
    /// `level-{l}-chan-{g}.pgm`; each image is the group's channel mean
    /// min-max scaled to 0..=255.
    pub fn dump_pgm(&self, dir: &Path, group: usize) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let group = group.max(1);
        let mut written = Vec::new();
        for lv in &self.levels {
            let c = lv.channels();
            for (gi, start) in (0..c).step_by(group).enumerate() {
                let end = (start + group).min(c);
                let vals: Vec<f64> = (0..lv.height * lv.width)
                    .map(|p| {
                        let row = &lv.features.data()[p * c..(p + 1) * c];
                        row[start..end].iter().sum::<f64>() / (end - start) as f64
                    })
                    .collect();
                let (lo, hi) = vals
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let span = if hi > lo { hi - lo } else { 1.0 };
                let bytes: Vec<u8> = vals.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8).collect();
                let path = dir.join(format!("level-{}-chan-{}.pgm", lv.level, gi));
                let mut f = std::fs::File::create(&path)?;
                write!(f, "P5\n{} {}\n255\n", lv.width, lv.height)?;
                f.write_all(&bytes)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Adds `row` (length C) to every pixel of a `[H·W, C]` feature matrix.
pub fn add_level_embedding(features: &Tensor, row: &[f64]) -> Tensor {
    let c = row.len();
    Tensor::from_parts(
        features.shape().to_vec(),
        features.data().iter().enumerate().map(|(i, v)| v + row[i % c]).collect(),
    )
}

/// Normalized point to continuous pixel coordinates of a level.
pub fn rescale_to_level(p: NormalizedPoint, height: usize, width: usize) -> (f64, f64) {
    (p.x * width as f64 - 0.5, p.y * height as f64 - 0.5)
}

/// Inverse of [`rescale_to_level`] (no clamping).
pub fn level_to_normalized(px: f64, py: f64, height: usize, width: usize) -> (f64, f64) {
    ((px + 0.5) / width as f64, (py + 0.5) / height as f64)
}

/// Bilinear read of a level at continuous pixel coordinate `(px, py)`;
/// pixels outside the map read as zero.
pub fn bilinear_sample(level: &FeatureLevel, px: f64, py: f64) -> Vec<f64> {
    let c = level.channels();
    let mut out = vec![0.0; c];
    for corner in kernels::bilinear_corners(px, py, level.height, level.width).iter().flatten() {
        kernels::axpy(
            corner.weight,
            &level.features.data()[corner.index * c..(corner.index + 1) * c],
            &mut out,
        );
    }
    out
}

/// 2-D sine/cosine encoding: the first `C/2` channels encode y, the rest x,
/// each from the pixel-center coordinate normalized by the level size and
/// scaled to `[0, 2π]`. Output `[H·W, C]`.
pub fn positional_encoding(height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if channels % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let temperature: f64 = 10000.0;
    let freq: Vec<f64> = (0..half)
        .map(|t| temperature.powf(2.0 * (t / 2) as f64 / half as f64))
        .collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(height * width * channels);
    for j in 0..height {
        let ye = (j as f64 + 0.5) / height as f64 * two_pi;
        for i in 0..width {
            let xe = (i as f64 + 0.5) / width as f64 * two_pi;
            for base in [ye, xe] {
                for (t, f) in freq.iter().enumerate() {
                    let v = base / f;
                    data.push(if t % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![height * width, channels], data))
}

/// Normalized centers of every pixel of a level, `[H·W, 2]` as (x, y).
pub fn pixel_centers(height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 2);
    for j in 0..height {
        for i in 0..width {
            data.push((i as f64 + 0.5) / width as f64);
            data.push((j as f64 + 0.5) / height as f64);
        }
    }
    Tensor::from_parts(vec![height * width, 2], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub levels: usize,
    /// Stride of the first level; every further level halves the resolution.
    pub first_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: 32,
            levels: 3,
            first_stride: 4,
        }
    }
}

impl BackboneConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.first_stride << l).collect()
    }

    pub fn level_dims(&self, height: usize, width: usize) -> Result<Vec<LevelDims>> {
        let largest = *self.strides().last().ok_or_else(|| Error::Config("backbone needs at least one level".into()))?;
        if height % largest != 0 || width % largest != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by the largest stride {largest}"
            )));
        }
        Ok(self
            .strides()
            .iter()
            .map(|s| LevelDims {
                height: height / s,
                width: width / s,
            })
            .collect())
    }
}

/// Stack of non-overlapping strided convolutions (kernel = stride) with ReLU:
/// the first maps `first_stride²` image patches to `C` channels, each later one
/// merges 2×2 neighbourhoods of the previous level.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    convs: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if config.levels == 0 || config.first_stride == 0 || config.channels == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        let mut convs = Vec::new();
        for l in 0..config.levels {
            let fan_in = if l == 0 {
                config.in_channels * config.first_stride * config.first_stride
            } else {
                4 * config.channels
            };
            let w = store.add(
                format!("backbone.conv{l}.weight"),
                kaiming_uniform(rng, &[config.channels, fan_in], fan_in),
                true,
            )?;
            let b = store.add(format!("backbone.conv{l}.bias"), Tensor::zeros(&[config.channels]), true)?;
            convs.push((w, b));
        }
        Ok(Self { config, convs })
    }

    /// Image `[in_channels, H, W]` to per-level `[H_l·W_l, C]` nodes.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<(Vec<Var>, Vec<LevelDims>)> {
        let (cin, h, w) = match *g.shape(image) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Dimension(format!("image must be [C, H, W], got {s:?}"))),
        };
        if cin != self.config.in_channels {
            return Err(Error::Config(format!(
                "image has {cin} channels, backbone expects {}",
                self.config.in_channels
            )));
        }
        let dims = self.config.level_dims(h, w)?;
        let s = self.config.first_stride;
        let (oh, ow) = (dims[0].height, dims[0].width);
        let mut idx = Vec::with_capacity(oh * ow * s * s * cin);
        for py in 0..oh {
            for px in 0..ow {
                for c in 0..cin {
                    for dy in 0..s {
                        for dx in 0..s {
                            idx.push(c * h * w + (py * s + dy) * w + px * s + dx);
                        }
                    }
                }
            }
        }
        let patches = g.gather(image, idx, &[oh * ow, cin * s * s])?;
        let mut levels = Vec::with_capacity(dims.len());
        let (w0, b0) = self.convs[0];
        let (wv, bv) = (g.param(w0), g.param(b0));
        let pre = g.linear(patches, wv, Some(bv))?;
        let mut cur = g.relu(pre);
        levels.push(cur);
        let c = self.config.channels;
        for (l, &(wid, bid)) in self.convs.iter().enumerate().skip(1) {
            let prev = dims[l - 1];
            let d = dims[l];
            let mut idx = Vec::with_capacity(d.height * d.width * 4 * c);
            for py in 0..d.height {
                for px in 0..d.width {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = (2 * py + dy) * prev.width + 2 * px + dx;
                            idx.extend((0..c).map(|ch| src * c + ch));
                        }
                    }
                }
            }
            let merged = g.gather(cur, idx, &[d.height * d.width, 4 * c])?;
            let (wv, bv) = (g.param(wid), g.param(bid));
            let pre = g.linear(merged, wv, Some(bv))?;
            cur = g.relu(pre);
            levels.push(cur);
        }
        Ok((levels, dims))
    }
}

/// Runs the backbone on an image and attaches positional encodings and the
/// given level embedding.
pub fn build_pyramid(
    image: &Tensor,
    backbone: &Backbone,
    store: &ParamStore,
    level_embedding: &Tensor,
) -> Result<MultiScalePyramid> {
    let mut g = Graph::with_params(store);
    let img = g.constant(image.clone());
    let (vars, dims) = backbone.forward(&mut g, img)?;
    let c = backbone.config.channels;
    let mut levels = Vec::with_capacity(vars.len());
    let mut positional = Vec::with_capacity(vars.len());
    for (l, (v, d)) in vars.iter().zip(&dims).enumerate() {
        levels.push(FeatureLevel::new(l + 1, d.height, d.width, g.value(*v).clone())?);
        positional.push(positional_encoding(d.height, d.width, c)?);
    }
    MultiScalePyramid::new(levels, positional, level_embedding.clone())
}
