//! Synthetic interaction scenes with controllable human/object scale and
//! distance, and the binning used for scale- and distance-resolved AP.
//!
//! A scene is a grayscale image holding one (or a few) human–object pairs.
//! Humans are filled ellipses at full intensity; objects are filled
//! rectangles whose intensity encodes the class. The action is a function of
//! the center distance between the pair, so it can only be read off by
//! relating the two boxes.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{area, corners, BoxCxcywh, HoiTriplet};
use crate::numerics::Tensor;

/// Area-ratio thresholds `area(h)/area(o)` separating h<o, h=o and h>o.
pub const RATIO_THRESHOLDS: (f64, f64) = (0.48, 4.33);

/// Center-distance band width that selects the action.
pub const ACTION_BAND: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// Distance band cycles with the seed.
    #[serde(rename = "mixed")]
    Mixed,
    /// Human area more than 4.33 times the object area.
    #[serde(rename = "h>o")]
    HumanLarger,
    /// Human area below 0.48 times the object area.
    #[serde(rename = "h<o")]
    ObjectLarger,
    /// Top distance band only.
    #[serde(rename = "distant")]
    Distant,
    /// Area-ratio bin and distance band both cycle with the seed.
    #[serde(rename = "multiscale-stress")]
    MultiscaleStress,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Self::Mixed,
        Self::HumanLarger,
        Self::ObjectLarger,
        Self::Distant,
        Self::MultiscaleStress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mixed => "mixed",
            Self::HumanLarger => "h>o",
            Self::ObjectLarger => "h<o",
            Self::Distant => "distant",
            Self::MultiscaleStress => "multiscale-stress",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub num_actions: usize,
    pub preset: Preset,
    /// Interacting pairs per scene.
    pub pairs: usize,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// `d_interaction` thresholds of the distance bands.
    pub distance_thresholds: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            num_actions: 3,
            preset: Preset::Mixed,
            pairs: 1,
            noise: 0.05,
            distance_thresholds: DEFAULT_DISTANCE_THRESHOLDS,
        }
    }
}

/// Tertile cuts of `d_interaction` over unconstrained scenes.
pub const DEFAULT_DISTANCE_THRESHOLDS: (f64, f64) = (45.0, 190.0);

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.num_classes == 0 || self.num_actions == 0 {
            return Err(Error::Config("need at least one object class and one action".into()));
        }
        if self.pairs == 0 || self.pairs > 4 {
            return Err(Error::Config("pairs must be between 1 and 4".into()));
        }
        if !(0.0..0.25).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 0.25)".into()));
        }
        let (lo, hi) = self.distance_thresholds;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config("distance thresholds must be positive and increasing".into()));
        }
        Ok(())
    }

    pub fn object_intensity(&self, class: usize) -> f64 {
        if self.num_classes == 1 {
            0.5
        } else {
            0.25 + 0.5 * class as f64 / (self.num_classes - 1) as f64
        }
    }
}

/// Center distance normalized by the product of the two box areas.
pub fn d_interaction(h: &BoxCxcywh, o: &BoxCxcywh) -> Result<f64> {
    let (ah, ao) = (area(h), area(o));
    if ah <= 0.0 || ao <= 0.0 {
        return Err(Error::Argument("d_interaction needs boxes with positive area".into()));
    }
    Ok(center_distance(h, o) / (ah * ao))
}

pub fn center_distance(h: &BoxCxcywh, o: &BoxCxcywh) -> f64 {
    (h[0] - o[0]).hypot(h[1] - o[1])
}

/// Action id for a pair: the center-distance band, capped at the last action.
pub fn action_for(h: &BoxCxcywh, o: &BoxCxcywh, num_actions: usize) -> usize {
    ((center_distance(h, o) / ACTION_BAND) as usize).min(num_actions - 1)
}

/// Index of the half-open interval `[lo, hi)` containing `v`: 0, 1 or 2.
pub fn band(v: f64, (lo, hi): (f64, f64)) -> usize {
    if v < lo {
        0
    } else if v < hi {
        1
    } else {
        2
    }
}

pub struct Scene {
    pub seed: u64,
    /// `[1, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub triplets: Vec<HoiTriplet>,
}

/// Bins a pair must land in; `None` leaves it free.
#[derive(Clone, Copy, Debug, Default)]
struct Targets {
    ratio: Option<usize>,
    distance: Option<usize>,
}

fn targets(preset: Preset, seed: u64) -> Targets {
    let cycle = (seed % 3) as usize;
    match preset {
        Preset::Mixed => Targets {
            ratio: None,
            distance: Some(cycle),
        },
        Preset::HumanLarger => Targets {
            ratio: Some(2),
            distance: None,
        },
        Preset::ObjectLarger => Targets {
            ratio: Some(0),
            distance: None,
        },
        Preset::Distant => Targets {
            ratio: None,
            distance: Some(2),
        },
        Preset::MultiscaleStress => Targets {
            ratio: Some(cycle),
            distance: Some(((seed / 3) % 3) as usize),
        },
    }
}

const MAX_TRIES: usize = 200_000;
const LAYOUT_ATTEMPTS: usize = 20;

/// Pixel-aligned box `[x0, x1) × [y0, y1)` inside an `s × s` image.
fn sample_box(rng: &mut ChaCha8Rng, s: usize, (wmin, wmax): (usize, usize), (hmin, hmax): (usize, usize)) -> BoxCxcywh {
    let w = rng.gen_range(wmin..=wmax.min(s));
    let h = rng.gen_range(hmin..=hmax.min(s));
    let x0 = rng.gen_range(0..=s - w);
    let y0 = rng.gen_range(0..=s - h);
    let sf = s as f64;
    [
        (x0 as f64 + w as f64 / 2.0) / sf,
        (y0 as f64 + h as f64 / 2.0) / sf,
        w as f64 / sf,
        h as f64 / sf,
    ]
}

fn overlap_fraction(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    iw * ih / area(a).min(area(b))
}

fn sample_pair(rng: &mut ChaCha8Rng, cfg: &SceneConfig, t: Targets, taken: &[BoxCxcywh]) -> Result<(BoxCxcywh, BoxCxcywh)> {
    let s = cfg.image_size;
    let px = |f: f64| ((f * s as f64).round() as usize).max(2);
    for _ in 0..MAX_TRIES {
        let hw = rng.gen_range(px(0.06)..=px(0.4));
        let h = sample_box(rng, s, (hw, hw), (hw, (2 * hw).min(px(0.7))));
        let o = sample_box(rng, s, (px(0.05), px(0.6)), (px(0.05), px(0.6)));
        if overlap_fraction(&h, &o) > 0.5 {
            continue;
        }
        if taken.iter().any(|b| overlap_fraction(b, &h) > 0.0 || overlap_fraction(b, &o) > 0.0) {
            continue;
        }
        if let Some(r) = t.ratio {
            if band(area(&h) / area(&o), RATIO_THRESHOLDS) != r {
                continue;
            }
        }
        if let Some(d) = t.distance {
            if band(d_interaction(&h, &o)?, cfg.distance_thresholds) != d {
                continue;
            }
        }
        return Ok((h, o));
    }
    Err(Error::Generation(format!(
        "no pair satisfies preset {} within {MAX_TRIES} draws",
        cfg.preset.name()
    )))
}

fn paint(image: &mut [f64], s: usize, b: &BoxCxcywh, value: f64, ellipse: bool) {
    let c = corners(b);
    let (x0, y0) = ((c[0] * s as f64).round() as usize, (c[1] * s as f64).round() as usize);
    let (x1, y1) = ((c[2] * s as f64).round() as usize, (c[3] * s as f64).round() as usize);
    for y in y0..y1.min(s) {
        for x in x0..x1.min(s) {
            if ellipse {
                let dx = ((x as f64 + 0.5) / s as f64 - b[0]) / (b[2] / 2.0);
                let dy = ((y as f64 + 0.5) / s as f64 - b[1]) / (b[3] / 2.0);
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            image[y * s + x] = value;
        }
    }
}

/// A scene as a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let t = targets(cfg.preset, seed);
    let mut triplets = Vec::with_capacity(cfg.pairs);
    // Early pairs can leave no room for later ones; start the layout over.
    for attempt in 1..=LAYOUT_ATTEMPTS {
        triplets.clear();
        let mut taken = Vec::new();
        let mut failure = None;
        for _ in 0..cfg.pairs {
            let (h, o) = match sample_pair(&mut rng, cfg, t, &taken) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            taken.extend([h, o]);
            let class = rng.gen_range(0..cfg.num_classes);
            triplets.push(HoiTriplet {
                human: h,
                object: o,
                class,
                actions: vec![action_for(&h, &o, cfg.num_actions)],
            });
        }
        match failure {
            None => break,
            // A first pair that cannot be placed will not be placed later.
            Some(e) if triplets.is_empty() || attempt == LAYOUT_ATTEMPTS => return Err(e),
            Some(_) => {}
        }
    }
    let mut image: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..=cfg.noise)).collect();
    for t in &triplets {
        paint(&mut image, s, &t.object, cfg.object_intensity(t.class), false);
    }
    for t in &triplets {
        paint(&mut image, s, &t.human, 1.0, true);
    }
    Ok(Scene {
        seed,
        image: Tensor::new(&[1, s, s], image)?,
        triplets,
    })
}

/// Seed of scene `index` in a dataset drawn with `seed`. Consecutive indices
/// get consecutive seeds so seed-cycled presets stay balanced.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1 << 20).wrapping_add(index as u64)
}

pub fn generate_dataset(n: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..n).map(|i| generate_scene(scene_seed(seed, i), cfg)).collect()
}

/// One manifest line; the image is regenerated from `seed` and `config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub seed: u64,
    pub config: SceneConfig,
    pub triplets: Vec<HoiTriplet>,
}

impl SceneRecord {
    pub fn regenerate(&self) -> Result<Scene> {
        let scene = generate_scene(self.seed, &self.config)?;
        if scene.triplets != self.triplets {
            return Err(Error::Format(format!("scene {} labels do not match its seed", self.id)));
        }
        Ok(scene)
    }
}

pub fn records(scenes: &[Scene], cfg: &SceneConfig) -> Vec<SceneRecord> {
    scenes
        .iter()
        .enumerate()
        .map(|(id, s)| SceneRecord {
            id,
            seed: s.seed,
            config: cfg.clone(),
            triplets: s.triplets.clone(),
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SceneRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Binary PPM from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Dimension(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Gray `[1, H, W]` image in `[0, 1]` as RGB bytes.
pub fn gray_to_rgb(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .flat_map(|&v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RatioBin {
    #[serde(rename = "h<o")]
    ObjectLarger,
    #[serde(rename = "h=o")]
    Balanced,
    #[serde(rename = "h>o")]
    HumanLarger,
}

impl RatioBin {
    pub fn name(self) -> &'static str {
        match self {
            Self::ObjectLarger => "h<o",
            Self::Balanced => "h=o",
            Self::HumanLarger => "h>o",
        }
    }

    fn from_index(i: usize) -> Self {
        [Self::ObjectLarger, Self::Balanced, Self::HumanLarger][i]
    }
}

/// Thresholds for binning. Size and distance cuts left as `None` are taken
/// from the data so that the three bins hold equal counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinConfig {
    pub ratio: (f64, f64),
    pub human_size: Option<(f64, f64)>,
    pub object_size: Option<(f64, f64)>,
    pub distance: Option<(f64, f64)>,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            ratio: RATIO_THRESHOLDS,
            human_size: None,
            object_size: None,
            distance: None,
        }
    }
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [Some(self.ratio), self.human_size, self.object_size, self.distance].into_iter().flatten() {
            if lo >= hi {
                return Err(Error::Config(format!("bin thresholds ({lo}, {hi}) are not increasing")));
            }
        }
        Ok(())
    }
}

/// Bin labels of one triplet. Tertile indices run small-to-large: sizes
/// S/M/L, distance adjacent/distant/remote.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLabels {
    pub ratio: RatioBin,
    pub human_size: usize,
    pub object_size: usize,
    pub distance: usize,
}

pub const SIZE_NAMES: [&str; 3] = ["S", "M", "L"];
pub const DISTANCE_NAMES: [&str; 3] = ["adjacent", "distant", "remote"];

impl BinLabels {
    /// `(category, bin)` names, e.g. `("distance", "remote")`.
    pub fn names(&self) -> [(&'static str, &'static str); 4] {
        [
            ("ratio", self.ratio.name()),
            ("human_size", SIZE_NAMES[self.human_size]),
            ("object_size", SIZE_NAMES[self.object_size]),
            ("distance", DISTANCE_NAMES[self.distance]),
        ]
    }
}

/// Rank-based tertiles: sorted by value (ties by position), the first
/// `⌊n/3⌋` go low and the next `⌊2n/3⌋ − ⌊n/3⌋` middle.
pub fn equal_count_tertiles(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n / 3 {
            0
        } else if rank < 2 * n / 3 {
            1
        } else {
            2
        };
    }
    out
}

pub fn assign_bins(gts: &[HoiTriplet], cfg: &BinConfig) -> Result<Vec<BinLabels>> {
    cfg.validate()?;
    let by = |values: Vec<f64>, cut: Option<(f64, f64)>| match cut {
        Some(t) => values.iter().map(|&v| band(v, t)).collect(),
        None => equal_count_tertiles(&values),
    };
    let hs = by(gts.iter().map(|t| area(&t.human)).collect(), cfg.human_size);
    let os = by(gts.iter().map(|t| area(&t.object)).collect(), cfg.object_size);
    let dist: Vec<f64> = gts.iter().map(|t| d_interaction(&t.human, &t.object)).collect::<Result<_>>()?;
    let ds = by(dist, cfg.distance);
    Ok(gts
        .iter()
        .enumerate()
        .map(|(i, t)| BinLabels {
            ratio: RatioBin::from_index(band(area(&t.human) / area(&t.object), cfg.ratio)),
            human_size: hs[i],
            object_size: os[i],
            distance: ds[i],
        })
        .collect())
}
