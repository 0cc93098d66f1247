//! Dense multi-head attention, multi-scale deformable attention, and the two
//! interaction-aware variants built on it: separate human/object sampling
//! paths and context sampling anchored at the human–object midpoint.
//!
//! All modules work on a batch of queries at once: queries are `[q, C]`
//! matrices and reference points are `[q, 2]` matrices of normalized (x, y).
//! Pyramid levels are channels-last `[H_l·W_l, C]` nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{level_to_normalized, rescale_to_level, NormalizedPoint};
use crate::layers::Linear;
use crate::numerics::{kaiming_uniform, Graph, LevelDims, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub channels: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.levels == 0 || self.channels == 0 {
            return Err(Error::Config("attention heads, points, levels and channels must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels do not split evenly over {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Sampled keys per query for one head: `levels · points`.
    pub fn keys_per_head(&self) -> usize {
        self.levels * self.points
    }
}

/// `(dense, sampled)` key counts per query: every pixel of every level versus
/// `L·M·K` sampled locations.
pub fn key_count(cfg: &AttentionConfig, dims: &[LevelDims]) -> Result<(usize, usize)> {
    if dims.len() != cfg.levels {
        return Err(Error::Dimension(format!(
            "config has {} levels, pyramid has {}",
            cfg.levels,
            dims.len()
        )));
    }
    let dense = dims.iter().map(|d| d.height * d.width).sum();
    Ok((dense, cfg.levels * cfg.heads * cfg.points))
}

/// Standard multi-head attention with separate key and value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub channels: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

pub struct DenseOutput {
    pub out: Var,
    /// `[heads·q, keys]`, rows `m·q..(m+1)·q` belong to head `m`.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels over {heads} heads")));
        }
        Ok(Self {
            heads,
            channels,
            query: Linear::new(store, rng, &format!("{name}.query"), channels, channels, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), channels, channels, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), channels, channels, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), channels, channels, true)?,
        })
    }

    /// `queries: [q, C]`, `keys`, `values: [n, C]`.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<DenseOutput> {
        let nk = g.value(keys).as_matrix_dims().0;
        if nk == 0 || g.value(values).as_matrix_dims().0 != nk {
            return Err(Error::Argument("attention needs a nonempty, aligned key/value set".into()));
        }
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let dh = self.channels / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut logits = Vec::with_capacity(self.heads);
        let mut vs = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qm = g.slice_cols(q, m * dh, dh)?;
            let km = g.slice_cols(k, m * dh, dh)?;
            vs.push(g.slice_cols(v, m * dh, dh)?);
            let kt = g.transpose(km)?;
            let s = g.matmul(qm, kt)?;
            logits.push(g.scale(s, scale));
        }
        let all = g.concat_rows(&logits)?;
        let weights = g.softmax(all, 1)?;
        let nq = g.value(queries).as_matrix_dims().0;
        let mut heads = Vec::with_capacity(self.heads);
        for (m, vm) in vs.into_iter().enumerate() {
            let a = g.slice_rows(weights, m * nq, nq)?;
            heads.push(g.matmul(a, vm)?);
        }
        let cat = g.concat_cols(&heads)?;
        let out = self.out.forward(g, cat)?;
        Ok(DenseOutput { out, weights })
    }

    /// Attention of `x` over itself.
    pub fn self_attend(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward(g, x, x, x)?.out)
    }
}

/// One query's sampling geometry: reference point, per-(head, level, point)
/// pixel offsets, and attention weights normalized per head.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub reference: NormalizedPoint,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    /// `[M, L, K, 2]`, level-pixel units.
    pub offsets: Tensor,
    /// `[M, L, K]`.
    pub weights: Tensor,
}

impl SamplingGrid {
    pub fn new(reference: NormalizedPoint, offsets: Tensor, weights: Tensor) -> Result<Self> {
        let (heads, levels, points) = match *weights.shape() {
            [m, l, k] => (m, l, k),
            ref s => return Err(Error::Dimension(format!("weights must be [M, L, K], got {s:?}"))),
        };
        if offsets.shape() != [heads, levels, points, 2] {
            return Err(Error::Dimension(format!(
                "offsets {:?} do not match weights {:?}",
                offsets.shape(),
                weights.shape()
            )));
        }
        let per = levels * points;
        for (m, head) in weights.data().chunks(per).enumerate() {
            let total: f64 = head.iter().sum();
            if head.iter().any(|&a| a < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!("head {m} weights sum to {total}")));
            }
        }
        Ok(Self {
            reference,
            heads,
            levels,
            points,
            offsets,
            weights,
        })
    }

    pub fn weight(&self, m: usize, l: usize, k: usize) -> f64 {
        self.weights.data()[(m * self.levels + l) * self.points + k]
    }

    /// Continuous pixel coordinates at each level, ordered by (head, level, point).
    pub fn sampling_locations(&self, dims: &[LevelDims]) -> Result<Vec<(f64, f64)>> {
        if dims.len() != self.levels {
            return Err(Error::Dimension(format!("{} levels for a {}-level grid", dims.len(), self.levels)));
        }
        let od = self.offsets.data();
        let mut out = Vec::with_capacity(self.heads * self.levels * self.points);
        for m in 0..self.heads {
            for (l, d) in dims.iter().enumerate() {
                let (bx, by) = rescale_to_level(self.reference, d.height, d.width);
                for k in 0..self.points {
                    let s = (m * self.levels + l) * self.points + k;
                    out.push((bx + od[2 * s], by + od[2 * s + 1]));
                }
            }
        }
        Ok(out)
    }

    /// Sampling locations mapped back to normalized image coordinates (unclamped).
    pub fn normalized_locations(&self, dims: &[LevelDims]) -> Result<Vec<(f64, f64)>> {
        let pix = self.sampling_locations(dims)?;
        let per_level = self.points;
        Ok(pix
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let d = dims[(i / per_level) % self.levels];
                level_to_normalized(x, y, d.height, d.width)
            })
            .collect())
    }
}

/// Multi-scale deformable attention: each query samples `K` bilinear points
/// per head and level around its reference, weights them with a softmax over
/// all `L·K` samples of the head, projects each head's mixture, and merges heads
/// with an output projection.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub cfg: AttentionConfig,
    pub offsets: Linear,
    pub weights: Linear,
    /// Per-head value projections, `[M·C_v, C]`.
    pub value: ParamId,
    pub out: Linear,
}

pub struct DeformOutput {
    pub out: Var,
    /// `[q, M·L·K·2]`.
    pub offsets: Var,
    /// `[q, M·L·K]`, normalized per head.
    pub weights: Var,
}

impl DeformOutput {
    /// Per-query sampling grids read back from the graph.
    pub fn grids(&self, g: &Graph, refs: Var, cfg: &AttentionConfig) -> Result<Vec<SamplingGrid>> {
        let (m, l, k) = (cfg.heads, cfg.levels, cfg.points);
        let per = m * l * k;
        let rd = g.data(refs);
        let od = g.data(self.offsets);
        let wd = g.data(self.weights);
        (0..rd.len() / 2)
            .map(|q| {
                SamplingGrid::new(
                    NormalizedPoint::new(rd[2 * q], rd[2 * q + 1]),
                    Tensor::new(&[m, l, k, 2], od[q * per * 2..(q + 1) * per * 2].to_vec())?,
                    Tensor::new(&[m, l, k], wd[q * per..(q + 1) * per].to_vec())?,
                )
            })
            .collect()
    }
}

impl MsDeformAttn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, l, k, c) = (cfg.heads, cfg.levels, cfg.points, cfg.channels);
        let offsets = Linear::from_tensors(
            store,
            &format!("{name}.offsets"),
            Tensor::zeros(&[m * l * k * 2, c]),
            Some(radial_offsets(m, l, k)),
        )?;
        let weights = Linear::zeros(store, &format!("{name}.weights"), c, m * l * k)?;
        let value = store.add(
            format!("{name}.value.weight"),
            kaiming_uniform(rng, &[c, c], c),
            true,
        )?;
        let out = Linear::new(store, rng, &format!("{name}.out"), c, c, true)?;
        Ok(Self {
            cfg,
            offsets,
            weights,
            value,
            out,
        })
    }

    /// `query: [q, C]`, `refs: [q, 2]`, one node per level.
    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        refs: Var,
        levels: &[Var],
        dims: &[LevelDims],
    ) -> Result<DeformOutput> {
        if levels.len() != self.cfg.levels {
            return Err(Error::Dimension(format!(
                "attention built for {} levels, got {}",
                self.cfg.levels,
                levels.len()
            )));
        }
        let nq = g.value(query).as_matrix_dims().0;
        let (m, lk) = (self.cfg.heads, self.cfg.keys_per_head());
        let offsets = self.offsets.forward(g, query)?;
        let logits = self.weights.forward(g, query)?;
        let per_head = g.reshape(logits, &[nq * m, lk])?;
        let norm = g.softmax(per_head, 1)?;
        let weights = g.reshape(norm, &[nq, m * lk])?;
        let sampled = g.deform_sample(levels, dims, refs, offsets, weights, m, self.cfg.points)?;
        let w = g.param(self.value);
        let projected = g.head_linear(sampled, w, m)?;
        let out = self.out.forward(g, projected)?;
        Ok(DeformOutput { out, offsets, weights })
    }
}

/// Offset-projection bias: point `k` of head `m` starts `(k+1)/2` pixels from
/// the reference in direction `2π(m·K + k)/(M·K)`, identically at every level.
fn radial_offsets(heads: usize, levels: usize, points: usize) -> Tensor {
    let mut data = Vec::with_capacity(heads * levels * points * 2);
    for m in 0..heads {
        for _ in 0..levels {
            for k in 0..points {
                let theta = std::f64::consts::TAU * (m * points + k) as f64 / (heads * points) as f64;
                let r = 0.5 * (k + 1) as f64;
                data.push(r * theta.cos());
                data.push(r * theta.sin());
            }
        }
    }
    Tensor::from_parts(vec![heads * levels * points * 2], data)
}

/// Separate human and object sampling paths. The query is projected twice;
/// each projection drives its own deformable attention anchored at its own
/// reference point.
#[derive(Clone, Debug)]
pub struct DualEntityAttn {
    pub project_h: Linear,
    pub project_o: Linear,
    pub human: MsDeformAttn,
    pub object: MsDeformAttn,
}

pub struct DualOutput {
    pub query_h: Var,
    pub query_o: Var,
    pub human: DeformOutput,
    pub object: DeformOutput,
}

impl DualEntityAttn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            project_h: Linear::new(store, rng, &format!("{name}.project_h"), c, c, true)?,
            project_o: Linear::new(store, rng, &format!("{name}.project_o"), c, c, true)?,
            human: MsDeformAttn::new(store, rng, &format!("{name}.human"), cfg)?,
            object: MsDeformAttn::new(store, rng, &format!("{name}.object"), cfg)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        refs_h: Var,
        refs_o: Var,
        levels: &[Var],
        dims: &[LevelDims],
    ) -> Result<DualOutput> {
        let query_h = self.project_h.forward(g, query)?;
        let query_o = self.project_o.forward(g, query)?;
        let human = self.human.forward(g, query_h, refs_h, levels, dims)?;
        let object = self.object.forward(g, query_o, refs_o, levels, dims)?;
        Ok(DualOutput {
            query_h,
            query_o,
            human,
            object,
        })
    }
}

/// Context sampling anchored at the midpoint of the human and object
/// references, with offsets and weights predicted from the unprojected query.
#[derive(Clone, Debug)]
pub struct ContextAttn {
    pub attn: MsDeformAttn,
}

pub struct ContextOutput {
    /// `[q, 2]` midpoints.
    pub refs: Var,
    pub attn: DeformOutput,
}

impl ContextAttn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: AttentionConfig) -> Result<Self> {
        Ok(Self {
            attn: MsDeformAttn::new(store, rng, name, cfg)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        refs_h: Var,
        refs_o: Var,
        levels: &[Var],
        dims: &[LevelDims],
    ) -> Result<ContextOutput> {
        let sum = g.add(refs_h, refs_o)?;
        let refs = g.scale(sum, 0.5);
        let attn = self.attn.forward(g, query, refs, levels, dims)?;
        Ok(ContextOutput { refs, attn })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{bilinear_sample, FeatureLevel};
    use crate::numerics::gradcheck::DEFAULT_STEP;
    use crate::numerics::{check_inputs, check_params, finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        assert_eq!(store.get(id).tensor.shape(), t.shape());
        store.get_mut(id).tensor = t;
    }

    fn zero_offsets(store: &mut ParamStore, a: &MsDeformAttn) {
        let b = a.offsets.bias.unwrap();
        let shape = store.get(b).tensor.shape().to_vec();
        set(store, b, Tensor::zeros(&shape));
    }

    fn cfg(heads: usize, points: usize, levels: usize, channels: usize) -> AttentionConfig {
        AttentionConfig {
            heads,
            points,
            levels,
            channels,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3, 1, 1, 8).validate().is_err());
        assert!(cfg(0, 1, 1, 8).validate().is_err());
        assert!(cfg(2, 2, 3, 8).validate().is_ok());
        assert_eq!(cfg(2, 2, 3, 8).head_dim(), 4);
    }

    #[test]
    fn key_count_examples() {
        let d = |h, w| LevelDims { height: h, width: w };
        assert_eq!(key_count(&cfg(8, 4, 3, 32), &[d(16, 16), d(8, 8), d(4, 4)]).unwrap(), (336, 96));
        assert_eq!(key_count(&cfg(1, 1, 1, 4), &[d(1, 1)]).unwrap(), (1, 1));
        let four = [d(32, 32), d(16, 16), d(8, 8), d(4, 4)];
        assert_eq!(key_count(&cfg(8, 4, 4, 32), &four).unwrap().1, 128);
        assert!(key_count(&cfg(8, 4, 3, 32), &four).is_err());
    }

    fn identity_mha(store: &mut ParamStore, mha: &MultiHeadAttention) {
        let c = mha.channels;
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        for l in [&mha.query, &mha.key, &mha.value, &mha.out] {
            set(store, l.weight, eye.clone());
        }
    }

    #[test]
    fn dense_attention_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "sa", 2, 1).unwrap();
        identity_mha(&mut store, &mha);
        let mut g = Graph::with_params(&store);
        let z = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = mha.forward(&mut g, z, x, x).unwrap();
        // Logits 2/√2 = √2 and 0, so the first weight is 1/(1 + e^-√2) ≈ 0.804430.
        let f = g.data(out.out);
        assert!((f[0] - 0.804430).abs() < 1e-6, "{f:?}");
        assert!((f[1] - 0.195570).abs() < 1e-6, "{f:?}");
    }

    #[test]
    fn dense_attention_single_and_duplicate_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "sa", 4, 2).unwrap();
        for b in [&mha.query, &mha.key, &mha.value, &mha.out].map(|l| l.bias.unwrap()) {
            set(&mut store, b, rand_tensor(&mut rng, &[4]));
        }
        let key = rand_tensor(&mut rng, &[1, 4]);
        let two = Tensor::matrix(2, 4, [key.data(), key.data()].concat()).unwrap();
        let run = |queries: &Tensor, keys: &Tensor| {
            let mut g = Graph::with_params(&store);
            let q = g.constant(queries.clone());
            let k = g.constant(keys.clone());
            let out = mha.forward(&mut g, q, k, k).unwrap();
            g.data(out.out).to_vec()
        };
        let z1 = rand_tensor(&mut rng, &[1, 4]);
        let z2 = rand_tensor(&mut rng, &[1, 4]);
        let a = run(&z1, &key);
        let b = run(&z2, &key);
        let c = run(&z1, &two);
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12);
            assert!((a[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_attention_weights_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "sa", 8, 4).unwrap();
        let mut g = Graph::with_params(&store);
        let q = g.constant(rand_tensor(&mut rng, &[5, 8]).map(|v| 4.0 * v));
        let k = g.constant(rand_tensor(&mut rng, &[7, 8]));
        let out = mha.forward(&mut g, q, k, k).unwrap();
        assert_eq!(g.shape(out.weights), &[20, 7]);
        for row in g.data(out.weights).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "sa", 4, 2).unwrap();
        let q = rand_tensor(&mut rng, &[3, 4]);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let errs = check_inputs(&store, &[q.clone(), k.clone()], 1, |g, v| Ok(mha.forward(g, v[0], v[1], v[1])?.out))
            .unwrap();
        assert!(errs.iter().all(|e| *e <= 1e-4), "{errs:?}");
        let report = check_params(&store, 2, None, |g| {
            let qv = g.input(q.clone());
            let kv = g.input(k.clone());
            Ok(mha.forward(g, qv, kv, kv)?.out)
        })
        .unwrap();
        assert_eq!(report.len(), 8);
        assert!(report.iter().all(|(_, e)| *e <= 1e-4), "{report:?}");
    }

    fn random_level(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize, c: usize) -> FeatureLevel {
        FeatureLevel::new(l, h, w, rand_tensor(rng, &[h * w, c])).unwrap()
    }

    #[test]
    fn deformable_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let c = 3 + trial % 3;
            let mut store = ParamStore::new();
            let a = MsDeformAttn::new(&mut store, &mut rng, "a", cfg(1, 1, 1, c)).unwrap();
            zero_offsets(&mut store, &a);
            set(&mut store, a.out.bias.unwrap(), rand_tensor(&mut rng, &[c]));
            let (h, w) = (2 + trial % 4, 3 + trial % 3);
            let level = random_level(&mut rng, 1, h, w, c);
            let refs = Tensor::matrix(1, 2, vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).unwrap();
            let z = rand_tensor(&mut rng, &[1, c]);
            let mut g = Graph::with_params(&store);
            let lv = g.constant(level.features.clone());
            let (zv, rv) = (g.constant(z), g.constant(refs.clone()));
            let out = a.forward(&mut g, zv, rv, &[lv], &[level.dims()]).unwrap();
            let (px, py) = rescale_to_level(NormalizedPoint::new(refs.data()[0], refs.data()[1]), h, w);
            let x = bilinear_sample(&level, px, py);
            let vw = store.get(a.value).tensor.data();
            let ow = store.get(a.out.weight).tensor.data();
            let ob = store.get(a.out.bias.unwrap()).tensor.data();
            let inner: Vec<f64> = (0..c).map(|i| (0..c).map(|j| vw[i * c + j] * x[j]).sum()).collect();
            for i in 0..c {
                let expect = ob[i] + (0..c).map(|j| ow[i * c + j] * inner[j]).sum::<f64>();
                assert!((g.data(out.out)[i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn deformable_zero_pyramid_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", cfg(2, 2, 2, 4)).unwrap();
        let mut g = Graph::with_params(&store);
        let l1 = g.constant(Tensor::zeros(&[16, 4]));
        let l2 = g.constant(Tensor::zeros(&[4, 4]));
        let z = g.constant(rand_tensor(&mut rng, &[3, 4]));
        let r = g.constant(Tensor::full(&[3, 2], 0.4));
        let dims = [LevelDims { height: 4, width: 4 }, LevelDims { height: 2, width: 2 }];
        let out = a.forward(&mut g, z, r, &[l1, l2], &dims).unwrap();
        assert!(g.data(out.out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deformable_hand_weighted_sum() {
        // Two 2×2 levels, one head, two points each, zero offsets and zero
        // weight logits: all four samples weigh 0.25. Identity projections make
        // the output the plain average of the four bilinear samples.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", cfg(1, 2, 2, 1)).unwrap();
        zero_offsets(&mut store, &a);
        set(&mut store, a.value, Tensor::matrix(1, 1, vec![1.0]).unwrap());
        set(&mut store, a.out.weight, Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let mut g = Graph::with_params(&store);
        let l1 = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l2 = g.constant(Tensor::matrix(4, 1, vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let z = g.constant(Tensor::matrix(1, 1, vec![0.7]).unwrap());
        // Reference (0.25, 0.25) is the center of pixel (0, 0) on both levels.
        let r = g.constant(Tensor::matrix(1, 2, vec![0.25, 0.25]).unwrap());
        let d = LevelDims { height: 2, width: 2 };
        let out = a.forward(&mut g, z, r, &[l1, l2], &[d, d]).unwrap();
        assert!(g.data(out.weights).iter().all(|&w| (w - 0.25).abs() < 1e-15));
        // 0.25·(1 + 1 + 10 + 10) = 5.5
        assert!((g.data(out.out)[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn deformable_weights_normalized_for_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c = cfg(2, 3, 2, 4);
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", c).unwrap();
        set(&mut store, a.weights.weight, rand_tensor(&mut rng, &[12, 4]).map(|v| 3.0 * v));
        let mut g = Graph::with_params(&store);
        let z = g.constant(rand_tensor(&mut rng, &[50, 4]).map(|v| 5.0 * v));
        let r = g.constant(Tensor::full(&[50, 2], 0.5));
        let l1 = g.constant(rand_tensor(&mut rng, &[16, 4]));
        let l2 = g.constant(rand_tensor(&mut rng, &[4, 4]));
        let dims = [LevelDims { height: 4, width: 4 }, LevelDims { height: 2, width: 2 }];
        let out = a.forward(&mut g, z, r, &[l1, l2], &dims).unwrap();
        let grids = out.grids(&g, r, &c).unwrap();
        assert_eq!(grids.len(), 50);
    }

    #[test]
    fn sampling_locations_examples() {
        let d = LevelDims { height: 4, width: 4 };
        let mut off = Tensor::zeros(&[1, 1, 1, 2]);
        let w = Tensor::full(&[1, 1, 1], 1.0);
        let grid = SamplingGrid::new(NormalizedPoint::new(0.5, 0.5), off.clone(), w.clone()).unwrap();
        assert_eq!(grid.sampling_locations(&[d]).unwrap(), vec![(1.5, 1.5)]);
        off.data_mut()[0] = 1.0;
        let grid = SamplingGrid::new(NormalizedPoint::new(0.5, 0.5), off.clone(), w).unwrap();
        assert_eq!(grid.sampling_locations(&[d]).unwrap(), vec![(2.5, 1.5)]);

        // The same pixel offset spans twice the normalized distance on a level
        // with half the resolution.
        let two = Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let grid = SamplingGrid::new(NormalizedPoint::new(0.5, 0.5), two, Tensor::new(&[1, 2, 1], vec![0.5, 0.5]).unwrap())
            .unwrap();
        let fine = LevelDims { height: 8, width: 8 };
        let coarse = LevelDims { height: 4, width: 4 };
        let n = grid.normalized_locations(&[fine, coarse]).unwrap();
        assert!(((n[1].0 - 0.5) - 2.0 * (n[0].0 - 0.5)).abs() < 1e-12);

        let bad = SamplingGrid::new(
            NormalizedPoint::new(0.5, 0.5),
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::new(&[1, 1, 2], vec![0.7, 0.7]).unwrap(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn deformable_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let c = cfg(2, 2, 2, 4);
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", c).unwrap();
        set(&mut store, a.weights.weight, rand_tensor(&mut rng, &[8, 4]));
        set(&mut store, a.offsets.weight, rand_tensor(&mut rng, &[16, 4]).map(|v| 0.3 * v));
        let dims = [LevelDims { height: 4, width: 5 }, LevelDims { height: 2, width: 3 }];
        let l1 = rand_tensor(&mut rng, &[20, 4]);
        let l2 = rand_tensor(&mut rng, &[6, 4]);
        let z = rand_tensor(&mut rng, &[3, 4]);
        let r = Tensor::new(&[3, 2], vec![0.31, 0.47, 0.62, 0.23, 0.55, 0.71]).unwrap();
        let report = check_params(&store, 4, None, |g| {
            let (l1, l2) = (g.input(l1.clone()), g.input(l2.clone()));
            let (zv, rv) = (g.input(z.clone()), g.input(r.clone()));
            Ok(a.forward(g, zv, rv, &[l1, l2], &dims)?.out)
        })
        .unwrap();
        assert_eq!(report.len(), 7);
        assert!(report.iter().all(|(_, e)| *e <= 1e-4), "{report:?}");

        let errs = check_inputs(&store, &[l1, l2, z, r], 5, |g, v| {
            Ok(a.forward(g, v[2], v[3], &[v[0], v[1]], &dims)?.out)
        })
        .unwrap();
        assert!(errs.iter().all(|e| *e <= 1e-4), "{errs:?}");
    }

    /// Shifts a `[h·w, c]` map right/down by `(sx, sy)` pixels, zero fill.
    fn shift(t: &Tensor, h: usize, w: usize, sx: usize, sy: usize) -> Tensor {
        let c = t.shape()[1];
        let mut out = vec![0.0; t.len()];
        for y in 0..h - sy {
            for x in 0..w - sx {
                let src = (y * w + x) * c;
                let dst = ((y + sy) * w + x + sx) * c;
                out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
        Tensor::from_parts(vec![h * w, c], out)
    }

    #[test]
    fn translation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", cfg(2, 1, 2, 4)).unwrap();
        zero_offsets(&mut store, &a);
        set(&mut store, a.weights.weight, rand_tensor(&mut rng, &[4, 4]));
        let dims = [LevelDims { height: 8, width: 8 }, LevelDims { height: 4, width: 4 }];
        let l1 = rand_tensor(&mut rng, &[64, 4]);
        let l2 = rand_tensor(&mut rng, &[16, 4]);
        let z = rand_tensor(&mut rng, &[4, 4]);
        let refs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.3..0.5)).collect();
        let run = |l1: &Tensor, l2: &Tensor, refs: &[f64]| {
            let mut g = Graph::with_params(&store);
            let (a1, a2) = (g.constant(l1.clone()), g.constant(l2.clone()));
            let zv = g.constant(z.clone());
            let rv = g.constant(Tensor::matrix(4, 2, refs.to_vec()).unwrap());
            let out = a.forward(&mut g, zv, rv, &[a1, a2], &dims).unwrap();
            g.data(out.out).to_vec()
        };
        let base = run(&l1, &l2, &refs);
        // Two pixels at the fine level is one pixel at the coarse level: 0.25 normalized.
        let moved: Vec<f64> = refs.iter().map(|v| v + 0.25).collect();
        let shifted = run(&shift(&l1, 8, 8, 2, 2), &shift(&l2, 4, 4, 1, 1), &moved);
        for (x, y) in base.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn dual_entity_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = cfg(1, 1, 1, 2);
        let mut store = ParamStore::new();
        let de = DualEntityAttn::new(&mut store, &mut rng, "de", c).unwrap();
        zero_offsets(&mut store, &de.human);
        zero_offsets(&mut store, &de.object);
        // Tie the two paths.
        let pairs = [
            (de.project_h.weight, de.project_o.weight),
            (de.project_h.bias.unwrap(), de.project_o.bias.unwrap()),
            (de.human.value, de.object.value),
            (de.human.out.weight, de.object.out.weight),
        ];
        for (a, b) in pairs {
            let t = store.get(a).tensor.clone();
            set(&mut store, b, t);
        }
        let dims = [LevelDims { height: 4, width: 4 }];
        // Step function: left half 0, right half 1 in channel 0.
        let step: Vec<f64> = (0..16).flat_map(|i| [if i % 4 >= 2 { 1.0 } else { 0.0 }, 0.0]).collect();
        let run = |level: Vec<f64>, rh: [f64; 2], ro: [f64; 2]| {
            let mut g = Graph::with_params(&store);
            let l = g.constant(Tensor::matrix(16, 2, level).unwrap());
            let z = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap());
            let h = g.constant(Tensor::matrix(1, 2, rh.to_vec()).unwrap());
            let o = g.constant(Tensor::matrix(1, 2, ro.to_vec()).unwrap());
            let out = de.forward(&mut g, z, h, o, &[l], &dims).unwrap();
            (g.data(out.human.out).to_vec(), g.data(out.object.out).to_vec())
        };
        let (fh, fo) = run(step.clone(), [0.4, 0.4], [0.4, 0.4]);
        assert_eq!(fh, fo);
        let (fh, fo) = run(vec![0.0; 32], [0.1, 0.2], [0.8, 0.9]);
        assert!(fh.iter().chain(&fo).all(|&v| v == 0.0));
        // Anchors on opposite sides of the step see 0 and 1 respectively.
        let (fh, fo) = run(step, [0.125, 0.5], [0.875, 0.5]);
        let vw = store.get(de.human.value).tensor.data().to_vec();
        let ow = store.get(de.human.out.weight).tensor.data().to_vec();
        let unit: Vec<f64> = (0..2).map(|i| (0..2).map(|j| ow[i * 2 + j] * vw[j * 2]).sum()).collect();
        for i in 0..2 {
            assert!(fh[i].abs() < 1e-12);
            assert!((fo[i] - unit[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn context_reference_is_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ctx = ContextAttn::new(&mut store, &mut rng, "ctx", cfg(2, 2, 1, 4)).unwrap();
        let mut g = Graph::with_params(&store);
        let l = g.constant(rand_tensor(&mut rng, &[16, 4]));
        let z = g.constant(rand_tensor(&mut rng, &[3, 4]));
        let h = g.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 0.3, 0.3, 0.2, 0.9]).unwrap());
        let o = g.constant(Tensor::matrix(3, 2, vec![1.0, 1.0, 0.3, 0.3, 0.6, 0.1]).unwrap());
        let out = ctx.forward(&mut g, z, h, o, &[l], &[LevelDims { height: 4, width: 4 }]).unwrap();
        assert_eq!(g.data(out.refs), &[0.5, 0.5, 0.3, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn context_gradient_through_midpoint_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ctx = ContextAttn::new(&mut store, &mut rng, "ctx", cfg(2, 2, 1, 4)).unwrap();
        let level = rand_tensor(&mut rng, &[30, 4]);
        let dims = [LevelDims { height: 5, width: 6 }];
        let z = rand_tensor(&mut rng, &[1, 4]);
        let r = rand_tensor(&mut rng, &[1, 4]);
        let (h, o) = ([0.33, 0.41], [0.58, 0.64]);
        let project = |out: &[f64]| out.iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
        let through_h = |hx: f64| {
            let mut g = Graph::with_params(&store);
            let l = g.constant(level.clone());
            let zv = g.constant(z.clone());
            let hv = g.constant(Tensor::matrix(1, 2, vec![hx, h[1]]).unwrap());
            let ov = g.constant(Tensor::matrix(1, 2, o.to_vec()).unwrap());
            let out = ctx.forward(&mut g, zv, hv, ov, &[l], &dims).unwrap().attn.out;
            project(g.data(out))
        };
        let through_c = |cx: f64| {
            let mut g = Graph::with_params(&store);
            let l = g.constant(level.clone());
            let zv = g.constant(z.clone());
            let cv = g.constant(Tensor::matrix(1, 2, vec![cx, (h[1] + o[1]) / 2.0]).unwrap());
            let out = ctx.attn.forward(&mut g, zv, cv, &[l], &dims).unwrap().out;
            project(g.data(out))
        };
        let dh = finite_diff_grad(|t| through_h(t.data()[0]), &Tensor::vector(&[h[0]]), DEFAULT_STEP).data()[0];
        let dc = finite_diff_grad(|t| through_c(t.data()[0]), &Tensor::vector(&[(h[0] + o[0]) / 2.0]), DEFAULT_STEP)
            .data()[0];
        assert!(dc.abs() > 1e-3);
        assert!(relative_error(&[dh], &[0.5 * dc]) < 1e-6, "{dh} vs {dc}");

        // Reverse mode agrees.
        let mut g = Graph::with_params(&store);
        let l = g.constant(level.clone());
        let zv = g.constant(z.clone());
        let hv = g.input(Tensor::matrix(1, 2, h.to_vec()).unwrap());
        let ov = g.constant(Tensor::matrix(1, 2, o.to_vec()).unwrap());
        let out = ctx.forward(&mut g, zv, hv, ov, &[l], &dims).unwrap();
        let rv = g.constant(r.clone());
        let p = g.mul(out.attn.out, rv).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(relative_error(&[grads.wrt(hv).unwrap()[0]], &[dh]) < 1e-6);
    }
}
