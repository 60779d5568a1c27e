//! A tiny bidirectional transformer over `S ∪ {MASK}` with seeded random
//! weights. It serves as a realistic [`ProductModel`] and as the test bed for
//! partial key/value caching.
//!
//! Weights are kept in `f64`; [`Nanoformer<F>`] casts them once to the
//! working precision `F` (`f64` or `f32`).

use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cts::MaskState;
use crate::dist::{Categorical, ProductModel};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const PARAMS_FORMAT: &str = "mdsampler-params";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NanoConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    /// `|S|`; the vocabulary has one extra MASK token.
    pub alphabet: usize,
    pub seq_len: usize,
    /// Add seeded positional embeddings. Without them the network is
    /// equivariant to permutations of the positions.
    pub positional: bool,
    /// Multiplies the output projection, controlling how peaked the
    /// conditionals are.
    pub logit_scale: f64,
}

impl Default for NanoConfig {
    fn default() -> Self {
        Self { layers: 2, d_model: 32, d_k: 16, d_ff: 64, alphabet: 16, seq_len: 32, positional: true, logit_scale: 2.0 }
    }
}

impl NanoConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("alphabet", self.alphabet),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("transformer dimension {name} must be at least 1")));
        }
        if !self.logit_scale.is_finite() {
            return Err(Error::Argument("logit_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.alphabet + 1
    }

    pub fn mask_token(&self) -> usize {
        self.alphabet
    }
}

/// Row-major matrix; a vector times it maps `rows` inputs to `cols` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Float> Matrix<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · self`.
    fn apply(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![F::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (yc, &w) in y.iter_mut().zip(self.row(r)) {
                *yc = *yc + xr * w;
            }
        }
        y
    }

    fn cast<G: Float>(&self) -> Matrix<G> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| cast(v)).collect() }
    }
}

fn cast<F: Float, G: Float>(v: F) -> G {
    G::from(v).expect("finite weights are representable")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Matrix<F>,
    pub wk: Matrix<F>,
    pub wv: Matrix<F>,
    pub wo: Matrix<F>,
    pub w1: Matrix<F>,
    pub b1: Vec<F>,
    pub w2: Matrix<F>,
    pub b2: Vec<F>,
}

impl<F: Float> LayerParams<F> {
    fn cast<G: Float>(&self) -> LayerParams<G> {
        LayerParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            w1: self.w1.cast(),
            b1: self.b1.iter().map(|&v| cast(v)).collect(),
            w2: self.w2.cast(),
            b2: self.b2.iter().map(|&v| cast(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub seed: u64,
    pub config: NanoConfig,
    pub embed: Matrix<f64>,
    pub positional: Option<Matrix<f64>>,
    pub layers: Vec<LayerParams<f64>>,
    pub w_out: Matrix<f64>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Matrix { rows, cols, data }
}

/// Bound of a uniform law with variance `1 / fan_in`.
fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsHeader {
    format: String,
    version: u32,
    seed: u64,
    dtype: String,
    config: NanoConfig,
    tensors: Vec<TensorHeader>,
}

impl TransformerParams {
    /// Seeded scaled-uniform initialization. The draw order is fixed, so the
    /// weights are a pure function of `(seed, config)`.
    pub fn init(seed: u64, config: NanoConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = uniform_matrix(&mut rng, config.vocab(), d, 3f64.sqrt());
        let positional = config.positional.then(|| uniform_matrix(&mut rng, config.seq_len, d, 3f64.sqrt()));
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: uniform_matrix(&mut rng, d, config.d_k, fan_in_bound(d)),
                wk: uniform_matrix(&mut rng, d, config.d_k, fan_in_bound(d)),
                wv: uniform_matrix(&mut rng, d, config.d_k, fan_in_bound(d)),
                wo: uniform_matrix(&mut rng, config.d_k, d, fan_in_bound(config.d_k)),
                w1: uniform_matrix(&mut rng, d, config.d_ff, fan_in_bound(d)),
                b1: uniform_matrix(&mut rng, 1, config.d_ff, 0.1).data,
                w2: uniform_matrix(&mut rng, config.d_ff, d, fan_in_bound(config.d_ff)),
                b2: uniform_matrix(&mut rng, 1, d, 0.1).data,
            })
            .collect();
        let w_out = uniform_matrix(&mut rng, d, config.alphabet, config.logit_scale * fan_in_bound(d));
        Ok(Self { seed, config, embed, positional, layers, w_out })
    }

    /// Tensors in serialization order.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat(name: String, m: &Matrix<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, vec![m.rows, m.cols], m.data.as_slice())
        }
        out.push(mat("embed".into(), &self.embed));
        if let Some(p) = &self.positional {
            out.push(mat("positional".into(), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(mat(format!("layer{l}.wq"), &layer.wq));
            out.push(mat(format!("layer{l}.wk"), &layer.wk));
            out.push(mat(format!("layer{l}.wv"), &layer.wv));
            out.push(mat(format!("layer{l}.wo"), &layer.wo));
            out.push(mat(format!("layer{l}.w1"), &layer.w1));
            out.push((format!("layer{l}.b1"), vec![layer.b1.len()], layer.b1.as_slice()));
            out.push(mat(format!("layer{l}.w2"), &layer.w2));
            out.push((format!("layer{l}.b2"), vec![layer.b2.len()], layer.b2.as_slice()));
        }
        out.push(mat("w_out".into(), &self.w_out));
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|((_, _, a), (_, _, b))| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// One JSON header line, then every tensor as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self.tensors();
        let header = ParamsHeader {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            seed: self.seed,
            dtype: "f64".into(),
            config: self.config,
            tensors: tensors.iter().map(|(name, shape, _)| TensorHeader { name: name.clone(), shape: shape.clone() }).collect(),
        };
        w.write_all(serde_json::to_string(&header)?.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, _, data) in &tensors {
            for v in *data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("params blob has no header line".into()))?;
        let header: ParamsHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != PARAMS_FORMAT || header.version != PARAMS_VERSION || header.dtype != "f64" {
            return Err(Error::Format(format!(
                "unsupported params blob {} v{} ({})",
                header.format, header.version, header.dtype
            )));
        }
        // Rebuild the layout from the config and check it against the header.
        let mut params = Self::init(header.seed, header.config)?;
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let found: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if expected != found {
            return Err(Error::Format("tensor list does not match the configuration".into()));
        }
        let body = &bytes[split + 1..];
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(Error::Format(format!("expected {} data bytes, found {}", total * 8, body.len())));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        if values.clone().any(|v| !v.is_finite()) {
            return Err(Error::Format("params contain non-finite values".into()));
        }
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = values.next().expect("length checked"));
        fill(&mut params.embed.data);
        if let Some(p) = &mut params.positional {
            fill(&mut p.data);
        }
        for layer in &mut params.layers {
            fill(&mut layer.wq.data);
            fill(&mut layer.wk.data);
            fill(&mut layer.wv.data);
            fill(&mut layer.wo.data);
            fill(&mut layer.w1.data);
            fill(&mut layer.b1);
            fill(&mut layer.w2.data);
            fill(&mut layer.b2);
        }
        fill(&mut params.w_out.data);
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Keys and values of every layer at all `D` positions, bound to the state
/// that produced them.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    fingerprint: u64,
    /// Per layer, `D × d_k`.
    keys: Vec<Matrix<F>>,
    values: Vec<Matrix<F>>,
}

impl<F> KvCache<F> {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// Logits at every position from a full forward pass.
#[derive(Debug, Clone)]
pub struct FullOutput<F> {
    /// `D × |S|`.
    pub logits: Matrix<F>,
    pub attention_flops: u64,
}

/// Logits at the refreshed positions `B = I ∖ A` from a partial pass.
#[derive(Debug, Clone)]
pub struct PartialOutput<F> {
    /// Sorted ascending.
    pub positions: Vec<usize>,
    /// One row per entry of `positions`.
    pub logits: Matrix<F>,
    pub attention_flops: u64,
}

/// The transformer at working precision `F`.
#[derive(Debug, Clone)]
pub struct Nanoformer<F> {
    config: NanoConfig,
    embed: Matrix<F>,
    positional: Option<Matrix<F>>,
    layers: Vec<LayerParams<F>>,
    w_out: Matrix<F>,
}

fn layer_norm<F: Float>(x: &[F]) -> Vec<F> {
    let n: F = cast(x.len() as f64);
    let mean = x.iter().fold(F::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let inv = (var + cast(LAYER_NORM_EPS)).sqrt().recip();
    x.iter().map(|&v| (v - mean) * inv).collect()
}

impl<F: Float> Nanoformer<F> {
    pub fn new(params: TransformerParams) -> Self {
        Self::from_params(&params)
    }

    pub fn from_params(params: &TransformerParams) -> Self {
        Self {
            config: params.config,
            embed: params.embed.cast(),
            positional: params.positional.as_ref().map(Matrix::cast),
            layers: params.layers.iter().map(LayerParams::cast).collect(),
            w_out: params.w_out.cast(),
        }
    }

    pub fn config(&self) -> &NanoConfig {
        &self.config
    }

    pub fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    /// Attention cost of one query at one layer: `QKᵀ` and the weighted sum
    /// over `D` keys, each `2 d_k D` multiply-adds.
    pub fn attention_flops_per_query(&self) -> u64 {
        4 * (self.config.d_k * self.config.seq_len) as u64
    }

    fn input(&self, state: &MaskState, i: usize) -> Vec<F> {
        let token = state.token(i).unwrap_or(self.config.mask_token());
        let mut x = self.embed.row(token).to_vec();
        if let Some(p) = &self.positional {
            x.iter_mut().zip(p.row(i)).for_each(|(a, &b)| *a = *a + b);
        }
        x
    }

    fn check_state(&self, state: &MaskState) -> Result<()> {
        if state.seq_len() != self.config.seq_len {
            return Err(Error::Argument(format!(
                "state has {} positions, model has {}",
                state.seq_len(),
                self.config.seq_len
            )));
        }
        if let Some(t) = state.tokens().iter().flatten().find(|&&t| t >= self.config.alphabet) {
            return Err(Error::Argument(format!("token {t} outside alphabet of size {}", self.config.alphabet)));
        }
        Ok(())
    }

    /// Attention for one query over all `D` keys, summed in position order.
    fn attend(&self, q: &[F], keys: &Matrix<F>, values: &Matrix<F>) -> Vec<F> {
        let scale = cast::<f64, F>(self.config.d_k as f64).sqrt().recip();
        let scores: Vec<F> = (0..keys.rows)
            .map(|j| q.iter().zip(keys.row(j)).fold(F::zero(), |a, (&x, &y)| a + x * y) * scale)
            .collect();
        let max = scores.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let weights: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total = weights.iter().fold(F::zero(), |a, &b| a + b);
        let mut out = vec![F::zero(); values.cols];
        for (j, &w) in weights.iter().enumerate() {
            let w = w / total;
            out.iter_mut().zip(values.row(j)).for_each(|(o, &v)| *o = *o + w * v);
        }
        out
    }

    /// Residual updates of one layer at `positions`, given the layer's
    /// normalized inputs there and the full key/value matrices.
    fn layer_update(&self, layer: &LayerParams<F>, x: &mut [Vec<F>], normed: &[Vec<F>], keys: &Matrix<F>, values: &Matrix<F>) {
        for (xi, hi) in x.iter_mut().zip(normed) {
            let q = layer.wq.apply(hi);
            let attn = layer.wo.apply(&self.attend(&q, keys, values));
            xi.iter_mut().zip(&attn).for_each(|(a, &b)| *a = *a + b);
            let h2 = layer_norm(xi);
            let mut hidden = layer.w1.apply(&h2);
            hidden.iter_mut().zip(&layer.b1).for_each(|(h, &b)| *h = (*h + b).max(F::zero()));
            let ff = layer.w2.apply(&hidden);
            xi.iter_mut().zip(ff.iter().zip(&layer.b2)).for_each(|(a, (&f, &b))| *a = *a + f + b);
        }
    }

    fn project(&self, x: &[Vec<F>]) -> Matrix<F> {
        let mut logits = Matrix::zeros(x.len(), self.config.alphabet);
        for (r, xi) in x.iter().enumerate() {
            logits.row_mut(r).copy_from_slice(&self.w_out.apply(&layer_norm(xi)));
        }
        logits
    }

    /// Runs every layer at all `D` positions. Returns logits for all
    /// positions and the per-layer keys/values.
    pub fn full_forward(&self, state: &MaskState) -> (FullOutput<F>, KvCache<F>) {
        self.check_state(state).expect("state compatible with the model");
        let d = self.config.seq_len;
        let mut x: Vec<Vec<F>> = (0..d).map(|i| self.input(state, i)).collect();
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let normed: Vec<Vec<F>> = x.iter().map(|xi| layer_norm(xi)).collect();
            let mut k = Matrix::zeros(d, self.config.d_k);
            let mut v = Matrix::zeros(d, self.config.d_k);
            for (i, h) in normed.iter().enumerate() {
                k.row_mut(i).copy_from_slice(&layer.wk.apply(h));
                v.row_mut(i).copy_from_slice(&layer.wv.apply(h));
            }
            self.layer_update(layer, &mut x, &normed, &k, &v);
            keys.push(k);
            values.push(v);
        }
        let flops = self.attention_flops_per_query() * (d * self.layers.len()) as u64;
        (
            FullOutput { logits: self.project(&x), attention_flops: flops },
            KvCache { fingerprint: state.fingerprint(), keys, values },
        )
    }

    /// Re-runs the network only at `set = I`, with `committed` tokens filled
    /// in on `A ⊆ I` and MASK on `B = I ∖ A`. Keys and values outside `I`
    /// come from `cache`, which must have been computed from `state`.
    pub fn partial_forward(
        &self,
        cache: &KvCache<F>,
        state: &MaskState,
        set: &[usize],
        committed: &[(usize, usize)],
    ) -> Result<PartialOutput<F>> {
        self.check_state(state)?;
        if cache.fingerprint != state.fingerprint() || cache.keys.len() != self.layers.len() {
            return Err(Error::CacheInvalid("cache was computed from a different state".into()));
        }
        let mut sorted = set.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("refresh set has duplicate positions".into()));
        }
        if let Some(&i) = sorted.iter().find(|&&i| i >= state.seq_len() || !state.is_masked(i)) {
            return Err(Error::Argument(format!("refresh position {i} is not masked")));
        }
        if let Some(&(i, _)) = committed.iter().find(|(i, _)| sorted.binary_search(i).is_err()) {
            return Err(Error::Argument(format!("committed position {i} is outside the refresh set")));
        }
        let inner = state.with(committed)?;
        self.check_state(&inner)?;

        let mut x: Vec<Vec<F>> = sorted.iter().map(|&i| self.input(&inner, i)).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<F>> = x.iter().map(|xi| layer_norm(xi)).collect();
            let mut k = cache.keys[l].clone();
            let mut v = cache.values[l].clone();
            for (&i, h) in sorted.iter().zip(&normed) {
                k.row_mut(i).copy_from_slice(&layer.wk.apply(h));
                v.row_mut(i).copy_from_slice(&layer.wv.apply(h));
            }
            self.layer_update(layer, &mut x, &normed, &k, &v);
        }
        let keep: Vec<usize> = (0..sorted.len()).filter(|&r| inner.is_masked(sorted[r])).collect();
        let kept: Vec<Vec<F>> = keep.iter().map(|&r| x[r].clone()).collect();
        Ok(PartialOutput {
            positions: keep.iter().map(|&r| sorted[r]).collect(),
            logits: self.project(&kept),
            attention_flops: self.attention_flops_per_query() * (sorted.len() * self.layers.len()) as u64,
        })
    }

    fn categorical(row: &[F]) -> Result<Categorical> {
        Categorical::from_logits(&row.iter().map(|&v| cast::<F, f64>(v)).collect::<Vec<_>>())
    }

    /// Conditionals at `positions` (ascending) from a full forward.
    pub fn conditionals_from(&self, full: &FullOutput<F>, positions: &[usize]) -> Result<Vec<(usize, Categorical)>> {
        positions.iter().map(|&i| Ok((i, Self::categorical(full.logits.row(i))?))).collect()
    }

    pub fn conditionals_from_partial(&self, partial: &PartialOutput<F>) -> Result<Vec<(usize, Categorical)>> {
        partial
            .positions
            .iter()
            .enumerate()
            .map(|(r, &i)| Ok((i, Self::categorical(partial.logits.row(r))?)))
            .collect()
    }

    /// Logits as `f64`, one row per position.
    pub fn logits(&self, state: &MaskState) -> Vec<Vec<f64>> {
        let (full, _) = self.full_forward(state);
        (0..full.logits.rows).map(|r| full.logits.row(r).iter().map(|&v| cast(v)).collect()).collect()
    }
}

impl<F: Float + Send + Sync> ProductModel for Nanoformer<F> {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn alphabet_size(&self) -> usize {
        self.config.alphabet
    }

    fn conditional(&self, state: &MaskState, i: usize) -> Result<Categorical> {
        self.check_state(state)?;
        if i >= self.config.seq_len || !state.is_masked(i) {
            return Err(Error::Argument(format!("position {i} is not masked")));
        }
        let (full, _) = self.full_forward(state);
        Self::categorical(full.logits.row(i))
    }

    fn masked_conditionals(&self, state: &MaskState) -> Result<Vec<(usize, Categorical)>> {
        self.check_state(state)?;
        let (full, _) = self.full_forward(state);
        self.conditionals_from(&full, &state.masked())
    }
}

/// Max-abs logit gap between two row sets over matching positions.
pub fn max_abs_logit_gap<F: Float>(a: &Matrix<F>, b_rows: &[Vec<F>]) -> f64 {
    b_rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| a.row(r).iter().zip(row).map(|(&x, &y)| cast::<F, f64>((x - y).abs())).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn small(layers: usize) -> NanoConfig {
        NanoConfig { layers, d_model: 16, d_k: 8, d_ff: 24, alphabet: 6, seq_len: 10, ..NanoConfig::default() }
    }

    fn random_state(d: usize, s: usize, rng: &mut ChaCha8Rng) -> MaskState {
        let frac = rng.random::<f64>();
        MaskState::from_tokens((0..d).map(|_| (rng.random::<f64>() < frac).then(|| rng.random_range(0..s))).collect())
    }

    fn rows<F: Float>(m: &Matrix<F>, positions: &[usize]) -> Vec<Vec<F>> {
        positions.iter().map(|&i| m.row(i).to_vec()).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerParams::init(3, NanoConfig::default()).unwrap();
        let b = TransformerParams::init(3, NanoConfig::default()).unwrap();
        let c = TransformerParams::init(4, NanoConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
        assert!(TransformerParams::init(0, NanoConfig { d_k: 0, ..NanoConfig::default() }).is_err());
    }

    #[test]
    fn default_config_runs() {
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(0, NanoConfig::default()).unwrap());
        let conds = model.masked_conditionals(&MaskState::new(32)).unwrap();
        assert_eq!(conds.len(), 32);
        for (_, c) in &conds {
            assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let single: Nanoformer<f32> = Nanoformer::new(TransformerParams::init(0, NanoConfig::default()).unwrap());
        let (full, _) = single.full_forward(&MaskState::new(32));
        for r in 0..32 {
            let row = full.logits.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            let total: f32 = row.iter().map(|&v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_states_identical_outputs() {
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(1, small(2)).unwrap());
        let s = MaskState::from_tokens(vec![Some(1), None, None, Some(4), None, None, None, Some(0), None, None]);
        assert_eq!(model.logits(&s), model.logits(&s.clone()));
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let cfg = NanoConfig { positional: false, seq_len: 4, ..small(2) };
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(2, cfg).unwrap());
        let s = MaskState::from_tokens(vec![Some(3), None, Some(1), None]);
        let perm = [2, 0, 3, 1];
        let permuted = MaskState::from_tokens(perm.iter().map(|&p| s.token(p)).collect());
        let a = model.logits(&s);
        let b = model.logits(&permuted);
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in b[new].iter().zip(&a[old]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refresh_without_commits_reproduces_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for layers in 1..=3 {
            let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(layers as u64, small(layers)).unwrap());
            for _ in 0..10 {
                let state = random_state(10, 6, &mut rng);
                let mut masked = state.masked();
                if masked.is_empty() {
                    continue;
                }
                masked.shuffle(&mut rng);
                let set: Vec<usize> = masked[..rng.random_range(1..=masked.len())].to_vec();
                let (full, cache) = model.full_forward(&state);
                let part = model.partial_forward(&cache, &state, &set, &[]).unwrap();
                let gap = max_abs_logit_gap(&part.logits, &rows(&full.logits, &part.positions));
                assert!(gap <= 1e-12, "L={layers} gap {gap}");
            }
        }
    }

    #[test]
    fn single_layer_refresh_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(5, small(1)).unwrap());
        for _ in 0..20 {
            let state = random_state(10, 6, &mut rng);
            let mut masked = state.masked();
            if masked.len() < 2 {
                continue;
            }
            masked.shuffle(&mut rng);
            let set = &masked[..rng.random_range(2..=masked.len())];
            let a_len = rng.random_range(1..set.len());
            let committed: Vec<(usize, usize)> = set[..a_len].iter().map(|&i| (i, rng.random_range(0..6))).collect();
            let (_, cache) = model.full_forward(&state);
            let part = model.partial_forward(&cache, &state, set, &committed).unwrap();
            let (fresh, _) = model.full_forward(&state.with(&committed).unwrap());
            let gap = max_abs_logit_gap(&part.logits, &rows(&fresh.logits, &part.positions));
            assert!(gap <= 1e-12, "gap {gap}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(5, small(2)).unwrap());
        let s = MaskState::new(10);
        let (_, cache) = model.full_forward(&s);
        let other = s.with(&[(0, 1)]).unwrap();
        assert!(matches!(model.partial_forward(&cache, &other, &[1, 2], &[]), Err(Error::CacheInvalid(_))));
        assert!(model.partial_forward(&cache, &s, &[1, 2], &[(3, 0)]).is_err());
    }

    #[test]
    fn flop_accounting() {
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(5, small(3)).unwrap());
        let s = MaskState::new(10);
        let (full, cache) = model.full_forward(&s);
        let part = model.partial_forward(&cache, &s, &[1, 4, 7, 8], &[(4, 2)]).unwrap();
        let ratio = (full.attention_flops + part.attention_flops) as f64 / full.attention_flops as f64;
        assert!((ratio - (1.0 + 4.0 / 10.0)).abs() < 1e-12);
        assert_eq!(part.positions, vec![1, 7, 8]);
    }

    #[test]
    fn params_blob_round_trip() {
        let p = TransformerParams::init(9, small(2)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..header_end]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["seed"], 9);
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([7, 16]));
        assert_eq!(TransformerParams::read_from(buf.as_slice()).unwrap(), p);
        buf.pop();
        assert!(matches!(TransformerParams::read_from(buf.as_slice()), Err(Error::Format(_))));
    }
}
