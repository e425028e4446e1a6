//! One-stream tracker: patch embedding of template and search crops, a
//! pre-norm transformer encoder, the per-domain token adapter and a
//! convolutional localization head.

mod checkpoint;
mod dca;
mod encoder;
mod head;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dca::{adapter_prefix, bank_attention, dca_forward, init_adapter, DcaOutput};
pub use encoder::{encode, patch_embed};
pub use head::{head_forward, update_running_stats, BnMode, BnStat, HeadOutput};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{BBox, DomainTag, Frame, HeadGeometry};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParameterSet, Tape, Tensor, Var};
use crate::tca::{argmax_cell, Cell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            template_size: 32,
            search_size: 64,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch_size).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.grid().pow(2)
    }

    /// Side of the search token grid.
    pub fn grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.template_size % p != 0 || self.search_size % p != 0 || self.template_size == 0 {
            return Err(Error::Config(format!(
                "crop sizes {}/{} must be multiples of patch size {p}",
                self.template_size, self.search_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Trunk width.
    pub channels: usize,
    pub layers: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            layers: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bank_tokens: usize,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bank_tokens: 8,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub adapter: AdapterConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.channels == 0 || self.adapter.bank_tokens == 0 {
            return Err(Error::Config("head channels and bank size must be positive".into()));
        }
        if !(self.head.bn_momentum > 0.0 && self.head.bn_momentum <= 1.0 && self.head.bn_eps > 0.0) {
            return Err(Error::Config(format!("bad batch-norm settings {:?}", self.head)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn geometry(&self) -> HeadGeometry {
        HeadGeometry {
            search_size: self.encoder.search_size,
            grid: self.encoder.grid(),
            ..HeadGeometry::default()
        }
    }
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Fresh backbone and head. Batch-norm running statistics are stored as
/// frozen entries and refreshed outside the optimizer.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let (c, p) = (e.embed_dim, e.patch_size);
    let hidden = c * e.mlp_ratio;
    let mut ps = ParameterSet::new();
    ps.insert("backbone.patch.w", gaussian(&[c, 3, p, p], (1.0 / (3 * p * p) as f64).sqrt(), rng))?;
    ps.insert("backbone.patch.b", Tensor::zeros(&[c]))?;
    ps.insert("backbone.pos_z", gaussian(&[e.template_tokens(), c], 0.02, rng))?;
    ps.insert("backbone.pos_x", gaussian(&[e.search_tokens(), c], 0.02, rng))?;
    let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    for i in 0..e.depth {
        let b = format!("backbone.block{i}");
        for ln in ["ln1", "ln2"] {
            ps.insert(format!("{b}.{ln}.g"), Tensor::ones(&[c]))?;
            ps.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[c]))?;
        }
        ps.insert(format!("{b}.attn.qkv.w"), gaussian(&[c, 3 * c], lin(c), rng))?;
        ps.insert(format!("{b}.attn.qkv.b"), Tensor::zeros(&[3 * c]))?;
        ps.insert(format!("{b}.attn.proj.w"), gaussian(&[c, c], 0.5 * lin(c), rng))?;
        ps.insert(format!("{b}.attn.proj.b"), Tensor::zeros(&[c]))?;
        ps.insert(format!("{b}.mlp.fc1.w"), gaussian(&[c, hidden], lin(c), rng))?;
        ps.insert(format!("{b}.mlp.fc1.b"), Tensor::zeros(&[hidden]))?;
        ps.insert(format!("{b}.mlp.fc2.w"), gaussian(&[hidden, c], 0.5 * lin(hidden), rng))?;
        ps.insert(format!("{b}.mlp.fc2.b"), Tensor::zeros(&[c]))?;
    }
    let h = &cfg.head;
    let mut cin = c;
    for i in 0..h.layers {
        let t = format!("head.trunk{i}");
        ps.insert(format!("{t}.w"), gaussian(&[h.channels, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), rng))?;
        ps.insert(format!("{t}.bn.g"), Tensor::ones(&[h.channels]))?;
        ps.insert(format!("{t}.bn.b"), Tensor::zeros(&[h.channels]))?;
        ps.insert(format!("{t}.bn.mean"), Tensor::zeros(&[h.channels]))?;
        ps.insert(format!("{t}.bn.var"), Tensor::ones(&[h.channels]))?;
        ps.freeze(&format!("{t}.bn.mean"))?;
        ps.freeze(&format!("{t}.bn.var"))?;
        cin = h.channels;
    }
    // initial score ~0.1, size ~0.25 of the search side
    for (name, out, bias) in [("score", 1, -2.2), ("offset", 2, 0.0), ("size", 2, -1.1)] {
        ps.insert(format!("head.{name}.w"), gaussian(&[out, cin, 3, 3], 0.1 * lin(9 * cin), rng))?;
        ps.insert(format!("head.{name}.b"), Tensor::full(&[out], bias))?;
    }
    Ok(ps)
}

/// Score, offset and size maps of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    /// `[N, H', W']` in (0, 1).
    pub scores: Tensor,
    /// `[N, 2, H', W']` sub-cell `(x, y)` residuals.
    pub offsets: Tensor,
    /// `[N, 2, H', W']` `(w, h)` as a fraction of the search side.
    pub sizes: Tensor,
}

impl ResponseMap {
    pub fn len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.scores.shape();
        (s[1], s[2])
    }

    pub fn score_grid(&self, i: usize) -> &[f64] {
        let (h, w) = self.grid();
        &self.scores.data()[i * h * w..(i + 1) * h * w]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResponseVars<'t> {
    pub scores: Var<'t>,
    pub offsets: Var<'t>,
    pub sizes: Var<'t>,
}

impl<'t> ResponseVars<'t> {
    pub fn value(&self) -> ResponseMap {
        ResponseMap {
            scores: self.scores.value(),
            offsets: self.offsets.value(),
            sizes: self.sizes.value(),
        }
    }
}

/// A decoded prediction in search-crop pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub cell: Cell,
    pub score: f64,
}

/// Box at the highest-scoring cell (first flat index on ties).
pub fn decode_box(resp: &ResponseMap, i: usize, geom: &HeadGeometry) -> Decoded {
    let (h, w) = resp.grid();
    let grid = resp.score_grid(i);
    let cell = argmax_cell(grid, w);
    let at = |t: &Tensor, k: usize| t.get(&[i, k, cell.row, cell.col]);
    let s = geom.stride();
    let size = geom.search_size as f64;
    debug_assert_eq!(h * w, grid.len());
    Decoded {
        bbox: BBox::new(
            (cell.col as f64 + at(&resp.offsets, 0)) * s,
            (cell.row as f64 + at(&resp.offsets, 1)) * s,
            at(&resp.sizes, 0) * size,
            at(&resp.sizes, 1) * size,
        ),
        cell,
        score: grid[cell.flat(w)],
    }
}

/// Normalized `(cx, cy, w, h)` predicted for each `(sample, cell)` pick,
/// as an `[M, 4]` tape value.
pub fn boxes_at<'t>(resp: &ResponseVars<'t>, picks: &[(usize, Cell)], geom: &HeadGeometry) -> Result<Var<'t>> {
    let shape = resp.offsets.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if picks.is_empty() || picks.iter().any(|(i, c)| *i >= n || c.row >= h || c.col >= w) {
        return Err(Error::Dimension(format!("invalid box picks for {n} samples of {h}x{w}")));
    }
    let m = picks.len();
    let tape = resp.offsets.tape();
    let idx = |k: usize| -> Vec<usize> { picks.iter().map(|(i, c)| ((i * 2 + k) * h + c.row) * w + c.col).collect() };
    let unit = geom.stride() / geom.search_size as f64;
    let offsets = resp.offsets.flatten()?;
    let sizes = resp.sizes.flatten()?;
    let cols = tape.constant(Tensor::new(&[m], picks.iter().map(|(_, c)| c.col as f64).collect())?)?;
    let rows = tape.constant(Tensor::new(&[m], picks.iter().map(|(_, c)| c.row as f64).collect())?)?;
    let cx = offsets.take(&idx(0))?.add(cols)?.scale(unit)?;
    let cy = offsets.take(&idx(1))?.add(rows)?.scale(unit)?;
    let bw = sizes.take(&idx(0))?;
    let bh = sizes.take(&idx(1))?;
    let parts: Vec<Var<'t>> = [cx, cy, bw, bh].iter().map(|v| v.reshape(&[m, 1])).collect::<Result<_>>()?;
    Var::concat(&parts, 1)
}

/// Score maps of the selected samples, `[M, H', W']`.
pub fn scores_of<'t>(resp: &ResponseVars<'t>, samples: &[usize]) -> Result<Var<'t>> {
    let shape = resp.scores.shape();
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if samples.iter().any(|&i| i >= n) {
        return Err(Error::Dimension(format!("sample index out of range for {n}")));
    }
    if samples.len() == n && samples.iter().enumerate().all(|(k, &i)| k == i) {
        return Ok(resp.scores);
    }
    let idx: Vec<usize> = samples.iter().flat_map(|&i| i * h * w..(i + 1) * h * w).collect();
    resp.scores.flatten()?.take(&idx)?.reshape(&[samples.len(), h, w])
}

pub struct ForwardOutput<'t> {
    pub resp: ResponseVars<'t>,
    pub bn_stats: Vec<BnStat>,
}

/// Full tracker forward on `[N, 3, Hz, Wz]` templates and `[N, 3, Hx, Wx]`
/// search crops, optionally with the adapter stored under `adapter`.
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    template: Var<'t>,
    search: Var<'t>,
    adapter: Option<&str>,
    mode: BnMode,
) -> Result<ForwardOutput<'t>> {
    let tokens = match adapter {
        Some(prefix) => Some(dca_forward(cfg, p, prefix, search)?.tokens),
        None => None,
    };
    let seq = encode(&cfg.encoder, p, template, search, tokens)?;
    let e = &cfg.encoder;
    let n = seq.shape()[0];
    let g = e.grid();
    let feat = seq
        .narrow(1, e.template_tokens(), e.search_tokens())?
        .permute(&[0, 2, 1])?
        .reshape(&[n, e.embed_dim, g, g])?;
    let out = head_forward(&cfg.head, p, feat, mode)?;
    Ok(ForwardOutput {
        resp: out.resp,
        bn_stats: out.bn_stats,
    })
}

/// Evaluation-mode forward without gradients.
pub fn predict(cfg: &ModelConfig, params: &ParameterSet, template: &Tensor, search: &Tensor, adapter: Option<&str>) -> Result<ResponseMap> {
    let tape = Tape::new();
    let p = params.bind_const(&tape)?;
    let z = tape.constant(template.clone())?;
    let x = tape.constant(search.clone())?;
    Ok(forward(cfg, &p, z, x, adapter, BnMode::Eval)?.resp.value())
}

/// `[N, 3, H, W]` network input from equally sized frames.
pub fn stack_frames(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dimension("cannot stack zero frames".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
    for f in frames {
        if (f.width, f.height) != (w, h) {
            return Err(Error::Dimension(format!("frame {}x{} in a {w}x{h} batch", f.width, f.height)));
        }
        data.extend_from_slice(f.to_input().data());
    }
    Tensor::new(&[frames.len(), 3, h, w], data)
}

/// Adapter prefix for a domain if that adapter is present in `params`.
pub fn adapter_for(params: &ParameterSet, domain: DomainTag) -> Option<String> {
    let prefix = adapter_prefix(domain);
    params.contains(&format!("{prefix}.bank")).then_some(prefix)
}
