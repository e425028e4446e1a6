use rand::Rng;

use super::ModelConfig;
use crate::datagen::DomainTag;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParameterSet, Tensor, Var};

pub fn adapter_prefix(domain: DomainTag) -> String {
    format!("adapter.{}", domain.name())
}

/// Token bank, key/value projections and query network for one domain.
pub fn init_adapter<R: Rng + ?Sized>(cfg: &ModelConfig, domain: DomainTag, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let c = cfg.encoder.embed_dim;
    let p = cfg.encoder.patch_size;
    let pre = adapter_prefix(domain);
    let lin = (1.0 / c as f64).sqrt();
    let mut ps = ParameterSet::new();
    ps.insert(format!("{pre}.bank"), Tensor::randn(&[cfg.adapter.bank_tokens, c], cfg.adapter.init_std, rng))?;
    ps.insert(format!("{pre}.key"), Tensor::randn(&[c, c], lin, rng))?;
    ps.insert(format!("{pre}.value"), Tensor::randn(&[c, c], lin, rng))?;
    ps.insert(format!("{pre}.query.patch.w"), Tensor::randn(&[c, 3, p, p], (1.0 / (3 * p * p) as f64).sqrt(), rng))?;
    ps.insert(format!("{pre}.query.patch.b"), Tensor::zeros(&[c]))?;
    ps.insert(format!("{pre}.query.res.w"), Tensor::randn(&[c, c, 3, 3], 0.5 * (2.0 / (9 * c) as f64).sqrt(), rng))?;
    ps.insert(format!("{pre}.query.res.b"), Tensor::zeros(&[c]))?;
    Ok(ps)
}

#[derive(Debug, Clone, Copy)]
pub struct DcaOutput<'t> {
    /// `[N, K, C]` structural tokens.
    pub tokens: Var<'t>,
    /// `[N, K, L']` attention weights over the bank.
    pub weights: Var<'t>,
}

/// `softmax(Q (B Wk)^T / sqrt(d_k)) (B Wv)` for queries `[N, K, C]`.
pub fn bank_attention<'t>(q: Var<'t>, bank: Var<'t>, key: Var<'t>, value: Var<'t>, d_k: f64) -> Result<DcaOutput<'t>> {
    let (qs, bs) = (q.shape(), bank.shape());
    if qs.len() != 3 || bs.len() != 2 || qs[2] != bs[1] {
        return Err(Error::Config(format!("queries {qs:?} do not match token bank {bs:?}")));
    }
    let k = bank.matmul(key)?;
    let v = bank.matmul(value)?;
    let weights = q.matmul_t(k)?.scale(1.0 / d_k.sqrt())?.softmax(2)?;
    Ok(DcaOutput {
        tokens: weights.matmul(v)?,
        weights,
    })
}

/// Structural tokens for a batch of search crops: a patchify convolution
/// followed by one residual conv block yields one query per search cell.
pub fn dca_forward<'t>(cfg: &ModelConfig, p: &Bound<'t>, prefix: &str, search: Var<'t>) -> Result<DcaOutput<'t>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}"));
    let bank = get("bank")?;
    let c = cfg.encoder.embed_dim;
    if bank.shape().get(1) != Some(&c) {
        return Err(Error::Config(format!("token bank {:?} does not match embed_dim {c}", bank.shape())));
    }
    let q0 = search.conv2d(get("query.patch.w")?, Some(get("query.patch.b")?), cfg.encoder.patch_size, 0)?;
    let q = q0.add(q0.relu()?.conv2d(get("query.res.w")?, Some(get("query.res.b")?), 1, 1)?)?;
    let s = q.shape();
    let q = q.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?;
    bank_attention(q, bank, get("key")?, get("value")?, cfg.encoder.head_dim() as f64)
}
