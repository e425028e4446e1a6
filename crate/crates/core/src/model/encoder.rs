use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Bound, Var};

const LN_EPS: f64 = 1e-5;

/// `[N, 3, H, W]` image to `[N, (H/p)(W/p), C]` row-major patch tokens.
pub fn patch_embed<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, patch: usize) -> Result<Var<'t>> {
    let y = x.conv2d(w, Some(b), patch, 0)?;
    let s = y.shape();
    y.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

fn linear<'t>(x: Var<'t>, p: &Bound<'t>, name: &str) -> Result<Var<'t>> {
    x.matmul(p.get(&format!("{name}.w"))?)?.add(p.get(&format!("{name}.b"))?)
}

fn layer_norm<'t>(x: Var<'t>, p: &Bound<'t>, name: &str) -> Result<Var<'t>> {
    x.layer_norm(p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, LN_EPS)
}

fn self_attention<'t>(cfg: &EncoderConfig, x: Var<'t>, p: &Bound<'t>, name: &str) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, t, c) = (s[0], s[1], s[2]);
    let (h, d) = (cfg.heads, cfg.head_dim());
    let qkv = linear(x, p, &format!("{name}.qkv"))?;
    let split = |k: usize| -> Result<Var<'t>> {
        qkv.narrow(2, k * c, c)?
            .reshape(&[n, t, h, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * h, t, d])
    };
    let (q, k, v) = (split(0)?.scale(1.0 / (d as f64).sqrt())?, split(1)?, split(2)?);
    let att = q.matmul_t(k)?.softmax(2)?;
    let o = att
        .matmul(v)?
        .reshape(&[n, h, t, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, t, c])?;
    linear(o, p, &format!("{name}.proj"))
}

fn block<'t>(cfg: &EncoderConfig, x: Var<'t>, p: &Bound<'t>, name: &str) -> Result<Var<'t>> {
    let a = self_attention(cfg, layer_norm(x, p, &format!("{name}.ln1"))?, p, &format!("{name}.attn"))?;
    let x = x.add(a)?;
    let h = linear(layer_norm(x, p, &format!("{name}.ln2"))?, p, &format!("{name}.mlp.fc1"))?.gelu()?;
    x.add(linear(h, p, &format!("{name}.mlp.fc2"))?)
}

fn check_crop(x: &Var<'_>, size: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
        return Err(Error::Dimension(format!("{what} crop must be [N, 3, {size}, {size}], got {s:?}")));
    }
    Ok(())
}

/// Runs the encoder over `[template; search; adapter]` tokens and returns
/// the `[N, Tz + Tx, C]` output with adapter tokens removed.
pub fn encode<'t>(
    cfg: &EncoderConfig,
    p: &Bound<'t>,
    template: Var<'t>,
    search: Var<'t>,
    adapter_tokens: Option<Var<'t>>,
) -> Result<Var<'t>> {
    check_crop(&template, cfg.template_size, "template")?;
    check_crop(&search, cfg.search_size, "search")?;
    let n = template.shape()[0];
    if search.shape()[0] != n {
        return Err(Error::Dimension("template and search batch sizes differ".into()));
    }
    let (w, b) = (p.get("backbone.patch.w")?, p.get("backbone.patch.b")?);
    let z = patch_embed(template, w, b, cfg.patch_size)?.add(p.get("backbone.pos_z")?)?;
    let x = patch_embed(search, w, b, cfg.patch_size)?.add(p.get("backbone.pos_x")?)?;
    let mut parts = vec![z, x];
    if let Some(s) = adapter_tokens {
        let sh = s.shape();
        if sh.len() != 3 || sh[2] != cfg.embed_dim {
            return Err(Error::Config(format!(
                "adapter tokens {sh:?} do not match embed_dim {}",
                cfg.embed_dim
            )));
        }
        if sh[0] != n {
            return Err(Error::Dimension(format!("adapter batch {} vs {n}", sh[0])));
        }
        parts.push(s);
    }
    let mut seq = Var::concat(&parts, 1)?;
    for i in 0..cfg.depth {
        seq = block(cfg, seq, p, &format!("backbone.block{i}"))?;
    }
    let keep = cfg.template_tokens() + cfg.search_tokens();
    if seq.shape()[1] == keep {
        Ok(seq)
    } else {
        seq.narrow(1, 0, keep)
    }
}
