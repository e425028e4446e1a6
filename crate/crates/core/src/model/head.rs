use super::{HeadConfig, ResponseVars};
use crate::error::Result;
use crate::numerics::{Bound, ParameterSet, Var};

/// Batch statistics (`Train`) or stored running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch mean and variance observed by one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStat {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct HeadOutput<'t> {
    pub resp: ResponseVars<'t>,
    pub bn_stats: Vec<BnStat>,
}

fn channel_view<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let c = v.shape()[0];
    v.reshape(&[1, c, 1, 1])
}

fn conv_bn_relu<'t>(cfg: &HeadConfig, x: Var<'t>, p: &Bound<'t>, name: &str, mode: BnMode, stats: &mut Vec<BnStat>) -> Result<Var<'t>> {
    let y = x.conv2d(p.get(&format!("{name}.w"))?, None, 1, 1)?;
    let (g, b) = (p.get(&format!("{name}.bn.g"))?, p.get(&format!("{name}.bn.b"))?);
    let y = match mode {
        BnMode::Train => {
            let (y, mean, var) = y.batch_norm(g, b, cfg.bn_eps)?;
            stats.push(BnStat {
                layer: name.to_string(),
                mean,
                var,
            });
            y
        }
        BnMode::Eval => {
            let mean = channel_view(p.get(&format!("{name}.bn.mean"))?)?;
            let std = channel_view(p.get(&format!("{name}.bn.var"))?)?.add_scalar(cfg.bn_eps)?.sqrt()?;
            y.sub(mean)?.div(std)?.mul(channel_view(g)?)?.add(channel_view(b)?)?
        }
    };
    y.relu()
}

/// Conv-BN-ReLU trunk over `[N, C, H', W']` features followed by sigmoid
/// score, offset and size branches.
pub fn head_forward<'t>(cfg: &HeadConfig, p: &Bound<'t>, feat: Var<'t>, mode: BnMode) -> Result<HeadOutput<'t>> {
    let mut stats = Vec::new();
    let mut x = feat;
    for i in 0..cfg.layers {
        x = conv_bn_relu(cfg, x, p, &format!("head.trunk{i}"), mode, &mut stats)?;
    }
    let branch = |name: &str| -> Result<Var<'t>> {
        x.conv2d(p.get(&format!("head.{name}.w"))?, Some(p.get(&format!("head.{name}.b"))?), 1, 1)?
            .sigmoid()
    };
    let scores = branch("score")?;
    let s = scores.shape();
    Ok(HeadOutput {
        resp: ResponseVars {
            scores: scores.reshape(&[s[0], s[2], s[3]])?,
            offsets: branch("offset")?,
            sizes: branch("size")?,
        },
        bn_stats: stats,
    })
}

/// `running <- (1 - momentum) running + momentum batch` for each layer.
pub fn update_running_stats(params: &mut ParameterSet, stats: &[BnStat], momentum: f64) -> Result<()> {
    for s in stats {
        for (key, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let t = params.get_mut(&format!("{}.bn.{key}", s.layer))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}
