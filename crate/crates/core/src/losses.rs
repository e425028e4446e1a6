//! Supervision losses: penalty-reduced focal loss on score heatmaps, L1 and
//! GIoU on boxes, and their weighted combination with the alignment term.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Tensor, Var};

pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub beta: f64,
    pub gamma_w: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            beta: 5.0,
            gamma_w: 2.0,
            lambda: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.beta, self.gamma_w, self.lambda];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Focal loss over score maps of any shape against a Gaussian heatmap.
///
/// Cells with target exactly 1 contribute `-(1-p)^2 log p`, all others
/// `-(1-t)^4 p^2 log(1-p)`; the sum is divided by the number of positive
/// cells (at least 1). Predictions are clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "focal loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if target.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return invalid("focal loss targets must lie in [0, 1]");
    }
    let tape = pred.tape();
    let pos: Vec<f64> = target.data().iter().map(|&t| if t == 1.0 { 1.0 } else { 0.0 }).collect();
    let num_pos = pos.iter().sum::<f64>().max(1.0);
    let neg_w: Vec<f64> = target
        .data()
        .iter()
        .zip(&pos)
        .map(|(&t, &m)| (1.0 - m) * (1.0 - t).powi(4))
        .collect();
    let shape = target.shape().to_vec();
    let pos = tape.constant(Tensor::new(&shape, pos)?)?;
    let neg_w = tape.constant(Tensor::new(&shape, neg_w)?)?;

    let p = pred.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)?;
    let one_minus = p.rsub_scalar(1.0)?;
    let pos_term = one_minus.square()?.mul(p.ln()?)?.mul(pos)?;
    let neg_term = p.square()?.mul(one_minus.ln()?)?.mul(neg_w)?;
    pos_term.add(neg_term)?.sum()?.scale(-1.0 / num_pos)
}

fn check_boxes(b: &Var, what: &str) -> Result<()> {
    let s = b.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::Dimension(format!("{what}: boxes must be [N, 4], got {s:?}")));
    }
    Ok(())
}

/// Mean absolute difference of `(cx, cy, w, h)` over all boxes.
pub fn l1_box<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    check_boxes(&pred, "l1")?;
    check_boxes(&gt, "l1")?;
    pred.sub(gt)?.abs()?.mean()
}

struct Corners<'t> {
    x1: Var<'t>,
    y1: Var<'t>,
    x2: Var<'t>,
    y2: Var<'t>,
    area: Var<'t>,
}

fn corners<'t>(b: Var<'t>, what: &str) -> Result<Corners<'t>> {
    let v = b.value();
    if v.data().chunks(4).any(|c| !(c[2] > 0.0 && c[3] > 0.0)) {
        return invalid(format!("{what}: zero-area box"));
    }
    let cx = b.narrow(1, 0, 1)?;
    let cy = b.narrow(1, 1, 1)?;
    let hw = b.narrow(1, 2, 1)?.scale(0.5)?;
    let hh = b.narrow(1, 3, 1)?.scale(0.5)?;
    Ok(Corners {
        x1: cx.sub(hw)?,
        y1: cy.sub(hh)?,
        x2: cx.add(hw)?,
        y2: cy.add(hh)?,
        area: hw.mul(hh)?.scale(4.0)?,
    })
}

/// Per-box generalized IoU of `[N, 4]` boxes in `(cx, cy, w, h)` form,
/// returned as `[N, 1]`.
pub fn giou<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_boxes(&a, "giou")?;
    check_boxes(&b, "giou")?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension("giou: box batches differ".into()));
    }
    let p = corners(a, "giou")?;
    let q = corners(b, "giou")?;
    let iw = p.x2.minimum(q.x2)?.sub(p.x1.maximum(q.x1)?)?.relu()?;
    let ih = p.y2.minimum(q.y2)?.sub(p.y1.maximum(q.y1)?)?.relu()?;
    let inter = iw.mul(ih)?;
    let union = p.area.add(q.area)?.sub(inter)?;
    let cw = p.x2.maximum(q.x2)?.sub(p.x1.minimum(q.x1)?)?;
    let ch = p.y2.maximum(q.y2)?.sub(p.y1.minimum(q.y1)?)?;
    let enclosing = cw.mul(ch)?;
    let iou = inter.div(union)?;
    iou.sub(enclosing.sub(union)?.div(enclosing)?)
}

/// Mean of `1 - GIoU` over the batch; range `[0, 2)`.
pub fn giou_loss<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    giou(pred, gt)?.rsub_scalar(1.0)?.mean()
}

/// Unweighted supervised components of one batch.
#[derive(Clone, Copy)]
pub struct SupervisedTerms<'t> {
    pub cls: Var<'t>,
    pub l1: Var<'t>,
    pub giou: Var<'t>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub psot: f64,
    pub total: f64,
    /// Global gradient norm over trainable parameters, when measured.
    pub grad_norm: Option<f64>,
}

impl LossReport {
    /// `step cls l1 giou psot total`
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            self.cls, self.l1, self.giou, self.psot, self.total
        )
    }

    pub fn recombined(&self, w: &LossWeights) -> f64 {
        w.w_cls * self.cls + w.beta * self.l1 + w.gamma_w * self.giou + w.lambda * self.psot
    }
}

/// Hybrid objective: source terms plus optional pseudo-labelled target
/// terms (summed per component) plus `lambda` times the alignment term.
pub fn total_loss<'t>(
    src: &SupervisedTerms<'t>,
    tgt: Option<&SupervisedTerms<'t>>,
    psot: Option<Var<'t>>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    weights.validate()?;
    let tape = src.cls.tape();
    let (mut cls, mut l1, mut gi) = (src.cls, src.l1, src.giou);
    if let Some(t) = tgt {
        cls = cls.add(t.cls)?;
        l1 = l1.add(t.l1)?;
        gi = gi.add(t.giou)?;
    }
    let psot = match psot {
        Some(p) => p,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    for (name, v) in [("cls", cls), ("l1", l1), ("giou", gi), ("psot", psot)] {
        if !v.item().is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    let total = cls
        .scale(weights.w_cls)?
        .add(l1.scale(weights.beta)?)?
        .add(gi.scale(weights.gamma_w)?)?
        .add(psot.scale(weights.lambda)?)?;
    let report = LossReport {
        cls: cls.item(),
        l1: l1.item(),
        giou: gi.item(),
        psot: psot.item(),
        total: total.item(),
        grad_norm: None,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn boxes<'t>(tape: &'t Tape, rows: &[[f64; 4]]) -> Var<'t> {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(&[rows.len(), 4], data).unwrap()).unwrap()
    }

    #[test]
    fn focal_single_positive_cell() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 1, 1], 0.5)).unwrap();
        let l = focal_loss(p, &Tensor::full(&[1, 1, 1], 1.0)).unwrap().item();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_perfect_prediction_is_small() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(&[1, 3, 3]);
        t.set(&[0, 1, 1], 1.0);
        let l = focal_loss(tape.constant(t.clone()).unwrap(), &t).unwrap().item();
        assert!(l <= 1e-5, "{l}");
    }

    #[test]
    fn focal_duplicated_batch_keeps_per_positive_value() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(&[1, 2, 2]);
        t.set(&[0, 0, 1], 1.0);
        t.set(&[0, 1, 1], 0.4);
        let p = Tensor::new(&[1, 2, 2], vec![0.2, 0.6, 0.1, 0.3]).unwrap();
        let one = focal_loss(tape.constant(p.clone()).unwrap(), &t).unwrap().item();
        let mut p2 = p.data().to_vec();
        p2.extend_from_slice(p.data());
        let mut t2 = t.data().to_vec();
        t2.extend_from_slice(t.data());
        let two = focal_loss(
            tape.constant(Tensor::new(&[2, 2, 2], p2).unwrap()).unwrap(),
            &Tensor::new(&[2, 2, 2], t2).unwrap(),
        )
        .unwrap()
        .item();
        assert!((one - two).abs() < 1e-15);
    }

    #[test]
    fn l1_cases() {
        let tape = Tape::new();
        let a = boxes(&tape, &[[0.5, 0.5, 0.2, 0.3]]);
        let b = boxes(&tape, &[[0.6, 0.5, 0.2, 0.3]]);
        assert_eq!(l1_box(a, a).unwrap().item(), 0.0);
        assert!((l1_box(b, a).unwrap().item() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn giou_hand_cases() {
        let tape = Tape::new();
        let a = boxes(&tape, &[[0.5, 0.5, 1.0, 1.0]]);
        let b = boxes(&tape, &[[1.5, 1.5, 1.0, 1.0]]);
        assert_eq!(giou_loss(a, a).unwrap().item(), 0.0);
        assert!((giou_loss(a, b).unwrap().item() - 1.5).abs() < 1e-15);
        let flat = boxes(&tape, &[[0.5, 0.5, 0.0, 1.0]]);
        assert!(matches!(giou_loss(flat, a), Err(Error::Validation(_))));
    }

    #[test]
    fn total_loss_is_linear() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let terms = SupervisedTerms {
            cls: one,
            l1: one,
            giou: one,
        };
        let w = LossWeights::default();
        let (_, r) = total_loss(&terms, None, Some(one), &w).unwrap();
        assert_eq!(r.total, 18.0);
        let (_, r) = total_loss(&terms, Some(&terms), Some(one), &w).unwrap();
        assert_eq!(r.total, 26.0);
        assert!((r.total - r.recombined(&w)).abs() < 1e-12);
        let off = LossWeights { lambda: 0.0, ..w };
        let (_, r) = total_loss(&terms, None, Some(one), &off).unwrap();
        assert_eq!(r.total, 8.0);
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let z = SupervisedTerms {
            cls: zero,
            l1: zero,
            giou: zero,
        };
        assert_eq!(total_loss(&z, Some(&z), None, &w).unwrap().1.total, 0.0);
        let bad = LossWeights { beta: -1.0, ..w };
        assert!(matches!(total_loss(&z, None, None, &bad), Err(Error::Config(_))));
    }
}
