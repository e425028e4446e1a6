//! Target-aware confidence alignment.
//!
//! Per-sample peak confidences of student and teacher response maps are
//! treated as two discrete distributions over the mini-batch. A cost that
//! mixes confidence and grid-position discrepancies is solved with
//! log-domain Sinkhorn; the dual potentials then weight the normalized
//! confidences to form the alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Tensor, Var};

/// Integer position on the response grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn flat(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    pub fn distance(&self, other: &Cell) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Student,
    Teacher,
}

/// Peak confidences `d_i = exp(r_i[p_i])` of one batch of response maps.
#[derive(Debug, Clone)]
pub struct ConfidenceBatch {
    pub values: Vec<f64>,
    /// Raw response scores `r_i[p_i]`.
    pub scores: Vec<f64>,
    pub cells: Vec<Cell>,
    pub grid: (usize, usize),
    pub source: Network,
    /// Cells were supplied by the other network instead of found by argmax.
    pub anchored: bool,
}

impl ConfidenceBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat indices of the chosen cells into an `[N, H, W]` score tensor.
    pub fn flat_indices(&self) -> Vec<usize> {
        let (h, w) = self.grid;
        self.cells.iter().enumerate().map(|(i, c)| i * h * w + c.flat(w)).collect()
    }

    /// `d / ||d||_1`
    pub fn marginal(&self) -> Vec<f64> {
        let total: f64 = self.values.iter().sum();
        self.values.iter().map(|v| v / total).collect()
    }
}

/// First maximal position of a row-major `h x w` grid.
pub fn argmax_cell(grid: &[f64], w: usize) -> Cell {
    let mut best = 0;
    for (i, &v) in grid.iter().enumerate() {
        if v > grid[best] {
            best = i;
        }
    }
    Cell {
        row: best / w,
        col: best % w,
    }
}

fn grid_dims(scores: &Tensor) -> Result<(usize, usize, usize)> {
    let s = scores.shape();
    if s.len() < 3 {
        return Err(Error::Dimension(format!("score maps need [N, .., H, W], got {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h * w == 0 || s[0] * h * w != scores.numel() {
        return Err(Error::Dimension(format!("score maps must hold one H x W grid per sample, got {:?}", s)));
    }
    Ok((s[0], h, w))
}

/// Builds peak confidences from `[N, H, W]` (or `[N, 1, H, W]`) scores,
/// either at each map's own argmax or at the supplied anchor cells.
pub fn confidence_batch(scores: &Tensor, anchor: Option<&[Cell]>, source: Network) -> Result<ConfidenceBatch> {
    scores.ensure_finite("response scores")?;
    let (n, h, w) = grid_dims(scores)?;
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let grid = &scores.data()[i * h * w..(i + 1) * h * w];
        let cell = match anchor {
            Some(a) => {
                let c = *a
                    .get(i)
                    .ok_or_else(|| Error::Validation(format!("anchor has {} cells for {n} samples", a.len())))?;
                if c.row >= h || c.col >= w {
                    return invalid(format!("anchor cell {:?} outside {h}x{w} grid", c));
                }
                c
            }
            None => argmax_cell(grid, w),
        };
        cells.push(cell);
    }
    if let Some(a) = anchor {
        if a.len() != n {
            return invalid(format!("anchor has {} cells for {n} samples", a.len()));
        }
    }
    let scores_at: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| scores.data()[i * h * w + c.flat(w)])
        .collect();
    Ok(ConfidenceBatch {
        values: scores_at.iter().map(|s| s.exp()).collect(),
        scores: scores_at,
        cells,
        grid: (h, w),
        source,
        anchored: anchor.is_some(),
    })
}

/// Square `n x n` cost split into its normalized components.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub n: usize,
    pub conf: Vec<f64>,
    pub pos: Vec<f64>,
    pub total: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.total[i * self.n + j]
    }
}

fn normalize_by_max(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Confidence cost `|r^S_i - r^T_j|` and position cost `||p^S_i - p^T_j||_2`,
/// each divided by its maximum over all pairs (zero when that maximum is
/// zero), summed elementwise. Rows index student samples. A single sample
/// has nothing to be compared against and gets `[[0]]`. A student batch
/// evaluated at the teacher's cells has no position cost.
pub fn cost_map(student: &ConfidenceBatch, teacher: &ConfidenceBatch) -> Result<CostMatrix> {
    let n = student.len();
    if n == 0 {
        return invalid("cost map needs at least one sample");
    }
    if teacher.len() != n {
        return invalid(format!("batch sizes differ: {n} vs {}", teacher.len()));
    }
    let mut conf = vec![0.0; n * n];
    let mut pos = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            conf[i * n + j] = (student.scores[i] - teacher.scores[j]).abs();
            pos[i * n + j] = student.cells[i].distance(&teacher.cells[j]);
        }
    }
    if n == 1 {
        conf[0] = 0.0;
        pos[0] = 0.0;
    }
    if student.anchored {
        pos.iter_mut().for_each(|v| *v = 0.0);
    }
    normalize_by_max(&mut conf);
    normalize_by_max(&mut pos);
    let total = conf.iter().zip(&pos).map(|(a, b)| a + b).collect();
    Ok(CostMatrix { n, conf, pos, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Newton steps on the dual taken when the scaling iterations stop short
    /// of `tol`. Scaling alone converges linearly with a rate that degrades
    /// quickly as epsilon shrinks.
    pub newton_steps: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 1000,
            tol: 1e-9,
            newton_steps: 40,
        }
    }
}

/// Dual solution. `mu` scales rows (source marginal `a`), `nu` columns.
#[derive(Debug, Clone)]
pub struct DualPotentials {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// L1 violation of both marginals by the final plan.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub n: usize,
    pub m: usize,
    pub p: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.p[i * self.m..(i + 1) * self.m].iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.m).map(|j| (0..self.n).map(|i| self.get(i, j)).sum()).collect()
    }

    /// `<P, C>`
    pub fn cost(&self, c: &[f64]) -> f64 {
        self.p.iter().zip(c).map(|(p, c)| p * c).sum()
    }

    /// `-sum P log P`
    pub fn entropy(&self) -> f64 {
        -self.p.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// `KL(P || a b^T)`
    pub fn relative_entropy(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut kl = 0.0;
        for i in 0..self.n {
            for j in 0..self.m {
                let p = self.get(i, j);
                if p > 0.0 {
                    kl += p * (p / (a[i] * b[j])).ln();
                }
            }
        }
        kl
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub potentials: DualPotentials,
    pub converged: bool,
}

impl SinkhornResult {
    /// `<mu, a> + <nu, b>`
    pub fn dual_value(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(&self.potentials.mu, a) + dot(&self.potentials.nu, b)
    }

    /// Primal cost minus dual value minus the entropic correction
    /// `-eps * KL(P || a b^T)`.
    pub fn primal_dual_gap(&self, c: &[f64], a: &[f64], b: &[f64]) -> f64 {
        self.plan.cost(c) - self.dual_value(a, b) + self.potentials.epsilon * self.plan.relative_entropy(a, b)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    if m.is_empty() || m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return invalid(format!("marginal {name} must be positive and finite"));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("marginal {name} sums to {s}, not 1"));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport by alternating log-domain scaling.
///
/// Solves `min <P, C> + eps * KL(P || a b^T)` over couplings of `a` and `b`.
/// The plan is `P = diag(u) K diag(v)` with `K = exp(-C / eps)`,
/// `u = a * exp(mu / eps)` and `v = b * exp(nu / eps)`, so zero cost gives
/// zero potentials and the dual value `<mu, a> + <nu, b>` equals the
/// regularized optimum.
///
/// `cost` is row-major `a.len() x b.len()`. A run that exhausts `max_iter`
/// returns normally with `converged = false` and its residual.
pub fn sinkhorn(cost: &[f64], a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    if !(cfg.epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {}", cfg.epsilon));
    }
    check_marginal("a", a)?;
    check_marginal("b", b)?;
    let (n, m) = (a.len(), b.len());
    if cost.len() != n * m {
        return Err(Error::Dimension(format!("cost has {} entries, expected {}x{}", cost.len(), n, m)));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("transport cost".into()));
    }
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = -eps * log_sum_exp((0..m).map(|j| log_b[j] + (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = -eps * log_sum_exp((0..n).map(|i| log_a[i] + (f[i] - cost[i * m + j]) / eps));
        }
        residual = marginal_residual(cost, &f, &g, a, b, eps);
        if residual < cfg.tol {
            break;
        }
    }
    for _ in 0..cfg.newton_steps {
        if residual < cfg.tol {
            break;
        }
        match newton_step(cost, &mut f, &mut g, a, b, eps, residual) {
            Some(r) => residual = r,
            None => break,
        }
        iterations += 1;
    }
    // Gauge: mean(mu) = 0. The last entry absorbs the rounding of the shift so
    // that the ordered sum of mu is exactly zero.
    let shift = f.iter().sum::<f64>() / n as f64;
    f.iter_mut().for_each(|v| *v -= shift);
    g.iter_mut().for_each(|v| *v += shift);
    if n > 1 {
        let head: f64 = f[..n - 1].iter().sum();
        f[n - 1] = -head;
    } else {
        f[0] = 0.0;
    }
    let p = plan_from_potentials(cost, &f, &g, a, b, eps);
    let plan = TransportPlan { n, m, p };
    let residual = l1_marginal_error(&plan, a, b);
    Ok(SinkhornResult {
        converged: residual < cfg.tol,
        plan,
        potentials: DualPotentials {
            mu: f,
            nu: g,
            epsilon: eps,
            iterations,
            residual,
        },
    })
}

fn plan_from_potentials(cost: &[f64], f: &[f64], g: &[f64], a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let m = g.len();
    let mut p = vec![0.0; cost.len()];
    for (i, fi) in f.iter().enumerate() {
        for j in 0..m {
            p[i * m + j] = a[i] * b[j] * ((fi + g[j] - cost[i * m + j]) / eps).exp();
        }
    }
    p
}

const NEWTON_MAX_STEP: f64 = 4.0;

/// Damping factors tried on each step, relative to the largest diagonal
/// entry of the Jacobian.
const NEWTON_DAMPING: [f64; 7] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0];

/// One damped Newton step on the marginal equations with the last column
/// potential pinned. Near-degenerate plans leave the Jacobian almost
/// singular, so Levenberg-Marquardt dampings are tried in increasing order.
/// A step is accepted when it raises the entropic dual objective, or keeps it
/// within rounding and lowers the residual. Returns the new residual, or
/// `None` if no damping yields an acceptable step.
fn newton_step(
    cost: &[f64],
    f: &mut [f64],
    g: &mut [f64],
    a: &[f64],
    b: &[f64],
    eps: f64,
    residual: f64,
) -> Option<f64> {
    let (n, m) = (f.len(), g.len());
    let k = n + m - 1;
    let p = plan_from_potentials(cost, f, g, a, b, eps);
    let rows: Vec<f64> = (0..n).map(|i| p[i * m..(i + 1) * m].iter().sum()).collect();
    let cols: Vec<f64> = (0..m).map(|j| (0..n).map(|i| p[i * m + j]).sum()).collect();
    let mut jac = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for i in 0..n {
        jac[i][i] = rows[i] / eps;
        rhs[i] = a[i] - rows[i];
        for j in 0..m - 1 {
            jac[i][n + j] = p[i * m + j] / eps;
            jac[n + j][i] = p[i * m + j] / eps;
        }
    }
    for j in 0..m - 1 {
        jac[n + j][n + j] = cols[j] / eps;
        rhs[n + j] = b[j] - cols[j];
    }
    let scale = (0..k).fold(0.0f64, |s, d| s.max(jac[d][d]));
    let cap = NEWTON_MAX_STEP * eps;
    let dual0 = entropic_dual(cost, f, g, a, b, eps);
    let slack = 1e-15 * dual0.abs().max(1.0);
    for lambda in NEWTON_DAMPING {
        let mut damped = jac.clone();
        (0..k).for_each(|d| damped[d][d] += lambda * scale);
        let Some(mut delta) = solve_dense(damped, rhs.clone()) else {
            continue;
        };
        let largest = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if largest > cap {
            delta.iter_mut().for_each(|d| *d *= cap / largest);
        }
        let mut t = 1.0;
        for _ in 0..30 {
            let nf: Vec<f64> = (0..n).map(|i| f[i] + t * delta[i]).collect();
            let ng: Vec<f64> = (0..m).map(|j| if j < m - 1 { g[j] + t * delta[n + j] } else { g[j] }).collect();
            let dual = entropic_dual(cost, &nf, &ng, a, b, eps);
            let r = marginal_residual(cost, &nf, &ng, a, b, eps);
            if r.is_finite() && (dual > dual0 + slack || (dual >= dual0 - slack && r < residual)) {
                f.copy_from_slice(&nf);
                g.copy_from_slice(&ng);
                return Some(r);
            }
            t *= 0.5;
        }
    }
    None
}

/// Entropic dual objective, concave in the potentials.
fn entropic_dual(cost: &[f64], f: &[f64], g: &[f64], a: &[f64], b: &[f64], eps: f64) -> f64 {
    let mass: f64 = plan_from_potentials(cost, f, g, a, b, eps).iter().sum();
    let fa: f64 = f.iter().zip(a).map(|(x, w)| x * w).sum();
    let gb: f64 = g.iter().zip(b).map(|(x, w)| x * w).sum();
    fa + gb - eps * mass
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut mat: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let k = rhs.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| mat[x][col].abs().total_cmp(&mat[y][col].abs()))?;
        if mat[piv][col].abs() < 1e-300 {
            return None;
        }
        mat.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..k {
            let factor = mat[r][col] / mat[col][col];
            if factor != 0.0 {
                for c in col..k {
                    mat[r][c] -= factor * mat[col][c];
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let tail: f64 = (r + 1..k).map(|c| mat[r][c] * x[c]).sum();
        x[r] = (rhs[r] - tail) / mat[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn l1_marginal_error(plan: &TransportPlan, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = plan.row_sums().iter().zip(a).map(|(r, a)| (r - a).abs()).sum();
    let cols: f64 = plan.col_sums().iter().zip(b).map(|(c, b)| (c - b).abs()).sum();
    rows + cols
}

fn marginal_residual(cost: &[f64], f: &[f64], g: &[f64], a: &[f64], b: &[f64], eps: f64) -> f64 {
    let p = plan_from_potentials(cost, f, g, a, b, eps);
    l1_marginal_error(
        &TransportPlan {
            n: a.len(),
            m: b.len(),
            p,
        },
        a,
        b,
    )
}

/// Exact optimum of the discrete transport linear program.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub cost: f64,
    pub plan: TransportPlan,
}

pub const LP_ORACLE_MAX_N: usize = 6;

/// Solves `min <P, C>` over couplings of `a` and `b` with a dense two-phase
/// simplex (Bland's rule). Refuses instances larger than 6 x 6.
pub fn lp_oracle(cost: &[f64], a: &[f64], b: &[f64]) -> Result<LpSolution> {
    let (n, m) = (a.len(), b.len());
    if n > LP_ORACLE_MAX_N || m > LP_ORACLE_MAX_N {
        return invalid(format!("lp_oracle handles at most {LP_ORACLE_MAX_N} atoms per side"));
    }
    check_marginal("a", a)?;
    check_marginal("b", b)?;
    if cost.len() != n * m {
        return Err(Error::Dimension("cost shape does not match marginals".into()));
    }
    // Row constraints for every i, column constraints for all but the last j
    // (the dropped one is implied by total mass).
    let nv = n * m;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; nv];
        (0..m).for_each(|j| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(a[i]);
    }
    for j in 0..m.saturating_sub(1) {
        let mut r = vec![0.0; nv];
        (0..n).for_each(|i| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(b[j]);
    }
    let x = simplex_min(&rows, &rhs, cost)?;
    let plan = TransportPlan { n, m, p: x };
    Ok(LpSolution {
        cost: plan.cost(cost),
        plan,
    })
}

const PIVOT_TOL: f64 = 1e-12;

/// `min c.x` subject to `A x = b`, `x >= 0`, `b >= 0`.
fn simplex_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let (mrows, nv) = (a.len(), c.len());
    let width = nv + mrows;
    let mut tab: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut t = row.clone();
            t.resize(width, 0.0);
            t[nv + i] = 1.0;
            t
        })
        .collect();
    let mut rhs = b.to_vec();
    let mut basis: Vec<usize> = (nv..nv + mrows).collect();

    let phase1: Vec<f64> = (0..width).map(|j| if j < nv { 0.0 } else { 1.0 }).collect();
    run_simplex(&mut tab, &mut rhs, &mut basis, &phase1, width)?;
    let infeasibility: f64 = basis
        .iter()
        .zip(&rhs)
        .filter(|(&bv, _)| bv >= nv)
        .map(|(_, r)| *r)
        .sum();
    if infeasibility > 1e-9 {
        return Err(Error::Evaluation(format!("transport LP infeasible ({infeasibility})")));
    }
    // Pivot remaining zero-level artificials out where possible.
    for r in 0..mrows {
        if basis[r] >= nv {
            if let Some(j) = (0..nv).find(|&j| tab[r][j].abs() > 1e-9) {
                pivot(&mut tab, &mut rhs, &mut basis, r, j);
            }
        }
    }
    let mut phase2 = c.to_vec();
    phase2.resize(width, 0.0);
    run_simplex(&mut tab, &mut rhs, &mut basis, &phase2, nv)?;
    let mut x = vec![0.0; nv];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < nv {
            x[bv] = rhs[r].max(0.0);
        }
    }
    Ok(x)
}

fn run_simplex(
    tab: &mut [Vec<f64>],
    rhs: &mut [f64],
    basis: &mut [usize],
    cost: &[f64],
    allowed: usize,
) -> Result<()> {
    for _ in 0..10_000 {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let reduced = cost[j] - basis.iter().enumerate().map(|(r, &bv)| cost[bv] * tab[r][j]).sum::<f64>();
            reduced < -PIVOT_TOL
        });
        let Some(j) = entering else { return Ok(()) };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..tab.len() {
            if tab[r][j] > PIVOT_TOL {
                let ratio = rhs[r] / tab[r][j];
                let better = match leave {
                    None => true,
                    Some((lr, best)) => ratio < best - PIVOT_TOL || (ratio <= best + PIVOT_TOL && basis[r] < basis[lr]),
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::Evaluation("transport LP unbounded".into()));
        };
        pivot(tab, rhs, basis, r, j);
    }
    Err(Error::Evaluation("simplex iteration limit".into()))
}

fn pivot(tab: &mut [Vec<f64>], rhs: &mut [f64], basis: &mut [usize], r: usize, j: usize) {
    let p = tab[r][j];
    tab[r].iter_mut().for_each(|v| *v /= p);
    rhs[r] /= p;
    let pivot_row = tab[r].clone();
    let pivot_rhs = rhs[r];
    for k in 0..tab.len() {
        if k != r {
            let factor = tab[k][j];
            if factor != 0.0 {
                for (v, pv) in tab[k].iter_mut().zip(&pivot_row) {
                    *v -= factor * pv;
                }
                rhs[k] -= factor * pivot_rhs;
            }
        }
    }
    basis[r] = j;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsotConfig {
    pub sinkhorn: SinkhornConfig,
    /// Evaluate the student at the teacher's argmax cells instead of its own
    /// (the position cost is then identically zero).
    pub anchored: bool,
}

impl Default for PsotConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornConfig::default(),
            anchored: false,
        }
    }
}

/// Everything the alignment loss needs, computed without gradients.
///
/// The transport problem is solved with teacher samples on the rows, so
/// `result.potentials.mu` weights the teacher marginal and `nu` the student
/// marginal.
#[derive(Debug, Clone)]
pub struct PsotSolution {
    pub student: ConfidenceBatch,
    pub teacher: ConfidenceBatch,
    /// Rows index student samples.
    pub cost: CostMatrix,
    pub result: SinkhornResult,
    /// `d^S / ||d^S||_1`
    pub student_marginal: Vec<f64>,
    /// `d^T / ||d^T||_1`
    pub teacher_marginal: Vec<f64>,
    /// `<mu, b> + <nu, a>`
    pub value: f64,
}

fn transpose(c: &CostMatrix) -> Vec<f64> {
    let n = c.n;
    (0..n * n).map(|k| c.get(k % n, k / n)).collect()
}

/// Solves the alignment transport problem for `[N, .., H, W]` score maps.
pub fn solve_psot(student_scores: &Tensor, teacher_scores: &Tensor, cfg: &PsotConfig) -> Result<PsotSolution> {
    if student_scores.shape() != teacher_scores.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} and teacher {:?} response maps differ",
            student_scores.shape(),
            teacher_scores.shape()
        )));
    }
    let teacher = confidence_batch(teacher_scores, None, Network::Teacher)?;
    let anchor = cfg.anchored.then_some(teacher.cells.as_slice());
    let student = confidence_batch(student_scores, anchor, Network::Student)?;
    let cost = cost_map(&student, &teacher)?;
    let a = student.marginal();
    let b = teacher.marginal();
    let result = sinkhorn(&transpose(&cost), &b, &a, &cfg.sinkhorn)?;
    if !result.converged {
        log::warn!(
            "sinkhorn stopped after {} iterations with residual {:.3e}",
            result.potentials.iterations,
            result.potentials.residual
        );
    }
    let value = result.dual_value(&b, &a);
    Ok(PsotSolution {
        student,
        teacher,
        cost,
        result,
        student_marginal: a,
        teacher_marginal: b,
        value,
    })
}

/// Differentiable alignment loss with the potentials of `sol` held fixed.
/// Gradients reach the scores only through the normalized confidences.
pub fn psot_objective<'t>(student_scores: Var<'t>, teacher_scores: Var<'t>, sol: &PsotSolution) -> Result<Var<'t>> {
    let tape = student_scores.tape();
    let weighted = |scores: Var<'t>, batch: &ConfidenceBatch, potential: &[f64]| -> Result<Var<'t>> {
        let d = scores.flatten()?.take(&batch.flat_indices())?.exp()?;
        let total = d.sum()?;
        let w = tape.constant(Tensor::new(&[potential.len()], potential.to_vec())?)?;
        d.mul(w)?.sum()?.div(total)
    };
    let teacher = weighted(teacher_scores, &sol.teacher, &sol.result.potentials.mu)?;
    let student = weighted(student_scores, &sol.student, &sol.result.potentials.nu)?;
    teacher.add(student)
}

/// Alignment loss between student and teacher response scores.
pub fn psot_loss<'t>(student_scores: Var<'t>, teacher_scores: Var<'t>, cfg: &PsotConfig) -> Result<(Var<'t>, PsotSolution)> {
    let sol = solve_psot(&student_scores.value(), &teacher_scores.value(), cfg)?;
    let loss = psot_objective(student_scores, teacher_scores, &sol)?;
    Ok((loss, sol))
}
