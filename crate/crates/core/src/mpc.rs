//! Receding-horizon tracking on a lifted linear model.
//!
//! The prediction `z[i+1] = A z[i] + B u[i]` over `Nh` steps is condensed
//! into a dense box-constrained QP in the stacked inputs `U`:
//!
//! ```text
//! Y = Phi z0 + Gamma U
//! J = (Y - r)' Qbar (Y - r) + (U - Uref)' Rbar (U - Uref)
//!   = 1/2 U' H U + f' U + const
//! H = 2 (Gamma' Qbar Gamma + Rbar)
//! f = 2 (Gamma' Qbar (Phi z0 - r) - Rbar Uref)
//! ```
//!
//! `H`, `Gamma' Qbar` and `Gamma' Qbar Phi` depend only on the model and the
//! weights, so [`Condenser`] builds them once and each step only forms `f`.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::lifting::{delay_embed, LoadVector};
use crate::numkit::{row_major, Matrix, Vector};
use crate::observer::{Estimate, EstimatorState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon in steps.
    pub nh: usize,
    /// Output-error weight, `n x n`.
    #[serde(with = "row_major")]
    pub q: Matrix,
    /// Input weight, `m x m`.
    #[serde(with = "row_major")]
    pub r: Matrix,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Input the `R` term pulls towards.
    pub u_ref: Vec<f64>,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl MpcConfig {
    /// Diagonal weights with `q_weight` on the last `tracked` output
    /// coordinates only and `r_weight` on every input.
    pub fn tracking(n: usize, m: usize, tracked: usize, q_weight: f64, r_weight: f64) -> Self {
        let mut q = Matrix::zeros(n, n);
        for i in n.saturating_sub(tracked)..n {
            q[(i, i)] = q_weight;
        }
        MpcConfig {
            nh: 12,
            q,
            r: Matrix::identity(m, m) * r_weight,
            u_min: vec![0.0; m],
            u_max: vec![1.0; m],
            u_ref: vec![0.5; m],
            qp_tol: 1e-8,
            qp_max_iter: 500,
        }
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.nh == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !self.q.is_square() || !self.r.is_square() {
            return Err(Error::Config("Q and R must be square".into()));
        }
        if self.u_min.len() != m || self.u_max.len() != m || self.u_ref.len() != m {
            return Err(Error::Config(format!(
                "input bounds and u_ref must have length {m}"
            )));
        }
        if self
            .u_min
            .iter()
            .zip(&self.u_max)
            .any(|(lo, hi)| !(lo < hi))
        {
            return Err(Error::Config("u_min must be below u_max".into()));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return Err(Error::Config(
                "qp_tol and qp_max_iter must be positive".into(),
            ));
        }
        let sym_q = (&self.q - self.q.transpose()).amax();
        let sym_r = (&self.r - self.r.transpose()).amax();
        if sym_q > 1e-12 * (1.0 + self.q.amax()) || sym_r > 1e-12 * (1.0 + self.r.amax()) {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        if n > 0 && self.q.symmetric_eigenvalues().min() < -1e-12 * (1.0 + self.q.amax()) {
            return Err(Error::Config("Q must be positive semidefinite".into()));
        }
        if Cholesky::new(self.r.clone()).is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(())
    }
}

/// `min 1/2 U'HU + f'U` subject to `lower <= U <= upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub f: Vector,
    pub lower: Vector,
    pub upper: Vector,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, u: &Vector) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }

    pub fn gradient(&self, u: &Vector) -> Vector {
        &self.h * u + &self.f
    }

    pub fn project(&self, u: &mut Vector) {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        if self.h.shape() != (n, n) || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::dim(format!(
                "QP with f of length {n} has H {:?} and bounds of length {}/{}",
                self.h.shape(),
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self
            .lower
            .iter()
            .zip(self.upper.iter())
            .any(|(lo, hi)| !(lo <= hi))
        {
            return Err(Error::invalid("QP lower bound exceeds upper bound"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: Vector,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub objective: f64,
}

/// Largest first-order optimality violation of `u` under the box.
///
/// Interior coordinates contribute `|g|`; a coordinate at its lower bound
/// contributes `max(0, -g)` and one at its upper bound `max(0, g)`.
pub fn kkt_residual(qp: &QpProblem, u: &Vector) -> f64 {
    let g = qp.gradient(u);
    (0..u.len())
        .map(|i| {
            let at_lo = u[i] <= qp.lower[i];
            let at_hi = u[i] >= qp.upper[i];
            match (at_lo, at_hi) {
                (true, true) => 0.0,
                (true, false) => (-g[i]).max(0.0),
                (false, true) => g[i].max(0.0),
                (false, false) => g[i].abs(),
            }
        })
        .fold(0.0, f64::max)
}

/// Primal active-set method on the box constraints.
///
/// Each iteration solves the free-variable system exactly, then either
/// stops at the first blocking bound or releases the bound whose multiplier
/// has the wrong sign. The objective never increases between iterates, so
/// on `max_iter` the last iterate is the best one.
pub fn solve_box_qp(
    qp: &QpProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&Vector>,
) -> Result<QpSolution> {
    qp.check()?;
    let n = qp.dim();
    let mut x = match warm {
        Some(w) if w.len() == n => w.clone(),
        Some(w) => {
            return Err(Error::dim(format!(
                "warm start has length {}, QP has {n}",
                w.len()
            )))
        }
        None => Vector::zeros(n),
    };
    qp.project(&mut x);
    // -1 pinned at lower, 1 pinned at upper, 0 free.
    let mut working: Vec<i8> = (0..n)
        .map(|i| {
            if x[i] <= qp.lower[i] {
                -1
            } else if x[i] >= qp.upper[i] {
                1
            } else {
                0
            }
        })
        .collect();

    for iter in 0..max_iter {
        let kkt = kkt_residual(qp, &x);
        if kkt <= tol {
            return Ok(solution(qp, x, iter, kkt, true));
        }
        let Some(target) = subspace_minimiser(qp, &working) else {
            break;
        };
        let dir = &target - &x;
        // Largest feasible fraction of the step and the bound that limits it.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n {
            if working[i] != 0 {
                continue;
            }
            let room = if dir[i] < 0.0 {
                (qp.lower[i] - x[i]) / dir[i]
            } else if dir[i] > 0.0 {
                (qp.upper[i] - x[i]) / dir[i]
            } else {
                continue;
            };
            if room < alpha {
                alpha = room.max(0.0);
                blocking = Some(i);
            }
        }
        match blocking {
            Some(i) => {
                x += &dir * alpha;
                if dir[i] < 0.0 {
                    x[i] = qp.lower[i];
                    working[i] = -1;
                } else {
                    x[i] = qp.upper[i];
                    working[i] = 1;
                }
            }
            None => {
                x = target;
                let g = qp.gradient(&x);
                let release = (0..n)
                    .filter_map(|i| match working[i] {
                        -1 => Some((i, -g[i])),
                        1 => Some((i, g[i])),
                        _ => None,
                    })
                    .filter(|&(_, v)| v > 0.0)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = release {
                    working[i] = 0;
                } else if kkt_residual(qp, &x) > tol {
                    // Correct multipliers but the free gradient is above
                    // tolerance: further solves cannot improve it.
                    break;
                }
            }
        }
    }
    let kkt = kkt_residual(qp, &x);
    Ok(solution(qp, x, max_iter, kkt, kkt <= tol))
}

fn solution(
    qp: &QpProblem,
    u: Vector,
    iterations: usize,
    kkt_residual: f64,
    converged: bool,
) -> QpSolution {
    QpSolution {
        objective: qp.objective(&u),
        u,
        iterations,
        kkt_residual,
        converged,
    }
}

/// Minimiser over the free coordinates with the pinned ones at their bounds.
fn subspace_minimiser(qp: &QpProblem, working: &[i8]) -> Option<Vector> {
    let n = qp.dim();
    let free: Vec<usize> = (0..n).filter(|&i| working[i] == 0).collect();
    let mut x = Vector::zeros(n);
    for i in 0..n {
        match working[i] {
            -1 => x[i] = qp.lower[i],
            1 => x[i] = qp.upper[i],
            _ => {}
        }
    }
    if free.is_empty() {
        return Some(x);
    }
    let k = free.len();
    let hff = Matrix::from_fn(k, k, |a, b| qp.h[(free[a], free[b])]);
    let hx = &qp.h * &x;
    let rhs = Vector::from_fn(k, |a, _| -(qp.f[free[a]] + hx[free[a]]));
    let xf = Cholesky::new(hff)?.solve(&rhs);
    if xf.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (a, &i) in free.iter().enumerate() {
        x[i] = xf[a];
    }
    Some(x)
}

/// Model- and weight-dependent parts of the condensed QP.
#[derive(Clone, Debug)]
pub struct Condenser {
    nh: usize,
    n: usize,
    m: usize,
    n_z: usize,
    /// `2 Gamma' Qbar Phi`.
    fz: Matrix,
    /// `2 Gamma' Qbar`.
    fr: Matrix,
    /// `2 Rbar Uref`.
    fu: Vector,
    qp: QpProblem,
}

impl Condenser {
    pub fn new(model: &KoopmanModel, cfg: &MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m, n_z, nh) = (model.n(), model.m(), model.n_z, cfg.nh);
        if cfg.n() != n || cfg.m() != m {
            return Err(Error::dim(format!(
                "weights are for n = {}, m = {}; model has n = {n}, m = {m}",
                cfg.n(),
                cfg.m()
            )));
        }
        // Markov blocks C A^k B and free-response blocks C A^(k+1).
        let mut cak = model.c.clone();
        let mut markov = Vec::with_capacity(nh);
        let mut phi = Matrix::zeros(n * nh, n_z);
        for i in 0..nh {
            markov.push(&cak * &model.b);
            cak = &cak * &model.a;
            phi.view_mut((i * n, 0), (n, n_z)).copy_from(&cak);
        }
        let mut gamma = Matrix::zeros(n * nh, m * nh);
        for i in 0..nh {
            for j in 0..=i {
                gamma
                    .view_mut((i * n, j * m), (n, m))
                    .copy_from(&markov[i - j]);
            }
        }
        let mut qbar = Matrix::zeros(n * nh, n * nh);
        let mut rbar = Matrix::zeros(m * nh, m * nh);
        for i in 0..nh {
            qbar.view_mut((i * n, i * n), (n, n)).copy_from(&cfg.q);
            rbar.view_mut((i * m, i * m), (m, m)).copy_from(&cfg.r);
        }
        let gtq = gamma.transpose() * &qbar;
        let mut h = (&gtq * &gamma + &rbar) * 2.0;
        h = (&h + h.transpose()) * 0.5;
        let uref = Vector::from_fn(m * nh, |i, _| cfg.u_ref[i % m]);
        let fu = &rbar * uref * 2.0;
        let fz = &gtq * &phi * 2.0;
        let fr = gtq * 2.0;
        let lower = Vector::from_fn(m * nh, |i, _| cfg.u_min[i % m]);
        let upper = Vector::from_fn(m * nh, |i, _| cfg.u_max[i % m]);
        Ok(Condenser {
            nh,
            n,
            m,
            n_z,
            fz,
            fr,
            qp: QpProblem {
                h,
                f: -&fu,
                lower,
                upper,
            },
            fu,
        })
    }

    pub fn horizon(&self) -> usize {
        self.nh
    }

    /// The QP for lifted state `z0` and references `r[1..=Nh]`.
    pub fn problem(&mut self, z0: &Vector, reference: &[Vec<f64>]) -> Result<&QpProblem> {
        if z0.len() != self.n_z {
            return Err(Error::dim(format!(
                "z0 has length {}, model has n_z = {}",
                z0.len(),
                self.n_z
            )));
        }
        if reference.len() != self.nh {
            return Err(Error::dim(format!(
                "{} reference points for horizon {}",
                reference.len(),
                self.nh
            )));
        }
        let mut r = Vector::zeros(self.n * self.nh);
        for (i, ri) in reference.iter().enumerate() {
            if ri.len() != self.n {
                return Err(Error::dim(format!(
                    "reference point has length {}, expected {}",
                    ri.len(),
                    self.n
                )));
            }
            r.rows_mut(i * self.n, self.n).copy_from_slice(ri);
        }
        self.qp.f = &self.fz * z0 - &self.fr * r - &self.fu;
        Ok(&self.qp)
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }
}

/// One-shot condensation; see [`Condenser`] for the reusable form.
pub fn condense(
    model: &KoopmanModel,
    z0: &Vector,
    reference: &[Vec<f64>],
    cfg: &MpcConfig,
) -> Result<QpProblem> {
    let mut c = Condenser::new(model, cfg)?;
    c.problem(z0, reference).cloned()
}

/// Output samples indexed by step; queries past the end return the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub points: Vec<Vec<f64>>,
}

impl Reference {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("reference needs at least one point"));
        };
        let n = first.len();
        if points.iter().any(|p| p.len() != n) {
            return Err(Error::dim("reference points have differing lengths"));
        }
        Ok(Reference { points })
    }

    pub fn constant(point: Vec<f64>) -> Self {
        Reference {
            points: vec![point],
        }
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.points[k.min(self.points.len() - 1)]
    }

    pub fn window(&self, start: usize, len: usize) -> Vec<Vec<f64>> {
        (start..start + len).map(|k| self.at(k).to_vec()).collect()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How the controller supplies the load to an augmented model.
#[derive(Clone, Debug)]
pub enum LoadSource {
    /// Unaugmented model, no load.
    None,
    Known(LoadVector),
    Observer(Box<EstimatorState>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub u: Vec<f64>,
    pub w_hat: Option<LoadVector>,
    pub qp_iters: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// Wall-clock solve time; zero unless timing is enabled.
    pub solve_ms: f64,
    pub estimate: Option<Estimate>,
}

/// Algorithm loop: estimate, lift, condense, solve, apply the first block.
#[derive(Clone, Debug)]
pub struct Controller {
    model: KoopmanModel,
    cfg: MpcConfig,
    condenser: Condenser,
    load: LoadSource,
    reference: Reference,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
    last_u: Option<Vec<f64>>,
    warm: Option<Vector>,
    step: usize,
    timing: bool,
}

impl Controller {
    pub fn new(
        model: KoopmanModel,
        cfg: MpcConfig,
        load: LoadSource,
        reference: Reference,
    ) -> Result<Self> {
        match (&load, model.p) {
            (LoadSource::None, 0) => {}
            (LoadSource::None, _) => {
                return Err(Error::Config("augmented model needs a load source".into()))
            }
            (_, 0) => {
                return Err(Error::Config(
                    "load source given for an unaugmented model".into(),
                ))
            }
            (LoadSource::Known(w), p) if w.len() != p => {
                return Err(Error::dim(format!(
                    "known load has {} entries, model expects {p}",
                    w.len()
                )))
            }
            _ => {}
        }
        if reference.dim() != model.n() {
            return Err(Error::dim(format!(
                "reference has dimension {}, model outputs {}",
                reference.dim(),
                model.n()
            )));
        }
        let condenser = Condenser::new(&model, &cfg)?;
        Ok(Controller {
            history: VecDeque::with_capacity(model.d + 1),
            model,
            cfg,
            condenser,
            load,
            reference,
            last_u: None,
            warm: None,
            step: 0,
            timing: false,
        })
    }

    /// Record wall-clock solve times in [`StepResult::solve_ms`].
    pub fn with_timing(mut self, on: bool) -> Self {
        self.timing = on;
        self
    }

    pub fn model(&self) -> &KoopmanModel {
        &self.model
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn load_source(&self) -> &LoadSource {
        &self.load
    }

    /// Current load used for lifting, if any.
    pub fn w_hat(&self) -> Option<&LoadVector> {
        match &self.load {
            LoadSource::None => None,
            LoadSource::Known(w) => Some(w),
            LoadSource::Observer(est) => Some(est.w_hat()),
        }
    }

    /// Stop refreshing the load estimate; the current value is kept.
    pub fn freeze_load(&mut self) {
        if let LoadSource::Observer(est) = &self.load {
            self.load = LoadSource::Known(est.w_hat().clone());
        }
    }

    /// Swap the reference; step indexing continues from the current step.
    pub fn set_reference(&mut self, reference: Reference) -> Result<()> {
        if reference.dim() != self.model.n() {
            return Err(Error::dim(
                "reference dimension does not match model outputs",
            ));
        }
        self.reference = reference;
        Ok(())
    }

    /// Reference points are consumed relative to this step from now on.
    pub fn restart_reference_clock(&mut self) {
        self.step = 0;
    }

    /// Consume the measurement `y[k]` and return `u[k]`.
    ///
    /// Until `d + 1` measurements exist the neutral input `u_ref` is applied.
    pub fn step(&mut self, y: &[f64]) -> Result<StepResult> {
        if y.len() != self.model.n() {
            return Err(Error::dim(format!(
                "measurement has length {}, expected {}",
                y.len(),
                self.model.n()
            )));
        }
        if let (Some(u), Some(last)) = (&self.last_u, self.history.back_mut()) {
            last.1 = u.clone();
        }
        self.history
            .push_back((y.to_vec(), vec![0.0; self.model.m()]));
        while self.history.len() > self.model.d + 1 {
            self.history.pop_front();
        }
        let estimate = match &mut self.load {
            LoadSource::Observer(est) => est.update(&self.model, y, self.last_u.as_deref())?,
            _ => None,
        };

        let k = self.step;
        self.step += 1;
        if self.history.len() <= self.model.d {
            let u = self.cfg.u_ref.clone();
            self.last_u = Some(u.clone());
            return Ok(StepResult {
                u,
                w_hat: self.w_hat().cloned(),
                qp_iters: 0,
                kkt_residual: 0.0,
                converged: true,
                solve_ms: 0.0,
                estimate,
            });
        }

        let window: Vec<_> = self.history.iter().cloned().collect();
        let yd = delay_embed(&window, window.len() - 1, self.model.d)?;
        let w = self.w_hat().cloned();
        let z0 = self.model.lift(&yd, w.as_ref())?;
        let refs = self.reference.window(k + 1, self.cfg.nh);

        let started = self.timing.then(Instant::now);
        let qp = self.condenser.problem(&z0, &refs)?;
        let warm = self
            .warm
            .as_ref()
            .map(|prev| shift_blocks(prev, self.cfg.m()));
        let sol = solve_box_qp(qp, self.cfg.qp_tol, self.cfg.qp_max_iter, warm.as_ref())?;
        let solve_ms = started.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
        if !sol.converged {
            log::warn!(
                "QP not converged at step {k}: KKT residual {:.3e} after {} iterations",
                sol.kkt_residual,
                sol.iterations
            );
        }

        let m = self.cfg.m();
        let u: Vec<f64> = (0..m)
            .map(|i| sol.u[i].clamp(self.cfg.u_min[i], self.cfg.u_max[i]))
            .collect();
        self.last_u = Some(u.clone());
        self.warm = Some(sol.u);
        Ok(StepResult {
            u,
            w_hat: w,
            qp_iters: sol.iterations,
            kkt_residual: sol.kkt_residual,
            converged: sol.converged,
            solve_ms,
            estimate,
        })
    }
}

/// Drop the first block and repeat the last one.
pub fn shift_blocks(u: &Vector, m: usize) -> Vector {
    let len = u.len();
    Vector::from_fn(len, |i, _| {
        if i + m < len {
            u[i + m]
        } else {
            u[len - m + i % m]
        }
    })
}

#[cfg(test)]
#[path = "../tests/common/qp_oracle.rs"]
mod qp_oracle;
