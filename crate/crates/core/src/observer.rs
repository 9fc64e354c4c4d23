//! Online load estimation from windowed input/output history.
//!
//! For an augmented model, one step of the output obeys
//!
//! ```text
//! y[j] = C A Gamma(yd[j-1]) (1, w) + C B u[j-1]
//! ```
//!
//! Stacking `Nw` such rows gives `Lambda_A (1, w) = Lambda_B`. The default
//! solve moves the known first column to the right-hand side and solves for
//! `w` alone; [`SolveMode::Unconstrained`] instead solves for the whole
//! vector `(c, w)` and discards `c`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::lifting::{delay_embed, lift_g, DelayEmbeddedOutput, IoRecord, LoadBounds, LoadVector};
use crate::numkit::{lstsq, Matrix, Vector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Solve for `w` with the leading `1` fixed.
    #[default]
    Reduced,
    /// Pseudoinverse of the full stack, leading entry left free.
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Window length in steps.
    pub nw: usize,
    /// Steps between window estimates.
    pub ne: usize,
    /// Number of earlier window estimates averaged with the newest one.
    pub nr: usize,
    pub bounds: LoadBounds,
    #[serde(default)]
    pub mode: SolveMode,
    /// Windows whose largest output step is below this are skipped.
    #[serde(default = "default_stationary_tol")]
    pub stationary_tol: f64,
}

fn default_stationary_tol() -> f64 {
    1e-4
}

impl EstimatorConfig {
    /// `Nw = 30`, `Ne = 12`, `Nr = 360`, loads in `[0, 0.3]`.
    pub fn standard(p: usize) -> Self {
        EstimatorConfig {
            nw: 30,
            ne: 12,
            nr: 360,
            bounds: LoadBounds::uniform(p, 0.0, 0.3),
            mode: SolveMode::Reduced,
            stationary_tol: default_stationary_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nw == 0 || self.ne == 0 {
            return Err(Error::Config("estimator needs nw >= 1 and ne >= 1".into()));
        }
        LoadBounds::new(self.bounds.min.clone(), self.bounds.max.clone()).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateFlag {
    Ok,
    /// The output is insensitive to the load here; previous value kept.
    Degenerate,
    /// Output barely moved across the window; previous value kept.
    Stationary,
    /// Not enough samples for a single row; previous value kept.
    InsufficientHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    /// Clamped estimate, or the previous value when `flag != Ok`.
    pub w: LoadVector,
    /// Unclamped least-squares solution (empty when not computed).
    pub raw: Vec<f64>,
    pub flag: EstimateFlag,
}

impl Estimate {
    fn carry(previous: &LoadVector, flag: EstimateFlag) -> Self {
        Estimate {
            w: previous.clone(),
            raw: Vec::new(),
            flag,
        }
    }
}

/// `C A` restricted to the output rows, cached per model.
fn ca(model: &KoopmanModel) -> Matrix {
    model.a.rows(0, model.n()).into_owned()
}

/// One block row: the `(p + 1)` columns of `C A Gamma(yd)` and the target
/// `y_next - C B u_prev`.
fn block_row(
    model: &KoopmanModel,
    ca: &Matrix,
    yd: &DelayEmbeddedOutput,
    y_next: &[f64],
    u_prev: &[f64],
) -> Result<(Matrix, Vector)> {
    let n = model.n();
    if y_next.len() != n || u_prev.len() != model.m() {
        return Err(Error::dim("observer row: output or input length mismatch"));
    }
    let g = lift_g(&model.basis, yd)?;
    let ng = g.len();
    let mut lam_a = Matrix::zeros(n, model.p + 1);
    for c in 0..=model.p {
        lam_a.set_column(c, &(ca.columns(c * ng, ng) * &g));
    }
    let cb_u = model.b.rows(0, n) * Vector::from_column_slice(u_prev);
    let lam_b = Vector::from_column_slice(y_next) - cb_u;
    Ok((lam_a, lam_b))
}

fn solve_stack(
    lam_a: &Matrix,
    lam_b: &Vector,
    mode: SolveMode,
    bounds: &LoadBounds,
    previous: &LoadVector,
) -> Result<Estimate> {
    let p = lam_a.ncols() - 1;
    let w_cols = lam_a.columns(1, p).into_owned();
    let scale = lam_a.norm();
    let w_strength = if p == 0 {
        0.0
    } else {
        w_cols.clone().singular_values().max()
    };
    if !(w_strength > 1e-12 * scale) {
        return Ok(Estimate::carry(previous, EstimateFlag::Degenerate));
    }
    let rhs = Matrix::from_column_slice(lam_b.len(), 1, lam_b.as_slice());
    let raw: Vec<f64> = match mode {
        SolveMode::Reduced => {
            let shifted = &rhs - lam_a.columns(0, 1);
            lstsq(&w_cols, &shifted)?.iter().copied().collect()
        }
        SolveMode::Unconstrained => lstsq(lam_a, &rhs)?.iter().skip(1).copied().collect(),
    };
    Ok(Estimate {
        w: bounds.clamp(&LoadVector(raw.clone())),
        raw,
        flag: EstimateFlag::Ok,
    })
}

fn require_augmented(model: &KoopmanModel) -> Result<()> {
    if model.p == 0 {
        Err(Error::invalid(
            "load estimation needs a load-augmented model",
        ))
    } else {
        Ok(())
    }
}

/// Single-step estimate of the load acting between `yd_prev` and `y_next`.
pub fn estimate_instant(
    model: &KoopmanModel,
    y_next: &[f64],
    yd_prev: &DelayEmbeddedOutput,
    u_prev: &[f64],
    bounds: &LoadBounds,
    previous: &LoadVector,
    mode: SolveMode,
) -> Result<Estimate> {
    require_augmented(model)?;
    let (lam_a, lam_b) = block_row(model, &ca(model), yd_prev, y_next, u_prev)?;
    solve_stack(&lam_a, &lam_b, mode, bounds, previous)
}

/// Window estimate from the newest samples of `history`.
///
/// The newest record is `y[j]`; rows `i = 1..=Nw` pair `Gamma(yd[j-i])` with
/// `y[j-i+1] - C B u[j-i]`. The input stored with `y[j]` is never read. When
/// the history is shorter than `Nw + d + 1`, as many rows as fit are used.
pub fn estimate_window<R: IoRecord>(
    model: &KoopmanModel,
    history: &[R],
    cfg: &EstimatorConfig,
    previous: &LoadVector,
) -> Result<Estimate> {
    require_augmented(model)?;
    let d = model.d;
    let len = history.len();
    if len < d + 2 {
        return Ok(Estimate::carry(previous, EstimateFlag::InsufficientHistory));
    }
    let j = len - 1;
    let rows = cfg.nw.min(j - d);

    let max_step = (j - rows - d..j)
        .map(|i| {
            history[i + 1]
                .y()
                .iter()
                .zip(history[i].y())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    if max_step < cfg.stationary_tol {
        return Ok(Estimate::carry(previous, EstimateFlag::Stationary));
    }

    let n = model.n();
    let ca = ca(model);
    let mut lam_a = Matrix::zeros(rows * n, model.p + 1);
    let mut lam_b = Vector::zeros(rows * n);
    for i in 1..=rows {
        let yd = delay_embed(history, j - i, d)?;
        let (a, b) = block_row(model, &ca, &yd, history[j - i + 1].y(), history[j - i].u())?;
        lam_a.rows_mut((i - 1) * n, n).copy_from(&a);
        lam_b.rows_mut((i - 1) * n, n).copy_from(&b);
    }
    solve_stack(&lam_a, &lam_b, cfg.mode, &cfg.bounds, previous)
}

/// Periodic window estimation with running averaging.
#[derive(Clone, Debug)]
pub struct EstimatorState {
    cfg: EstimatorConfig,
    d: usize,
    m: usize,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
    estimates: VecDeque<LoadVector>,
    w_hat: LoadVector,
    steps: usize,
    scheduled: usize,
    last: Option<Estimate>,
}

impl EstimatorState {
    /// Starts from the midpoint of the load bounds.
    pub fn new(cfg: EstimatorConfig, model: &KoopmanModel) -> Result<Self> {
        let w_init = cfg.bounds.midpoint();
        Self::with_initial(cfg, model, w_init)
    }

    pub fn with_initial(
        cfg: EstimatorConfig,
        model: &KoopmanModel,
        w_init: LoadVector,
    ) -> Result<Self> {
        cfg.validate()?;
        require_augmented(model)?;
        if cfg.bounds.min.len() != model.p {
            return Err(Error::Config(format!(
                "estimator bounds have {} entries, model load dimension is {}",
                cfg.bounds.min.len(),
                model.p
            )));
        }
        cfg.bounds.check(&w_init)?;
        Ok(EstimatorState {
            d: model.d,
            m: model.m(),
            history: VecDeque::with_capacity(cfg.nw + model.d + 1),
            estimates: VecDeque::with_capacity(cfg.nr + 1),
            w_hat: w_init,
            steps: 0,
            scheduled: 0,
            last: None,
            cfg,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn w_hat(&self) -> &LoadVector {
        &self.w_hat
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Window estimates attempted so far (`floor(steps / Ne)`).
    pub fn scheduled(&self) -> usize {
        self.scheduled
    }

    pub fn buffered_estimates(&self) -> impl Iterator<Item = &LoadVector> {
        self.estimates.iter()
    }

    pub fn last_estimate(&self) -> Option<&Estimate> {
        self.last.as_ref()
    }

    /// Samples currently held, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &(Vec<f64>, Vec<f64>)> {
        self.history.iter()
    }

    /// Record the newest output `y[k]` together with the input `u[k-1]`
    /// applied since the previous sample. Every `Ne`-th call runs a window
    /// estimate and refreshes `w_hat`; the estimate is returned when one ran.
    pub fn update(
        &mut self,
        model: &KoopmanModel,
        y: &[f64],
        u_prev: Option<&[f64]>,
    ) -> Result<Option<Estimate>> {
        if let (Some(u), Some(last)) = (u_prev, self.history.back_mut()) {
            if u.len() != self.m {
                return Err(Error::dim(format!(
                    "input has length {}, expected {}",
                    u.len(),
                    self.m
                )));
            }
            last.1 = u.to_vec();
        }
        self.history.push_back((y.to_vec(), vec![0.0; self.m]));
        while self.history.len() > self.cfg.nw + self.d + 1 {
            self.history.pop_front();
        }
        self.steps += 1;
        if !self.steps.is_multiple_of(self.cfg.ne) {
            return Ok(None);
        }
        self.scheduled += 1;
        let window: Vec<_> = self.history.iter().cloned().collect();
        let est = estimate_window(model, &window, &self.cfg, &self.w_hat)?;
        if est.flag == EstimateFlag::Ok {
            self.estimates.push_back(est.w.clone());
            while self.estimates.len() > self.cfg.nr + 1 {
                self.estimates.pop_front();
            }
            let count = self.estimates.len() as f64;
            let p = self.w_hat.len();
            let mean = (0..p)
                .map(|i| self.estimates.iter().map(|w| w.0[i]).sum::<f64>() / count)
                .collect();
            self.w_hat = self.cfg.bounds.clamp(&LoadVector(mean));
        }
        self.last = Some(est.clone());
        Ok(Some(est))
    }
}
