//! Simulated two-link elastic arm with a tip payload.
//!
//! Angles are absolute, measured from the downward vertical, and the joint
//! springs pull each link back to `theta = 0`. With `m2' = m2 + w`:
//!
//! ```text
//! M(theta) alpha + cor(theta, omega) + G(theta) + k theta + c omega = tau
//! M11 = (m1 + m2') L1^2     M12 = M21 = m2' L1 L2 cos(theta1 - theta2)
//! M22 = m2' L2^2
//! cor1 =  m2' L1 L2 sin(theta1 - theta2) omega2^2
//! cor2 = -m2' L1 L2 sin(theta1 - theta2) omega1^2
//! G1 = (m1 + m2') g L1 sin(theta1)   G2 = m2' g L2 sin(theta2)
//! ```
//!
//! Commands `u` in `[0, 1]^2` map to torques `tau = tau_max (2u - 1)`, held
//! for one sample period and integrated with fixed-step RK4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edmd::{Record, Trajectory};
use crate::error::{Error, Result};
use crate::par::*;

pub const NUM_OUTPUTS: usize = 4;
pub const NUM_INPUTS: usize = 2;
pub const LOAD_MIN: f64 = 0.0;
pub const LOAD_MAX: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub g: f64,
    /// Joint stiffness (N m / rad).
    pub k: f64,
    /// Joint damping (N m s / rad).
    pub c: f64,
    /// Torque at full command (N m).
    pub tau_max: f64,
    /// Sample period (s).
    pub ts: f64,
    pub substeps: usize,
    /// Sensor noise standard deviation (m).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ArmParams {
    fn default() -> Self {
        ArmParams {
            l1: 0.5,
            l2: 0.5,
            m1: 0.2,
            m2: 0.2,
            g: 9.81,
            k: 5.0,
            c: 5.0,
            tau_max: 8.0,
            ts: 0.05,
            substeps: 10,
            noise_std: 1e-3,
            seed: 0,
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.l1,
            self.l2,
            self.m1,
            self.m2,
            self.g,
            self.k,
            self.c,
            self.tau_max,
            self.ts,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.substeps == 0 {
            return Err(Error::Config("arm parameters must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Commands to torques.
    pub fn torque(&self, u: &[f64]) -> [f64; 2] {
        [
            self.tau_max * (2.0 * u[0] - 1.0),
            self.tau_max * (2.0 * u[1] - 1.0),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub theta1: f64,
    pub theta2: f64,
    pub omega1: f64,
    pub omega2: f64,
    /// Payload mass (kg).
    pub w: f64,
}

impl ArmState {
    /// Hanging at rest with payload `w`.
    pub fn at_rest(w: f64) -> Self {
        ArmState {
            w,
            ..Default::default()
        }
    }

    fn offset(&self, d: [f64; 4], h: f64) -> Self {
        ArmState {
            theta1: self.theta1 + h * d[0],
            theta2: self.theta2 + h * d[1],
            omega1: self.omega1 + h * d[2],
            omega2: self.omega2 + h * d[3],
            w: self.w,
        }
    }

    fn is_finite(&self) -> bool {
        [self.theta1, self.theta2, self.omega1, self.omega2, self.w]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Link-1 tip and end-effector positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantOutput {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

impl PlantOutput {
    /// `(x1, y1, x2, y2)`.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.p1[0], self.p1[1], self.p2[0], self.p2[1]]
    }
}

fn mass_matrix(state: &ArmState, p: &ArmParams) -> [[f64; 2]; 2] {
    let m2 = p.m2 + state.w;
    let m12 = m2 * p.l1 * p.l2 * (state.theta1 - state.theta2).cos();
    [[(p.m1 + m2) * p.l1 * p.l1, m12], [m12, m2 * p.l2 * p.l2]]
}

/// `(omega1, omega2, alpha1, alpha2)`.
pub fn dynamics(state: &ArmState, tau: [f64; 2], p: &ArmParams) -> [f64; 4] {
    let m2 = p.m2 + state.w;
    let [[a, b], [_, d]] = mass_matrix(state, p);
    let s = (state.theta1 - state.theta2).sin();
    let coupling = m2 * p.l1 * p.l2 * s;
    let rhs1 = tau[0]
        - coupling * state.omega2 * state.omega2
        - (p.m1 + m2) * p.g * p.l1 * state.theta1.sin()
        - p.k * state.theta1
        - p.c * state.omega1;
    let rhs2 = tau[1] + coupling * state.omega1 * state.omega1
        - m2 * p.g * p.l2 * state.theta2.sin()
        - p.k * state.theta2
        - p.c * state.omega2;
    let det = a * d - b * b;
    let alpha1 = (d * rhs1 - b * rhs2) / det;
    let alpha2 = (a * rhs2 - b * rhs1) / det;
    [state.omega1, state.omega2, alpha1, alpha2]
}

/// One classical RK4 step of size `h` with constant torque.
pub fn rk4_step(state: &ArmState, tau: [f64; 2], p: &ArmParams, h: f64) -> ArmState {
    let k1 = dynamics(state, tau, p);
    let k2 = dynamics(&state.offset(k1, 0.5 * h), tau, p);
    let k3 = dynamics(&state.offset(k2, 0.5 * h), tau, p);
    let k4 = dynamics(&state.offset(k3, h), tau, p);
    let mut incr = [0.0; 4];
    for i in 0..4 {
        incr[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    state.offset(incr, h)
}

/// Kinetic plus gravitational plus spring energy (J).
pub fn energy(state: &ArmState, p: &ArmParams) -> f64 {
    let m = mass_matrix(state, p);
    let (w1, w2) = (state.omega1, state.omega2);
    let kinetic = 0.5 * (m[0][0] * w1 * w1 + 2.0 * m[0][1] * w1 * w2 + m[1][1] * w2 * w2);
    let m2 = p.m2 + state.w;
    let gravity =
        -(p.m1 + m2) * p.g * p.l1 * state.theta1.cos() - m2 * p.g * p.l2 * state.theta2.cos();
    let spring = 0.5 * p.k * (state.theta1 * state.theta1 + state.theta2 * state.theta2);
    kinetic + gravity + spring
}

/// Noise-free link positions.
pub fn output(state: &ArmState, p: &ArmParams) -> PlantOutput {
    let p1 = [p.l1 * state.theta1.sin(), -p.l1 * state.theta1.cos()];
    let p2 = [
        p1[0] + p.l2 * state.theta2.sin(),
        p1[1] - p.l2 * state.theta2.cos(),
    ];
    PlantOutput { p1, p2 }
}

fn check_command(u: &[f64]) -> Result<()> {
    if u.len() != NUM_INPUTS {
        return Err(Error::dim(format!(
            "arm takes {NUM_INPUTS} commands, got {}",
            u.len()
        )));
    }
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfBounds(format!("commands {u:?} outside [0, 1]")));
    }
    Ok(())
}

fn add_noise(out: PlantOutput, std: f64, rng: &mut impl Rng) -> PlantOutput {
    if std == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut n = || normal.sample(rng);
    PlantOutput {
        p1: [out.p1[0] + n(), out.p1[1] + n()],
        p2: [out.p2[0] + n(), out.p2[1] + n()],
    }
}

/// Hold `u` for one sample period; returns the next state and its (noisy)
/// measurement.
pub fn step_zoh(
    state: &ArmState,
    u: &[f64],
    p: &ArmParams,
    rng: &mut impl Rng,
) -> Result<(ArmState, PlantOutput)> {
    check_command(u)?;
    if !state.is_finite() {
        return Err(Error::invalid("arm state is not finite"));
    }
    let tau = p.torque(u);
    let h = p.ts / p.substeps as f64;
    let mut s = *state;
    for _ in 0..p.substeps {
        s = rk4_step(&s, tau, p, h);
    }
    let y = add_noise(output(&s, p), p.noise_std, rng);
    Ok((s, y))
}

/// A plant instance owning its state, clock and noise source.
#[derive(Clone, Debug)]
pub struct Arm {
    params: ArmParams,
    state: ArmState,
    rng: ChaCha8Rng,
    step: usize,
}

impl Arm {
    pub fn new(params: ArmParams, state: ArmState) -> Result<Self> {
        params.validate()?;
        if !(LOAD_MIN..=LOAD_MAX).contains(&state.w) {
            return Err(Error::OutOfBounds(format!(
                "payload {} kg outside [{LOAD_MIN}, {LOAD_MAX}]",
                state.w
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Arm {
            params,
            state,
            rng,
            step: 0,
        })
    }

    /// Use a dedicated noise stream, e.g. one per trial.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self
    }

    pub fn params(&self) -> &ArmParams {
        &self.params
    }

    pub fn state(&self) -> &ArmState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.params.ts
    }

    pub fn set_payload(&mut self, w: f64) -> Result<()> {
        if !(LOAD_MIN..=LOAD_MAX).contains(&w) {
            return Err(Error::OutOfBounds(format!(
                "payload {w} kg outside [{LOAD_MIN}, {LOAD_MAX}]"
            )));
        }
        self.state.w = w;
        Ok(())
    }

    /// Noisy measurement of the current state.
    pub fn measure(&mut self) -> PlantOutput {
        add_noise(
            output(&self.state, &self.params),
            self.params.noise_std,
            &mut self.rng,
        )
    }

    pub fn step(&mut self, u: &[f64]) -> Result<PlantOutput> {
        let (s, y) = step_zoh(&self.state, u, &self.params, &mut self.rng)?;
        self.state = s;
        self.step += 1;
        Ok(y)
    }
}

/// Randomised ramp-and-hold command generator.
///
/// Holds a uniform random command for a random time, then ramps linearly to
/// the next one. Both channels share the timing.
#[derive(Clone, Debug)]
pub struct RampAndHold {
    rng: ChaCha8Rng,
    hold: (f64, f64),
    ramp: (f64, f64),
    from: [f64; 2],
    to: [f64; 2],
    hold_end: f64,
    ramp_end: f64,
}

impl RampAndHold {
    /// Hold times in `[0.25, 1.5]` s, ramps in `[0.1, 0.5]` s.
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::with_timing(seed, stream, (0.25, 1.5), (0.1, 0.5))
    }

    pub fn with_timing(seed: u64, stream: u64, hold: (f64, f64), ramp: (f64, f64)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let from = [rng.random::<f64>(), rng.random::<f64>()];
        let hold_end = rng.random_range(hold.0..=hold.1);
        let ramp_end = hold_end + rng.random_range(ramp.0..=ramp.1);
        let to = [rng.random::<f64>(), rng.random::<f64>()];
        RampAndHold {
            rng,
            hold,
            ramp,
            from,
            to,
            hold_end,
            ramp_end,
        }
    }

    /// Command at time `t`; calls must use non-decreasing `t`.
    pub fn sample(&mut self, t: f64) -> [f64; 2] {
        while t >= self.ramp_end {
            self.from = self.to;
            self.hold_end = self.ramp_end + self.rng.random_range(self.hold.0..=self.hold.1);
            self.ramp_end = self.hold_end + self.rng.random_range(self.ramp.0..=self.ramp.1);
            self.to = [self.rng.random::<f64>(), self.rng.random::<f64>()];
        }
        if t < self.hold_end {
            return self.from;
        }
        let s = (t - self.hold_end) / (self.ramp_end - self.hold_end);
        [
            (self.from[0] + s * (self.to[0] - self.from[0])).clamp(0.0, 1.0),
            (self.from[1] + s * (self.to[1] - self.from[1])).clamp(0.0, 1.0),
        ]
    }
}

/// Number of samples in a run of `duration` seconds, both ends included.
pub fn sample_count(duration: f64, ts: f64) -> usize {
    (duration / ts + 1e-9).floor() as usize + 1
}

/// Drive a fresh arm (hanging at rest with payload `w`) with ramp-and-hold
/// commands and record `(t, y, u, w)` every sample.
pub fn ramp_and_hold_trajectory(
    params: &ArmParams,
    w: f64,
    duration: f64,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    let mut arm = Arm::new(params.clone(), ArmState::at_rest(w))?.with_stream(stream);
    let mut policy = RampAndHold::new(seed, stream);
    let samples = sample_count(duration, params.ts);
    let mut records = Vec::with_capacity(samples);
    let mut y = arm.measure().to_vec();
    for k in 0..samples {
        let t = k as f64 * params.ts;
        let u = policy.sample(t).to_vec();
        records.push(Record {
            t,
            y: y.clone(),
            u: u.clone(),
            w: vec![w],
        });
        if k + 1 < samples {
            y = arm.step(&u)?.to_vec();
        }
    }
    Ok(records)
}

/// One trajectory per `(trial, load)` pair, ordered trial-major.
pub fn collect_training_data(
    params: &ArmParams,
    loads: &[f64],
    trials: usize,
    duration: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    if let Some(w) = loads.iter().find(|w| !(LOAD_MIN..=LOAD_MAX).contains(*w)) {
        return Err(Error::OutOfBounds(format!(
            "load {w} kg outside [{LOAD_MIN}, {LOAD_MAX}]"
        )));
    }
    let jobs: Vec<(usize, f64)> = (0..trials)
        .flat_map(|trial| loads.iter().map(move |&w| (trial, w)))
        .collect();
    jobs.into_par_iter()
        .enumerate()
        .map(|(stream, (_, w))| ramp_and_hold_trajectory(params, w, duration, seed, stream as u64))
        .collect()
}

/// Static torques holding the arm at the given angles with payload `w`.
pub fn holding_torque(theta: [f64; 2], w: f64, p: &ArmParams) -> [f64; 2] {
    let m2 = p.m2 + w;
    [
        (p.m1 + m2) * p.g * p.l1 * theta[0].sin() + p.k * theta[0],
        m2 * p.g * p.l2 * theta[1].sin() + p.k * theta[1],
    ]
}

/// Both inverse-kinematics branches `(theta1, theta2)` for an end-effector
/// position, or none when out of reach.
pub fn inverse_kinematics(target: [f64; 2], p: &ArmParams) -> Vec<[f64; 2]> {
    let [x, y] = target;
    let r = x.hypot(y);
    if r > p.l1 + p.l2 || r < (p.l1 - p.l2).abs() || r == 0.0 {
        return Vec::new();
    }
    let phi = x.atan2(-y);
    let cos_a = ((p.l1 * p.l1 + r * r - p.l2 * p.l2) / (2.0 * p.l1 * r)).clamp(-1.0, 1.0);
    let alpha = cos_a.acos();
    [phi + alpha, phi - alpha]
        .into_iter()
        .map(|t1| {
            let (ex, ey) = (x - p.l1 * t1.sin(), y + p.l1 * t1.cos());
            [t1, ex.atan2(-ey)]
        })
        .collect()
}

/// Smallest torque fraction `max |tau_i| / tau_max` over the IK branches
/// needed to hold the end effector at `target`; `None` if out of reach.
pub fn static_effort(target: [f64; 2], w: f64, p: &ArmParams) -> Option<f64> {
    inverse_kinematics(target, p)
        .into_iter()
        .map(|th| {
            let tau = holding_torque(th, w, p);
            tau[0].abs().max(tau[1].abs()) / p.tau_max
        })
        .min_by(f64::total_cmp)
}
