//! Snapshot assembly and least-squares Koopman fits.
//!
//! Each snapshot is lifted to `psi(a, u) = (lift(a, w), u)` and
//! `psi(b, u) = (lift(b, w), u)`. The finite Koopman matrix is
//! `K = pinv(Psi_a) Psi_b`, and `K^T = [[A, B], [~0, ~I]]`. `A` and `B` are
//! read from the top block; the bottom block is only reported.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifting::{
    lift_g, lift_gamma, Basis, DelayEmbeddedOutput, EmbedDims, IoRecord, LoadVector,
};
use crate::numkit::{lstsq_with_rank, row_major, Matrix, Vector, DEFAULT_RTOL};
use crate::par::*;

/// One sample of a trajectory: output at `t` and the input held over `[t, t + Ts)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl IoRecord for Record {
    fn y(&self) -> &[f64] {
        &self.y
    }
    fn u(&self) -> &[f64] {
        &self.u
    }
}

pub type Trajectory = Vec<Record>;

/// A collection of trajectories sharing output, input and load dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub trajectories: Vec<Trajectory>,
}

fn column_names(n: usize, m: usize, p: usize) -> Vec<String> {
    let mut names = vec!["t".to_string()];
    names.extend((1..=n).map(|i| format!("y{i}")));
    names.extend((1..=m).map(|i| format!("u{i}")));
    if p == 1 {
        names.push("w".into());
    } else {
        names.extend((1..=p).map(|i| format!("w{i}")));
    }
    names
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .iter()
            .find_map(|t| t.first())
            .ok_or_else(|| Error::Dataset("dataset has no records".into()))?;
        let (n, m, p) = (first.y.len(), first.u.len(), first.w.len());
        for r in trajectories.iter().flatten() {
            if r.y.len() != n || r.u.len() != m || r.w.len() != p {
                return Err(Error::Dataset("records disagree on dimensions".into()));
            }
        }
        Ok(Dataset {
            n,
            m,
            p,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Header `t, y1..yn, u1..um, w` (or `w1..wp` when `p != 1`). A new
    /// trajectory starts wherever `t` fails to increase.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(column_names(self.n, self.m, self.p))?;
        for r in self.trajectories.iter().flatten() {
            let mut row = vec![r.t.to_string()];
            row.extend(r.y.iter().chain(&r.u).chain(&r.w).map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let count = |prefix: char| {
            header
                .iter()
                .filter(|h| h.starts_with(prefix) && h[1..].chars().all(|c| c.is_ascii_digit()))
                .count()
        };
        let (n, m, p) = (count('y'), count('u'), count('w'));
        if header != column_names(n, m, p) {
            return Err(Error::Dataset(format!(
                "unexpected header {header:?}; expected t, y1..yn, u1..um, w1..wp"
            )));
        }
        let mut trajectories: Vec<Trajectory> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Dataset(format!("row {}: {e}", line + 2)))?;
            if vals.len() != 1 + n + m + p {
                return Err(Error::Dataset(format!(
                    "row {} has {} fields",
                    line + 2,
                    vals.len()
                )));
            }
            let r = Record {
                t: vals[0],
                y: vals[1..1 + n].to_vec(),
                u: vals[1 + n..1 + n + m].to_vec(),
                w: vals[1 + n + m..].to_vec(),
            };
            match trajectories.last_mut() {
                Some(traj) if traj.last().is_some_and(|prev| r.t > prev.t) => traj.push(r),
                _ => trajectories.push(vec![r]),
            }
        }
        if trajectories.is_empty() {
            return Err(Error::Dataset("dataset has no records".into()));
        }
        Ok(Dataset {
            n,
            m,
            p,
            trajectories,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// `(a[k], b[k], u[k], w)` with `b[k] = a[k + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub a: DelayEmbeddedOutput,
    pub b: DelayEmbeddedOutput,
    pub u: Vec<f64>,
    pub w: Option<LoadVector>,
}

#[derive(Clone, Debug)]
pub struct SnapshotSet {
    pub dims: EmbedDims,
    pub ts: f64,
    pub p: usize,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Matrix of `a[k]` rows, the sample set a basis is fitted on.
    pub fn a_matrix(&self) -> Matrix {
        let cols = self.dims.embedded_len();
        Matrix::from_fn(self.snapshots.len(), cols, |i, j| {
            self.snapshots[i].a.as_slice()[j]
        })
    }
}

const TS_RTOL: f64 = 1e-6;

/// Build snapshot pairs from each trajectory, never straddling boundaries.
pub fn assemble_snapshots(trajectories: &[Trajectory], d: usize) -> Result<SnapshotSet> {
    let mut ts: Option<f64> = None;
    let mut dims: Option<EmbedDims> = None;
    let mut p = None;
    let mut snapshots = Vec::new();
    for (ti, traj) in trajectories.iter().enumerate() {
        if traj.len() < d + 2 {
            return Err(Error::Dataset(format!(
                "trajectory {ti} has {} samples, needs at least {}",
                traj.len(),
                d + 2
            )));
        }
        for pair in traj.windows(2) {
            let dt = pair[1].t - pair[0].t;
            let reference = *ts.get_or_insert(dt);
            if !(dt > 0.0) || (dt - reference).abs() > TS_RTOL * reference {
                return Err(Error::Dataset(format!(
                    "trajectory {ti}: non-uniform sampling ({dt} vs {reference})"
                )));
            }
        }
        let w0 = &traj[0].w;
        if traj.iter().any(|r| &r.w != w0) {
            return Err(Error::Dataset(format!(
                "trajectory {ti}: load varies within trajectory"
            )));
        }
        if *p.get_or_insert(w0.len()) != w0.len() {
            return Err(Error::Dataset(
                "trajectories disagree on load dimension".into(),
            ));
        }
        let w = (!w0.is_empty())
            .then(|| LoadVector::new(w0.clone()))
            .transpose()?;
        let embedded: Vec<DelayEmbeddedOutput> = (d..traj.len())
            .map(|k| crate::lifting::delay_embed(traj, k, d))
            .collect::<Result<_>>()?;
        let dk = embedded[0].dims();
        if *dims.get_or_insert(dk) != dk {
            return Err(Error::Dataset("trajectories disagree on dimensions".into()));
        }
        for (i, pair) in embedded.windows(2).enumerate() {
            let k = d + i;
            snapshots.push(Snapshot {
                a: pair[0].clone(),
                b: pair[1].clone(),
                u: traj[k].u.clone(),
                w: w.clone(),
            });
        }
    }
    Ok(SnapshotSet {
        dims: dims.ok_or_else(|| Error::Dataset("no trajectories".into()))?,
        ts: ts.unwrap_or(0.0),
        p: p.unwrap_or(0),
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub snapshots: usize,
    /// Numerical rank of `Psi_a`.
    pub rank: usize,
    /// `n_z + m`, the rank a well-posed fit should reach.
    pub full_rank: usize,
    /// Max-abs deviation of the bottom block of `K^T` from `[0 | I]`.
    pub bottom_block_residual: f64,
}

/// `z+ = A z + B u`, `y = C z` on the lifted state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    #[serde(with = "row_major")]
    pub a: Matrix,
    #[serde(with = "row_major")]
    pub b: Matrix,
    #[serde(with = "row_major")]
    pub c: Matrix,
    pub basis: Basis,
    pub d: usize,
    pub ts: f64,
    /// Load dimension, 0 when the model is not load-augmented.
    pub p: usize,
    pub n_z: usize,
    pub diagnostics: Option<FitDiagnostics>,
}

impl KoopmanModel {
    /// Assemble a model from explicit matrices; `C` is set to `[I | 0]`.
    pub fn from_parts(a: Matrix, b: Matrix, basis: Basis, ts: f64, p: usize) -> Result<Self> {
        let n_z = basis.n_g() * (p + 1);
        let n = basis.dims.n;
        if a.shape() != (n_z, n_z) || b.nrows() != n_z || b.ncols() != basis.dims.m {
            return Err(Error::dim(format!(
                "A {:?} / B {:?} incompatible with n_z = {n_z}, m = {}",
                a.shape(),
                b.shape(),
                basis.dims.m
            )));
        }
        let c = output_projection(n, n_z);
        Ok(KoopmanModel {
            a,
            b,
            c,
            d: basis.dims.d,
            basis,
            ts,
            p,
            n_z,
            diagnostics: None,
        })
    }

    pub fn n(&self) -> usize {
        self.basis.dims.n
    }

    pub fn m(&self) -> usize {
        self.basis.dims.m
    }

    pub fn dims(&self) -> EmbedDims {
        self.basis.dims
    }

    /// Lift an embedded output (and load, for augmented models) to `z`.
    pub fn lift(&self, yd: &DelayEmbeddedOutput, w: Option<&LoadVector>) -> Result<Vector> {
        match (self.p, w) {
            (0, _) => lift_g(&self.basis, yd),
            (p, Some(w)) if w.len() == p => lift_gamma(&self.basis, yd, w),
            (p, Some(w)) => Err(Error::dim(format!(
                "model expects {p} load entries, got {}",
                w.len()
            ))),
            (_, None) => Err(Error::invalid(
                "load-augmented model requires a load vector",
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let model: KoopmanModel = serde_json::from_reader(std::io::BufReader::new(file))?;
        if model.c != output_projection(model.n(), model.n_z)
            || model.a.shape() != (model.n_z, model.n_z)
        {
            return Err(Error::invalid("model file has inconsistent matrices"));
        }
        Ok(model)
    }
}

fn output_projection(n: usize, n_z: usize) -> Matrix {
    Matrix::from_fn(n, n_z, |i, j| if i == j { 1.0 } else { 0.0 })
}

fn psi_row(
    basis: &Basis,
    x: &DelayEmbeddedOutput,
    u: &[f64],
    w: Option<&LoadVector>,
    out: &mut [f64],
) -> Result<()> {
    let ng = basis.n_g();
    basis.lift_into(x.as_slice(), &mut out[..ng])?;
    let p = w.map_or(0, LoadVector::len);
    if let Some(w) = w {
        for (i, wi) in w.as_slice().iter().enumerate() {
            for j in 0..ng {
                out[ng * (i + 1) + j] = out[j] * wi;
            }
        }
    }
    out[ng * (p + 1)..].copy_from_slice(u);
    Ok(())
}

/// Least-squares Koopman fit on lifted snapshot pairs.
pub fn fit_koopman(set: &SnapshotSet, basis: &Basis, with_load: bool) -> Result<KoopmanModel> {
    if basis.dims != set.dims {
        return Err(Error::dim(format!(
            "basis dims {:?} differ from snapshot dims {:?}",
            basis.dims, set.dims
        )));
    }
    let p = if with_load { set.p } else { 0 };
    if with_load && (p == 0 || set.snapshots.iter().any(|s| s.w.is_none())) {
        return Err(Error::invalid(
            "load-augmented fit requires a load on every snapshot",
        ));
    }
    let m = set.dims.m;
    let n_z = basis.n_g() * (p + 1);
    let cols = n_z + m;
    let k = set.snapshots.len();
    if k < cols {
        return Err(Error::invalid(format!(
            "{k} snapshots cannot determine {cols} lifted coordinates"
        )));
    }

    let rows: Vec<(Vec<f64>, Vec<f64>)> = set
        .snapshots
        .par_iter()
        .map(|s| {
            let w = if with_load { s.w.as_ref() } else { None };
            let mut ra = vec![0.0; cols];
            let mut rb = vec![0.0; cols];
            psi_row(basis, &s.a, &s.u, w, &mut ra)?;
            psi_row(basis, &s.b, &s.u, w, &mut rb)?;
            Ok((ra, rb))
        })
        .collect::<Result<_>>()?;
    let psi_a = Matrix::from_fn(k, cols, |i, j| rows[i].0[j]);
    let psi_b = Matrix::from_fn(k, cols, |i, j| rows[i].1[j]);
    drop(rows);

    let sol = lstsq_with_rank(&psi_a, &psi_b, DEFAULT_RTOL)?;
    if sol.rank < cols {
        log::warn!(
            "Psi_a has numerical rank {} < {cols}; fit relies on the pseudoinverse",
            sol.rank
        );
    }
    let kt = sol.x.transpose();
    let a = kt.view((0, 0), (n_z, n_z)).into_owned();
    let b = kt.view((0, n_z), (n_z, m)).into_owned();
    let mut bottom_dev = 0.0_f64;
    for i in 0..m {
        for j in 0..cols {
            let target = if j == n_z + i { 1.0 } else { 0.0 };
            bottom_dev = bottom_dev.max((kt[(n_z + i, j)] - target).abs());
        }
    }

    let mut model = KoopmanModel::from_parts(a, b, basis.clone(), set.ts, p)?;
    model.diagnostics = Some(FitDiagnostics {
        snapshots: k,
        rank: sol.rank,
        full_rank: cols,
        bottom_block_residual: bottom_dev,
    });
    Ok(model)
}

/// Identity-basis least-squares fit: a plain linear state-space model on the
/// delay-embedded output.
pub fn fit_linear_baseline(set: &SnapshotSet) -> Result<KoopmanModel> {
    fit_koopman(set, &Basis::identity(set.dims), false)
}

/// `C (A lift(yd, w) + B u)`.
pub fn predict_one_step(
    model: &KoopmanModel,
    yd: &DelayEmbeddedOutput,
    u: &[f64],
    w: Option<&LoadVector>,
) -> Result<Vector> {
    if u.len() != model.m() {
        return Err(Error::dim(format!(
            "input has length {}, model expects {}",
            u.len(),
            model.m()
        )));
    }
    let z = model.lift(yd, w)?;
    let u = Vector::from_column_slice(u);
    Ok(&model.c * (&model.a * z + &model.b * u))
}

/// Pure linear rollout from `z0`; returns `C z[j]` for `j = 1..=inputs.len()`.
pub fn simulate_lifted(
    model: &KoopmanModel,
    z0: &Vector,
    inputs: &[Vec<f64>],
) -> Result<Vec<Vector>> {
    if z0.len() != model.n_z {
        return Err(Error::dim(format!(
            "z0 has length {}, model has n_z = {}",
            z0.len(),
            model.n_z
        )));
    }
    let mut z = z0.clone();
    inputs
        .iter()
        .map(|u| {
            if u.len() != model.m() {
                return Err(Error::dim(format!(
                    "input has length {}, model expects {}",
                    u.len(),
                    model.m()
                )));
            }
            z = &model.a * &z + &model.b * Vector::from_column_slice(u);
            Ok(&model.c * &z)
        })
        .collect()
}
