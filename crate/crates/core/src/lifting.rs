//! Delay embedding and the lifting dictionary.
//!
//! The lifted state for an embedded output `yd` is
//!
//! ```text
//! g(yd) = [ yd (identity block) ; 1 ; P (m(yd) - mean) ]
//! ```
//!
//! where `m(yd)` evaluates every monomial of degree 2..=max_degree and `P`
//! holds the retained principal directions of those evaluations. The identity
//! block is never projected, so `C = [I | 0]` recovers the output exactly.
//! The load-augmented lifting stacks `g(yd)` with `g(yd) * w_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{pca_fit, Matrix, PcaProjection, Vector};
use crate::par::*;

/// Anything that carries an output sample and the input applied after it.
pub trait IoRecord {
    fn y(&self) -> &[f64];
    fn u(&self) -> &[f64];
}

impl IoRecord for (Vec<f64>, Vec<f64>) {
    fn y(&self) -> &[f64] {
        &self.0
    }
    fn u(&self) -> &[f64] {
        &self.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedDims {
    /// Output dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Number of delays.
    pub d: usize,
}

impl EmbedDims {
    pub fn new(n: usize, m: usize, d: usize) -> Self {
        EmbedDims { n, m, d }
    }

    /// `n + (n + m) d`.
    pub fn embedded_len(&self) -> usize {
        self.n + (self.n + self.m) * self.d
    }
}

/// `(y[k], y[k-1], ..., y[k-d], u[k-1], ..., u[k-d])`, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayEmbeddedOutput {
    dims: EmbedDims,
    data: Vec<f64>,
}

impl DelayEmbeddedOutput {
    pub fn new(dims: EmbedDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.embedded_len() {
            return Err(Error::dim(format!(
                "embedded output needs {} entries, got {}",
                dims.embedded_len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "embedded output contains non-finite entries",
            ));
        }
        Ok(DelayEmbeddedOutput { dims, data })
    }

    pub fn dims(&self) -> EmbedDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn y_current(&self) -> &[f64] {
        &self.data[..self.dims.n]
    }

    /// `y[k - i]` for `i` in `1..=d`.
    pub fn y_past(&self, i: usize) -> &[f64] {
        assert!(i >= 1 && i <= self.dims.d, "delay index {i} out of range");
        let n = self.dims.n;
        &self.data[n * i..n * (i + 1)]
    }

    /// `u[k - i]` for `i` in `1..=d`.
    pub fn u_past(&self, i: usize) -> &[f64] {
        assert!(i >= 1 && i <= self.dims.d, "delay index {i} out of range");
        let EmbedDims { n, m, d } = self.dims;
        let start = n * (d + 1) + m * (i - 1);
        &self.data[start..start + m]
    }
}

/// Delay-embed the history at index `k`.
///
/// Only `u[k-d..k]` is read, so the input stored alongside `y[k]` may be a
/// placeholder.
pub fn delay_embed<R: IoRecord>(history: &[R], k: usize, d: usize) -> Result<DelayEmbeddedOutput> {
    if k < d {
        return Err(Error::InsufficientHistory { needed: d, got: k });
    }
    if k >= history.len() {
        return Err(Error::invalid(format!(
            "index {k} beyond history of length {}",
            history.len()
        )));
    }
    let n = history[k].y().len();
    let m = if d > 0 {
        history[k - 1].u().len()
    } else {
        history[k].u().len()
    };
    let dims = EmbedDims::new(n, m, d);
    let mut data = Vec::with_capacity(dims.embedded_len());
    for i in 0..=d {
        let y = history[k - i].y();
        if y.len() != n {
            return Err(Error::dim(format!(
                "output at {} has length {}, expected {n}",
                k - i,
                y.len()
            )));
        }
        data.extend_from_slice(y);
    }
    for i in 1..=d {
        let u = history[k - i].u();
        if u.len() != m {
            return Err(Error::dim(format!(
                "input at {} has length {}, expected {m}",
                k - i,
                u.len()
            )));
        }
        data.extend_from_slice(u);
    }
    DelayEmbeddedOutput::new(dims, data)
}

/// All exponent tuples of total degree `<= max_degree` over `dim` variables.
///
/// Ordered by degree, then lexicographically by the sorted variable indices,
/// so degree 0 comes first followed by the `dim` coordinate identities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialSet {
    pub dim: usize,
    pub exponents: Vec<Vec<u8>>,
}

impl MonomialSet {
    pub fn full(dim: usize, max_degree: u8) -> Self {
        let mut exponents = Vec::new();
        for degree in 0..=max_degree {
            let mut idx = vec![0usize; degree as usize];
            loop {
                if dim > 0 || degree == 0 {
                    let mut e = vec![0u8; dim];
                    for &i in &idx {
                        e[i] += 1;
                    }
                    exponents.push(e);
                }
                if degree == 0 || dim == 0 {
                    break;
                }
                // Next non-decreasing index tuple.
                let mut pos = degree as usize;
                while pos > 0 && idx[pos - 1] == dim - 1 {
                    pos -= 1;
                }
                if pos == 0 {
                    break;
                }
                let next = idx[pos - 1] + 1;
                for slot in &mut idx[pos - 1..] {
                    *slot = next;
                }
            }
        }
        MonomialSet { dim, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn degree(e: &[u8]) -> u32 {
        e.iter().map(|&p| p as u32).sum()
    }

    pub fn eval_one(e: &[u8], x: &[f64]) -> f64 {
        e.iter()
            .zip(x)
            .filter(|(&p, _)| p > 0)
            .map(|(&p, &v)| v.powi(p as i32))
            .product()
    }
}

/// The lifting dictionary `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub dims: EmbedDims,
    pub max_degree: u8,
    /// Whether the constant observable follows the identity block.
    pub constant: bool,
    pub monomials: MonomialSet,
    /// Projection of the degree >= 2 monomials; `None` for a pure identity basis.
    pub projection: Option<PcaProjection>,
    /// Energy threshold the projection was fitted at.
    pub energy: f64,
}

impl Basis {
    /// Coordinates only: `g(yd) = yd`.
    pub fn identity(dims: EmbedDims) -> Self {
        Basis {
            dims,
            max_degree: 1,
            constant: false,
            monomials: MonomialSet::full(dims.embedded_len(), 1),
            projection: None,
            energy: 1.0,
        }
    }

    pub fn identity_count(&self) -> usize {
        self.dims.embedded_len()
    }

    pub fn retained(&self) -> usize {
        self.projection.as_ref().map_or(0, |p| p.retained())
    }

    /// Lifted dimension `N_g`.
    pub fn n_g(&self) -> usize {
        self.identity_count() + usize::from(self.constant) + self.retained()
    }

    fn higher_order(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.monomials
            .exponents
            .iter()
            .filter(|e| MonomialSet::degree(e) >= 2)
    }

    fn eval_higher(&self, x: &[f64]) -> Vec<f64> {
        self.higher_order()
            .map(|e| MonomialSet::eval_one(e, x))
            .collect()
    }

    /// Write `g(x)` into `out` (length `n_g`). `x` is a flattened embedded output.
    pub fn lift_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let ic = self.identity_count();
        if x.len() != ic {
            return Err(Error::dim(format!(
                "basis expects embedded length {ic}, got {}",
                x.len()
            )));
        }
        if out.len() != self.n_g() {
            return Err(Error::dim(format!(
                "lift output needs {} slots, got {}",
                self.n_g(),
                out.len()
            )));
        }
        out[..ic].copy_from_slice(x);
        let mut pos = ic;
        if self.constant {
            out[pos] = 1.0;
            pos += 1;
        }
        if let Some(proj) = &self.projection {
            if proj.retained() > 0 {
                let z = proj.project(&self.eval_higher(x))?;
                out[pos..].copy_from_slice(z.as_slice());
            }
        }
        Ok(())
    }

    fn check_dims(&self, yd: &DelayEmbeddedOutput) -> Result<()> {
        if yd.dims() != self.dims {
            return Err(Error::dim(format!(
                "embedded output dims {:?} do not match basis dims {:?}",
                yd.dims(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// Fit the dictionary on a samples-by-embedded-coordinates matrix.
///
/// Identity coordinates and the constant are kept verbatim; the remaining
/// monomials of degree 2..=`max_degree` are reduced by PCA at `energy`.
pub fn fit_basis(samples: &Matrix, dims: EmbedDims, energy: f64, max_degree: u8) -> Result<Basis> {
    let embed = dims.embedded_len();
    if samples.ncols() != embed {
        return Err(Error::dim(format!(
            "samples have {} columns, embedded length is {embed}",
            samples.ncols()
        )));
    }
    let monomials = MonomialSet::full(embed, max_degree);
    if samples.nrows() < monomials.len() {
        return Err(Error::invalid(format!(
            "{} samples cannot support {} monomials",
            samples.nrows(),
            monomials.len()
        )));
    }
    let mut basis = Basis {
        dims,
        max_degree,
        constant: true,
        monomials,
        projection: None,
        energy,
    };
    let block: Vec<Vec<f64>> = (0..samples.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = samples.row(i).iter().copied().collect();
            basis.eval_higher(&row)
        })
        .collect();
    let width = basis.higher_order().count();
    if width > 0 {
        let block = Matrix::from_fn(block.len(), width, |i, j| block[i][j]);
        basis.projection = Some(pca_fit(&block, energy)?);
    }
    Ok(basis)
}

/// `g(yd)`.
pub fn lift_g(basis: &Basis, yd: &DelayEmbeddedOutput) -> Result<Vector> {
    basis.check_dims(yd)?;
    let mut out = Vector::zeros(basis.n_g());
    basis.lift_into(yd.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// Load parameters `w` (kilograms for the arm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadVector(pub Vec<f64>);

impl LoadVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("load vector contains non-finite entries"));
        }
        Ok(LoadVector(values))
    }

    pub fn scalar(w: f64) -> Self {
        LoadVector(vec![w])
    }

    pub fn zeros(p: usize) -> Self {
        LoadVector(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Componentwise box for load vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl LoadBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::dim("load bound vectors differ in length"));
        }
        if min.iter().zip(&max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("load bounds require min <= max"));
        }
        Ok(LoadBounds { min, max })
    }

    pub fn uniform(p: usize, lo: f64, hi: f64) -> Self {
        LoadBounds {
            min: vec![lo; p],
            max: vec![hi; p],
        }
    }

    pub fn contains(&self, w: &LoadVector) -> bool {
        w.len() == self.min.len()
            && w.0
                .iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn check(&self, w: &LoadVector) -> Result<()> {
        if self.contains(w) {
            Ok(())
        } else {
            Err(Error::OutOfBounds(format!(
                "load {:?} outside [{:?}, {:?}]",
                w.0, self.min, self.max
            )))
        }
    }

    pub fn clamp(&self, w: &LoadVector) -> LoadVector {
        LoadVector(
            w.0.iter()
                .zip(self.min.iter().zip(&self.max))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
                .collect(),
        )
    }

    pub fn midpoint(&self) -> LoadVector {
        LoadVector(
            self.min
                .iter()
                .zip(&self.max)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
        )
    }
}

/// `gamma(yd, w) = (g, g w_1, ..., g w_p)`.
pub fn lift_gamma(basis: &Basis, yd: &DelayEmbeddedOutput, w: &LoadVector) -> Result<Vector> {
    if w.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("load vector contains non-finite entries"));
    }
    let g = lift_g(basis, yd)?;
    let ng = g.len();
    let mut out = Vector::zeros(ng * (w.len() + 1));
    out.rows_mut(0, ng).copy_from(&g);
    for (i, wi) in w.0.iter().enumerate() {
        out.rows_mut(ng * (i + 1), ng).copy_from(&(&g * *wi));
    }
    Ok(out)
}

/// Block-diagonal `Gamma(yd)` with `p + 1` copies of `g(yd)`.
pub fn gamma_matrix(basis: &Basis, yd: &DelayEmbeddedOutput, p: usize) -> Result<Matrix> {
    let g = lift_g(basis, yd)?;
    Ok(gamma_from_g(&g, p))
}

pub(crate) fn gamma_from_g(g: &Vector, p: usize) -> Matrix {
    let ng = g.len();
    let mut out = Matrix::zeros(ng * (p + 1), p + 1);
    for c in 0..=p {
        out.view_mut((c * ng, c), (ng, 1)).copy_from(g);
    }
    out
}
