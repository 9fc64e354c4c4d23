//! Dense linear-algebra kernel: SVD pseudoinverse, least squares and PCA.
//!
//! Matrices are nalgebra throughout; the SVD itself is delegated to faer,
//! whose thin SVD stays accurate on rank-deficient inputs where nalgebra's
//! can return wrong singular vectors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used when callers have no better choice.
pub const DEFAULT_RTOL: f64 = 1e-10;

fn check_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} contains non-finite entries"
        )))
    }
}

/// Sorted thin SVD `a = U diag(s) V^T`, with `U` omitted when not requested.
struct ThinSvd {
    u: Option<Matrix>,
    s: Vec<f64>,
    v_t: Matrix,
}

impl ThinSvd {
    fn compute(a: &Matrix, want_u: bool) -> Result<Self> {
        let (rows, cols) = a.shape();
        let k = rows.min(cols);
        let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| a[(i, j)]);
        let svd = f
            .thin_svd()
            .map_err(|e| Error::invalid(format!("SVD of a {rows}x{cols} matrix failed: {e:?}")))?;
        let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
        Ok(ThinSvd {
            u: want_u.then(|| Matrix::from_fn(rows, k, |i, j| u[(i, j)])),
            s: (0..k).map(|i| s[i]).collect(),
            v_t: Matrix::from_fn(k, cols, |i, j| v[(j, i)]),
        })
    }

    fn rank(&self, rtol: f64) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > rtol * smax).count()
    }
}

/// Moore-Penrose pseudoinverse. Singular values at or below `rtol * s_max`
/// are treated as zero.
pub fn pinv(a: &Matrix, rtol: f64) -> Result<Matrix> {
    check_finite(a, "pinv input")?;
    if !(rtol > 0.0) {
        return Err(Error::invalid("rtol must be positive"));
    }
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let svd = ThinSvd::compute(a, true)?;
    let rank = svd.rank(rtol);
    let u = svd.u.expect("u requested");
    let mut out = Matrix::zeros(cols, rows);
    for i in 0..rank {
        let inv = 1.0 / svd.s[i];
        // out += v_i * inv * u_i^T
        let v_i = svd.v_t.row(i).transpose();
        let u_i = u.column(i);
        out.ger(inv, &v_i, &u_i, 1.0);
    }
    Ok(out)
}

/// Least-squares solution with the numerical rank of `a`.
pub struct LstsqSolution {
    pub x: Matrix,
    pub rank: usize,
}

/// Minimum-norm minimizer of `||AX - B||_F`, i.e. `pinv(A) B`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    lstsq_with_rank(a, b, DEFAULT_RTOL).map(|s| s.x)
}

pub fn lstsq_with_rank(a: &Matrix, b: &Matrix, rtol: f64) -> Result<LstsqSolution> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim(format!(
            "lstsq: A has {} rows but B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    check_finite(a, "lstsq A")?;
    check_finite(b, "lstsq B")?;
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(LstsqSolution {
            x: Matrix::zeros(cols, b.ncols()),
            rank: 0,
        });
    }
    // Reduce tall systems to R X = (Q^T B)[..cols].
    let (core, rhs) = if rows > cols {
        let qr = a.clone().qr();
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        (qr.r(), qtb.rows(0, cols).into_owned())
    } else {
        (a.clone(), b.clone())
    };
    let svd = ThinSvd::compute(&core, true)?;
    let rank = svd.rank(rtol);
    let u = svd.u.expect("u requested");
    let mut x = Matrix::zeros(cols, b.ncols());
    for i in 0..rank {
        let coeff = u.column(i).transpose() * &rhs / svd.s[i];
        let v_i = svd.v_t.row(i).transpose();
        x += v_i * coeff;
    }
    Ok(LstsqSolution { x, rank })
}

/// Numerical rank via singular values.
pub fn rank(a: &Matrix, rtol: f64) -> Result<usize> {
    check_finite(a, "rank input")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(0);
    }
    Ok(ThinSvd::compute(a, false)?.rank(rtol))
}

/// Mean-centred principal directions retained at a cumulative energy level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    #[serde(with = "row_major")]
    pub components: Matrix,
    /// Explained-variance fraction of each retained component.
    pub explained: Vec<f64>,
    pub energy_kept: f64,
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn retained(&self) -> usize {
        self.components.nrows()
    }

    /// `components * (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.mean.len() {
            return Err(Error::dim(format!(
                "projection expects {} features, got {}",
                self.mean.len(),
                x.len()
            )));
        }
        let centred = Vector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(v, m)| v - m));
        Ok(&self.components * centred)
    }
}

/// Fit a PCA projection keeping the fewest leading components whose
/// cumulative explained variance reaches `energy`.
///
/// Each component is sign-normalised so its largest-magnitude entry is
/// positive. Zero-variance data yields zero components.
pub fn pca_fit(x: &Matrix, energy: f64) -> Result<PcaProjection> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::invalid(format!(
            "energy must lie in (0, 1], got {energy}"
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("pca_fit needs at least two samples"));
    }
    check_finite(x, "pca_fit input")?;
    let features = x.ncols();
    let mean: Vec<f64> = (0..features).map(|j| x.column(j).mean()).collect();
    let mut centred = x.clone();
    for (j, m) in mean.iter().enumerate() {
        centred.column_mut(j).add_scalar_mut(-m);
    }

    let empty = || PcaProjection {
        mean: mean.clone(),
        components: Matrix::zeros(0, features),
        explained: Vec::new(),
        energy_kept: 1.0,
    };
    if features == 0 {
        return Ok(empty());
    }

    let svd = ThinSvd::compute(&centred, false)?;
    let variances: Vec<f64> = svd.s.iter().map(|s| s * s).collect();
    let total: f64 = variances.iter().sum();
    // Variance indistinguishable from rounding of the centring step.
    let scale: f64 = x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if total <= 1e-24 * scale {
        return Ok(empty());
    }

    let mut kept = 0;
    let mut cumulative = 0.0;
    for v in &variances {
        kept += 1;
        cumulative += v / total;
        if cumulative >= energy - 1e-12 {
            break;
        }
    }

    let mut components = svd.v_t.rows(0, kept).into_owned();
    for mut row in components.row_iter_mut() {
        let pivot = row
            .iter()
            .copied()
            .fold((0.0_f64, 0.0_f64), |(best, val), v| {
                if v.abs() > best {
                    (v.abs(), v)
                } else {
                    (best, val)
                }
            })
            .1;
        if pivot < 0.0 {
            row.neg_mut();
        }
    }

    Ok(PcaProjection {
        mean,
        components,
        explained: variances[..kept].iter().map(|v| v / total).collect(),
        energy_kept: cumulative.min(1.0),
    })
}

/// Serde helper storing a matrix as `{rows, cols, data}` with row-major data.
pub mod row_major {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct RowMajor {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let data = m.transpose().as_slice().to_vec();
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let raw = RowMajor::deserialize(d)?;
        if raw.data.len() != raw.rows * raw.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix {}x{} needs {} entries, found {}",
                raw.rows,
                raw.cols,
                raw.rows * raw.cols,
                raw.data.len()
            )));
        }
        Ok(Matrix::from_row_slice(raw.rows, raw.cols, &raw.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn pinv_of_identity() {
        let i3 = Matrix::identity(3, 3);
        assert!(rel(&pinv(&i3, DEFAULT_RTOL).unwrap(), &i3) < 1e-15);
    }

    #[test]
    fn pinv_rank_deficient_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 0.0]));
        let p = pinv(&a, DEFAULT_RTOL).unwrap();
        let expected = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 0.0]));
        assert!(rel(&p, &expected) < 1e-15);
    }

    #[test]
    fn pinv_left_inverse_of_full_rank_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(5, 3, &mut rng);
        let p = pinv(&a, DEFAULT_RTOL).unwrap();
        assert!(rel(&(p * a), &Matrix::identity(3, 3)) < 1e-8);
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let a = Matrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(
            pinv(&a, DEFAULT_RTOL),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn lstsq_small_cases() {
        let x = lstsq(
            &Matrix::identity(2, 2),
            &Matrix::from_column_slice(2, 1, &[3.0, 4.0]),
        )
        .unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14 && (x[1] - 4.0).abs() < 1e-14);

        let x = lstsq(
            &Matrix::from_column_slice(2, 1, &[1.0, 1.0]),
            &Matrix::from_column_slice(2, 1, &[0.0, 2.0]),
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lstsq_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(10, 2, &mut rng);
        let b = random(10, 1, &mut rng);
        let normal = (a.transpose() * &a)
            .try_inverse()
            .expect("well conditioned")
            * a.transpose()
            * &b;
        assert!(rel(&lstsq(&a, &b).unwrap(), &normal) < 1e-8);
    }

    #[test]
    fn lstsq_dimension_mismatch() {
        let err = lstsq(&Matrix::zeros(3, 2), &Matrix::zeros(4, 1));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn pca_identical_rows_keep_nothing() {
        let x = Matrix::from_fn(10, 3, |_, j| j as f64 + 0.5);
        let p = pca_fit(&x, 0.99).unwrap();
        assert_eq!(p.retained(), 0);
    }

    #[test]
    fn pca_line_through_origin() {
        let x = Matrix::from_fn(20, 2, |i, j| {
            (i as f64 - 7.0) * if j == 0 { 1.0 } else { 2.0 }
        });
        let p = pca_fit(&x, 0.99).unwrap();
        assert_eq!(p.retained(), 1);
        let s5 = 5f64.sqrt();
        assert!((p.components[(0, 0)] - 1.0 / s5).abs() < 1e-12);
        assert!((p.components[(0, 1)] - 2.0 / s5).abs() < 1e-12);
    }

    #[test]
    fn pca_reconstruction_error_matches_discarded_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Anisotropic cloud so truncation actually discards something.
        let scales = [3.0, 2.0, 1.0, 0.5, 0.2, 0.05];
        let x = Matrix::from_fn(100, 6, |_, j| scales[j] * rng.random_range(-1.0..1.0));
        let p = pca_fit(&x, 0.9).unwrap();
        assert!(p.retained() < 6);

        let mut centred = x.clone();
        for (j, m) in p.mean.iter().enumerate() {
            centred.column_mut(j).add_scalar_mut(-m);
        }
        let recon = &centred * p.components.transpose() * &p.components;
        let lost = (&centred - recon).norm_squared() / centred.norm_squared();
        assert!((lost - (1.0 - p.energy_kept)).abs() < 1e-8);
    }

    #[test]
    fn rank_of_wide_thin_product() {
        // nalgebra's own SVD mis-reconstructs this 19x48 rank-3 matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(3472294383844956476);
        let _ = random(19, 48, &mut rng);
        let a = random(19, 3, &mut rng) * random(3, 48, &mut rng);
        assert_eq!(rank(&a, DEFAULT_RTOL).unwrap(), 3);
        assert_eq!(rank(&a.transpose(), DEFAULT_RTOL).unwrap(), 3);
        let p = pinv(&a, DEFAULT_RTOL).unwrap();
        assert!((&a * &p * &a - &a).norm() < 1e-12 * a.norm());
        assert_eq!(rank(&Matrix::zeros(0, 3), DEFAULT_RTOL).unwrap(), 0);
    }

    #[test]
    fn pca_energy_out_of_range() {
        let x = Matrix::zeros(4, 2);
        assert!(pca_fit(&x, 0.0).is_err());
        assert!(pca_fit(&x, 1.5).is_err());
    }

    #[test]
    fn row_major_json_layout() {
        #[derive(Serialize, Deserialize)]
        struct Wrap(#[serde(with = "row_major")] Matrix);
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = serde_json::to_string(&Wrap(m.clone())).unwrap();
        assert_eq!(s, r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#);
        let back: Wrap = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn penrose_check(a: &Matrix) {
            let p = pinv(a, DEFAULT_RTOL).unwrap();
            let scale = a.norm().max(1.0);
            let pscale = p.norm().max(1.0);
            assert!((a * &p * a - a).norm() <= 1e-8 * scale);
            assert!((&p * a * &p - &p).norm() <= 1e-8 * pscale);
            let ap = a * &p;
            let pa = &p * a;
            assert!((&ap - ap.transpose()).norm() <= 1e-8 * ap.norm().max(1.0));
            assert!((&pa - pa.transpose()).norm() <= 1e-8 * pa.norm().max(1.0));
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn penrose_conditions(rows in 1usize..50, cols in 1usize..50, rank_cut in 0usize..50, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let full = random(rows, cols, &mut rng);
                // Optionally force a rank deficiency through a thin product.
                let r = rank_cut.min(rows.min(cols));
                let a = if r > 0 && r < rows.min(cols) {
                    random(rows, r, &mut rng) * random(r, cols, &mut rng)
                } else {
                    full
                };
                penrose_check(&a);
            }

            #[test]
            fn pca_components_orthonormal(rows in 3usize..40, cols in 1usize..8, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(rows, cols, &mut rng);
                let p = pca_fit(&x, 0.95).unwrap();
                let gram = &p.components * p.components.transpose();
                let eye = Matrix::identity(p.retained(), p.retained());
                prop_assert!((gram - eye).amax() < 1e-10);
                prop_assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(p.energy_kept >= 0.95 - 1e-12);
            }

            #[test]
            fn lstsq_first_order_optimal(rows in 2usize..30, cols in 1usize..6, seed: u64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(rows, cols, &mut rng);
                let b = random(rows, 2, &mut rng);
                let x = lstsq(&a, &b).unwrap();
                let base = (&a * &x - &b).norm();
                for _ in 0..8 {
                    let delta = random(cols, 2, &mut rng) * 1e-3;
                    let perturbed = (&a * (&x + delta) - &b).norm();
                    prop_assert!(base <= perturbed + 1e-12);
                }
            }
        }
    }
}
