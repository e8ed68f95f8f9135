//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! The Cholesky factor here works on the Jacobi-scaled matrix `D^-1 A D^-1`
//! (unit diagonal) so the pivot threshold is relative and scale free. A pivot
//! below the threshold identifies the first column that is numerically in the
//! span of the columns before it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative pivot threshold on the unit-diagonal scaled matrix.
const PIVOT_TOL: f64 = 1e-11;

/// Neumaier compensated sum. Order dependent only through rounding of the
/// compensation term, so results are reproducible for a fixed input order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn compensated_mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Cholesky factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    /// Lower factor of the scaled matrix.
    lower: DMatrix<f64>,
    /// Inverse square roots of the original diagonal.
    inv_scale: DVector<f64>,
}

impl SpdFactor {
    /// Factor `a`. On failure returns the index of the offending column.
    pub fn new(a: &DMatrix<f64>) -> std::result::Result<Self, usize> {
        let q = a.nrows();
        debug_assert_eq!(q, a.ncols());
        let mut inv_scale = DVector::zeros(q);
        for j in 0..q {
            let d = a[(j, j)];
            if !(d.is_finite() && d > 0.0) {
                return Err(j);
            }
            inv_scale[j] = 1.0 / d.sqrt();
        }
        let mut lower = DMatrix::zeros(q, q);
        for j in 0..q {
            let mut pivot = a[(j, j)] * inv_scale[j] * inv_scale[j];
            for k in 0..j {
                pivot -= lower[(j, k)] * lower[(j, k)];
            }
            if !(pivot > PIVOT_TOL) {
                return Err(j);
            }
            let ljj = pivot.sqrt();
            lower[(j, j)] = ljj;
            for i in (j + 1)..q {
                let mut s = a[(i, j)] * inv_scale[i] * inv_scale[j];
                for k in 0..j {
                    s -= lower[(i, k)] * lower[(j, k)];
                }
                lower[(i, j)] = s / ljj;
            }
        }
        Ok(SpdFactor { lower, inv_scale })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let q = self.dim();
        let mut y = b.component_mul(&self.inv_scale);
        // forward: L z = y
        for i in 0..q {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        // backward: L' x = z
        for i in (0..q).rev() {
            let mut s = y[i];
            for k in (i + 1)..q {
                s -= self.lower[(k, i)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        y.component_mul(&self.inv_scale)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let q = self.dim();
        let mut inv = DMatrix::zeros(q, q);
        for j in 0..q {
            let mut e = DVector::zeros(q);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.set_column(j, &col);
        }
        symmetrize(&mut inv);
        inv
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        let q = self.dim();
        (0..q)
            .map(|j| 2.0 * self.lower[(j, j)].ln() - 2.0 * self.inv_scale[j].ln())
            .sum()
    }
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let q = a.nrows();
    for i in 0..q {
        for j in (i + 1)..q {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Symmetric square root `Q diag(sqrt(max(l, 0))) Q'` of a symmetric matrix.
///
/// Returns the root together with the most negative eigenvalue that was clipped
/// (0 when none was).
pub fn symmetric_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let q = a.nrows();
    if q == 0 {
        return (DMatrix::zeros(0, 0), 0.0);
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let mut clipped = 0.0_f64;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped = clipped.min(l);
            0.0
        } else {
            l.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    (root, clipped)
}

/// Maximize a smooth univariate function on `[lo, hi]` with Brent's method
/// (golden section plus parabolic interpolation). Returns `(argmax, max)`.
pub fn brent_maximize<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d = 0.0_f64;
    let mut e = 0.0_f64;
    for _ in 0..500 {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = -f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx)
}
