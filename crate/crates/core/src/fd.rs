//! Numeric differentiation: central differences with one Richardson
//! extrapolation level, pointwise structure evaluation for data that only
//! exists as samples, and a small Runge-Kutta stepper.

use nalgebra::{DMatrix, DVector};

use crate::geom::{index_pairs, AlmostComplexField, GeomError};

/// Default step for all finite difference derivatives.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

fn shifted(point: &[f64], axis: usize, delta: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    p[axis] += delta;
    p
}

/// Central difference of a scalar map along one axis, Richardson corrected:
/// `(4 c(h/2) - c(h)) / 3` with `c(h) = (f(x+h) - f(x-h)) / 2h`.
pub fn partial_scalar(
    f: &dyn Fn(&[f64]) -> Result<f64, GeomError>,
    point: &[f64],
    axis: usize,
    h: f64,
) -> Result<f64, GeomError> {
    let c = |step: f64| -> Result<f64, GeomError> {
        let plus = f(&shifted(point, axis, step))?;
        let minus = f(&shifted(point, axis, -step))?;
        Ok((plus - minus) / (2.0 * step))
    };
    Ok((4.0 * c(h / 2.0)? - c(h)?) / 3.0)
}

/// Vector-valued analogue of [`partial_scalar`].
pub fn partial_vector(
    f: &dyn Fn(&[f64]) -> Result<DVector<f64>, GeomError>,
    point: &[f64],
    axis: usize,
    h: f64,
) -> Result<DVector<f64>, GeomError> {
    let c = |step: f64| -> Result<DVector<f64>, GeomError> {
        let plus = f(&shifted(point, axis, step))?;
        let minus = f(&shifted(point, axis, -step))?;
        Ok((plus - minus) / (2.0 * step))
    };
    Ok((c(h / 2.0)? * 4.0 - c(h)?) / 3.0)
}

/// Matrix-valued analogue of [`partial_scalar`].
pub fn partial_matrix(
    f: &dyn Fn(&[f64]) -> Result<DMatrix<f64>, GeomError>,
    point: &[f64],
    axis: usize,
    h: f64,
) -> Result<DMatrix<f64>, GeomError> {
    let c = |step: f64| -> Result<DMatrix<f64>, GeomError> {
        let plus = f(&shifted(point, axis, step))?;
        let minus = f(&shifted(point, axis, -step))?;
        Ok((plus - minus) / (2.0 * step))
    };
    Ok((c(h / 2.0)? * 4.0 - c(h)?) / 3.0)
}

/// Commutator of two numerically defined vector fields at a point.
pub fn fd_bracket(
    x: &dyn Fn(&[f64]) -> Result<DVector<f64>, GeomError>,
    y: &dyn Fn(&[f64]) -> Result<DVector<f64>, GeomError>,
    point: &[f64],
    h: f64,
) -> Result<DVector<f64>, GeomError> {
    let dim = point.len();
    let xv = x(point)?;
    let yv = y(point)?;
    let mut out = DVector::zeros(xv.len());
    for l in 0..dim {
        let dy = partial_vector(y, point, l, h)?;
        let dx = partial_vector(x, point, l, h)?;
        out += dy * xv[l] - dx * yv[l];
    }
    Ok(out)
}

/// Anything that can produce a `J` matrix at a point. Symbolic structures
/// implement it exactly; sampled or reconstructed structures implement it
/// numerically, and every downstream consumer that only needs point values
/// can stay agnostic.
pub trait StructureLike {
    fn dim(&self) -> usize;
    fn j_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError>;
}

impl StructureLike for AlmostComplexField {
    fn dim(&self) -> usize {
        AlmostComplexField::dim(self)
    }

    fn j_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        self.matrix_at(point)
    }
}

/// Pointwise structure backed by a plain function.
pub struct FnStructure<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> StructureLike for FnStructure<F>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>, GeomError>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn j_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        (self.f)(point)
    }
}

/// Nijenhuis tensor values from point samples of `J` alone:
/// `N^k_{ij} = J^l_i ∂_l J^k_j − J^l_j ∂_l J^k_i − J^k_l ∂_i J^l_j + J^k_l ∂_j J^l_i`.
/// Returns the `dim × #pairs` matrix of `N(∂_i, ∂_j)` values, pairs `i < j`
/// lexicographic, matching `TensorField21::pair_matrix_at`.
pub fn fd_nijenhuis_pair_matrix(
    s: &dyn StructureLike,
    point: &[f64],
    h: f64,
) -> Result<DMatrix<f64>, GeomError> {
    let dim = s.dim();
    let j = s.j_at(point)?;
    let eval = |p: &[f64]| s.j_at(p);
    let mut dj = Vec::with_capacity(dim);
    for l in 0..dim {
        dj.push(partial_matrix(&eval, point, l, h)?);
    }
    let pairs = index_pairs(dim);
    let mut out = DMatrix::zeros(dim, pairs.len());
    for (col, (i, jj)) in pairs.iter().enumerate() {
        let (i, jj) = (*i, *jj);
        for k in 0..dim {
            let mut acc = 0.0;
            for l in 0..dim {
                acc += j[(l, i)] * dj[l][(k, jj)];
                acc -= j[(l, jj)] * dj[l][(k, i)];
                acc -= j[(k, l)] * dj[i][(l, jj)];
                acc += j[(k, l)] * dj[jj][(l, i)];
            }
            out[(k, col)] = acc;
        }
    }
    Ok(out)
}

/// `N(ξ, η)` at a point from samples of `J`.
pub fn fd_nijenhuis_apply(
    s: &dyn StructureLike,
    point: &[f64],
    xi: &DVector<f64>,
    eta: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>, GeomError> {
    let dim = s.dim();
    let pair_vals = fd_nijenhuis_pair_matrix(s, point, h)?;
    let pairs = index_pairs(dim);
    let mut out = DVector::zeros(dim);
    for (col, (i, j)) in pairs.iter().enumerate() {
        let weight = xi[*i] * eta[*j] - xi[*j] * eta[*i];
        for k in 0..dim {
            out[k] += pair_vals[(k, col)] * weight;
        }
    }
    Ok(out)
}

/// One classical fourth-order Runge-Kutta step for `y' = f(t, y)`.
pub fn rk4_step(
    f: &dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>, GeomError>,
    t: f64,
    y: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, GeomError> {
    let k1 = f(t, y)?;
    let k2 = f(t + dt / 2.0, &(y + &k1 * (dt / 2.0)))?;
    let k3 = f(t + dt / 2.0, &(y + &k2 * (dt / 2.0)))?;
    let k4 = f(t + dt, &(y + &k3 * dt))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::Chart;
    use crate::expr::parse;
    use crate::geom::{lie_bracket, ExprMatrix, VectorField};

    fn e(text: &str) -> crate::expr::Expr {
        parse(text).unwrap()
    }

    #[test]
    fn scalar_partial_matches_exact() {
        let f = |p: &[f64]| Ok(p[0].sin() * p[1].powi(3));
        let d = partial_scalar(&f, &[0.7, 1.3], 0, DEFAULT_FD_STEP).unwrap();
        let exact = 0.7_f64.cos() * 1.3_f64.powi(3);
        assert!((d - exact).abs() < 1e-10);
        let d1 = partial_scalar(&f, &[0.7, 1.3], 1, DEFAULT_FD_STEP).unwrap();
        let exact1 = 0.7_f64.sin() * 3.0 * 1.3_f64.powi(2);
        assert!((d1 - exact1).abs() < 1e-10);
    }

    #[test]
    fn richardson_beats_plain_central() {
        // f(x) = exp(2x) has large higher derivatives; the corrected stencil
        // should land well inside the plain central error at h = 1e-3
        let f = |p: &[f64]| Ok((2.0 * p[0]).exp());
        let h = 1e-3;
        let plain = (f(&[1.0 + h]).unwrap() as f64 - f(&[1.0 - h]).unwrap()) / (2.0 * h);
        let corrected = partial_scalar(&f, &[1.0], 0, h).unwrap();
        let exact = 2.0 * (2.0_f64).exp();
        assert!((corrected - exact).abs() * 100.0 < (plain - exact).abs());
    }

    #[test]
    fn fd_bracket_matches_symbolic() {
        let chart = Chart::new(&["x", "y", "z"]).unwrap();
        let a = VectorField::new(vec![e("x*y"), e("sin(z)"), e("1")]);
        let b = VectorField::new(vec![e("y^2"), e("x"), e("z*x")]);
        let exact = lie_bracket(&chart, &a, &b);
        let p = [0.3, -0.7, 1.1];
        let want = exact.eval_at(&chart, &p).unwrap();
        let fa = |q: &[f64]| Ok(a.eval_at(&chart, q)?);
        let fb = |q: &[f64]| Ok(b.eval_at(&chart, q)?);
        let got = fd_bracket(&fa, &fb, &p, DEFAULT_FD_STEP).unwrap();
        assert!((got - want).norm() < 1e-9);
    }

    #[test]
    fn fd_nijenhuis_matches_symbolic() {
        let chart = Chart::new(&["x1", "y1", "x2", "y2"]).unwrap();
        let j = ExprMatrix::from_columns(vec![
            vec![e("0"), e("1"), e("0"), e("0")],
            vec![e("-1"), e("0"), e("0"), e("0")],
            vec![e("x1"), e("0"), e("0"), e("1")],
            vec![e("0"), e("-x1"), e("-1"), e("0")],
        ]);
        let acx = crate::geom::AlmostComplexField::new(chart, j).unwrap();
        let sym = acx.nijenhuis();
        let p = [0.7, 0.3, 0.2, -0.4];
        let want = sym.pair_matrix_at(&p).unwrap();
        let got = fd_nijenhuis_pair_matrix(&acx, &p, DEFAULT_FD_STEP).unwrap();
        assert!((got - want).amax() < 1e-8);
    }

    #[test]
    fn rk4_integrates_circle() {
        // y'' = -y as a first order system, one revolution
        let f = |_t: f64, y: &DVector<f64>| {
            Ok(DVector::from_vec(vec![y[1], -y[0]]))
        };
        let mut y = DVector::from_vec(vec![1.0, 0.0]);
        let steps = 256;
        let dt = std::f64::consts::TAU / steps as f64;
        for i in 0..steps {
            y = rk4_step(&f, i as f64 * dt, &y, dt).unwrap();
        }
        assert!((y[0] - 1.0).abs() < 1e-6);
        assert!(y[1].abs() < 1e-6);
    }
}
