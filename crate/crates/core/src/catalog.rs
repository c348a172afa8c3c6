//! Bundled example structures, reference tables, and solution data.
//!
//! Everything here is a concrete, fully explicit input used by the test
//! suites and the command-line reports: almost complex structures with
//! known Nijenhuis tensors, reference connection tables, closed-form
//! solutions, and helper constructors for derived structures.

use nalgebra::{DMatrix, DVector};

use crate::chart::Chart;
use crate::curves::ParamSurface;
use crate::expr::{parse, Expr};
use crate::geom::{AlmostComplexField, ExprMatrix, GeomError, VectorField};

use std::f64::consts::PI;

/// Parse a fixed catalog literal; all inputs here are compile-time strings.
fn lit(text: &str) -> Expr {
    parse(text).unwrap_or_else(|e| panic!("catalog literal {text:?}: {e}"))
}

fn chart4(names: [&str; 4], periods: [Option<f64>; 4]) -> Chart {
    Chart::with_periods(&names, &periods).expect("catalog chart")
}

/// Columns are images of the coordinate fields: `cols[j][i]` is the
/// coefficient of the i-th coordinate field in `J ∂_j`.
fn structure_from_columns(chart: Chart, cols: [[&str; 4]; 4]) -> AlmostComplexField {
    let j = ExprMatrix::from_columns(
        cols.iter()
            .map(|c| c.iter().map(|s| lit(s)).collect())
            .collect(),
    );
    AlmostComplexField::new(chart, j).expect("catalog structure")
}

/// Chart on T²(phi, psi) × R²(x, y) with 2π-periodic angles.
pub fn torus_plane_chart() -> Chart {
    chart4(
        ["phi", "psi", "x", "y"],
        [Some(2.0 * PI), Some(2.0 * PI), None, None],
    )
}

/// Chart on R⁴ with two complex-plane blocks (x1, y1) and (x2, y2).
pub fn two_plane_chart() -> Chart {
    chart4(["x1", "y1", "x2", "y2"], [None; 4])
}

/// Chart on T²(phi1, phi2) × R²(x, y): a trivial plane bundle over the torus.
pub fn bundle_torus_chart() -> Chart {
    chart4(
        ["phi1", "phi2", "x", "y"],
        [Some(2.0 * PI), Some(2.0 * PI), None, None],
    )
}

/// Almost complex structure on T²(phi, psi) × R²(x, y) whose characteristic
/// foliation on the invariant torus {x = y = 0} has rational slope: the
/// leaf direction solves {dphi/ds = rho, dpsi/ds = -1}, so the leafwise
/// winding number is -rho. The parameter `rho` enters as a constant.
pub fn winding_torus_structure(rho: f64) -> AlmostComplexField {
    let chart = torus_plane_chart();
    let cols = [
        // J ∂_phi
        ["y^2/2", "(2+rho*y^2)/2", "x", "0"],
        // J ∂_psi
        [
            "-(4+y^4)/(4+2*rho*y^2)",
            "-y^2/2",
            "-x*y^2/(2+rho*y^2)",
            "-2*x/(2+rho*y^2)",
        ],
        // J ∂_x
        ["0", "0", "0", "1"],
        // J ∂_y
        ["0", "0", "-1", "0"],
    ];
    let j = ExprMatrix::from_columns(
        cols.iter()
            .map(|c| c.iter().map(|s| lit(s).substitute(&[("rho", Expr::num(rho))])).collect())
            .collect(),
    );
    AlmostComplexField::new(chart, j).expect("winding structure")
}

/// The generator of the characteristic plane of [`winding_torus_structure`]:
/// N(∂_x, ∂_phi) = y ∂_phi + rho y ∂_psi − ∂_y.
pub fn winding_characteristic_field(rho: f64) -> VectorField {
    VectorField::new(vec![
        lit("y"),
        Expr::scale(rho, lit("y")),
        Expr::zero(),
        Expr::neg(Expr::one()),
    ])
}

/// Structure on R⁴ whose characteristic plane equals the tangent plane of
/// the surface {x2 = y2 = 0} at every point (the "parallel" case).
pub fn parallel_plane_structure() -> AlmostComplexField {
    structure_from_columns(
        two_plane_chart(),
        [
            ["0", "1", "0", "0"],    // J ∂_x1
            ["-1", "0", "0", "0"],   // J ∂_y1
            ["x1", "0", "0", "1"],   // J ∂_x2 = ∂_y2 + x1 ∂_x1
            ["0", "-x1", "-1", "0"], // J ∂_y2 = −∂_x2 − x1 ∂_y1
        ],
    )
}

/// Structure on R⁴ whose characteristic plane is everywhere transversal to
/// the surface {x2 = y2 = 0} (the "transversal" case).
pub fn transversal_plane_structure() -> AlmostComplexField {
    structure_from_columns(
        two_plane_chart(),
        [
            ["0", "1", "x2", "0"],   // J ∂_x1 = ∂_y1 + x2 ∂_x2
            ["-1", "0", "0", "-x2"], // J ∂_y1 = −∂_x1 − x2 ∂_y2
            ["0", "0", "0", "1"],    // J ∂_x2
            ["0", "0", "-1", "0"],   // J ∂_y2
        ],
    )
}

/// Reference Nijenhuis component table for [`parallel_plane_structure`]:
/// entry `[i][j]` is N(∂_i, ∂_j) as a vector field.
pub fn parallel_plane_nijenhuis_table() -> Vec<Vec<VectorField>> {
    nijenhuis_table_from_entries(
        4,
        &[
            (0, 2, vec![(1, "-1")]),
            (0, 3, vec![(0, "-1")]),
            (1, 2, vec![(0, "-1")]),
            (1, 3, vec![(1, "1")]),
            (2, 3, vec![(1, "-x1")]),
        ],
    )
}

/// Reference Nijenhuis component table for [`transversal_plane_structure`].
pub fn transversal_plane_nijenhuis_table() -> Vec<Vec<VectorField>> {
    nijenhuis_table_from_entries(
        4,
        &[
            (0, 1, vec![(3, "-x2")]),
            (0, 2, vec![(3, "1")]),
            (0, 3, vec![(2, "1")]),
            (1, 2, vec![(2, "1")]),
            (1, 3, vec![(3, "-1")]),
        ],
    )
}

fn nijenhuis_table_from_entries(
    dim: usize,
    entries: &[(usize, usize, Vec<(usize, &str)>)],
) -> Vec<Vec<VectorField>> {
    let mut table = vec![vec![VectorField::zero(dim); dim]; dim];
    for (i, j, comps) in entries {
        let mut v = vec![Expr::zero(); dim];
        for (k, text) in comps {
            v[*k] = lit(text);
        }
        let field = VectorField::new(v.clone());
        let neg = VectorField::zero(dim).sub(&field);
        table[*i][*j] = field;
        table[*j][*i] = neg;
    }
    table
}

/// Christoffel data layout used throughout: `gamma[i].get(k, j)` is the
/// coefficient of the k-th coordinate field in the covariant derivative of
/// ∂_j along ∂_i.
fn gamma_from_entries(dim: usize, entries: &[(usize, usize, usize, &str)]) -> Vec<ExprMatrix> {
    let mut gamma = vec![ExprMatrix::zeros(dim, dim); dim];
    for (i, j, k, text) in entries {
        *gamma[*i].get_mut(*k, *j) = lit(text);
    }
    gamma
}

/// Reference minimal almost complex connection for
/// [`parallel_plane_structure`] (Christoffel symbols in the layout of
/// [`parallel_plane_structure`]'s chart).
pub fn parallel_plane_minimal_connection() -> Vec<ExprMatrix> {
    gamma_from_entries(
        4,
        &[
            (0, 2, 1, "-1/4"),
            (0, 3, 0, "-3/4"),
            (1, 2, 0, "-1/4"),
            (1, 3, 1, "-1/4"),
            (3, 0, 0, "-1/2"),
            (3, 1, 1, "-1/2"),
            (3, 2, 1, "x1/4"),
            (3, 3, 0, "x1/4"),
        ],
    )
}

/// Reference minimal almost complex connection for
/// [`transversal_plane_structure`].
pub fn transversal_plane_minimal_connection() -> Vec<ExprMatrix> {
    gamma_from_entries(
        4,
        &[
            (1, 0, 3, "x2/4"),
            (1, 1, 2, "x2/4"),
            (1, 2, 2, "-1/2"),
            (1, 3, 3, "-1/2"),
            (2, 0, 3, "-1/4"),
            (2, 1, 2, "-3/4"),
            (3, 0, 2, "-1/4"),
            (3, 1, 3, "-1/4"),
        ],
    )
}

/// Reference induced structure on the normal bundle of {x2 = y2 = 0} for
/// [`parallel_plane_structure`]: the flat product structure.
pub fn parallel_plane_normal_structure() -> ExprMatrix {
    standard_flat_matrix(4)
}

/// Reference induced normal-bundle structure for
/// [`transversal_plane_structure`] with an exponential weight on the
/// horizontal lift (the published form).
pub fn transversal_plane_normal_structure_exponential() -> ExprMatrix {
    ExprMatrix::from_columns(vec![
        vec![
            lit("0"),
            lit("1"),
            lit("x2*exp(y1/2)/2"),
            lit("y2*exp(y1/2)/2"),
        ],
        vec![
            lit("-1"),
            lit("0"),
            lit("y2*exp(y1/2)/2"),
            lit("-x2*exp(y1/2)/2"),
        ],
        vec![lit("0"), lit("0"), lit("0"), lit("1")],
        vec![lit("0"), lit("0"), lit("-1"), lit("0")],
    ])
}

/// Same as [`transversal_plane_normal_structure_exponential`] but with the
/// constant weight 1/2 in place of the exponential factor; this is the lift
/// produced directly from the reference connection table.
pub fn transversal_plane_normal_structure_constant() -> ExprMatrix {
    ExprMatrix::from_columns(vec![
        vec![lit("0"), lit("1"), lit("x2/2"), lit("y2/2")],
        vec![lit("-1"), lit("0"), lit("y2/2"), lit("-x2/2")],
        vec![lit("0"), lit("0"), lit("0"), lit("1")],
        vec![lit("0"), lit("0"), lit("-1"), lit("0")],
    ])
}

/// Reference claim for the Nijenhuis tensor of the transversal-case normal
/// structure: the pair (∂_x1, ∂_x2) is asserted to map to −e^{y1/2} ∂_y2.
pub fn transversal_plane_normal_nijenhuis_reference() -> (usize, usize, VectorField) {
    (
        0,
        2,
        VectorField::new(vec![
            Expr::zero(),
            Expr::zero(),
            Expr::zero(),
            lit("-exp(y1/2)"),
        ]),
    )
}

/// Fiberwise-linear almost complex structure on the trivial plane bundle
/// over the torus; the constants (alpha, beta) fix the constant Nijenhuis
/// tensor, e.g. N(∂_x, ∂_phi1) = 2 beta ∂_x − 2 alpha ∂_y.
pub fn linear_bundle_structure(alpha: f64, beta: f64) -> AlmostComplexField {
    let chart = bundle_torus_chart();
    let sub = [("alpha", Expr::num(alpha)), ("beta", Expr::num(beta))];
    let cols = [
        // J ∂_phi1
        ["0", "1", "x*alpha+y*beta", "x*beta-y*alpha"],
        // J ∂_phi2
        ["-1", "0", "x*beta-y*alpha", "-(x*alpha+y*beta)"],
        // J ∂_x
        ["0", "0", "0", "1"],
        // J ∂_y
        ["0", "0", "-1", "0"],
    ];
    let j = ExprMatrix::from_columns(
        cols.iter()
            .map(|c| c.iter().map(|s| lit(s).substitute(&sub)).collect())
            .collect(),
    );
    AlmostComplexField::new(chart, j).expect("linear bundle structure")
}

fn standard_flat_matrix(dim: usize) -> ExprMatrix {
    let mut m = ExprMatrix::zeros(dim, dim);
    for b in 0..dim / 2 {
        *m.get_mut(2 * b + 1, 2 * b) = Expr::one();
        *m.get_mut(2 * b, 2 * b + 1) = Expr::neg(Expr::one());
    }
    m
}

/// The integrable product structure on R⁴ (or R^{2n}): each (x, y) pair is
/// a complex coordinate, J ∂_x = ∂_y.
pub fn standard_flat_structure() -> AlmostComplexField {
    AlmostComplexField::new(two_plane_chart(), standard_flat_matrix(4))
        .expect("flat structure")
}

/// Deformation of the product structure on T²(phi1, phi2) × R²(x, y):
///
/// J ∂_x = ∂_y, J ∂_phi1 = ∂_phi2 + a1 ∂_phi1 + a2 ∂_phi2 + b1 ∂_x + b2 ∂_y,
///
/// with the image of ∂_phi2 determined by squaring to minus identity
/// (requires a2 ≠ −1 on the working box). The deformation coefficients are
/// expressions in the chart coordinates vanishing on {x = y = 0}.
pub fn deformed_product_structure(
    a1: Expr,
    a2: Expr,
    b1: Expr,
    b2: Expr,
) -> Result<AlmostComplexField, GeomError> {
    let chart = bundle_torus_chart();
    let one_plus_a2 = Expr::add(Expr::one(), a2.clone());
    // J ∂_phi2 = (−(1+a1²) ∂_phi1 − a1 (1+a2) ∂_phi2
    //            + (b2 − a1 b1) ∂_x − (b1 + a1 b2) ∂_y) / (1+a2)
    let col_phi2 = vec![
        Expr::neg(Expr::div(
            Expr::add(Expr::one(), Expr::mul(a1.clone(), a1.clone())),
            one_plus_a2.clone(),
        )),
        Expr::neg(a1.clone()),
        Expr::div(
            Expr::sub(b2.clone(), Expr::mul(a1.clone(), b1.clone())),
            one_plus_a2.clone(),
        ),
        Expr::neg(Expr::div(
            Expr::add(b1.clone(), Expr::mul(a1.clone(), b2.clone())),
            one_plus_a2,
        )),
    ];
    let col_phi1 = vec![
        a1.clone(),
        Expr::add(Expr::one(), a2.clone()),
        b1,
        b2,
    ];
    let col_x = vec![Expr::zero(), Expr::zero(), Expr::zero(), Expr::one()];
    let col_y = vec![Expr::zero(), Expr::zero(), Expr::neg(Expr::one()), Expr::zero()];
    let j = ExprMatrix::from_columns(vec![col_phi1, col_phi2, col_x, col_y]);
    AlmostComplexField::new(chart, j)
}

/// A closed-form nonzero solution (a1, a2) of the leafwise-integrability
/// system for [`deformed_product_structure`]; defined for y > −1.
pub fn integrable_deformation_functions() -> (Expr, Expr) {
    (lit("-x/(1+y)"), lit("-y/(1+y)"))
}

/// [`deformed_product_structure`] built from
/// [`integrable_deformation_functions`] with zero (b1, b2): its
/// characteristic plane field is integrable and tangent to the fibers
/// {phi = const}.
pub fn integrable_deformation_structure() -> AlmostComplexField {
    let (a1, a2) = integrable_deformation_functions();
    deformed_product_structure(a1, a2, Expr::zero(), Expr::zero())
        .expect("integrable deformation")
}

/// Pointwise residual of the leafwise-integrability system for a
/// deformation pair (a1, a2): both equations' left-minus-right sides,
/// evaluated at (x, y).
pub fn deformation_residual(
    a1: &Expr,
    a2: &Expr,
    x: f64,
    y: f64,
) -> Result<(f64, f64), crate::expr::EvalError> {
    let dxa1 = a1.differentiate("x");
    let dya1 = a1.differentiate("y");
    let dxa2 = a2.differentiate("x");
    let dya2 = a2.differentiate("y");
    let bind: &[(&str, f64)] = &[("x", x), ("y", y)];
    let (a1v, a2v) = (a1.eval(bind)?, a2.eval(bind)?);
    let (dxa1v, dya1v) = (dxa1.eval(bind)?, dya1.eval(bind)?);
    let (dxa2v, dya2v) = (dxa2.eval(bind)?, dya2.eval(bind)?);
    let r1 = dya1v - (a1v * dxa1v - (1.0 + a1v * a1v) / (1.0 + a2v) * dxa2v);
    let r2 = dya2v - ((1.0 + a2v) * dxa1v - a1v * dxa2v);
    Ok((r1, r2))
}

/// Structure on R⁴ interpolating between a region where the characteristic
/// plane is tangent to the surface {x2 = y2 = 0} (around x1 = −1.2) and a
/// region where it is transversal (around x1 = +1.2). The two localized
/// weights have numerically disjoint supports, so the structure squares to
/// minus identity to working precision.
pub fn tangency_interpolation_structure() -> AlmostComplexField {
    let mu = "exp(-((x1+1.2)/0.25)^2)";
    let nu = "exp(-((x1-1.2)/0.25)^2)";
    structure_from_columns(
        two_plane_chart(),
        [
            // J ∂_x1 = ∂_y1 + nu x2 ∂_x2
            ["0", "1", &format!("{nu}*x2"), "0"],
            // J ∂_y1 = −∂_x1 − nu x2 ∂_y2
            ["-1", "0", "0", &format!("-({nu})*x2")],
            // J ∂_x2 = ∂_y2 + mu ∂_x1
            [mu, "0", "0", "1"],
            // J ∂_y2 = −∂_x2 − mu ∂_y1
            ["0", &format!("-({mu})"), "-1", "0"],
        ],
    )
}

/// Push a structure forward through the affine change of coordinates
/// p ↦ A p + shift on the same chart names. `a` must be invertible; the
/// result satisfies J'(q) = A · J(A⁻¹(q − shift)) · A⁻¹.
pub fn affine_pushforward_structure(
    j: &AlmostComplexField,
    a: &DMatrix<f64>,
    shift: &DVector<f64>,
) -> Result<AlmostComplexField, GeomError> {
    let dim = j.dim();
    assert_eq!(a.nrows(), dim);
    assert_eq!(a.ncols(), dim);
    let a_inv = a
        .clone()
        .try_inverse()
        .expect("affine pushforward: singular matrix");
    let names = j.chart().names().iter().map(|s| s.to_string()).collect::<Vec<_>>();
    // Inverse map components: Psi_i(q) = Σ_j (A⁻¹)_{ij} (q_j − shift_j)
    let mut inverse_map = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut acc = Expr::zero();
        for (jj, name) in names.iter().enumerate() {
            acc = Expr::add(
                acc,
                Expr::scale(
                    a_inv[(i, jj)],
                    Expr::sub(Expr::var(name), Expr::num(shift[jj])),
                ),
            );
        }
        inverse_map.push(acc);
    }
    let sub: Vec<(&str, Expr)> = names
        .iter()
        .map(|s| s.as_str())
        .zip(inverse_map.iter().cloned())
        .collect();
    let pulled = j.matrix().substitute(&sub);
    let mut a_expr = ExprMatrix::zeros(dim, dim);
    let mut a_inv_expr = ExprMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            *a_expr.get_mut(r, c) = Expr::num(a[(r, c)]);
            *a_inv_expr.get_mut(r, c) = Expr::num(a_inv[(r, c)]);
        }
    }
    let new_j = a_expr.matmul(&pulled).matmul(&a_inv_expr);
    AlmostComplexField::new(j.chart().clone(), new_j)
}

/// Two-parameter chart (s, t) with the given periods.
fn surface_params(periods: [Option<f64>; 2]) -> Chart {
    Chart::with_periods(&["s", "t"], &periods).expect("surface parameter chart")
}

/// The invariant torus {x = y = 0} in the torus-times-plane chart,
/// parametrized by the two angles over one full period each.
pub fn winding_torus_surface() -> ParamSurface {
    let two_pi = 2.0 * PI;
    ParamSurface::new(
        surface_params([Some(two_pi), Some(two_pi)]),
        torus_plane_chart(),
        vec![Expr::var("s"), Expr::var("t"), Expr::zero(), Expr::zero()],
        vec![0.0, 0.0],
        vec![two_pi, two_pi],
    )
    .expect("winding torus surface")
}

/// The plane {x2 = y2 = 0} in the two-plane chart, parametrized by the
/// first factor over [-hs, hs] × [-ht, ht].
pub fn first_plane_surface(hs: f64, ht: f64) -> ParamSurface {
    ParamSurface::new(
        surface_params([None, None]),
        two_plane_chart(),
        vec![Expr::var("s"), Expr::var("t"), Expr::zero(), Expr::zero()],
        vec![-hs, -ht],
        vec![hs, ht],
    )
    .expect("first-factor plane surface")
}

/// The plane {x1 = y1 = 0} in the two-plane chart (the fiber through the
/// origin), parametrized by the second factor.
pub fn second_plane_surface(hs: f64, ht: f64) -> ParamSurface {
    ParamSurface::new(
        surface_params([None, None]),
        two_plane_chart(),
        vec![Expr::zero(), Expr::zero(), Expr::var("s"), Expr::var("t")],
        vec![-hs, -ht],
        vec![hs, ht],
    )
    .expect("second-factor plane surface")
}

/// Graph of the anti-complex-linear map between the two factors of the
/// two-plane chart: (s, t) ↦ (s, t, eps·s, −eps·t). For eps ≠ 0 this
/// surface is nowhere invariant under the standard flat structure.
pub fn antiholomorphic_graph_surface(eps: f64, half: f64) -> ParamSurface {
    ParamSurface::new(
        surface_params([None, None]),
        two_plane_chart(),
        vec![
            Expr::var("s"),
            Expr::var("t"),
            Expr::scale(eps, Expr::var("s")),
            Expr::neg(Expr::scale(eps, Expr::var("t"))),
        ],
        vec![-half, -half],
        vec![half, half],
    )
    .expect("anti-holomorphic graph surface")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::Grid;

    fn sample_points(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
        Grid::new(lo.to_vec(), hi.to_vec(), n).unwrap().points()
    }

    fn assert_fields_match(
        chart: &Chart,
        got: &VectorField,
        want: &VectorField,
        points: &[Vec<f64>],
        tol: f64,
    ) {
        for p in points {
            let g = got.eval_at(chart, p).unwrap();
            let w = want.eval_at(chart, p).unwrap();
            let diff = (g - w).amax();
            assert!(
                diff <= tol,
                "field mismatch at {:?}: {} vs {}: diff {diff}",
                p,
                got.components
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                want.components
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
    }

    #[test]
    fn winding_structure_squares_to_minus_identity() {
        for rho in [0.0, 1.0, 2.0] {
            let j = winding_torus_structure(rho);
            let pts = sample_points(&[0.0, 0.0, -0.8, -0.8], &[6.0, 6.0, 0.8, 0.8], 3);
            let worst = j.check_square(&pts, 1e-10).unwrap();
            assert!(worst <= 1e-12, "rho={rho}: residual {worst}");
        }
    }

    #[test]
    fn winding_characteristic_field_matches_nijenhuis_value() {
        for rho in [0.0, 1.0, 2.0] {
            let j = winding_torus_structure(rho);
            let n = j.nijenhuis();
            let chart = j.chart();
            let expected = winding_characteristic_field(rho);
            let pts = sample_points(&[0.1, 0.2, -0.5, -0.5], &[5.0, 5.0, 0.5, 0.5], 3);
            for p in &pts {
                let got = n.pair_field(2, 0).eval_at(chart, p).unwrap();
                let want = expected.eval_at(chart, p).unwrap();
                assert!((got - want).amax() <= 1e-10, "rho={rho} at {p:?}");
            }
        }
    }

    #[test]
    fn parallel_plane_nijenhuis_matches_reference_table() {
        let j = parallel_plane_structure();
        let n = j.nijenhuis();
        let table = parallel_plane_nijenhuis_table();
        let pts = sample_points(&[-1.0; 4], &[1.0; 4], 3);
        for i in 0..4 {
            for jj in 0..4 {
                assert_fields_match(j.chart(), &n.pair_field(i, jj), &table[i][jj], &pts, 1e-12);
            }
        }
    }

    #[test]
    fn transversal_plane_nijenhuis_matches_reference_table() {
        let j = transversal_plane_structure();
        let n = j.nijenhuis();
        let table = transversal_plane_nijenhuis_table();
        let pts = sample_points(&[-1.0; 4], &[1.0; 4], 3);
        for i in 0..4 {
            for jj in 0..4 {
                assert_fields_match(j.chart(), &n.pair_field(i, jj), &table[i][jj], &pts, 1e-12);
            }
        }
    }

    #[test]
    fn linear_bundle_nijenhuis_is_fiber_constant_with_expected_value() {
        let (alpha, beta) = (0.7, -0.4);
        let j = linear_bundle_structure(alpha, beta);
        let n = j.nijenhuis();
        let chart = j.chart();
        let pts = sample_points(&[0.0, 0.0, -2.0, -2.0], &[6.0, 6.0, 2.0, 2.0], 3);
        // N(∂_x, ∂_phi1) = 2 beta ∂_x − 2 alpha ∂_y, independent of position
        let expected = DVector::from_vec(vec![0.0, 0.0, 2.0 * beta, -2.0 * alpha]);
        for p in &pts {
            let got = n.pair_field(2, 0).eval_at(chart, p).unwrap();
            assert!((got - expected.clone()).amax() <= 1e-12, "at {p:?}");
        }
        // Mixed base/fiber pairs are fiber-constant and the fiber-fiber pair
        // vanishes; the base-base pair is determined by linearity in the
        // fiber point: N(∂_phi1, ∂_phi2) = −P N(∂_phi1, ∂_x) − Q N(∂_phi1, ∂_y)
        // where (P, Q) are the fiber components of J ∂_phi1.
        let base = n.pair_matrix_at(&[0.4, 1.1, 0.0, 0.0]).unwrap();
        for fiber in [[0.4, 1.1, 0.8, -0.3], [0.4, 1.1, -1.5, 2.0]] {
            let there = n.pair_matrix_at(&fiber).unwrap();
            // pairs in lexicographic order: (0,1) (0,2) (0,3) (1,2) (1,3) (2,3)
            for (col, (a, b)) in crate::geom::index_pairs(4).iter().enumerate() {
                if (*a, *b) == (0, 1) {
                    let [_, _, x, y] = fiber;
                    let p = x * alpha + y * beta;
                    let q = x * beta - y * alpha;
                    let n_x = n.pair_field(0, 2).eval_at(chart, &fiber).unwrap();
                    let n_y = n.pair_field(0, 3).eval_at(chart, &fiber).unwrap();
                    let predicted = -p * n_x - q * n_y;
                    let got = DVector::from_column_slice(there.column(col).as_slice());
                    assert!((got - predicted).amax() <= 1e-12, "base pair at {fiber:?}");
                } else {
                    for k in 0..4 {
                        assert!(
                            (there[(k, col)] - base[(k, col)]).abs() <= 1e-12,
                            "pair ({a},{b}) component {k} varies along fiber"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn deformation_solution_has_zero_residual() {
        let (a1, a2) = integrable_deformation_functions();
        for x in [-0.9, -0.3, 0.0, 0.4, 1.1] {
            for y in [-0.7, -0.2, 0.0, 0.5, 1.3] {
                let (r1, r2) = deformation_residual(&a1, &a2, x, y).unwrap();
                assert!(r1.abs() <= 1e-12 && r2.abs() <= 1e-12, "at ({x},{y})");
            }
        }
        // a non-solution has visible residual
        let (b1, b2) = (lit("x"), Expr::zero());
        let (r1, _) = deformation_residual(&b1, &b2, 0.5, 0.2).unwrap();
        assert!(r1.abs() > 0.4);
    }

    #[test]
    fn deformed_product_structure_squares_to_minus_identity() {
        let (a1, a2) = integrable_deformation_functions();
        let j = deformed_product_structure(a1, a2, lit("x*y"), lit("x^2")).unwrap();
        let pts = sample_points(&[0.0, 0.0, -0.8, -0.8], &[6.0, 6.0, 0.8, 0.8], 3);
        let worst = j.check_square(&pts, 1e-10).unwrap();
        assert!(worst <= 1e-12, "residual {worst}");
    }

    #[test]
    fn tangency_interpolation_squares_to_minus_identity() {
        let j = tangency_interpolation_structure();
        let pts = sample_points(&[-2.0, -1.0, -1.0, -1.0], &[2.0, 1.0, 1.0, 1.0], 4);
        let worst = j.check_square(&pts, 1e-10).unwrap();
        assert!(worst <= 1e-15, "residual {worst}");
    }

    #[test]
    fn tangency_interpolation_has_both_regimes_on_surface() {
        let j = tangency_interpolation_structure();
        let n = j.nijenhuis();
        // Around x1 = −1.0 the image lies in the surface tangent ⟨∂_x1, ∂_y1⟩.
        let img = n.image_at(&[-1.0, 0.3, 0.0, 0.0], 1e-8).unwrap();
        assert_eq!(img.rank(), 2);
        for col in 0..2 {
            let b = img.basis.column(col);
            assert!(b[2].abs() < 1e-12 && b[3].abs() < 1e-12, "col {col}: {b:?}");
        }
        // Around x1 = +1.0 the image is the normal plane ⟨∂_x2, ∂_y2⟩.
        let img = n.image_at(&[1.0, 0.3, 0.0, 0.0], 1e-8).unwrap();
        assert_eq!(img.rank(), 2);
        for col in 0..2 {
            let b = img.basis.column(col);
            assert!(b[0].abs() < 1e-12 && b[1].abs() < 1e-12, "col {col}: {b:?}");
        }
    }

    #[test]
    fn transversal_normal_structures_square_to_minus_identity() {
        let chart = two_plane_chart();
        for m in [
            transversal_plane_normal_structure_exponential(),
            transversal_plane_normal_structure_constant(),
            parallel_plane_normal_structure(),
        ] {
            let j = AlmostComplexField::new(chart.clone(), m).unwrap();
            let pts = sample_points(&[-1.0; 4], &[1.0; 4], 3);
            let worst = j.check_square(&pts, 1e-10).unwrap();
            assert!(worst <= 1e-12);
        }
    }

    #[test]
    fn affine_pushforward_preserves_square() {
        let j = transversal_plane_structure();
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = 0.5; // shear
        a[(3, 1)] = -0.25;
        let shift = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.05]);
        let pushed = affine_pushforward_structure(&j, &a, &shift).unwrap();
        let pts = sample_points(&[-1.0; 4], &[1.0; 4], 3);
        let worst = pushed.check_square(&pts, 1e-9).unwrap();
        assert!(worst <= 1e-12);
    }
}
