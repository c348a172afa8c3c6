//! Riemannian companion to the almost complex machinery: Levi-Civita
//! connections, curvature tensors, and the submanifold apparatus (second
//! fundamental form, shape operator, normal connection) with numerical
//! residuals for the Gauss, Codazzi-Maynardi, and Ricci equations.
//!
//! Everything is assembled symbolically from a metric given as an expression
//! matrix over a chart.  Submanifolds enter as two-parameter surfaces; all
//! derived objects (induced metric, tangential projector, a rational normal
//! frame, the normal connection and its curvature) are expressions in the
//! surface parameters, so the classical identities can be evaluated to
//! machine precision on any probe grid.  A companion constructor builds the
//! induced metric on the total space of the normal bundle — base metric on
//! the horizontal distribution of the normal connection, bundle inner
//! product on the fibers — which is what the horizontal curvature comparison
//! for totally geodesic submanifolds needs.

use nalgebra::{DMatrix, DVector};

use crate::chart::{Chart, ChartError, Grid};
use crate::connections::{Christoffels, ConnectionError, ConnectionField};
use crate::expr::{EvalError, Expr};
use crate::geom::{ExprMatrix, GeomError};
use crate::curves::ParamSurface;

/// Covariant-constancy residual allowed for a Levi-Civita connection.
pub const METRICITY_TOL: f64 = 1e-10;
/// Lower-index symmetry residual allowed for a Levi-Civita connection.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Acceptance threshold for the Gauss, Codazzi, and Ricci residuals.
pub const EQUATION_TOL: f64 = 1e-7;
/// Acceptance threshold for pointwise tensor identities (Bianchi etc.).
pub const IDENTITY_TOL: f64 = 1e-9;

const DEGENERACY_TOL: f64 = 1e-10;
const SYMMETRIC_INPUT_TOL: f64 = 1e-12;
const FRAME_ACCEPT_TOL: f64 = 1e-6;

/// Errors reported by the Riemannian module.
#[derive(Debug, thiserror::Error)]
pub enum RiemannError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("the metric matrix is not symmetric (residual {residual:.3e})")]
    NotSymmetric { residual: f64 },
    #[error("the metric is not positive definite at {point:?} (eigenvalue {eigenvalue:.3e})")]
    NotPositive { point: Vec<f64>, eigenvalue: f64 },
    #[error("the metric degenerates at {point:?}")]
    DegenerateMetric { point: Vec<f64> },
    #[error("covariant constancy of the metric fails (residual {residual:.3e})")]
    MetricityFailure { residual: f64 },
    #[error("the connection lost its lower-index symmetry (residual {residual:.3e})")]
    AsymmetricConnection { residual: f64 },
    #[error("the submanifold degenerates at {point:?}: {detail}")]
    DegenerateSubmanifold { point: Vec<f64>, detail: String },
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Connection(#[from] ConnectionError),
    #[error("expression evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Unsupported(String),
}

/// Symmetric positive-definite expression matrix over a chart, together with
/// the probe grid on which its invariants were certified.
#[derive(Debug, Clone)]
pub struct MetricField {
    chart: Chart,
    g: ExprMatrix,
    probe: Grid,
}

impl MetricField {
    /// Validates symmetry and positive definiteness on the probe grid.
    pub fn new(chart: Chart, g: ExprMatrix, probe: Grid) -> Result<MetricField, RiemannError> {
        let n = chart.dim();
        if !(2..=4).contains(&n) {
            return Err(RiemannError::Unsupported(format!(
                "metric charts are limited to dimensions 2-4, got {n}"
            )));
        }
        if g.nrows() != n || g.ncols() != n {
            return Err(RiemannError::Dimension { expected: n, got: g.nrows().max(g.ncols()) });
        }
        if probe.dim() != n {
            return Err(RiemannError::Dimension { expected: n, got: probe.dim() });
        }
        let field = MetricField { chart, g, probe };
        for point in field.probe.points() {
            let m = field.eval_at(&point)?;
            let asym = (&m - m.transpose()).abs().max();
            if asym > SYMMETRIC_INPUT_TOL {
                return Err(RiemannError::NotSymmetric { residual: asym });
            }
            let sym = nalgebra::SymmetricEigen::new(m);
            let min_eig = sym.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if min_eig <= 0.0 {
                return Err(RiemannError::NotPositive { point, eigenvalue: min_eig });
            }
        }
        Ok(field)
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn matrix(&self) -> &ExprMatrix {
        &self.g
    }

    /// Probe grid the metric was certified on.
    pub fn probe(&self) -> &Grid {
        &self.probe
    }

    /// Numeric metric matrix at a chart point.
    pub fn eval_at(&self, point: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.g.eval_at(&self.chart, point)?)
    }

    /// Symbolic inverse via the adjugate; shared by the Christoffel assembly.
    pub fn inverse_matrix(&self) -> ExprMatrix {
        symbolic_inverse(&self.g)
    }
}

fn minor_rows(rows: &[Vec<Expr>], skip_row: usize, skip_col: usize) -> Vec<Vec<Expr>> {
    rows.iter()
        .enumerate()
        .filter(|(r, _)| *r != skip_row)
        .map(|(_, row)| {
            row.iter()
                .enumerate()
                .filter(|(c, _)| *c != skip_col)
                .map(|(_, e)| e.clone())
                .collect()
        })
        .collect()
}

fn det_rows(rows: &[Vec<Expr>]) -> Expr {
    let n = rows.len();
    if n == 1 {
        return rows[0][0].clone();
    }
    let mut acc = Expr::num(0.0);
    for j in 0..n {
        let cofactor = Expr::mul(rows[0][j].clone(), det_rows(&minor_rows(rows, 0, j)));
        acc = if j % 2 == 0 {
            Expr::add(acc, cofactor)
        } else {
            Expr::sub(acc, cofactor)
        };
    }
    acc
}

fn matrix_rows(m: &ExprMatrix) -> Vec<Vec<Expr>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m.get(i, j).clone()).collect())
        .collect()
}

/// Symbolic determinant by Laplace expansion (dimensions ≤ 4).
pub fn symbolic_determinant(m: &ExprMatrix) -> Expr {
    det_rows(&matrix_rows(m))
}

/// Symbolic inverse through the adjugate formula (dimensions ≤ 4).
pub fn symbolic_inverse(m: &ExprMatrix) -> ExprMatrix {
    let rows = matrix_rows(m);
    let det = det_rows(&rows);
    let n = m.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            // Adjugate: transpose of the cofactor matrix.
            let cof = det_rows(&minor_rows(&rows, j, i));
            let signed = if (i + j) % 2 == 0 { cof } else { Expr::neg(cof) };
            row.push(Expr::div(signed, det.clone()));
        }
        out.push(row);
    }
    ExprMatrix::from_rows(out)
}

/// Builds the unique torsion-free metric connection of `g` from the standard
/// Christoffel formula, then certifies covariant constancy of the metric and
/// lower-index symmetry on the metric's probe grid.
pub fn levi_civita(metric: &MetricField) -> Result<ConnectionField, RiemannError> {
    let chart = metric.chart();
    let n = chart.dim();
    let names = chart.names();
    for point in metric.probe.points() {
        let m = metric.eval_at(&point)?;
        if m.determinant().abs() <= DEGENERACY_TOL {
            return Err(RiemannError::DegenerateMetric { point });
        }
    }

    let g_inv = metric.inverse_matrix();
    let dg: Vec<ExprMatrix> = names.iter().map(|v| metric.g.differentiate(v)).collect();

    let mut gamma = Vec::with_capacity(n);
    for i in 0..n {
        let mut mat = ExprMatrix::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                let mut acc = Expr::num(0.0);
                for l in 0..n {
                    let bracket = Expr::sub(
                        Expr::add(dg[i].get(l, j).clone(), dg[j].get(l, i).clone()),
                        dg[l].get(i, j).clone(),
                    );
                    acc = Expr::add(acc, Expr::mul(g_inv.get(k, l).clone(), bracket));
                }
                *mat.get_mut(k, j) = Expr::scale(0.5, acc);
            }
        }
        gamma.push(mat);
    }
    let nabla = ConnectionField::new(chart.clone(), gamma)?;

    // Postconditions on the probe grid.
    let mut worst_metricity = 0.0f64;
    let mut worst_symmetry = 0.0f64;
    for point in metric.probe.points() {
        let g_here = metric.eval_at(&point)?;
        let gam: Vec<DMatrix<f64>> = nabla
            .gamma()
            .iter()
            .map(|m| m.eval_at(chart, &point))
            .collect::<Result<_, _>>()?;
        for (i, name_i) in names.iter().enumerate() {
            let dgi = metric.g.differentiate(name_i).eval_at(chart, &point)?;
            for j in 0..n {
                for k in 0..n {
                    let mut nabla_g = dgi[(j, k)];
                    for l in 0..n {
                        nabla_g -= gam[i][(l, j)] * g_here[(l, k)];
                        nabla_g -= gam[i][(l, k)] * g_here[(j, l)];
                    }
                    worst_metricity = worst_metricity.max(nabla_g.abs());
                    worst_symmetry = worst_symmetry.max((gam[i][(k, j)] - gam[j][(k, i)]).abs());
                }
            }
        }
    }
    if worst_metricity > METRICITY_TOL {
        return Err(RiemannError::MetricityFailure { residual: worst_metricity });
    }
    if worst_symmetry > SYMMETRY_TOL {
        return Err(RiemannError::AsymmetricConnection { residual: worst_symmetry });
    }
    Ok(nabla)
}

/// Curvature of a symbolic connection, stored as one endomorphism-valued
/// expression matrix per direction pair: `endomorphism(i, j)` has entry
/// `(l, k)` equal to the curvature component with upper index `l` produced
/// by directions `i, j` acting on `∂_k`.
#[derive(Debug, Clone)]
pub struct CurvatureField {
    chart: Chart,
    comp: Vec<Vec<ExprMatrix>>,
}

impl CurvatureField {
    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    /// The endomorphism produced by the coordinate pair `(i, j)`.
    pub fn endomorphism(&self, i: usize, j: usize) -> &ExprMatrix {
        &self.comp[i][j]
    }

    /// Numeric endomorphism at a point.
    pub fn endomorphism_at(&self, i: usize, j: usize, point: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.comp[i][j].eval_at(&self.chart, point)?)
    }

    /// Numeric endomorphism produced by two arbitrary vectors.
    pub fn pair_at(&self, point: &[f64], x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>, RiemannError> {
        let n = self.chart.dim();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if x[i] == 0.0 || y[j] == 0.0 {
                    continue;
                }
                out += self.endomorphism_at(i, j, point)? * (x[i] * y[j]);
            }
        }
        Ok(out)
    }

    /// Worst cyclic-sum residual of the first algebraic identity satisfied by
    /// torsion-free curvature tensors, over the supplied points.
    pub fn first_bianchi_residual(&self, points: &[Vec<f64>]) -> Result<f64, RiemannError> {
        let n = self.chart.dim();
        let mut worst = 0.0f64;
        for point in points {
            let mut mats = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    mats.push(self.endomorphism_at(i, j, point)?);
                }
            }
            let at = |i: usize, j: usize| &mats[i * n + j];
            for l in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let cyc = at(i, j)[(l, k)] + at(j, k)[(l, i)] + at(k, i)[(l, j)];
                            worst = worst.max(cyc.abs());
                        }
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// Assembles the curvature tensor of a symbolic connection from the
/// coordinate formula `∂_i Γ_j − ∂_j Γ_i + [Γ_i, Γ_j]`.
pub fn curvature(nabla: &ConnectionField) -> CurvatureField {
    let chart = nabla.chart().clone();
    let names = chart.names();
    let n = chart.dim();
    let gamma = nabla.gamma();
    let mut comp = vec![vec![ExprMatrix::zeros(n, n); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let di_gj = gamma[j].differentiate(names[i]);
            let dj_gi = gamma[i].differentiate(names[j]);
            let commutator = gamma[i].matmul(&gamma[j]).sub(&gamma[j].matmul(&gamma[i]));
            let m = di_gj.sub(&dj_gi).add(&commutator);
            comp[j][i] = m.neg();
            comp[i][j] = m;
        }
    }
    CurvatureField { chart, comp }
}

/// Sectional curvature of the plane spanned by `x, y` at `point`.
pub fn sectional_curvature(
    metric: &MetricField,
    curv: &CurvatureField,
    point: &[f64],
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64, RiemannError> {
    let g = metric.eval_at(point)?;
    let rxy = curv.pair_at(point, x, y)?;
    let numerator = (x.transpose() * &g * (rxy * y))[(0, 0)];
    let xx = (x.transpose() * &g * x)[(0, 0)];
    let yy = (y.transpose() * &g * y)[(0, 0)];
    let xy = (x.transpose() * &g * y)[(0, 0)];
    let denom = xx * yy - xy * xy;
    if denom.abs() <= DEGENERACY_TOL {
        return Err(RiemannError::Unsupported(
            "the two directions do not span a nondegenerate plane".into(),
        ));
    }
    Ok(numerator / denom)
}

/// The submanifold package for a two-parameter surface inside a Riemannian
/// chart: all tensors are expressions in the surface parameters.
#[derive(Debug, Clone)]
pub struct SubmanifoldTensors {
    surface: ParamSurface,
    /// Ambient metric composed with the embedding (n × n).
    ambient_on_surface: ExprMatrix,
    /// Embedding differential (n × 2).
    tangent: ExprMatrix,
    /// Induced first fundamental form (2 × 2) wrapped as a metric field.
    induced: MetricField,
    /// Metric-orthogonal projector onto the tangent plane (n × n).
    tangent_projector: ExprMatrix,
    /// Rational (unnormalized) normal frame vectors, ambient components.
    normal_frame: Vec<Vec<Expr>>,
    /// Gram matrix of the normal frame (r × r).
    normal_gram: ExprMatrix,
    /// Second fundamental form values, ambient components, `[a][b]`.
    second_fundamental: Vec<Vec<Vec<Expr>>>,
    /// Normal connection forms `ω_a` (r × r), `∇⊥_a n_β = Σ_α ω_a[α,β] n_α`.
    normal_connection: Vec<ExprMatrix>,
    /// Curvature of the normal connection on the parameter pair (r × r).
    normal_curvature: ExprMatrix,
    /// Ambient Christoffel matrices composed with the embedding.
    ambient_gamma_on_surface: Vec<ExprMatrix>,
}

impl SubmanifoldTensors {
    pub fn surface(&self) -> &ParamSurface {
        &self.surface
    }

    /// Induced metric on the parameter chart.
    pub fn induced_metric(&self) -> &MetricField {
        &self.induced
    }

    /// Number of normal frame vectors (the codimension).
    pub fn normal_rank(&self) -> usize {
        self.normal_frame.len()
    }

    fn params(&self) -> &Chart {
        self.surface.params()
    }

    /// Ambient metric value at surface parameters.
    pub fn ambient_metric_at(&self, st: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.ambient_on_surface.eval_at(self.params(), st)?)
    }

    /// Embedding differential at surface parameters.
    pub fn tangent_at(&self, st: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.tangent.eval_at(self.params(), st)?)
    }

    /// Tangential projector at surface parameters.
    pub fn projector_at(&self, st: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.tangent_projector.eval_at(self.params(), st)?)
    }

    /// Normal frame vector `β` at surface parameters.
    pub fn normal_at(&self, st: &[f64], beta: usize) -> Result<DVector<f64>, RiemannError> {
        let chart = self.params();
        let mut v = DVector::zeros(self.normal_frame[beta].len());
        for (i, e) in self.normal_frame[beta].iter().enumerate() {
            v[i] = chart.eval(e, st)?;
        }
        Ok(v)
    }

    /// Gram matrix of the normal frame at surface parameters.
    pub fn normal_gram_at(&self, st: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.normal_gram.eval_at(self.params(), st)?)
    }

    /// Second fundamental form value on the parameter directions `(a, b)`.
    pub fn second_fundamental_at(&self, st: &[f64], a: usize, b: usize) -> Result<DVector<f64>, RiemannError> {
        let chart = self.params();
        let comps = &self.second_fundamental[a][b];
        let mut v = DVector::zeros(comps.len());
        for (i, e) in comps.iter().enumerate() {
            v[i] = chart.eval(e, st)?;
        }
        Ok(v)
    }

    /// Normal connection form `ω_a` at surface parameters.
    pub fn normal_connection_at(&self, st: &[f64], a: usize) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.normal_connection[a].eval_at(self.params(), st)?)
    }

    /// Normal curvature on the parameter pair at surface parameters.
    pub fn normal_curvature_at(&self, st: &[f64]) -> Result<DMatrix<f64>, RiemannError> {
        Ok(self.normal_curvature.eval_at(self.params(), st)?)
    }

    /// Shape operator value `A(∂_a, V)` as an ambient vector, for an ambient
    /// normal vector `V` at surface parameters; defined through the duality
    /// with the second fundamental form.
    pub fn shape_at(&self, st: &[f64], a: usize, v: &DVector<f64>) -> Result<DVector<f64>, RiemannError> {
        let g = self.ambient_metric_at(st)?;
        let b = self.tangent_at(st)?;
        let ind = self.induced.eval_at(st)?;
        let mut rhs = DVector::zeros(2);
        for d in 0..2 {
            let pi = self.second_fundamental_at(st, a, d)?;
            rhs[d] = (pi.transpose() * &g * v)[(0, 0)];
        }
        let coeffs = ind
            .lu()
            .solve(&rhs)
            .ok_or_else(|| RiemannError::DegenerateSubmanifold {
                point: st.to_vec(),
                detail: "induced metric not invertible".into(),
            })?;
        Ok(b * coeffs)
    }

    /// Worst deviation from `Π(X, Y) = Π(Y, X)` plus the duality defect of
    /// the shape operator, over the supplied parameter points.
    pub fn symmetry_residual(&self, points: &[Vec<f64>]) -> Result<f64, RiemannError> {
        let mut worst = 0.0f64;
        for st in points {
            let g = self.ambient_metric_at(st)?;
            let b = self.tangent_at(st)?;
            for a in 0..2 {
                for c in 0..2 {
                    let pab = self.second_fundamental_at(st, a, c)?;
                    let pba = self.second_fundamental_at(st, c, a)?;
                    worst = worst.max((&pab - &pba).abs().max());
                    for beta in 0..self.normal_rank() {
                        let v = self.normal_at(st, beta)?;
                        let shape = self.shape_at(st, a, &v)?;
                        let lhs = (shape.transpose() * &g * b.column(c))[(0, 0)];
                        let rhs = (pab.transpose() * &g * &v)[(0, 0)];
                        worst = worst.max((lhs - rhs).abs());
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn substitution_map<'a>(names: &[&'a str], components: &[Expr]) -> Vec<(&'a str, Expr)> {
    names
        .iter()
        .zip(components)
        .map(|(n, c)| (*n, c.clone()))
        .collect()
}

fn column_exprs(m: &ExprMatrix, j: usize) -> Vec<Expr> {
    (0..m.nrows()).map(|i| m.get(i, j).clone()).collect()
}

/// `Σ_i u_i · (Γ_i v)` — the Christoffel bilinear map on symbolic vectors.
fn christoffel_apply(gamma: &[ExprMatrix], u: &[Expr], v: &[Expr]) -> Vec<Expr> {
    let n = u.len();
    let mut out = vec![Expr::num(0.0); n];
    for (i, gi) in gamma.iter().enumerate() {
        let gv = gi.apply_vec(v);
        for (k, entry) in gv.into_iter().enumerate() {
            out[k] = Expr::add(out[k].clone(), Expr::mul(u[i].clone(), entry));
        }
    }
    out
}

fn project_out(projector: &ExprMatrix, v: &[Expr]) -> Vec<Expr> {
    let pv = projector.apply_vec(v);
    v.iter()
        .zip(pv)
        .map(|(orig, proj)| Expr::sub(orig.clone(), proj))
        .collect()
}

/// Builds the second fundamental form, shape operator data, normal frame,
/// normal connection, and normal curvature of a surface inside the metric's
/// chart.  The ambient connection is the Levi-Civita connection of `metric`.
pub fn submanifold_tensors(
    metric: &MetricField,
    surface: &ParamSurface,
) -> Result<SubmanifoldTensors, RiemannError> {
    if surface.target().names() != metric.chart().names() {
        return Err(RiemannError::Unsupported(
            "the surface is embedded in a different chart than the metric".into(),
        ));
    }
    let n = metric.chart().dim();
    if n < 3 {
        return Err(RiemannError::Unsupported(
            "submanifold tensors need a positive-codimension surface (ambient dimension 3 or 4)"
                .into(),
        ));
    }
    let r = n - 2;
    let params = surface.params().clone();
    let pnames = params.names();
    let target_names = metric.chart().names();
    let subs = substitution_map(&target_names, surface.components());

    // Symbolic embedding differential.
    let mut bt_cols: Vec<Vec<Expr>> = Vec::with_capacity(2);
    for a in 0..2 {
        bt_cols.push(
            surface
                .components()
                .iter()
                .map(|c| c.differentiate(pnames[a]))
                .collect(),
        );
    }
    let tangent = ExprMatrix::from_columns(bt_cols.clone());

    let ambient_on_surface = metric.matrix().substitute(&subs);
    let tangent_t = ExprMatrix::from_rows(bt_cols.clone());
    let induced_mat = tangent_t.matmul(&ambient_on_surface).matmul(&tangent);

    // Numeric sanity sweep before any symbolic inverse is used.
    let probe = surface.sampling_grid(4);
    for st in probe.points() {
        let b = surface.jacobian_at(&st)?;
        let svd = b.clone().svd(false, false);
        let rank_sigma = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        if rank_sigma <= 1e-8 {
            return Err(RiemannError::DegenerateSubmanifold {
                point: st,
                detail: "embedding differential loses rank".into(),
            });
        }
        let ind = induced_mat.eval_at(&params, &st)?;
        if ind.determinant().abs() <= DEGENERACY_TOL {
            return Err(RiemannError::DegenerateSubmanifold {
                point: st,
                detail: "induced metric degenerates".into(),
            });
        }
    }

    let induced_inv = symbolic_inverse(&induced_mat);
    let tangent_projector = tangent
        .matmul(&induced_inv)
        .matmul(&tangent_t)
        .matmul(&ambient_on_surface);

    // Deterministic rational normal frame: sweep coordinate axes at the
    // parameter-box midpoint, keep the first r independent residuals, and
    // orthogonalize the second against the first for conditioning.
    let (lo, hi) = surface.param_box();
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let g_mid = ambient_on_surface.eval_at(&params, &mid)?;
    let p_mid = tangent_projector.eval_at(&params, &mid)?;
    let mut chosen_axes: Vec<usize> = Vec::new();
    let mut frame_mid: Vec<DVector<f64>> = Vec::new();
    for k in 0..n {
        if chosen_axes.len() == r {
            break;
        }
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        let mut cand = &e - &p_mid * &e;
        // Orthogonalize against already-chosen candidates in the metric
        // inner product, mirroring the symbolic construction below.
        for prev in &frame_mid {
            let denom = (prev.transpose() * &g_mid * prev)[(0, 0)];
            let coeff = (cand.transpose() * &g_mid * prev)[(0, 0)] / denom;
            cand -= prev * coeff;
        }
        let norm2 = (cand.transpose() * &g_mid * &cand)[(0, 0)];
        if norm2 > FRAME_ACCEPT_TOL {
            chosen_axes.push(k);
            frame_mid.push(cand);
        }
    }
    if chosen_axes.len() < r {
        return Err(RiemannError::DegenerateSubmanifold {
            point: mid,
            detail: "no coordinate axes span the normal space".into(),
        });
    }

    let mut normal_frame: Vec<Vec<Expr>> = Vec::with_capacity(r);
    for (slot, &axis) in chosen_axes.iter().enumerate() {
        let e: Vec<Expr> = (0..n)
            .map(|i| Expr::num(if i == axis { 1.0 } else { 0.0 }))
            .collect();
        let mut cand = project_out(&tangent_projector, &e);
        for prev in normal_frame.iter().take(slot) {
            // cand -= prev · (g(cand, prev) / g(prev, prev))
            let mut num = Expr::num(0.0);
            let mut den = Expr::num(0.0);
            for i in 0..n {
                for j in 0..n {
                    let gij = ambient_on_surface.get(i, j).clone();
                    num = Expr::add(
                        num,
                        Expr::mul(cand[i].clone(), Expr::mul(gij.clone(), prev[j].clone())),
                    );
                    den = Expr::add(
                        den,
                        Expr::mul(prev[i].clone(), Expr::mul(gij, prev[j].clone())),
                    );
                }
            }
            let coeff = Expr::div(num, den);
            cand = cand
                .iter()
                .zip(prev)
                .map(|(c, p)| Expr::sub(c.clone(), Expr::mul(coeff.clone(), p.clone())))
                .collect();
        }
        normal_frame.push(cand);
    }

    // Gram matrix of the frame.
    let mut gram_rows = Vec::with_capacity(r);
    for alpha in 0..r {
        let mut row = Vec::with_capacity(r);
        for beta in 0..r {
            let mut acc = Expr::num(0.0);
            for i in 0..n {
                for j in 0..n {
                    acc = Expr::add(
                        acc,
                        Expr::mul(
                            normal_frame[alpha][i].clone(),
                            Expr::mul(
                                ambient_on_surface.get(i, j).clone(),
                                normal_frame[beta][j].clone(),
                            ),
                        ),
                    );
                }
            }
            row.push(acc);
        }
        gram_rows.push(row);
    }
    let normal_gram = ExprMatrix::from_rows(gram_rows);
    for st in probe.points() {
        let gm = normal_gram.eval_at(&params, &st)?;
        if gm.determinant().abs() <= DEGENERACY_TOL {
            return Err(RiemannError::DegenerateSubmanifold {
                point: st,
                detail: "normal frame degenerates".into(),
            });
        }
    }

    // Ambient Levi-Civita Christoffels composed with the embedding.
    let nabla = levi_civita(metric)?;
    let ambient_gamma_on_surface: Vec<ExprMatrix> = nabla
        .gamma()
        .iter()
        .map(|m| m.substitute(&subs))
        .collect();

    // Second fundamental form: normal part of the ambient covariant
    // derivative of the tangent frame.
    let mut second_fundamental: Vec<Vec<Vec<Expr>>> = Vec::with_capacity(2);
    for a in 0..2 {
        let mut row = Vec::with_capacity(2);
        for b in 0..2 {
            let second: Vec<Expr> = surface
                .components()
                .iter()
                .map(|c| c.differentiate(pnames[a]).differentiate(pnames[b]))
                .collect();
            let gamma_term =
                christoffel_apply(&ambient_gamma_on_surface, &bt_cols[a], &bt_cols[b]);
            let full: Vec<Expr> = second
                .into_iter()
                .zip(gamma_term)
                .map(|(s, g)| Expr::add(s, g))
                .collect();
            row.push(project_out(&tangent_projector, &full));
        }
        second_fundamental.push(row);
    }

    // Normal connection forms in the rational frame.
    let gram_inv = symbolic_inverse(&normal_gram);
    let mut normal_connection = Vec::with_capacity(2);
    for a in 0..2 {
        let mut rhs_rows = vec![vec![Expr::num(0.0); r]; r];
        for beta in 0..r {
            let derivative: Vec<Expr> = normal_frame[beta]
                .iter()
                .map(|c| c.differentiate(pnames[a]))
                .collect();
            let gamma_term =
                christoffel_apply(&ambient_gamma_on_surface, &bt_cols[a], &normal_frame[beta]);
            let full: Vec<Expr> = derivative
                .into_iter()
                .zip(gamma_term)
                .map(|(d, g)| Expr::add(d, g))
                .collect();
            let perp = project_out(&tangent_projector, &full);
            for (alpha, frame_alpha) in normal_frame.iter().enumerate() {
                let mut acc = Expr::num(0.0);
                for i in 0..n {
                    for j in 0..n {
                        acc = Expr::add(
                            acc,
                            Expr::mul(
                                frame_alpha[i].clone(),
                                Expr::mul(
                                    ambient_on_surface.get(i, j).clone(),
                                    perp[j].clone(),
                                ),
                            ),
                        );
                    }
                }
                rhs_rows[alpha][beta] = acc;
            }
        }
        normal_connection.push(gram_inv.matmul(&ExprMatrix::from_rows(rhs_rows)));
    }

    // Curvature of the normal connection on (∂_s, ∂_t).
    let d_s_omega_t = normal_connection[1].differentiate(pnames[0]);
    let d_t_omega_s = normal_connection[0].differentiate(pnames[1]);
    let commutator = normal_connection[0]
        .matmul(&normal_connection[1])
        .sub(&normal_connection[1].matmul(&normal_connection[0]));
    let normal_curvature = d_s_omega_t.sub(&d_t_omega_s).add(&commutator);

    let induced = MetricField::new(params.clone(), induced_mat, probe)?;

    Ok(SubmanifoldTensors {
        surface: surface.clone(),
        ambient_on_surface,
        tangent,
        induced,
        tangent_projector,
        normal_frame,
        normal_gram,
        second_fundamental,
        normal_connection,
        normal_curvature,
        ambient_gamma_on_surface,
    })
}

/// Maximum residuals of the three classical submanifold curvature equations
/// over a parameter grid.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureResiduals {
    /// Tangential part of the ambient curvature against intrinsic curvature
    /// plus the shape/second-fundamental correction.
    pub gauss: f64,
    /// Normal part of the ambient curvature on tangent arguments against the
    /// alternated covariant derivative of the second fundamental form.
    pub codazzi: f64,
    /// Normal part of the ambient curvature on a normal argument against the
    /// normal curvature plus the second-fundamental/shape correction.
    pub ricci: f64,
}

/// Evaluates the Gauss, Codazzi, and Ricci identities for the surface at
/// every point of `grid` (a parameter-space grid) and reports the worst
/// componentwise residuals.
pub fn gauss_codazzi_ricci_residuals(
    metric: &MetricField,
    surface: &ParamSurface,
    grid: &Grid,
) -> Result<CurvatureResiduals, RiemannError> {
    if grid.dim() != 2 {
        return Err(RiemannError::Dimension { expected: 2, got: grid.dim() });
    }
    let tensors = submanifold_tensors(metric, surface)?;
    let params = surface.params().clone();
    let pnames = params.names();
    let n = metric.chart().dim();
    let r = tensors.normal_rank();

    let ambient_curv = curvature(&levi_civita(metric)?);
    let induced_nabla = levi_civita(tensors.induced_metric())?;
    let induced_curv = curvature(&induced_nabla);

    // Parameter derivatives of the second fundamental form, for the Codazzi
    // covariant derivative.
    let mut d_pi: Vec<Vec<Vec<Vec<Expr>>>> = Vec::with_capacity(2);
    for a in 0..2 {
        let mut per_b = Vec::with_capacity(2);
        for b in 0..2 {
            let mut per_c = Vec::with_capacity(2);
            for c in 0..2 {
                per_c.push(
                    tensors.second_fundamental[b][c]
                        .iter()
                        .map(|e| e.differentiate(pnames[a]))
                        .collect::<Vec<Expr>>(),
                );
            }
            per_b.push(per_c);
        }
        d_pi.push(per_b);
    }

    let eval_vec = |comps: &[Expr], st: &[f64]| -> Result<DVector<f64>, RiemannError> {
        let mut v = DVector::zeros(comps.len());
        for (i, e) in comps.iter().enumerate() {
            v[i] = params.eval(e, st)?;
        }
        Ok(v)
    };

    let mut worst = CurvatureResiduals { gauss: 0.0, codazzi: 0.0, ricci: 0.0 };
    for st in grid.points() {
        let point = surface.point_at(&st)?;
        let b = tensors.tangent_at(&st)?;
        let g = tensors.ambient_metric_at(&st)?;
        let p_t = tensors.projector_at(&st)?;
        let identity = DMatrix::<f64>::identity(n, n);
        let p_n = &identity - &p_t;

        // Ambient curvature endomorphism on the coordinate tangent pair.
        let bs = DVector::from_column_slice(b.column(0).as_slice());
        let bt = DVector::from_column_slice(b.column(1).as_slice());
        let ambient_endo = ambient_curv.pair_at(&point, &bs, &bt)?;

        // Intrinsic curvature endomorphism on the parameter pair.
        let intrinsic = induced_curv.endomorphism_at(0, 1, &st)?;

        let pi = |a: usize, c: usize| tensors.second_fundamental_at(&st, a, c);

        // Gauss and Codazzi run over the tangent argument.
        for c in 0..2 {
            let z = DVector::from_column_slice(b.column(c).as_slice());
            let full = &ambient_endo * &z;

            // Gauss.
            let lhs_par = &p_t * &full;
            let intrinsic_vec = &b
                * DVector::from_column_slice(
                    intrinsic.column(c).as_slice(),
                );
            let term_y = tensors.shape_at(&st, 1, &pi(0, c)?)?;
            let term_x = tensors.shape_at(&st, 0, &pi(1, c)?)?;
            let gauss_residual = (&lhs_par - (&intrinsic_vec + &term_y - &term_x)).abs().max();
            worst.gauss = worst.gauss.max(gauss_residual);

            // Codazzi: alternated covariant derivative of the form.
            let induced_gamma: Vec<DMatrix<f64>> = induced_nabla
                .gamma()
                .iter()
                .map(|m| m.eval_at(&params, &st))
                .collect::<Result<_, _>>()?;
            let mut codazzi_terms = Vec::with_capacity(2);
            for (a, x_idx) in [(1usize, 0usize), (0usize, 1usize)] {
                // (∇_a Π)(x_idx, c)
                let d_vec = eval_vec(&d_pi[a][x_idx][c], &st)?;
                let gamma_amb = {
                    let mut acc = DVector::zeros(n);
                    let pi_vec = pi(x_idx, c)?;
                    for (i, gi) in tensors.ambient_gamma_on_surface.iter().enumerate() {
                        let gmat = gi.eval_at(&params, &st)?;
                        acc += gmat * &pi_vec * b[(i, a)];
                    }
                    acc
                };
                let mut value = &p_n * (d_vec + gamma_amb);
                for d in 0..2 {
                    let gamma_abd = induced_gamma[a][(d, x_idx)];
                    let gamma_acd = induced_gamma[a][(d, c)];
                    value -= pi(d, c)? * gamma_abd;
                    value -= pi(x_idx, d)? * gamma_acd;
                }
                codazzi_terms.push(value);
            }
            let lhs_perp = &p_n * &full;
            let codazzi_residual =
                (&lhs_perp - (&codazzi_terms[0] - &codazzi_terms[1])).abs().max();
            worst.codazzi = worst.codazzi.max(codazzi_residual);
        }

        // Ricci runs over the normal frame.
        let omega_pair = tensors.normal_curvature_at(&st)?;
        for beta in 0..r {
            let v = tensors.normal_at(&st, beta)?;
            let full = &ambient_endo * &v;
            let lhs_perp = &p_n * &full;

            let mut rhs = DVector::zeros(n);
            for alpha in 0..r {
                rhs += tensors.normal_at(&st, alpha)? * omega_pair[(alpha, beta)];
            }
            // + Π(∂_s, A(∂_t, V)) − Π(∂_t, A(∂_s, V)), with the shape values
            // re-expressed in tangent coordinates.
            let ind = tensors.induced_metric().eval_at(&st)?;
            let shape_coords = |a: usize| -> Result<DVector<f64>, RiemannError> {
                let shape_vec = tensors.shape_at(&st, a, &v)?;
                let rhs2 = b.transpose() * &g * &shape_vec;
                ind.clone().lu().solve(&rhs2).ok_or_else(|| {
                    RiemannError::DegenerateSubmanifold {
                        point: st.to_vec(),
                        detail: "induced metric not invertible".into(),
                    }
                })
            };
            let at_coords = shape_coords(1)?;
            let as_coords = shape_coords(0)?;
            for d in 0..2 {
                rhs += pi(0, d)? * at_coords[d];
                rhs -= pi(1, d)? * as_coords[d];
            }
            let ricci_residual = (&lhs_perp - &rhs).abs().max();
            worst.ricci = worst.ricci.max(ricci_residual);
        }
    }
    Ok(worst)
}

/// Induced metric on the total space of the normal bundle: horizontal
/// distribution from the normal connection carrying the induced base metric,
/// fibers carrying the frame Gram matrix, the two orthogonal to each other.
/// The result lives on a chart whose coordinates are the surface parameters
/// followed by fiber coordinates `w1, …`.
pub fn normal_bundle_metric(tensors: &SubmanifoldTensors) -> Result<MetricField, RiemannError> {
    let params = tensors.surface().params();
    let pnames = params.names();
    let r = tensors.normal_rank();
    let fiber_names: Vec<String> = (1..=r).map(|i| format!("w{i}")).collect();
    for fname in &fiber_names {
        if pnames.contains(&fname.as_str()) {
            return Err(RiemannError::Unsupported(format!(
                "parameter name {fname} collides with a fiber coordinate"
            )));
        }
    }
    let mut all_names: Vec<&str> = pnames.clone();
    for fname in &fiber_names {
        all_names.push(fname.as_str());
    }
    let chart = Chart::new(&all_names)?;
    let dim = 2 + r;

    let w_vars: Vec<Expr> = fiber_names.iter().map(|f| Expr::var(f)).collect();
    // vertical_a = ω_a · w, the fiber component of the coordinate lift of ∂_a.
    let mut vertical: Vec<Vec<Expr>> = Vec::with_capacity(2);
    for a in 0..2 {
        vertical.push(tensors.normal_connection[a].apply_vec(&w_vars));
    }

    let gram = &tensors.normal_gram;
    let induced = tensors.induced_metric().matrix();
    let mut rows = vec![vec![Expr::num(0.0); dim]; dim];
    // Base block: induced metric plus the vertical correction.
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = induced.get(a, b).clone();
            for alpha in 0..r {
                for beta in 0..r {
                    acc = Expr::add(
                        acc,
                        Expr::mul(
                            vertical[a][alpha].clone(),
                            Expr::mul(gram.get(alpha, beta).clone(), vertical[b][beta].clone()),
                        ),
                    );
                }
            }
            rows[a][b] = acc;
        }
    }
    // Mixed block: fiber inner product of the vertical correction.
    for a in 0..2 {
        for beta in 0..r {
            let mut acc = Expr::num(0.0);
            for alpha in 0..r {
                acc = Expr::add(
                    acc,
                    Expr::mul(vertical[a][alpha].clone(), gram.get(alpha, beta).clone()),
                );
            }
            rows[a][2 + beta] = acc.clone();
            rows[2 + beta][a] = acc;
        }
    }
    // Fiber block: the frame Gram matrix, constant along each fiber.
    for alpha in 0..r {
        for beta in 0..r {
            rows[2 + alpha][2 + beta] = gram.get(alpha, beta).clone();
        }
    }

    let (lo, hi) = tensors.surface().param_box();
    let mut full_lo = lo.to_vec();
    let mut full_hi = hi.to_vec();
    for _ in 0..r {
        full_lo.push(-0.5);
        full_hi.push(0.5);
    }
    let probe = Grid::new(full_lo, full_hi, 3)?;
    MetricField::new(chart, ExprMatrix::from_rows(rows), probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn euclidean(n: usize) -> MetricField {
        let names = ["x", "y", "z", "w"];
        let chart = Chart::new(&names[..n]).unwrap();
        let probe = Grid::new(vec![-1.0; n], vec![1.0; n], 3).unwrap();
        MetricField::new(chart, ExprMatrix::identity(n), probe).unwrap()
    }

    fn round_sphere(radius: f64) -> MetricField {
        let chart = Chart::new(&["theta", "phi"]).unwrap();
        let mut g = ExprMatrix::zeros(2, 2);
        *g.get_mut(0, 0) = Expr::num(radius * radius);
        *g.get_mut(1, 1) = Expr::mul(
            Expr::num(radius * radius),
            Expr::pow(
                Expr::call(crate::expr::Func::Sin, Expr::var("theta")),
                Expr::num(2.0),
            ),
        );
        let probe = Grid::new(vec![0.4, 0.1], vec![2.7, 6.0], 3).unwrap();
        MetricField::new(chart, g, probe).unwrap()
    }

    fn three_sphere() -> MetricField {
        let chart = Chart::new(&["chi", "theta", "phi"]).unwrap();
        let sin2 = |v: &str| {
            Expr::pow(
                Expr::call(crate::expr::Func::Sin, Expr::var(v)),
                Expr::num(2.0),
            )
        };
        let mut g = ExprMatrix::zeros(3, 3);
        *g.get_mut(0, 0) = Expr::num(1.0);
        *g.get_mut(1, 1) = sin2("chi");
        *g.get_mut(2, 2) = Expr::mul(sin2("chi"), sin2("theta"));
        let probe = Grid::new(vec![0.5, 0.4, 0.2], vec![2.5, 2.6, 6.0], 3).unwrap();
        MetricField::new(chart, g, probe).unwrap()
    }

    /// Mildly curved analytic metric on a 3-chart, kept close to Euclidean
    /// so it stays positive definite on the probe box.
    fn wavy_metric() -> MetricField {
        let chart = Chart::new(&["x", "y", "z"]).unwrap();
        let mut g = ExprMatrix::identity(3);
        *g.get_mut(0, 0) = Expr::add(
            Expr::num(1.0),
            Expr::scale(
                0.2,
                Expr::pow(Expr::var("y"), Expr::num(2.0)),
            ),
        );
        *g.get_mut(1, 1) = Expr::add(
            Expr::num(1.0),
            Expr::scale(0.1, Expr::pow(Expr::var("x"), Expr::num(2.0))),
        );
        let off = Expr::scale(
            0.1,
            Expr::mul(Expr::var("x"), Expr::var("z")),
        );
        *g.get_mut(0, 2) = off.clone();
        *g.get_mut(2, 0) = off;
        let probe = Grid::new(vec![-0.8; 3], vec![0.8; 3], 3).unwrap();
        MetricField::new(chart, g, probe).unwrap()
    }

    fn plane_in_r4() -> ParamSurface {
        let params = Chart::new(&["s", "t"]).unwrap();
        let target = Chart::new(&["x", "y", "z", "w"]).unwrap();
        ParamSurface::new(
            params,
            target,
            vec![
                Expr::add(Expr::num(0.3), Expr::var("s")),
                Expr::var("t"),
                Expr::sub(
                    Expr::scale(0.2, Expr::var("s")),
                    Expr::scale(0.4, Expr::var("t")),
                ),
                Expr::num(1.0),
            ],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    fn sphere_in_r3(radius: f64) -> ParamSurface {
        let params = Chart::new(&["s", "t"]).unwrap();
        let target = Chart::new(&["x", "y", "z"]).unwrap();
        let sin_s = Expr::call(crate::expr::Func::Sin, Expr::var("s"));
        let cos_s = Expr::call(crate::expr::Func::Cos, Expr::var("s"));
        let sin_t = Expr::call(crate::expr::Func::Sin, Expr::var("t"));
        let cos_t = Expr::call(crate::expr::Func::Cos, Expr::var("t"));
        ParamSurface::new(
            params,
            target,
            vec![
                Expr::scale(radius, Expr::mul(sin_s.clone(), cos_t)),
                Expr::scale(radius, Expr::mul(sin_s, sin_t)),
                Expr::scale(radius, cos_s),
            ],
            vec![0.5, 0.3],
            vec![2.5, 5.9],
        )
        .unwrap()
    }

    fn geodesic_band_in_s3() -> ParamSurface {
        let params = Chart::new(&["s", "t"]).unwrap();
        let target = Chart::new(&["chi", "theta", "phi"]).unwrap();
        ParamSurface::new(
            params,
            target,
            vec![Expr::var("s"), Expr::var("t"), Expr::num(1.1)],
            vec![0.6, 0.5],
            vec![2.4, 2.5],
        )
        .unwrap()
    }

    #[test]
    fn euclidean_metric_has_vanishing_christoffels() {
        let g = euclidean(3);
        let nabla = levi_civita(&g).unwrap();
        for point in g.probe().points() {
            for m in nabla.gamma() {
                let val = m.eval_at(g.chart(), &point).unwrap();
                assert!(val.abs().max() == 0.0);
            }
        }
    }

    #[test]
    fn round_sphere_christoffels_match_the_classical_table() {
        let g = round_sphere(1.3);
        let nabla = levi_civita(&g).unwrap();
        let theta = 1.0;
        let point = [theta, 0.7];
        let gam: Vec<_> = nabla
            .gamma()
            .iter()
            .map(|m| m.eval_at(g.chart(), &point).unwrap())
            .collect();
        // gamma[phi].get(theta, phi) row k = theta, derivative index i = phi.
        assert_relative_eq!(gam[1][(0, 1)], -theta.sin() * theta.cos(), epsilon = 1e-12);
        assert_relative_eq!(gam[0][(1, 1)], theta.cos() / theta.sin(), epsilon = 1e-12);
        assert_relative_eq!(gam[1][(1, 0)], theta.cos() / theta.sin(), epsilon = 1e-12);
    }

    #[test]
    fn levi_civita_is_metric_compatible_for_an_analytic_metric() {
        let g = wavy_metric();
        let nabla = levi_civita(&g).unwrap();
        // Independent finite-difference check of metric compatibility at an
        // interior point: FD-differentiate g and compare with the symbolic
        // Christoffel contraction.
        let chart = g.chart();
        let point = vec![0.3, -0.2, 0.4];
        let h = 1e-5;
        let gam: Vec<_> = nabla
            .gamma()
            .iter()
            .map(|m| m.eval_at(chart, &point).unwrap())
            .collect();
        let g_here = g.eval_at(&point).unwrap();
        for i in 0..3 {
            let mut up = point.clone();
            let mut dn = point.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (g.eval_at(&up).unwrap() - g.eval_at(&dn).unwrap()) / (2.0 * h);
            for j in 0..3 {
                for k in 0..3 {
                    let mut nabla_g = fd[(j, k)];
                    for l in 0..3 {
                        nabla_g -= gam[i][(l, j)] * g_here[(l, k)];
                        nabla_g -= gam[i][(l, k)] * g_here[(j, l)];
                    }
                    assert!(nabla_g.abs() < 1e-6, "component ({i},{j},{k}): {nabla_g}");
                }
            }
        }
    }

    #[test]
    fn flat_metrics_have_zero_curvature() {
        let chart = Chart::new(&["x", "y", "z", "w"]).unwrap();
        let mut g = ExprMatrix::identity(4);
        *g.get_mut(2, 2) = Expr::num(3.0);
        let probe = Grid::new(vec![-1.0; 4], vec![1.0; 4], 2).unwrap();
        let metric = MetricField::new(chart, g, probe).unwrap();
        let curv = curvature(&levi_civita(&metric).unwrap());
        for point in metric.probe().points() {
            for i in 0..4 {
                for j in 0..4 {
                    let m = curv.endomorphism_at(i, j, &point).unwrap();
                    assert!(m.abs().max() == 0.0);
                }
            }
        }
    }

    #[test]
    fn round_sphere_sectional_curvature_is_the_inverse_square_radius() {
        let radius = 1.4;
        let g = round_sphere(radius);
        let curv = curvature(&levi_civita(&g).unwrap());
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let y = DVector::from_column_slice(&[0.0, 1.0]);
        for point in g.probe().points() {
            let k = sectional_curvature(&g, &curv, &point, &x, &y).unwrap();
            assert_relative_eq!(k, 1.0 / (radius * radius), max_relative = 1e-9);
        }
    }

    #[test]
    fn curvature_is_antisymmetric_and_satisfies_the_cyclic_identity() {
        let g = wavy_metric();
        let curv = curvature(&levi_civita(&g).unwrap());
        let points = g.probe().points();
        for point in &points {
            for i in 0..3 {
                for j in 0..3 {
                    let mij = curv.endomorphism_at(i, j, point).unwrap();
                    let mji = curv.endomorphism_at(j, i, point).unwrap();
                    assert!((mij + mji).abs().max() <= 1e-12);
                }
            }
        }
        let bianchi = curv.first_bianchi_residual(&points).unwrap();
        assert!(bianchi <= IDENTITY_TOL, "cyclic residual {bianchi}");
    }

    #[test]
    fn planes_in_euclidean_space_are_totally_geodesic() {
        let g = euclidean(4);
        let surface = plane_in_r4();
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let grid = surface.sampling_grid(3);
        for st in grid.points() {
            for a in 0..2 {
                for b in 0..2 {
                    let pi = tensors.second_fundamental_at(&st, a, b).unwrap();
                    assert!(pi.abs().max() <= 1e-12);
                }
            }
            let omega = tensors.normal_curvature_at(&st).unwrap();
            assert!(omega.abs().max() <= 1e-12);
        }
        let residuals = gauss_codazzi_ricci_residuals(&g, &surface, &grid).unwrap();
        assert!(residuals.gauss <= 1e-12);
        assert!(residuals.codazzi <= 1e-12);
        assert!(residuals.ricci <= 1e-12);
    }

    #[test]
    fn spheres_have_proportional_second_fundamental_form() {
        let radius = 1.6;
        let g = euclidean(3);
        let surface = sphere_in_r3(radius);
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let grid = surface.sampling_grid(3);
        let points = grid.points();

        // Determine the orientation sign at the first sample, then require
        // Π(X, Y) = −σ/r · ⟨X, Y⟩ · n̂ with the unit radial normal n̂.
        let mut sign = 0.0f64;
        for st in &points {
            let p = surface.point_at(st).unwrap();
            let radial = DVector::from_column_slice(&p) / radius;
            let ind = tensors.induced_metric().eval_at(st).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    let pi = tensors.second_fundamental_at(st, a, b).unwrap();
                    let predicted = &radial * (ind[(a, b)] / radius);
                    if sign == 0.0 && pi.abs().max() > 1e-6 {
                        sign = if (&pi + &predicted).abs().max()
                            < (&pi - &predicted).abs().max()
                        {
                            -1.0
                        } else {
                            1.0
                        };
                    }
                    if sign != 0.0 {
                        let residual = (&pi - predicted * sign).abs().max();
                        assert!(residual <= 1e-9, "residual {residual} at {st:?}");
                    }
                }
            }
        }
        assert!(sign != 0.0, "no curvature detected on the sphere");
    }

    #[test]
    fn shape_operator_duality_holds_on_a_curved_background() {
        let g = wavy_metric();
        let params = Chart::new(&["s", "t"]).unwrap();
        let target = g.chart().clone();
        let surface = ParamSurface::new(
            params,
            target,
            vec![
                Expr::var("s"),
                Expr::var("t"),
                Expr::add(
                    Expr::scale(0.3, Expr::pow(Expr::var("s"), Expr::num(2.0))),
                    Expr::scale(0.2, Expr::mul(Expr::var("s"), Expr::var("t"))),
                ),
            ],
            vec![-0.5, -0.5],
            vec![0.5, 0.5],
        )
        .unwrap();
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let residual = tensors
            .symmetry_residual(&surface.sampling_grid(3).points())
            .unwrap();
        assert!(residual <= IDENTITY_TOL, "duality/symmetry residual {residual}");

        // The normal connection preserves the frame Gram matrix.
        let pnames = ["s", "t"];
        for st in surface.sampling_grid(3).points() {
            for a in 0..2 {
                let omega = tensors.normal_connection_at(&st, a).unwrap();
                let gram = tensors.normal_gram_at(&st).unwrap();
                let d_gram = tensors
                    .normal_gram
                    .differentiate(pnames[a])
                    .eval_at(surface.params(), &st)
                    .unwrap();
                let compat = &d_gram - (gram.transpose() * &omega + omega.transpose() * gram);
                assert!(compat.abs().max() <= 1e-9, "compatibility {}", compat.abs().max());
            }
        }
    }

    #[test]
    fn sphere_in_flat_space_satisfies_the_three_curvature_equations() {
        let radius = 1.6;
        let g = euclidean(3);
        let surface = sphere_in_r3(radius);
        let grid = Grid::new(vec![0.7, 0.5], vec![2.3, 5.7], 3).unwrap();
        let residuals = gauss_codazzi_ricci_residuals(&g, &surface, &grid).unwrap();
        assert!(residuals.gauss <= EQUATION_TOL, "gauss {}", residuals.gauss);
        assert!(residuals.codazzi <= EQUATION_TOL, "codazzi {}", residuals.codazzi);
        assert!(residuals.ricci <= EQUATION_TOL, "ricci {}", residuals.ricci);

        // The ambient space is flat, so the intrinsic curvature comes from
        // the correction terms alone and must equal 1/r².
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let induced_curv = curvature(&levi_civita(tensors.induced_metric()).unwrap());
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let y = DVector::from_column_slice(&[0.0, 1.0]);
        for st in grid.points() {
            let k = sectional_curvature(tensors.induced_metric(), &induced_curv, &st, &x, &y)
                .unwrap();
            assert_relative_eq!(k, 1.0 / (radius * radius), max_relative = 1e-7);
            assert!(k.abs() > 0.1);
        }
    }

    #[test]
    fn geodesic_bands_in_the_three_sphere_are_totally_geodesic() {
        let g = three_sphere();
        let surface = geodesic_band_in_s3();
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let grid = surface.sampling_grid(3);
        for st in grid.points() {
            for a in 0..2 {
                for b in 0..2 {
                    let pi = tensors.second_fundamental_at(&st, a, b).unwrap();
                    assert!(pi.abs().max() <= 1e-9, "second form {} at {st:?}", pi.abs().max());
                }
            }
        }
        let residuals = gauss_codazzi_ricci_residuals(&g, &surface, &grid).unwrap();
        assert!(residuals.gauss <= EQUATION_TOL);
        assert!(residuals.codazzi <= EQUATION_TOL);
        assert!(residuals.ricci <= EQUATION_TOL);

        // Intrinsic check: the band is a round unit two-sphere.
        let induced_curv = curvature(&levi_civita(tensors.induced_metric()).unwrap());
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        let y = DVector::from_column_slice(&[0.0, 1.0]);
        let k = sectional_curvature(
            tensors.induced_metric(),
            &induced_curv,
            &[1.3, 1.2],
            &x,
            &y,
        )
        .unwrap();
        assert_relative_eq!(k, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn horizontal_curvature_agrees_on_the_normal_bundle_of_a_geodesic_band() {
        let g = three_sphere();
        let surface = geodesic_band_in_s3();
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let bundle_metric = normal_bundle_metric(&tensors).unwrap();
        let bundle_curv = curvature(&levi_civita(&bundle_metric).unwrap());
        let ambient_curv = curvature(&levi_civita(&g).unwrap());

        for st in surface.sampling_grid(3).points() {
            let point = surface.point_at(&st).unwrap();
            let b = tensors.tangent_at(&st).unwrap();
            let frame_cols: Vec<DVector<f64>> = (0..2)
                .map(|a| DVector::from_column_slice(b.column(a).as_slice()))
                .chain((0..tensors.normal_rank()).map(|beta| tensors.normal_at(&st, beta).unwrap()))
                .collect();
            let frame = DMatrix::from_columns(&frame_cols);

            // Ambient curvature endomorphism on the tangent pair, written in
            // the adapted frame (tangent columns then normal columns).
            let bs = &frame_cols[0];
            let bt = &frame_cols[1];
            let ambient = ambient_curv.pair_at(&point, bs, bt).unwrap();
            let in_frame = frame
                .clone()
                .lu()
                .solve(&(ambient * &frame))
                .unwrap();

            // Total-space curvature at the zero section on the same pair.
            let zero_section = vec![st[0], st[1], 0.0];
            let hat = bundle_curv.endomorphism_at(0, 1, &zero_section).unwrap();

            let gap = (&in_frame - &hat).abs().max();
            assert!(gap <= EQUATION_TOL, "horizontal curvature gap {gap} at {st:?}");
        }
    }

    #[test]
    fn normal_bundle_metric_splits_at_the_zero_section() {
        let g = three_sphere();
        let surface = geodesic_band_in_s3();
        let tensors = submanifold_tensors(&g, &surface).unwrap();
        let bundle_metric = normal_bundle_metric(&tensors).unwrap();
        assert_eq!(bundle_metric.chart().dim(), 3);
        for st in surface.sampling_grid(3).points() {
            let zero_section = vec![st[0], st[1], 0.0];
            let value = bundle_metric.eval_at(&zero_section).unwrap();
            let ind = tensors.induced_metric().eval_at(&st).unwrap();
            let gram = tensors.normal_gram_at(&st).unwrap();
            assert_relative_eq!(value[(0, 0)], ind[(0, 0)], epsilon = 1e-12);
            assert_relative_eq!(value[(1, 1)], ind[(1, 1)], epsilon = 1e-12);
            assert_relative_eq!(value[(2, 2)], gram[(0, 0)], epsilon = 1e-12);
            assert!(value[(0, 2)].abs() <= 1e-12);
            assert!(value[(1, 2)].abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_metrics_are_refused() {
        let chart = Chart::new(&["x", "y"]).unwrap();
        let mut bad = ExprMatrix::identity(2);
        *bad.get_mut(0, 1) = Expr::num(0.3);
        let probe = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], 2).unwrap();
        match MetricField::new(chart.clone(), bad, probe.clone()) {
            Err(RiemannError::NotSymmetric { .. }) => {}
            other => panic!("expected an asymmetry refusal, got {other:?}"),
        }

        let mut indefinite = ExprMatrix::identity(2);
        *indefinite.get_mut(1, 1) = Expr::num(-1.0);
        match MetricField::new(chart, indefinite, probe) {
            Err(RiemannError::NotPositive { .. }) => {}
            other => panic!("expected a positivity refusal, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_surfaces_are_refused() {
        let g = euclidean(3);
        let params = Chart::new(&["s", "t"]).unwrap();
        let degenerate = ParamSurface::new(
            params,
            g.chart().clone(),
            vec![Expr::var("s"), Expr::var("s"), Expr::num(0.0)],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        match submanifold_tensors(&g, &degenerate) {
            Err(RiemannError::DegenerateSubmanifold { .. }) => {}
            other => panic!("expected a degeneracy refusal, got {other:?}"),
        }

        let other_chart = Chart::new(&["p", "q", "r"]).unwrap();
        let params = Chart::new(&["s", "t"]).unwrap();
        let misplaced = ParamSurface::new(
            params,
            other_chart,
            vec![Expr::var("s"), Expr::var("t"), Expr::num(0.0)],
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        match submanifold_tensors(&g, &misplaced) {
            Err(RiemannError::Unsupported(_)) => {}
            other => panic!("expected a chart mismatch refusal, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn random_planes_in_flat_space_are_totally_geodesic(
            a2 in -1.0f64..1.0,
            a3 in -1.0f64..1.0,
            b2 in -1.0f64..1.0,
            b3 in -1.0f64..1.0,
            c0 in -0.5f64..0.5,
        ) {
            let g = euclidean(4);
            let params = Chart::new(&["s", "t"]).unwrap();
            let surface = ParamSurface::new(
                params,
                g.chart().clone(),
                vec![
                    Expr::add(Expr::num(c0), Expr::var("s")),
                    Expr::var("t"),
                    Expr::add(
                        Expr::scale(a2, Expr::var("s")),
                        Expr::scale(b2, Expr::var("t")),
                    ),
                    Expr::add(
                        Expr::scale(a3, Expr::var("s")),
                        Expr::scale(b3, Expr::var("t")),
                    ),
                ],
                vec![-1.0, -1.0],
                vec![1.0, 1.0],
            ).unwrap();
            let tensors = submanifold_tensors(&g, &surface).unwrap();
            let grid = surface.sampling_grid(3);
            for st in grid.points() {
                for a in 0..2 {
                    for b in 0..2 {
                        let pi = tensors.second_fundamental_at(&st, a, b).unwrap();
                        prop_assert!(pi.abs().max() <= 1e-9);
                    }
                }
            }
            let residuals = gauss_codazzi_ricci_residuals(&g, &surface, &grid).unwrap();
            prop_assert!(residuals.gauss <= 1e-9);
            prop_assert!(residuals.codazzi <= 1e-9);
            prop_assert!(residuals.ricci <= 1e-9);
        }
    }
}
