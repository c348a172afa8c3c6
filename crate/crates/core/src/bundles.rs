//! Models of a tubular neighborhood of a surface built on its normal bundle.
//!
//! Four constructions live here. [`normal_bundle_structure`] induces a
//! fiberwise-linear almost complex structure on the normal bundle of a
//! pseudoholomorphic surface from a minimal structure-preserving connection
//! that keeps the surface totally geodesic; the result does not depend on
//! which such connection is supplied. [`linear_bundle_decompose`] splits a
//! fiberwise-linear structure on a trivial plane bundle into an integrable
//! part plus a radial correction built from the structure tensor, and
//! verifies the split reproduces the input. [`jet_normal_form_residual`]
//! measures how far a structure deviates from its first-order model along a
//! surface on a ladder of transversal offsets, separating quadratic from
//! linear deviation. [`equivalence_symbol`] computes the second-order symbol
//! of a coordinate change relating two structures that agree along a surface
//! together with their structure tensors.
//!
//! Throughout, "vertical" means tangent to the fibers and "base" means the
//! surface (or designated base-axis) directions.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chart::{Chart, ChartError, Grid};
use crate::connections::{
    nabla_j_residual_at, torsion_pair_matrix_at, Christoffels, ConnectionError, ConnectionField,
    MINIMAL_TOL, NABLA_J_TOL,
};
use crate::curves::ParamSurface;
use crate::expr::Expr;
use crate::frames::{self, FrameError, PlaneAt};
use crate::geom::{index_pairs, AlmostComplexField, ExprMatrix, GeomError};

/// Largest tangential covariant derivative allowed along a surface that is
/// handed to the normal-bundle construction as totally geodesic.
pub const TOTALLY_GEODESIC_TOL: f64 = 1e-8;

/// Two structures fed to [`equivalence_symbol`] must agree along the
/// surface — values and structure tensors — within this bound.
pub const SYMBOL_MATCH_TOL: f64 = 1e-9;

/// Pointwise bound for the fiberwise-linear model checks in
/// [`linear_bundle_decompose`].
pub const LINEAR_MODEL_TOL: f64 = 1e-9;

/// The deviation ladder of [`jet_normal_form_residual`] passes when the
/// quadratic ratios spread by at most this factor.
pub const JET_RATIO_SPREAD: f64 = 4.0;

/// Default transversal offsets for the deviation ladder.
pub const JET_LADDER: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Tolerance for the affine-embedding check.
const AFFINE_TOL: f64 = 1e-10;

/// Tolerance for the tangent-plane invariance (`J·TC = TC`) check.
const HOLOMORPHIC_TOL: f64 = 1e-8;

/// Smallest joined singular value for the plane-versus-surface
/// transversality check.
const TRANSVERSAL_TOL: f64 = 1e-6;

/// Deviations below this are treated as exactly zero by the ladder.
const EXACT_DEVIATION_TOL: f64 = 1e-12;

/// Stations per surface axis for precondition sampling.
const SURFACE_SAMPLES: usize = 4;

/// One failed fiberwise-linear model condition: which one, where it was
/// worst, and by how much.
#[derive(Debug, Clone)]
pub struct LinearModelFailure {
    pub condition: &'static str,
    pub point: Vec<f64>,
    pub residual: f64,
}

impl fmt::Display for LinearModelFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (residual {:.3e} at {:?})",
            self.condition, self.residual, self.point
        )
    }
}

fn join_failures(failures: &[LinearModelFailure]) -> String {
    failures
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Connection(#[from] ConnectionError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Chart(#[from] ChartError),
    /// The surface embedding has curved parameter dependence, which the
    /// symbolic construction does not support.
    #[error("surface embedding is not affine: second parameter derivative reaches {residual:.3e}")]
    NotAffine { residual: f64 },
    /// The tangent planes of the surface are not invariant under the
    /// structure.
    #[error(
        "surface is not pseudoholomorphic: tangent plane leaks by {leak:.3e} at parameters {params:?}"
    )]
    NotHolomorphic { leak: f64, params: Vec<f64> },
    /// The connection moves tangent vectors of the surface off the surface.
    #[error(
        "connection not totally geodesic along the surface: tangential residual {residual:.3e} exceeds {limit:.1e}"
    )]
    NotTotallyGeodesic { residual: f64, limit: f64 },
    /// The connection carries torsion beyond the part forced by the
    /// structure.
    #[error(
        "connection is not minimal along the surface: torsion deviates from the quarter-structure-tensor value by {residual:.3e}"
    )]
    NotMinimal { residual: f64 },
    /// The input failed the fiberwise-linear model conditions.
    #[error("not a fiberwise-linear bundle structure: {}", join_failures(failures))]
    LinearModel { failures: Vec<LinearModelFailure> },
    /// The characteristic plane does not complement the surface.
    #[error(
        "characteristic plane is not transversal to the surface at parameters {params:?}: joined singular value {sigma:.3e}"
    )]
    NotTransversal { params: Vec<f64>, sigma: f64 },
    /// Two structures that must agree along the surface do not.
    #[error("{what} differ along the surface by {residual:.3e} at {point:?} (limit {limit:.1e})")]
    SymbolMismatch {
        what: String,
        point: Vec<f64>,
        residual: f64,
        limit: f64,
    },
    #[error("{0}")]
    Unsupported(String),
}

fn ensure_same_chart(a: &Chart, b: &Chart) -> Result<(), BundleError> {
    let same = a.dim() == b.dim()
        && a.names() == b.names()
        && (0..a.dim()).all(|i| a.period(i) == b.period(i));
    if same {
        Ok(())
    } else {
        Err(BundleError::Unsupported(format!(
            "chart mismatch: `{}` versus `{}`",
            a.names().join(" "),
            b.names().join(" ")
        )))
    }
}

fn expr_from_numeric(m: &DMatrix<f64>) -> ExprMatrix {
    let mut out = ExprMatrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            *out.get_mut(r, c) = Expr::num(m[(r, c)]);
        }
    }
    out
}

/// Verify the embedding is affine and return its (constant) tangent frame.
fn constant_tangent(surface: &ParamSurface) -> Result<DMatrix<f64>, BundleError> {
    let params = surface.params();
    let names = params.names();
    let probes = surface.sampling_grid(3).points();
    let mut worst = 0.0f64;
    for component in surface.components() {
        for a in names.iter() {
            for b in names.iter() {
                let second = component.differentiate(a).differentiate(b);
                if second.is_zero() {
                    continue;
                }
                for st in &probes {
                    let v = params
                        .eval(&second, st)
                        .map_err(GeomError::from)?
                        .abs();
                    worst = worst.max(v);
                }
            }
        }
    }
    if worst > AFFINE_TOL {
        return Err(BundleError::NotAffine { residual: worst });
    }
    let (lo, hi) = surface.param_box();
    let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let tangent = surface.jacobian_at(&mid)?;
    check_tangent_rank(&tangent)?;
    Ok(tangent)
}

fn check_tangent_rank(tangent: &DMatrix<f64>) -> Result<(), BundleError> {
    let svd = tangent.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if sv.len() < 2 || sv[1] <= 1e-8 * sv[0] {
        return Err(BundleError::Unsupported(
            "surface tangent frame is rank-deficient".into(),
        ));
    }
    Ok(())
}

/// Orthonormal complement of the tangent columns, produced by projecting the
/// coordinate axes in order and keeping the independent remainders. The
/// axis-ordered sweep makes the frame deterministic; when the surface spans
/// the first coordinate plane the frame is exactly the remaining axes.
fn normal_frame(tangent: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = tangent.nrows();
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    for c in 0..tangent.ncols() {
        let mut v = tangent.column(c).into_owned();
        for d in &dirs {
            let p = d.dot(&v);
            v -= d * p;
        }
        let n = v.norm();
        if n > 1e-12 {
            dirs.push(v / n);
        }
    }
    let span = dirs.len();
    for i in 0..dim {
        if dirs.len() == dim {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        for d in &dirs {
            let p = d.dot(&v);
            v -= d * p;
        }
        let n = v.norm();
        if n > 1e-6 {
            dirs.push(v / n);
        }
    }
    let normals = &dirs[span..];
    let mut out = DMatrix::zeros(dim, normals.len());
    for (c, v) in normals.iter().enumerate() {
        out.set_column(c, v);
    }
    out
}

fn orthogonal_projector(tangent: &DMatrix<f64>) -> Result<DMatrix<f64>, BundleError> {
    let gram_inv = (tangent.transpose() * tangent)
        .try_inverse()
        .ok_or_else(|| {
            BundleError::Unsupported("surface tangent frame is rank-deficient".into())
        })?;
    Ok(tangent * gram_inv * tangent.transpose())
}

/// The induced structure on the normal bundle of a surface, as a symbolic
/// fiberwise-linear almost complex field on the bundle chart.
///
/// The chart reuses the surface parameter names for the base coordinates
/// (keeping their periods) and adds aperiodic fiber coordinates `u`, `v`
/// measured against an orthonormal normal frame.
#[derive(Debug, Clone)]
pub struct NormalBundleStructure {
    chart: Chart,
    structure: AlmostComplexField,
    base: ExprMatrix,
    fiber: ExprMatrix,
    christoffels: Vec<ExprMatrix>,
    tangent: DMatrix<f64>,
    frame: DMatrix<f64>,
}

impl NormalBundleStructure {
    /// The bundle chart `(base₀, base₁, u, v)`.
    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    /// The induced structure on the bundle chart.
    pub fn structure(&self) -> &AlmostComplexField {
        &self.structure
    }

    /// The 2×2 structure matrix on the base directions (entries depend on
    /// the base coordinates only).
    pub fn base_matrix(&self) -> &ExprMatrix {
        &self.base
    }

    /// The 2×2 structure matrix on the fibers, in the normal frame.
    pub fn fiber_matrix(&self) -> &ExprMatrix {
        &self.fiber
    }

    /// The connection blocks on the normal bundle, one 2×2 matrix per base
    /// direction, in the normal frame.
    pub fn induced_christoffels(&self) -> &[ExprMatrix] {
        &self.christoffels
    }

    /// Constant tangent frame of the surface (one column per parameter).
    pub fn tangent(&self) -> &DMatrix<f64> {
        &self.tangent
    }

    /// Orthonormal normal frame (one column per fiber coordinate).
    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    /// A probe box for residual reports: one period along periodic base
    /// axes, `[-1/2, 1/2]` along the fibers.
    pub fn probe_grid(&self, samples: usize) -> Result<Grid, BundleError> {
        default_probe_grid(&self.chart, 0.5, samples)
    }

    /// Largest `Ĵ² + I` entry over the grid.
    pub fn square_residual(&self, grid: &Grid) -> Result<f64, BundleError> {
        let mut worst = 0.0f64;
        for p in grid.points() {
            worst = worst.max(self.structure.square_residual_at(&p)?);
        }
        Ok(worst)
    }

    /// Largest second fiber-derivative of any entry over the grid: zero
    /// exactly when the structure is fiberwise affine-linear.
    pub fn fiber_linearity_residual(&self, grid: &Grid) -> Result<f64, BundleError> {
        let m = self.structure.matrix();
        let mut worst = 0.0f64;
        for fa in ["u", "v"] {
            for fb in ["u", "v"] {
                let second = m.differentiate(fa).differentiate(fb);
                for p in grid.points() {
                    let val = second
                        .eval_at(&self.chart, &p)
                        .map_err(GeomError::from)?;
                    worst = worst.max(val.amax());
                }
            }
        }
        Ok(worst)
    }

    /// Deviation from being a bundle map over the base structure: fiber
    /// dependence of the base rows, base components of fiber images, and the
    /// gap between the base block and the recorded base matrix.
    pub fn projection_residual(&self, grid: &Grid) -> Result<f64, BundleError> {
        let m = self.structure.matrix();
        let mut worst = 0.0f64;
        for f in ["u", "v"] {
            let d = m.differentiate(f);
            for p in grid.points() {
                let dv = d.eval_at(&self.chart, &p).map_err(GeomError::from)?;
                for r in 0..2 {
                    for c in 0..4 {
                        worst = worst.max(dv[(r, c)].abs());
                    }
                }
            }
        }
        for p in grid.points() {
            let mv = m.eval_at(&self.chart, &p).map_err(GeomError::from)?;
            let bv = self.base.eval_at(&self.chart, &p).map_err(GeomError::from)?;
            for r in 0..2 {
                for c in 0..2 {
                    worst = worst.max((mv[(r, c)] - bv[(r, c)]).abs());
                    worst = worst.max(mv[(r, 2 + c)].abs());
                }
            }
        }
        Ok(worst)
    }
}

fn default_probe_grid(chart: &Chart, aperiodic_half: f64, samples: usize) -> Result<Grid, BundleError> {
    let mut lo = Vec::with_capacity(chart.dim());
    let mut hi = Vec::with_capacity(chart.dim());
    for i in 0..chart.dim() {
        match chart.period(i) {
            Some(t) => {
                lo.push(0.0);
                hi.push(0.9 * t);
            }
            None => {
                lo.push(-aperiodic_half);
                hi.push(aperiodic_half);
            }
        }
    }
    Ok(Grid::new(lo, hi, samples)?)
}

/// Induce the structure on the normal bundle of an affinely embedded
/// pseudoholomorphic surface from a minimal structure-preserving connection
/// for which the surface is totally geodesic.
///
/// Base directions map by the restricted structure; a fiber vector at
/// `(base, u, v)` maps by the fiber block of the structure along the
/// surface; and the vertical part of a lifted base direction is the linear
/// map mixing the fiber block with the induced connection blocks, applied to
/// the fiber point. The result is fiberwise linear, projects onto the
/// restricted structure, and squares to minus identity. Any connection
/// satisfying the preconditions yields the same structure: the difference of
/// two such connections is a symmetric complex-bilinear tensor, which drops
/// out of the mixing term.
pub fn normal_bundle_structure(
    structure: &AlmostComplexField,
    nabla: &ConnectionField,
    surface: &ParamSurface,
) -> Result<NormalBundleStructure, BundleError> {
    ensure_same_chart(structure.chart(), nabla.chart())?;
    ensure_same_chart(structure.chart(), surface.target())?;
    let dim = structure.dim();
    if dim != 4 {
        return Err(BundleError::Unsupported(format!(
            "normal bundle construction needs a four-dimensional chart, got dimension {dim}"
        )));
    }
    let params = surface.params();
    let pnames = params.names();
    if pnames.iter().any(|n| *n == "u" || *n == "v") {
        return Err(BundleError::Unsupported(
            "surface parameter names clash with the fiber coordinate names u, v".into(),
        ));
    }

    let tangent = constant_tangent(surface)?;
    let frame = normal_frame(&tangent);
    if frame.ncols() != 2 {
        return Err(BundleError::Unsupported(
            "could not complete the tangent frame to a basis".into(),
        ));
    }
    let projector = orthogonal_projector(&tangent)?;

    // Tangent planes must be structure-invariant, the connection must
    // preserve the structure with only the forced torsion, and the surface
    // must be totally geodesic — all checked along the surface.
    let nij = structure.nijenhuis();
    let mut geodesic_worst = 0.0f64;
    for st in surface.sampling_grid(SURFACE_SAMPLES).points() {
        let p = surface.point_at(&st)?;
        let jp = structure.matrix_at(&p)?;
        let image = &jp * &tangent;
        let leak = (&image - &projector * &image).amax();
        if leak > HOLOMORPHIC_TOL {
            return Err(BundleError::NotHolomorphic {
                leak,
                params: st.clone(),
            });
        }
        let nres = nabla_j_residual_at(nabla, structure, &p)?;
        if nres > NABLA_J_TOL {
            return Err(ConnectionError::NotAlmostComplex {
                residual: nres,
                limit: NABLA_J_TOL,
            }
            .into());
        }
        let gap = (torsion_pair_matrix_at(nabla, &p)? - nij.pair_matrix_at(&p)? * 0.25).amax();
        if gap > MINIMAL_TOL {
            return Err(BundleError::NotMinimal { residual: gap });
        }
        let gamma = nabla.christoffels_at(&p)?;
        for i in 0..2 {
            let mut contracted = DMatrix::zeros(dim, dim);
            for (a, g) in gamma.iter().enumerate() {
                contracted += g * tangent[(a, i)];
            }
            for j in 0..2 {
                let derivative = &contracted * tangent.column(j);
                let off = (&derivative - &projector * &derivative).norm();
                geodesic_worst = geodesic_worst.max(off);
            }
        }
    }
    if geodesic_worst > TOTALLY_GEODESIC_TOL {
        return Err(BundleError::NotTotallyGeodesic {
            residual: geodesic_worst,
            limit: TOTALLY_GEODESIC_TOL,
        });
    }

    // Symbolic assembly: restrict everything to the surface by substituting
    // the embedding, then form the base, fiber and connection blocks.
    let target_names = surface.target().names();
    let subs: Vec<(&str, Expr)> = target_names
        .iter()
        .copied()
        .zip(surface.components().iter().cloned())
        .collect();
    let jc = structure.matrix().substitute(&subs);
    let gamma_c: Vec<ExprMatrix> = nabla.gamma().iter().map(|g| g.substitute(&subs)).collect();

    let tangent_expr = expr_from_numeric(&tangent);
    let frame_expr = expr_from_numeric(&frame);
    let frame_t_expr = expr_from_numeric(&frame.transpose());
    let left = {
        let gram_inv = (tangent.transpose() * &tangent)
            .try_inverse()
            .expect("rank checked above");
        expr_from_numeric(&(gram_inv * tangent.transpose()))
    };

    let base = left.matmul(&jc).matmul(&tangent_expr);
    let fiber = frame_t_expr.matmul(&jc).matmul(&frame_expr);
    let mut christoffels = Vec::with_capacity(2);
    for i in 0..2 {
        let mut contracted = ExprMatrix::zeros(dim, dim);
        for a in 0..dim {
            let w = tangent[(a, i)];
            if w.abs() > 1e-15 {
                contracted = contracted.add(&gamma_c[a].scale(&Expr::num(w)));
            }
        }
        christoffels.push(frame_t_expr.matmul(&contracted).matmul(&frame_expr));
    }
    let mut mixing = Vec::with_capacity(2);
    for i in 0..2 {
        let mut k = fiber.matmul(&christoffels[i]);
        for (j, hat) in christoffels.iter().enumerate() {
            k = k.sub(&hat.scale(base.get(j, i)));
        }
        mixing.push(k);
    }

    let bundle_names = vec![pnames[0], pnames[1], "u", "v"];
    let bundle_periods = [params.period(0), params.period(1), None, None];
    let bundle_chart = Chart::with_periods(&bundle_names, &bundle_periods)?;
    let fiber_vars = [Expr::var("u"), Expr::var("v")];
    let mut jhat = ExprMatrix::zeros(4, 4);
    for (i, mix) in mixing.iter().enumerate() {
        for r in 0..2 {
            *jhat.get_mut(r, i) = base.get(r, i).clone();
        }
        for b in 0..2 {
            let mut acc = Expr::zero();
            for (g, fv) in fiber_vars.iter().enumerate() {
                acc = Expr::add(acc, Expr::mul(mix.get(b, g).clone(), fv.clone()));
            }
            *jhat.get_mut(2 + b, i) = acc;
        }
    }
    for b in 0..2 {
        for g in 0..2 {
            *jhat.get_mut(2 + b, 2 + g) = fiber.get(b, g).clone();
        }
    }
    let bundle_structure = AlmostComplexField::new(bundle_chart.clone(), jhat)?;
    Ok(NormalBundleStructure {
        chart: bundle_chart,
        structure: bundle_structure,
        base,
        fiber,
        christoffels,
        tangent,
        frame,
    })
}

/// Pointwise value of the induced normal-bundle structure at one bundle
/// point, computed directly from any pointwise connection representation.
///
/// `st` are surface parameters, `fiber_offset` the coordinates against the
/// orthonormal normal frame at that base point. The preconditions of
/// [`normal_bundle_structure`] are checked at the base point only, so gauged
/// connections — available as values, not symbols — can be used.
pub fn normal_structure_matrix_at<C: Christoffels + ?Sized>(
    structure: &AlmostComplexField,
    conn: &C,
    surface: &ParamSurface,
    st: &[f64],
    fiber_offset: &[f64],
) -> Result<DMatrix<f64>, BundleError> {
    ensure_same_chart(structure.chart(), conn.chart())?;
    ensure_same_chart(structure.chart(), surface.target())?;
    let dim = structure.dim();
    if dim != 4 {
        return Err(BundleError::Unsupported(format!(
            "normal bundle construction needs a four-dimensional chart, got dimension {dim}"
        )));
    }
    if st.len() != 2 || fiber_offset.len() != 2 {
        return Err(BundleError::Unsupported(
            "expected two surface parameters and two fiber coordinates".into(),
        ));
    }
    let p = surface.point_at(st)?;
    let tangent = surface.jacobian_at(st)?;
    check_tangent_rank(&tangent)?;
    let frame = normal_frame(&tangent);
    if frame.ncols() != 2 {
        return Err(BundleError::Unsupported(
            "could not complete the tangent frame to a basis".into(),
        ));
    }
    let projector = orthogonal_projector(&tangent)?;

    let jp = structure.matrix_at(&p)?;
    let image = &jp * &tangent;
    let leak = (&image - &projector * &image).amax();
    if leak > HOLOMORPHIC_TOL {
        return Err(BundleError::NotHolomorphic {
            leak,
            params: st.to_vec(),
        });
    }
    let nres = nabla_j_residual_at(conn, structure, &p)?;
    if nres > NABLA_J_TOL {
        return Err(ConnectionError::NotAlmostComplex {
            residual: nres,
            limit: NABLA_J_TOL,
        }
        .into());
    }
    let nij = structure.nijenhuis();
    let gap = (torsion_pair_matrix_at(conn, &p)? - nij.pair_matrix_at(&p)? * 0.25).amax();
    if gap > MINIMAL_TOL {
        return Err(BundleError::NotMinimal { residual: gap });
    }
    let gamma = conn.christoffels_at(&p)?;
    let mut contracted = [DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim)];
    for (i, slot) in contracted.iter_mut().enumerate() {
        for (a, g) in gamma.iter().enumerate() {
            *slot += g * tangent[(a, i)];
        }
    }
    let mut geodesic = 0.0f64;
    for slot in &contracted {
        for j in 0..2 {
            let derivative = slot * tangent.column(j);
            geodesic = geodesic.max((&derivative - &projector * &derivative).norm());
        }
    }
    if geodesic > TOTALLY_GEODESIC_TOL {
        return Err(BundleError::NotTotallyGeodesic {
            residual: geodesic,
            limit: TOTALLY_GEODESIC_TOL,
        });
    }

    let gram_inv = (tangent.transpose() * &tangent)
        .try_inverse()
        .expect("rank checked above");
    let left = gram_inv * tangent.transpose();
    let base = &left * (&jp * &tangent);
    let fiber = frame.transpose() * (&jp * &frame);
    let hats: Vec<DMatrix<f64>> = contracted
        .iter()
        .map(|slot| frame.transpose() * (slot * &frame))
        .collect();
    let offset = DVector::from_column_slice(fiber_offset);
    let mut out = DMatrix::zeros(4, 4);
    for i in 0..2 {
        let mut k = &fiber * &hats[i];
        for j in 0..2 {
            k -= &hats[j] * base[(j, i)];
        }
        let vertical = &k * &offset;
        out[(0, i)] = base[(0, i)];
        out[(1, i)] = base[(1, i)];
        out[(2, i)] = vertical[0];
        out[(3, i)] = vertical[1];
    }
    for b in 0..2 {
        for g in 0..2 {
            out[(2 + b, 2 + g)] = fiber[(b, g)];
        }
    }
    Ok(out)
}

/// Result of splitting a fiberwise-linear structure into an integrable part
/// plus the radial correction built from its structure tensor.
///
/// `integrable` is the structure with the correction removed; `correction`
/// is the matrix of the structure tensor contracted with the radial fiber
/// field (columns over the input basis). The residual fields report the
/// model checks and the reproduction quality, all as worst values over the
/// probe grid.
#[derive(Debug, Clone)]
pub struct LinearBundleDecomposition {
    pub integrable: AlmostComplexField,
    pub correction: ExprMatrix,
    /// Structure-tensor values on pairs of fiber directions.
    pub fiber_pair_residual: f64,
    /// Base components of structure-tensor values.
    pub vertical_image_residual: f64,
    /// Fiber derivatives of the mixed structure-tensor values.
    pub constancy_residual: f64,
    /// `J₀² + I` for the integrable part.
    pub square_residual: f64,
    /// Structure tensor of the integrable part.
    pub integrability_residual: f64,
    /// `J₀ + ½ J₀ K` against the input structure.
    pub reconstruction_residual: f64,
}

/// Split a fiberwise-linear structure on a trivial plane bundle into an
/// integrable structure plus a radial correction.
///
/// `base_axes` and `fiber_axes` designate which chart axes play base and
/// fiber; together they must exhaust the four axes. Three conditions are
/// verified on a probe grid before anything is built: structure-tensor
/// values on fiber pairs vanish, all values point in fiber directions, and
/// the mixed values are constant along the fibers. Failures are itemized in
/// the error. On success the integrable part is `J₀ = J − ½ J K` with
/// `K ξ` the lifted structure tensor applied to the radial fiber field and
/// `ξ`, and the input is reproduced exactly as `J₀ + ½ J₀ K`.
pub fn linear_bundle_decompose(
    structure: &AlmostComplexField,
    base_axes: [usize; 2],
    fiber_axes: [usize; 2],
) -> Result<LinearBundleDecomposition, BundleError> {
    let dim = structure.dim();
    if dim != 4 {
        return Err(BundleError::Unsupported(format!(
            "the bundle decomposition needs a four-dimensional chart, got dimension {dim}"
        )));
    }
    let mut seen = [false; 4];
    for i in base_axes.iter().chain(fiber_axes.iter()) {
        if *i >= 4 || seen[*i] {
            return Err(BundleError::Unsupported(
                "base and fiber axes must partition the four chart axes".into(),
            ));
        }
        seen[*i] = true;
    }
    let chart = structure.chart();
    let grid = default_probe_grid(chart, 0.7, 4)?;
    let points = grid.points();
    let nij = structure.nijenhuis();
    let fiber_names = [chart.name(fiber_axes[0]), chart.name(fiber_axes[1])];

    let mut failures: Vec<LinearModelFailure> = Vec::new();
    let mut record = |condition: &'static str, worst: f64, at: Vec<f64>| {
        if worst > LINEAR_MODEL_TOL {
            failures.push(LinearModelFailure {
                condition,
                point: at,
                residual: worst,
            });
        }
    };

    // 1. Values on fiber pairs vanish.
    let mut worst = 0.0f64;
    let mut at = Vec::new();
    for p in &points {
        let bindings = chart_bindings(chart, p);
        for k in 0..dim {
            let v = nij
                .component(k, fiber_axes[0], fiber_axes[1])
                .eval(&bindings)
                .map_err(GeomError::from)?
                .abs();
            if v > worst {
                worst = v;
                at = p.clone();
            }
        }
    }
    let fiber_pair_residual = worst;
    record("values on fiber pairs must vanish", worst, at);

    // 2. All values point in fiber directions.
    let mut worst = 0.0f64;
    let mut at = Vec::new();
    for p in &points {
        let bindings = chart_bindings(chart, p);
        for (i, j) in index_pairs(dim) {
            for k in base_axes {
                let v = nij
                    .component(k, i, j)
                    .eval(&bindings)
                    .map_err(GeomError::from)?
                    .abs();
                if v > worst {
                    worst = v;
                    at = p.clone();
                }
            }
        }
    }
    let vertical_image_residual = worst;
    record("values must lie in the fiber directions", worst, at);

    // 3. Mixed values are constant along the fibers.
    let mut worst = 0.0f64;
    let mut at = Vec::new();
    for b in base_axes {
        for f in fiber_axes {
            for k in 0..dim {
                for d in fiber_names {
                    let slope = nij.component(k, f, b).differentiate(d);
                    if slope.is_zero() {
                        continue;
                    }
                    for p in &points {
                        let bindings = chart_bindings(chart, p);
                        let v = slope.eval(&bindings).map_err(GeomError::from)?.abs();
                        if v > worst {
                            worst = v;
                            at = p.clone();
                        }
                    }
                }
            }
        }
    }
    let constancy_residual = worst;
    record("mixed values must be constant along the fibers", worst, at);

    if !failures.is_empty() {
        return Err(BundleError::LinearModel { failures });
    }

    // Radial correction, with the mixed values frozen on the zero section so
    // the lift is constant along the fibers by construction.
    let zero_section: Vec<(&str, Expr)> =
        fiber_names.iter().map(|n| (*n, Expr::zero())).collect();
    let mut correction = ExprMatrix::zeros(4, 4);
    for j in base_axes {
        for k in 0..dim {
            let mut acc = Expr::zero();
            for (slot, f) in fiber_axes.iter().enumerate() {
                let value = nij.component(k, *f, j).substitute(&zero_section);
                acc = Expr::add(acc, Expr::mul(Expr::var(fiber_names[slot]), value));
            }
            *correction.get_mut(k, j) = acc;
        }
    }

    let jm = structure.matrix();
    let half = Expr::num(0.5);
    let j0m = jm.sub(&jm.matmul(&correction).scale(&half));
    let integrable = AlmostComplexField::new(chart.clone(), j0m.clone())?;

    let mut square_residual = 0.0f64;
    for p in &points {
        square_residual = square_residual.max(integrable.square_residual_at(p)?);
    }
    let nij0 = integrable.nijenhuis();
    let mut integrability_residual = 0.0f64;
    for p in &points {
        integrability_residual = integrability_residual.max(nij0.pair_matrix_at(p)?.amax());
    }
    let rebuilt = j0m.add(&j0m.matmul(&correction).scale(&half));
    let mut reconstruction_residual = 0.0f64;
    for p in &points {
        let a = rebuilt.eval_at(chart, p).map_err(GeomError::from)?;
        let b = jm.eval_at(chart, p).map_err(GeomError::from)?;
        reconstruction_residual = reconstruction_residual.max((a - b).amax());
    }

    Ok(LinearBundleDecomposition {
        integrable,
        correction,
        fiber_pair_residual,
        vertical_image_residual,
        constancy_residual,
        square_residual,
        integrability_residual,
        reconstruction_residual,
    })
}

fn chart_bindings<'a>(chart: &'a Chart, point: &[f64]) -> Vec<(&'a str, f64)> {
    chart.bindings(point)
}

/// Deviation ladder of a structure from its first-order model along a
/// surface.
#[derive(Debug, Clone)]
pub struct JetNormalFormReport {
    pub epsilons: Vec<f64>,
    /// Worst deviation `‖J − J₀ − c·J₀ K‖` at offset distance ε.
    pub deviations: Vec<f64>,
    /// `deviation / ε²` per rung.
    pub quadratic_ratios: Vec<f64>,
    /// Whether the quadratic ratios are stable across the ladder (or every
    /// deviation is exactly zero).
    pub passes: bool,
}

/// Measure how well `J₀ + factor · J₀ N(r, ·)` models the structure near a
/// surface, on a ladder of transversal offsets.
///
/// `r` is the offset from the surface point, and the structure tensor `N` is
/// evaluated at that surface point. The surface-offset model uses
/// `factor = ½`; the radius-from-a-point variant of the same first-order
/// statement uses `¼`. The ladder passes when the deviation scales
/// quadratically: the ratios `D(ε)/ε²` stay within [`JET_RATIO_SPREAD`] of
/// each other. The characteristic plane of the structure must complement
/// the surface at every sample, otherwise the offsets do not probe the
/// directions the model controls and the run is refused.
pub fn jet_normal_form_residual(
    structure: &AlmostComplexField,
    integrable: &AlmostComplexField,
    surface: &ParamSurface,
    factor: f64,
    epsilons: &[f64],
) -> Result<JetNormalFormReport, BundleError> {
    ensure_same_chart(structure.chart(), integrable.chart())?;
    ensure_same_chart(structure.chart(), surface.target())?;
    let dim = structure.dim();
    if dim != 4 {
        return Err(BundleError::Unsupported(format!(
            "the deviation ladder needs a four-dimensional chart, got dimension {dim}"
        )));
    }
    if epsilons.is_empty() {
        return Err(BundleError::Unsupported("empty offset ladder".into()));
    }
    let samples = surface.sampling_grid(SURFACE_SAMPLES).points();
    let nij = structure.nijenhuis();

    for st in &samples {
        let p = surface.point_at(st)?;
        let tangent = surface.jacobian_at(st)?;
        let basis = match frames::characteristic_plane(structure, &p)? {
            PlaneAt::Zero => {
                return Err(BundleError::NotTransversal {
                    params: st.clone(),
                    sigma: 0.0,
                })
            }
            PlaneAt::Basis { basis, .. } => basis,
        };
        let mut joined = DMatrix::zeros(dim, 2 + basis.ncols());
        for c in 0..2 {
            let col = tangent.column(c);
            let norm = col.norm();
            joined.set_column(c, &(col / norm));
        }
        for c in 0..basis.ncols() {
            joined.set_column(2 + c, &basis.column(c));
        }
        let svd = joined.svd(false, false);
        let sigma = svd
            .singular_values
            .iter()
            .fold(f64::INFINITY, |m, s| m.min(*s));
        if sigma < TRANSVERSAL_TOL {
            return Err(BundleError::NotTransversal {
                params: st.clone(),
                sigma,
            });
        }
    }

    let directions = 8usize;
    let mut deviations = Vec::with_capacity(epsilons.len());
    for eps in epsilons {
        let mut worst = 0.0f64;
        for st in &samples {
            let p = surface.point_at(st)?;
            let tangent = surface.jacobian_at(st)?;
            let frame = normal_frame(&tangent);
            for d in 0..directions {
                let theta = std::f64::consts::TAU * (d as f64) / (directions as f64);
                let offset = frame.column(0) * (eps * theta.cos())
                    + frame.column(1) * (eps * theta.sin());
                let q: Vec<f64> = p.iter().zip(offset.iter()).map(|(a, b)| a + b).collect();
                let mut radial = DMatrix::zeros(dim, dim);
                for j in 0..dim {
                    let mut ej = DVector::zeros(dim);
                    ej[j] = 1.0;
                    let col = nij.apply_at(&p, &offset, &ej)?;
                    radial.set_column(j, &col);
                }
                let j0q = integrable.matrix_at(&q)?;
                let mut model = &j0q * &radial;
                model *= factor;
                model += &j0q;
                let jq = structure.matrix_at(&q)?;
                worst = worst.max((jq - model).amax());
            }
        }
        deviations.push(worst);
    }

    let quadratic_ratios: Vec<f64> = deviations
        .iter()
        .zip(epsilons.iter())
        .map(|(d, e)| d / (e * e))
        .collect();
    let passes = if deviations.iter().all(|d| *d <= EXACT_DEVIATION_TOL) {
        true
    } else {
        let mn = quadratic_ratios.iter().fold(f64::INFINITY, |m, r| m.min(*r));
        let mx = quadratic_ratios.iter().fold(0.0f64, |m, r| m.max(*r));
        mn > 0.0 && mx / mn <= JET_RATIO_SPREAD
    };

    Ok(JetNormalFormReport {
        epsilons: epsilons.to_vec(),
        deviations,
        quadratic_ratios,
        passes,
    })
}

/// The second-order symbol of a coordinate change relating two structures
/// along a surface, with the residuals of its defining relations.
#[derive(Debug, Clone)]
pub struct EquivalenceSymbol {
    /// Surface parameter samples.
    pub params: Vec<Vec<f64>>,
    /// Ambient surface points, one per sample.
    pub points: Vec<Vec<f64>>,
    /// Per sample, per output component `k`: the symmetric matrix of symbol
    /// values over coordinate pairs `(r, s)`.
    pub components: Vec<Vec<DMatrix<f64>>>,
    /// Worst residual of the defining relation
    /// `J₁ Φ(ξ, η) − Φ(J₂ ξ, η) = P(ξ, η)` over samples and pairs.
    pub defining_residual: f64,
    /// Worst symbol value on pairs of surface-tangent vectors.
    pub tangency_residual: f64,
    /// Worst violation of the antisymmetrized compatibility identity for
    /// `P` — a direct measure of the structure-tensor mismatch.
    pub compatibility_gap: f64,
}

impl EquivalenceSymbol {
    /// Symbol value `Φ(∂_r, ∂_s)` at one sample.
    pub fn value(&self, sample: usize, r: usize, s: usize) -> DVector<f64> {
        let dim = self.components[sample].len();
        DVector::from_iterator(
            dim,
            (0..dim).map(|k| self.components[sample][k][(r, s)]),
        )
    }
}

/// Compute the second-order symbol of a coordinate change carrying one
/// structure to another along a surface where both agree.
///
/// Both structures must restrict identically to the surface and have equal
/// structure tensors there (within [`SYMBOL_MATCH_TOL`]); the mismatch is
/// reported otherwise, with the structure-tensor case carrying the
/// compatibility violation that obstructs any such coordinate change. The
/// symbol is assembled from the derivative tensor `P(ξ, η) = ∇_η (J₂ − J₁) ξ`
/// through `B = −½ J₁ P` and its complex symmetrization; it is symmetric,
/// vanishes on surface-tangent pairs, and satisfies the defining relation up
/// to roundoff. It is canonical only modulo symmetric complex-bilinear
/// tensors vanishing on tangent pairs — the gauge freedom of the underlying
/// coordinate change.
pub fn equivalence_symbol(
    first: &AlmostComplexField,
    second: &AlmostComplexField,
    surface: &ParamSurface,
) -> Result<EquivalenceSymbol, BundleError> {
    ensure_same_chart(first.chart(), second.chart())?;
    ensure_same_chart(first.chart(), surface.target())?;
    let dim = first.dim();
    let samples = surface.sampling_grid(SURFACE_SAMPLES).points();
    let n1 = first.nijenhuis();
    let n2 = second.nijenhuis();
    for st in &samples {
        let p = surface.point_at(st)?;
        let gap = (first.matrix_at(&p)? - second.matrix_at(&p)?).amax();
        if gap > SYMBOL_MATCH_TOL {
            return Err(BundleError::SymbolMismatch {
                what: "the structures".into(),
                point: p,
                residual: gap,
                limit: SYMBOL_MATCH_TOL,
            });
        }
        let ngap = (n1.pair_matrix_at(&p)? - n2.pair_matrix_at(&p)?).amax();
        if ngap > SYMBOL_MATCH_TOL {
            return Err(BundleError::SymbolMismatch {
                what: "the structure tensors".into(),
                point: p,
                residual: ngap,
                limit: SYMBOL_MATCH_TOL,
            });
        }
    }

    let chart = first.chart();
    let delta = second.matrix().sub(first.matrix());
    let slopes: Vec<ExprMatrix> = chart
        .names()
        .iter()
        .map(|n| delta.differentiate(n))
        .collect();

    let mut params_out = Vec::with_capacity(samples.len());
    let mut points_out = Vec::with_capacity(samples.len());
    let mut components_out = Vec::with_capacity(samples.len());
    let mut defining = 0.0f64;
    let mut tangency = 0.0f64;
    let mut gap = 0.0f64;

    let basis: Vec<DVector<f64>> = (0..dim)
        .map(|i| {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            e
        })
        .collect();

    for st in &samples {
        let p = surface.point_at(st)?;
        let j1 = first.matrix_at(&p)?;
        let j2 = second.matrix_at(&p)?;
        let ds: Vec<DMatrix<f64>> = slopes
            .iter()
            .map(|m| m.eval_at(chart, &p).map_err(GeomError::from))
            .collect::<Result<_, _>>()?;
        let bs: Vec<DMatrix<f64>> = ds.iter().map(|d| (&j1 * d) * -0.5).collect();

        let apply = |mats: &[DMatrix<f64>], xi: &DVector<f64>, eta: &DVector<f64>| {
            let mut out = DVector::zeros(dim);
            for (i, m) in mats.iter().enumerate() {
                if eta[i] != 0.0 {
                    out += (m * xi) * eta[i];
                }
            }
            out
        };

        let je: Vec<DVector<f64>> = basis.iter().map(|e| &j1 * e).collect();
        let mut phi = vec![vec![DVector::<f64>::zeros(dim); dim]; dim];
        for r in 0..dim {
            for s in 0..dim {
                let sym = (apply(&bs, &basis[r], &basis[s]) + apply(&bs, &basis[s], &basis[r]))
                    * 0.5;
                let anti = apply(&bs, &basis[r], &je[s]) + apply(&bs, &basis[s], &je[r])
                    - apply(&bs, &je[r], &basis[s])
                    - apply(&bs, &je[s], &basis[r]);
                phi[r][s] = sym - (&j1 * anti) * 0.25;
            }
        }

        for r in 0..dim {
            for s in 0..dim {
                let mut phi_j2 = DVector::zeros(dim);
                for i in 0..dim {
                    if j2[(i, r)] != 0.0 {
                        phi_j2 += &phi[i][s] * j2[(i, r)];
                    }
                }
                let res = &j1 * &phi[r][s] - phi_j2 - apply(&ds, &basis[r], &basis[s]);
                defining = defining.max(res.amax());

                let g1 = apply(&ds, &basis[r], &basis[s]) - apply(&ds, &basis[s], &basis[r]);
                let j2r = &j2 * &basis[r];
                let j2s = &j2 * &basis[s];
                let g2 = apply(&ds, &j2r, &j2s) - apply(&ds, &j2s, &j2r);
                gap = gap.max((g1 - g2).amax());
            }
        }

        let tangent = surface.jacobian_at(st)?;
        for a in 0..2 {
            for b in 0..2 {
                let mut val = DVector::zeros(dim);
                for r in 0..dim {
                    for s in 0..dim {
                        let w = tangent[(r, a)] * tangent[(s, b)];
                        if w != 0.0 {
                            val += &phi[r][s] * w;
                        }
                    }
                }
                tangency = tangency.max(val.amax());
            }
        }

        let mut comp = vec![DMatrix::<f64>::zeros(dim, dim); dim];
        for r in 0..dim {
            for s in 0..dim {
                for k in 0..dim {
                    comp[k][(r, s)] = phi[r][s][k];
                }
            }
        }
        params_out.push(st.clone());
        points_out.push(p);
        components_out.push(comp);
    }

    Ok(EquivalenceSymbol {
        params: params_out,
        points: points_out,
        components: components_out,
        defining_residual: defining,
        tangency_residual: tangency,
        compatibility_gap: gap,
    })
}
