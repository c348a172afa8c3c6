//! Parametrized surfaces inside an almost complex 4-manifold.
//!
//! A surface is *pseudoholomorphic* when its tangent planes are invariant
//! under the structure operator; [`ph_residual`] measures the failure of
//! that invariance on a sampling grid. On a pseudoholomorphic surface the
//! derived flag of the structure cuts out a field of tangent lines (the
//! intersection of the tangent plane with the first derived space);
//! [`l1_field`] samples that line field and reports its rotation data
//! along the fundamental cycles of a torus. [`curve_invariants`] computes
//! the coefficient functions of the induced canonical pair of tangent
//! fields, and [`sigma0_scan`] locates the singular points of these
//! constructions on the surface.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};

use crate::chart::{Chart, Grid};
use crate::expr::Expr;
use crate::fd::{fd_bracket, rk4_step, DEFAULT_FD_STEP};
use crate::frames::{FlagEvaluator, FrameContext, FrameError};
use crate::geom::{AlmostComplexField, GeomError};

/// A surface is declared pseudoholomorphic when its residual stays at or
/// below this bound.
pub const PH_RESIDUAL_TOL: f64 = 1e-8;
/// Default number of samples per fundamental cycle for rotation data.
pub const CYCLE_SAMPLES: usize = 256;
/// Relative gap below which the tangent plane is considered to meet the
/// characteristic plane (a tangency point of the surface).
const TANGENCY_TOL: f64 = 1e-8;
/// Largest acceptable defect when intersecting the tangent plane with the
/// first derived space; beyond it the intersection line is not trusted.
const INTERSECTION_TOL: f64 = 1e-6;
/// Fundamental cycles traversed by the leaf integration.
const LEAF_CYCLES: usize = 8;
/// Leaf/cycle steps between rebuilds of the shared flag evaluator.
const EVALUATOR_REFRESH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CurveError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    /// The embedding differential drops below rank 2.
    #[error("parametrization is rank-deficient at {st:?}")]
    RankDeficient { st: Vec<f64> },
    /// The tangent plane meets the characteristic plane, so no tangent
    /// line is cut out there.
    #[error("tangent plane meets the characteristic plane at {st:?} (chart point {point:?})")]
    TangencyPoint { st: Vec<f64>, point: Vec<f64> },
    /// The derived flag is too degenerate to cut out a tangent line.
    #[error("degenerate derived flag at {st:?}: ranks {ranks:?}")]
    DegenerateFlag {
        st: Vec<f64>,
        ranks: (usize, usize, usize),
    },
    /// Close to a singular point of the induced constructions: the data
    /// exists nearby but is numerically untrustworthy here.
    #[error("singular point proximity at {st:?}: {detail}")]
    SingularProximity { st: Vec<f64>, detail: String },
}

/// A two-parameter surface in a chart, given by one expression per target
/// coordinate. The parameter chart may be periodic (a torus worth of
/// parameters); the box records the sampled parameter range.
#[derive(Debug, Clone)]
pub struct ParamSurface {
    params: Chart,
    target: Chart,
    components: Vec<Expr>,
    /// jacobian[i][a] = derivative of component i by parameter a.
    jacobian: Vec<Vec<Expr>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ParamSurface {
    pub fn new(
        params: Chart,
        target: Chart,
        components: Vec<Expr>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<ParamSurface, GeomError> {
        if params.dim() != 2 {
            return Err(GeomError::Dimension {
                expected: 2,
                got: params.dim(),
            });
        }
        if components.len() != target.dim() {
            return Err(GeomError::Dimension {
                expected: target.dim(),
                got: components.len(),
            });
        }
        if lo.len() != 2 || hi.len() != 2 {
            return Err(GeomError::Dimension {
                expected: 2,
                got: lo.len().max(hi.len()),
            });
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(GeomError::Numeric {
                detail: "parameter box is empty or inverted".into(),
            });
        }
        let jacobian = components
            .iter()
            .map(|c| {
                params
                    .names()
                    .iter()
                    .map(|v| c.differentiate(v))
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(ParamSurface {
            params,
            target,
            components,
            jacobian,
            lo,
            hi,
        })
    }

    pub fn params(&self) -> &Chart {
        &self.params
    }

    pub fn target(&self) -> &Chart {
        &self.target
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn param_box(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    /// Chart point reached from the parameters.
    pub fn point_at(&self, st: &[f64]) -> Result<Vec<f64>, GeomError> {
        self.components
            .iter()
            .map(|c| self.params.eval(c, st).map_err(GeomError::from))
            .collect()
    }

    /// Differential of the embedding at `st` (target dim × 2).
    pub fn jacobian_at(&self, st: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        let dim = self.target.dim();
        let mut out = DMatrix::zeros(dim, 2);
        for (i, row) in self.jacobian.iter().enumerate() {
            for (a, e) in row.iter().enumerate() {
                out[(i, a)] = self.params.eval(e, st)?;
            }
        }
        Ok(out)
    }

    /// Sampling grid over the parameter box with `samples` points per
    /// axis. Periodic axes spanning a full period stop one step short of
    /// the wrap so the seam is not sampled twice.
    pub fn sampling_grid(&self, samples: usize) -> Grid {
        let mut hi = self.hi.clone();
        if samples > 1 {
            for a in 0..2 {
                if let Some(period) = self.params.period(a) {
                    if ((self.hi[a] - self.lo[a]) - period).abs() < 1e-12 {
                        hi[a] = self.lo[a] + period * (samples as f64 - 1.0) / samples as f64;
                    }
                }
            }
        }
        Grid {
            lo: self.lo.clone(),
            hi,
            samples,
        }
    }

    /// The target charts of the surface and the structure must agree.
    fn check_target(&self, structure: &AlmostComplexField) -> Result<(), GeomError> {
        if structure.dim() != self.target.dim() {
            return Err(GeomError::Dimension {
                expected: self.target.dim(),
                got: structure.dim(),
            });
        }
        if structure.chart().names() != self.target.names() {
            return Err(GeomError::Numeric {
                detail: "surface target chart does not match the structure chart".into(),
            });
        }
        Ok(())
    }
}

/// Pointwise tangent data of the embedding: the chart point, the raw
/// differential and its thin singular value decomposition.
struct TangentData {
    point: Vec<f64>,
    jac: DMatrix<f64>,
    /// Orthonormal tangent basis (target dim × 2).
    basis: DMatrix<f64>,
    sv: [f64; 2],
    /// Right singular vectors, as rows (2 × 2).
    v_t: DMatrix<f64>,
}

impl TangentData {
    /// Parameter-space representation of an ambient tangent vector (least
    /// squares through the pseudoinverse of the differential), together
    /// with the reconstruction residual.
    fn param_of_ambient(&self, v: &DVector<f64>) -> (DVector<f64>, f64) {
        let c = self.basis.transpose() * v;
        let scaled = DVector::from_vec(vec![c[0] / self.sv[0], c[1] / self.sv[1]]);
        let param = self.v_t.transpose() * scaled;
        let residual = (&self.jac * &param - v).norm();
        (param, residual)
    }
}

fn tangent_data(surface: &ParamSurface, st: &[f64]) -> Result<TangentData, CurveError> {
    let point = surface.point_at(st)?;
    let jac = surface.jacobian_at(st)?;
    let svd = jac.clone().svd(true, true);
    let sv = [svd.singular_values[0], svd.singular_values[1]];
    if sv[0] <= 0.0 || sv[1] <= 1e-10 * sv[0] {
        return Err(CurveError::RankDeficient { st: st.to_vec() });
    }
    Ok(TangentData {
        point,
        jac,
        basis: svd.u.expect("svd with u requested"),
        sv,
        v_t: svd.v_t.expect("svd with v_t requested"),
    })
}

/// Best intersection direction between the spans of two orthonormal
/// column bases: the unit combination of `tangent` columns closest to the
/// span of `space`. Returns the ambient direction, its coefficients in
/// the `tangent` columns, and the defect (distance of the direction from
/// the `space` span; zero means a genuine intersection).
pub fn span_intersection(
    tangent: &DMatrix<f64>,
    space: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>, f64) {
    let off = tangent - space * (space.transpose() * tangent);
    let svd = off.svd(false, true);
    let vt = svd.v_t.expect("svd with v_t requested");
    let coeff: DVector<f64> = vt.row(vt.nrows() - 1).transpose();
    let defect = svd.singular_values[svd.singular_values.len() - 1];
    let dir = tangent * &coeff;
    (dir, coeff, defect)
}

/// Maximum over the grid of the pointwise invariance residual: the norm
/// of the off-tangent component of the rotated first tangent vector plus
/// the same for the second. Zero exactly on pseudoholomorphic surfaces.
pub fn ph_residual(
    surface: &ParamSurface,
    structure: &AlmostComplexField,
    grid: &Grid,
) -> Result<f64, CurveError> {
    surface.check_target(structure)?;
    check_grid(grid)?;
    let mut worst = 0.0f64;
    for st in grid.points() {
        let td = tangent_data(surface, &st)?;
        let jm = structure.matrix_at(&td.point)?;
        let mut total = 0.0;
        for col in 0..2 {
            let v = &jm * DVector::from_column_slice(td.jac.column(col).as_slice());
            let perp = &v - &td.basis * (td.basis.transpose() * &v);
            total += perp.norm();
        }
        worst = worst.max(total);
    }
    Ok(worst)
}

/// One sample of the induced tangent line field.
#[derive(Debug, Clone)]
pub struct L1Sample {
    pub st: Vec<f64>,
    pub point: Vec<f64>,
    /// Unit direction of the line in the target chart. The sign is fixed
    /// by the parameter-space fold below, not intrinsically.
    pub ambient_direction: DVector<f64>,
    /// The same line in parameter coordinates, unit, folded so the angle
    /// lies in [0, π).
    pub param_direction: DVector<f64>,
    /// Line angle of `param_direction`, in [0, π).
    pub angle: f64,
}

/// Rotation data of the line field on a torus of parameters.
///
/// Two distinct quantities are reported. `leaf_slope` integrates a leaf
/// of the line field and returns the ratio of the cycle fractions it
/// traverses, which is the winding slope of the induced foliation (for a
/// field flowing with constant velocities (a, b) it equals a/b in units
/// of the two periods). `cycle_windings` sums the lifted angle increments
/// of the line field along each fundamental cycle (increments folded into
/// (−π/2, π/2]) in full turns, which measures how the *direction* turns
/// along the cycle and is zero for any constant field.
#[derive(Debug, Clone)]
pub struct RotationData {
    /// None when either parameter is aperiodic, or when the leaf never
    /// advances along the second cycle.
    pub leaf_slope: Option<f64>,
    /// One entry per parameter axis; None for aperiodic axes.
    pub cycle_windings: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct L1Field {
    pub samples: Vec<L1Sample>,
    pub rotation: RotationData,
}

/// Sample the induced tangent line field over the grid and compute the
/// rotation data along periodic parameter axes with the default cycle
/// sampling.
pub fn l1_field(
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    grid: &Grid,
) -> Result<L1Field, CurveError> {
    l1_field_with_cycle_samples(structure, surface, grid, CYCLE_SAMPLES)
}

pub fn l1_field_with_cycle_samples(
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    grid: &Grid,
    cycle_samples: usize,
) -> Result<L1Field, CurveError> {
    surface.check_target(structure)?;
    check_grid(grid)?;
    let ctx = FrameContext::symbolic(structure);
    let mut sampler = DirectionSampler::new(&ctx, surface);
    let mut samples = Vec::new();
    for st in grid.points() {
        samples.push(sampler.sample(&st, false)?);
    }
    let rotation = rotation_data(&ctx, surface, cycle_samples.max(8))?;
    Ok(L1Field { samples, rotation })
}

/// Coefficients of the canonical pair of tangent fields at one sample.
///
/// The first field spans the induced tangent line, normalized so its
/// coefficient along the third canonical frame field is one (this fixes
/// scale, orientation and transversal measure at once). The second field
/// is the rotation of the first by the structure, which lands along the
/// rotated line with coefficient one on the fourth frame field. `gamma1`
/// and `gamma2` decompose the bracket of the pair in the pair itself;
/// `gamma3` relates the rotated first field to the second and is
/// identically one under this normalization (its required positivity is
/// thereby automatic).
#[derive(Debug, Clone)]
pub struct InvariantSample {
    pub st: Vec<f64>,
    pub point: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

pub fn curve_invariants(
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    grid: &Grid,
) -> Result<Vec<InvariantSample>, CurveError> {
    surface.check_target(structure)?;
    check_grid(grid)?;
    let ctx = FrameContext::symbolic(structure);
    grid.points()
        .iter()
        .map(|st| invariant_sample(&ctx, structure, surface, st))
        .collect()
}

/// Classified singular points of the induced constructions on a surface.
#[derive(Debug, Clone, Default)]
pub struct CurveSingularLoci {
    /// Parameter points where the tangent plane meets the characteristic
    /// plane (the line field has no value).
    pub tangency: Vec<Vec<f64>>,
    /// Points where the first derived space fails to reach rank 3
    /// (including points where the plane itself vanishes or degenerates).
    pub third_rank_drop: Vec<Vec<f64>>,
    /// Points where the second derived space fails to reach rank 4.
    pub fourth_rank_drop: Vec<Vec<f64>>,
}

/// Scan a surface for singular points of the induced line field and
/// canonical pair: tangencies of the characteristic plane and rank drops
/// of the derived flag, with the same thresholds used by the frame
/// constructions.
pub fn sigma0_scan(
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    grid: &Grid,
) -> Result<CurveSingularLoci, CurveError> {
    surface.check_target(structure)?;
    check_grid(grid)?;
    let ctx = FrameContext::symbolic(structure);
    let mut out = CurveSingularLoci::default();
    for st in grid.points() {
        let td = tangent_data(surface, &st)?;
        let flag = match ctx.derived_flag(&td.point) {
            Ok(flag) => flag,
            Err(FrameError::DegenerateFlag { .. }) => {
                out.third_rank_drop.push(st.clone());
                continue;
            }
            Err(err) => return Err(frame_to_curve(&st, err)),
        };
        if let Some(plane) = &flag.plane {
            let (_, _, gap) = span_intersection(&td.basis, plane);
            if gap < TANGENCY_TOL {
                out.tangency.push(st.clone());
            }
        }
        let (_, r3, r4) = flag.ranks;
        if r3 < 3 {
            out.third_rank_drop.push(st.clone());
        }
        if r4 < 4 {
            out.fourth_rank_drop.push(st.clone());
        }
    }
    Ok(out)
}

fn check_grid(grid: &Grid) -> Result<(), GeomError> {
    if grid.dim() != 2 {
        return Err(GeomError::Dimension {
            expected: 2,
            got: grid.dim(),
        });
    }
    Ok(())
}

fn frame_to_curve(st: &[f64], err: FrameError) -> CurveError {
    match err {
        FrameError::Geom(g) => CurveError::Geom(g),
        FrameError::DegenerateFlag { ranks, .. } => CurveError::DegenerateFlag {
            st: st.to_vec(),
            ranks,
        },
        other => CurveError::SingularProximity {
            st: st.to_vec(),
            detail: other.to_string(),
        },
    }
}

fn flatten_curve_err(err: CurveError) -> GeomError {
    match err {
        CurveError::Geom(g) => g,
        other => GeomError::Numeric {
            detail: other.to_string(),
        },
    }
}

/// Line-field sampler that reuses one flag evaluator (and with it the
/// symbolic plane sections) across nearby queries.
struct DirectionSampler<'a, 'b, 's> {
    ctx: &'b FrameContext<'a>,
    surface: &'s ParamSurface,
    evaluator: Option<FlagEvaluator<'a, 'b>>,
}

impl<'a, 'b, 's> DirectionSampler<'a, 'b, 's> {
    fn new(ctx: &'b FrameContext<'a>, surface: &'s ParamSurface) -> Self {
        DirectionSampler {
            ctx,
            surface,
            evaluator: None,
        }
    }

    /// Re-anchor the shared evaluator at the surface point over `st`.
    fn rebuild(&mut self, st: &[f64]) -> Result<(), CurveError> {
        let point = self.surface.point_at(st)?;
        self.evaluator = Some(
            self.ctx
                .flag_evaluator(&point)
                .map_err(|e| frame_to_curve(st, e))?,
        );
        Ok(())
    }

    /// Sample at `st`; with `reuse` the evaluator keeps its current
    /// anchor, otherwise it is re-anchored here first.
    fn sample(&mut self, st: &[f64], reuse: bool) -> Result<L1Sample, CurveError> {
        if !reuse || self.evaluator.is_none() {
            self.rebuild(st)?;
        }
        self.sample_at(st)
    }

    /// Sample using the evaluator as currently anchored.
    fn sample_at(&self, st: &[f64]) -> Result<L1Sample, CurveError> {
        let evaluator = self
            .evaluator
            .as_ref()
            .expect("sampler used before first rebuild");
        let td = tangent_data(self.surface, st)?;
        let spaces = evaluator
            .plane_and_third(&td.point)
            .map_err(|e| frame_to_curve(st, e))?;
        let Some((plane, third)) = spaces else {
            return Err(CurveError::DegenerateFlag {
                st: st.to_vec(),
                ranks: (0, 0, 0),
            });
        };
        let (_, _, tangency_gap) = span_intersection(&td.basis, &plane);
        if tangency_gap < TANGENCY_TOL {
            return Err(CurveError::TangencyPoint {
                st: st.to_vec(),
                point: td.point.clone(),
            });
        }
        if third.rank() < 3 {
            let ranks = evaluator
                .flag_at(&td.point)
                .map(|f| f.ranks)
                .unwrap_or((2, third.rank(), third.rank()));
            return Err(CurveError::DegenerateFlag {
                st: st.to_vec(),
                ranks,
            });
        }
        let (dir, _, defect) = span_intersection(&td.basis, &third.basis);
        if defect > INTERSECTION_TOL {
            return Err(CurveError::SingularProximity {
                st: st.to_vec(),
                detail: format!(
                    "tangent plane barely meets the derived space (defect {defect:.3e}); \
                     the surface may not be pseudoholomorphic here"
                ),
            });
        }
        let (mut param, _) = td.param_of_ambient(&dir);
        let norm = param.norm();
        if norm < 1e-12 {
            return Err(CurveError::SingularProximity {
                st: st.to_vec(),
                detail: "intersection direction vanishes in parameters".into(),
            });
        }
        param /= norm;
        let mut ambient = dir;
        if param[1] < 0.0 || (param[1] == 0.0 && param[0] < 0.0) {
            param.neg_mut();
            ambient.neg_mut();
        }
        let mut angle = param[1].atan2(param[0]);
        if angle >= PI {
            angle = 0.0;
        }
        Ok(L1Sample {
            st: st.to_vec(),
            point: td.point,
            ambient_direction: ambient,
            param_direction: param,
            angle,
        })
    }
}

fn rotation_data(
    ctx: &FrameContext,
    surface: &ParamSurface,
    cycle_samples: usize,
) -> Result<RotationData, CurveError> {
    let periods = [surface.params.period(0), surface.params.period(1)];
    let mut windings = vec![None, None];
    let mut sampler = DirectionSampler::new(ctx, surface);
    for axis in 0..2 {
        if let Some(period) = periods[axis] {
            windings[axis] = Some(cycle_winding(
                &mut sampler,
                surface,
                axis,
                period,
                cycle_samples,
            )?);
        }
    }
    let leaf_slope = match (periods[0], periods[1]) {
        (Some(p0), Some(p1)) => leaf_slope(&mut sampler, surface, [p0, p1], cycle_samples)?,
        _ => None,
    };
    Ok(RotationData {
        leaf_slope,
        cycle_windings: windings,
    })
}

/// Net turning of the line field along one fundamental cycle, in full
/// turns: lifted angle increments folded into (−π/2, π/2] and summed.
fn cycle_winding(
    sampler: &mut DirectionSampler,
    surface: &ParamSurface,
    axis: usize,
    period: f64,
    steps: usize,
) -> Result<f64, CurveError> {
    let (lo, hi) = surface.param_box();
    let mut st: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let start = lo[axis];
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    for k in 0..=steps {
        st[axis] = start + period * (k as f64) / (steps as f64);
        let reuse = k % EVALUATOR_REFRESH != 0;
        let sample = sampler.sample(&st, reuse)?;
        if let Some(p) = prev {
            let mut delta = sample.angle - p;
            while delta <= -FRAC_PI_2 {
                delta += PI;
            }
            while delta > FRAC_PI_2 {
                delta -= PI;
            }
            total += delta;
        }
        prev = Some(sample.angle);
    }
    Ok(total / (2.0 * PI))
}

/// Winding slope of the foliation induced by the line field: integrate a
/// leaf with a sign-continuous orientation and return the ratio of the
/// cycle fractions traversed, (Δ first parameter / first period) over
/// (Δ second parameter / second period).
fn leaf_slope(
    sampler: &mut DirectionSampler,
    surface: &ParamSurface,
    periods: [f64; 2],
    steps_per_cycle: usize,
) -> Result<Option<f64>, CurveError> {
    let (lo, hi) = surface.param_box();
    let start: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let total_steps = LEAF_CYCLES * steps_per_cycle;
    let h = LEAF_CYCLES as f64 * periods[0].max(periods[1]) / total_steps as f64;
    let mut y = DVector::from_vec(start.clone());
    sampler.rebuild(y.as_slice())?;
    let mut reference = sampler.sample_at(y.as_slice())?.param_direction;
    for k in 0..total_steps {
        if k > 0 && k % EVALUATOR_REFRESH == 0 {
            sampler.rebuild(y.as_slice())?;
        }
        let oriented = |_t: f64, q: &DVector<f64>| -> Result<DVector<f64>, GeomError> {
            let mut d = sampler
                .sample_at(q.as_slice())
                .map_err(flatten_curve_err)?
                .param_direction;
            if d.dot(&reference) < 0.0 {
                d.neg_mut();
            }
            Ok(d)
        };
        y = rk4_step(&oriented, 0.0, &y, h)?;
        let mut next_dir = sampler.sample_at(y.as_slice())?.param_direction;
        if next_dir.dot(&reference) < 0.0 {
            next_dir.neg_mut();
        }
        reference = next_dir;
    }
    let frac0 = (y[0] - start[0]) / periods[0];
    let frac1 = (y[1] - start[1]) / periods[1];
    if frac1.abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some(frac0 / frac1))
}

/// The canonical pair at `st` in parameter coordinates.
fn canonical_pair(
    ctx: &FrameContext,
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    st: &[f64],
) -> Result<(DVector<f64>, DVector<f64>), CurveError> {
    let mut sampler = DirectionSampler::new(ctx, surface);
    let sample = sampler.sample(st, false)?;
    let frame = ctx
        .canonical_frame(&sample.point)
        .map_err(|e| frame_to_curve(st, e))?;
    let coeffs = frame
        .vectors
        .clone()
        .lu()
        .solve(&sample.ambient_direction)
        .ok_or_else(|| CurveError::SingularProximity {
            st: st.to_vec(),
            detail: "canonical frame matrix is singular".into(),
        })?;
    let c = coeffs[2];
    if c.abs() < 1e-8 * coeffs.amax().max(1e-300) {
        return Err(CurveError::SingularProximity {
            st: st.to_vec(),
            detail: "tangent line degenerates into the characteristic plane".into(),
        });
    }
    // Dividing by the third-frame coefficient makes that coefficient
    // exactly one, which fixes scale, sign and transversal measure in one
    // stroke (the raw direction's sign ambiguity cancels).
    let v1 = &sample.ambient_direction / c;
    let jm = structure.matrix_at(&sample.point)?;
    let v2 = &jm * &v1;
    let td = tangent_data(surface, st)?;
    let (v1p, r1) = td.param_of_ambient(&v1);
    let (v2p, r2) = td.param_of_ambient(&v2);
    let scale = v1.norm().max(v2.norm());
    if r1 > 1e-6 * scale || r2 > 1e-6 * scale {
        return Err(CurveError::SingularProximity {
            st: st.to_vec(),
            detail: format!(
                "canonical pair leaves the tangent plane (residuals {r1:.3e}, {r2:.3e}); \
                 the surface may not be pseudoholomorphic here"
            ),
        });
    }
    Ok((v1p, v2p))
}

fn invariant_sample(
    ctx: &FrameContext,
    structure: &AlmostComplexField,
    surface: &ParamSurface,
    st: &[f64],
) -> Result<InvariantSample, CurveError> {
    type Pair = (DVector<f64>, DVector<f64>);
    let cache: RefCell<HashMap<Vec<u64>, Pair>> = RefCell::new(HashMap::new());
    let pair_at = |q: &[f64]| -> Result<Pair, GeomError> {
        let key: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let pair = canonical_pair(ctx, structure, surface, q).map_err(flatten_curve_err)?;
        cache.borrow_mut().insert(key, pair.clone());
        Ok(pair)
    };
    let v1_field = |q: &[f64]| pair_at(q).map(|p| p.0);
    let v2_field = |q: &[f64]| pair_at(q).map(|p| p.1);
    let bracket = fd_bracket(&v1_field, &v2_field, st, DEFAULT_FD_STEP)?;
    let (v1, v2) = pair_at(st)?;
    let m = DMatrix::from_columns(&[v1, v2]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det.abs() < 1e-12 * (m.amax() * m.amax()).max(1e-300) {
        return Err(CurveError::SingularProximity {
            st: st.to_vec(),
            detail: "canonical pair nearly collinear on the surface".into(),
        });
    }
    let sol = m
        .lu()
        .solve(&bracket)
        .ok_or_else(|| CurveError::SingularProximity {
            st: st.to_vec(),
            detail: "canonical pair decomposition failed".into(),
        })?;
    Ok(InvariantSample {
        st: st.to_vec(),
        point: surface.point_at(st)?,
        gamma1: sol[0],
        gamma2: sol[1],
        // The second field is defined as the rotation of the first, so
        // the rotation coefficient is identically one (and positive).
        gamma3: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::geom::column_image;
    use proptest::prelude::*;

    #[test]
    fn winding_torus_is_pseudoholomorphic() {
        for rho in [0.0, 1.0, 2.0] {
            let j = catalog::winding_torus_structure(rho);
            let surface = catalog::winding_torus_surface();
            let res = ph_residual(&surface, &j, &surface.sampling_grid(7)).unwrap();
            assert!(res <= 1e-12, "rho={rho}: residual {res}");
            assert!(res <= PH_RESIDUAL_TOL);
        }
    }

    #[test]
    fn coordinate_plane_curves_are_pseudoholomorphic() {
        let j2 = catalog::transversal_plane_structure();
        let first = catalog::first_plane_surface(1.5, 1.5);
        let res2 = ph_residual(&first, &j2, &first.sampling_grid(6)).unwrap();
        assert!(res2 <= 1e-12, "first-factor plane residual {res2}");

        let j1 = catalog::parallel_plane_structure();
        let second = catalog::second_plane_surface(1.0, 1.0);
        let res1 = ph_residual(&second, &j1, &second.sampling_grid(6)).unwrap();
        assert!(res1 <= 1e-12, "fiber plane residual {res1}");
    }

    #[test]
    fn antiholomorphic_graph_residual_matches_closed_form() {
        let eps = 1e-3;
        let j = catalog::standard_flat_structure();
        let surface = catalog::antiholomorphic_graph_surface(eps, 1.0);
        let res = ph_residual(&surface, &j, &surface.sampling_grid(5)).unwrap();
        // Each of the two rotated tangent vectors has off-tangent norm
        // 2ε/sqrt(1+ε²); the pointwise residual sums both.
        let expected = 4.0 * eps / (1.0 + eps * eps).sqrt();
        assert!(
            (res - expected).abs() <= 1e-12,
            "residual {res} vs expected {expected}"
        );
        assert!(res > PH_RESIDUAL_TOL);
    }

    #[test]
    fn residual_invariant_under_reparametrization() {
        let j = catalog::winding_torus_structure(1.0);
        let surface = catalog::winding_torus_surface();
        let base = ph_residual(&surface, &j, &surface.sampling_grid(6)).unwrap();

        let diffeos: [(&str, &str); 3] = [
            ("s + 0.3*sin(t)", "t + 0.2*cos(s)"),
            ("s - 0.25*cos(t)", "t + 0.15*sin(s)"),
            ("s + 0.2*sin(t) + 0.1*cos(t)", "t - 0.3*sin(s)"),
        ];
        for (fs, ft) in diffeos {
            let sub = [
                ("s", crate::expr::parse(fs).unwrap()),
                ("t", crate::expr::parse(ft).unwrap()),
            ];
            let components = surface
                .components()
                .iter()
                .map(|c| c.substitute(&sub))
                .collect::<Vec<_>>();
            let reparam = ParamSurface::new(
                surface.params().clone(),
                surface.target().clone(),
                components,
                vec![0.0, 0.0],
                vec![2.0 * PI, 2.0 * PI],
            )
            .unwrap();
            let res = ph_residual(&reparam, &j, &reparam.sampling_grid(6)).unwrap();
            assert!(
                (res - base).abs() <= 1e-9,
                "reparametrized residual {res} vs {base}"
            );
        }

        // A linear reparametrization of an exactly invariant plane also
        // stays exact.
        let j2 = catalog::transversal_plane_structure();
        let plane = catalog::first_plane_surface(1.5, 1.5);
        let sub = [
            ("s", crate::expr::parse("0.8*s - 0.1*t").unwrap()),
            ("t", crate::expr::parse("0.05*s + 0.9*t").unwrap()),
        ];
        let components = plane
            .components()
            .iter()
            .map(|c| c.substitute(&sub))
            .collect::<Vec<_>>();
        let reparam = ParamSurface::new(
            plane.params().clone(),
            plane.target().clone(),
            components,
            vec![-1.5, -1.5],
            vec![1.5, 1.5],
        )
        .unwrap();
        let res = ph_residual(&reparam, &j2, &reparam.sampling_grid(6)).unwrap();
        assert!(res <= 1e-9, "linear reparametrization residual {res}");
    }

    #[test]
    fn direction_field_matches_winding_foliation() {
        let rho = 2.0;
        let j = catalog::winding_torus_structure(rho);
        let surface = catalog::winding_torus_surface();
        let field = l1_field(&j, &surface, &surface.sampling_grid(10)).unwrap();
        assert_eq!(field.samples.len(), 100);
        let ortho = DVector::from_vec(vec![1.0, rho]).normalize();
        for sample in &field.samples {
            // The line must be parallel to (rho, -1), i.e. orthogonal to
            // (1, rho), in parameter coordinates.
            let off = sample.param_direction.dot(&ortho).abs();
            assert!(off <= 1e-6, "direction {:?} at {:?}", sample.param_direction, sample.st);
            // In the chart the line has no transversal components.
            assert!(sample.ambient_direction[2].abs() <= 1e-6);
            assert!(sample.ambient_direction[3].abs() <= 1e-6);
        }
    }

    #[test]
    fn rotation_slope_tracks_winding_ratio() {
        for rho in [0.0, 1.0, 2.0] {
            let j = catalog::winding_torus_structure(rho);
            let surface = catalog::winding_torus_surface();
            let field = l1_field(&j, &surface, &surface.sampling_grid(3)).unwrap();
            let slope = field.rotation.leaf_slope.expect("periodic surface");
            assert!(
                (slope - (-rho)).abs() <= 1e-6,
                "rho={rho}: leaf slope {slope}"
            );
            for w in &field.rotation.cycle_windings {
                let w = w.expect("periodic axis");
                assert!(w.abs() <= 1e-6, "rho={rho}: cycle winding {w}");
            }
        }
    }

    #[test]
    fn rotation_stable_under_cycle_refinement() {
        let j = catalog::winding_torus_structure(1.0);
        let surface = catalog::winding_torus_surface();
        let grid = surface.sampling_grid(2);
        let coarse = l1_field_with_cycle_samples(&j, &surface, &grid, 256).unwrap();
        let fine = l1_field_with_cycle_samples(&j, &surface, &grid, 512).unwrap();
        let s0 = coarse.rotation.leaf_slope.unwrap();
        let s1 = fine.rotation.leaf_slope.unwrap();
        assert!((s0 - s1).abs() < 1e-3, "slopes {s0} vs {s1}");
        for (a, b) in coarse
            .rotation
            .cycle_windings
            .iter()
            .zip(&fine.rotation.cycle_windings)
        {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-3);
        }
    }

    #[test]
    fn direction_line_invariant_under_basis_recombination() {
        let j = catalog::winding_torus_structure(1.0);
        let surface = catalog::winding_torus_surface();
        let st = [0.7, 1.3];
        let td = tangent_data(&surface, &st).unwrap();
        let ctx = FrameContext::symbolic(&j);
        let flag = ctx.derived_flag(&td.point).unwrap();
        let third = flag.third.unwrap();
        let (base_dir, _, _) = span_intersection(&td.basis, &third.basis);

        let recombinations = [
            [[0.8, -1.1, 0.3], [0.2, 0.7, -0.5], [-0.4, 0.9, 1.2]],
            [[2.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, -3.0]],
            [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]],
        ];
        for r in recombinations {
            let rm = DMatrix::from_fn(3, 3, |i, k| r[i][k]);
            let recombined = &third.basis * rm;
            let ortho = column_image(&recombined, 1e-10);
            let (dir, _, _) = span_intersection(&td.basis, &ortho.basis);
            let align = dir.dot(&base_dir).abs();
            assert!((align - 1.0).abs() <= 1e-8, "alignment {align}");
        }
    }

    #[test]
    fn gamma_functions_vanish_for_translation_invariant_torus() {
        let j = catalog::winding_torus_structure(1.0);
        let surface = catalog::winding_torus_surface();
        let samples = curve_invariants(&j, &surface, &surface.sampling_grid(4)).unwrap();
        assert_eq!(samples.len(), 16);
        for s in &samples {
            assert_eq!(s.gamma3, 1.0);
            assert!(
                s.gamma1.abs() <= 1e-6 && s.gamma2.abs() <= 1e-6,
                "gammas ({}, {}) at {:?}",
                s.gamma1,
                s.gamma2,
                s.st
            );
        }
    }

    #[test]
    fn gamma_functions_invariant_under_angle_shift() {
        let rho = 1.0;
        let j = catalog::winding_torus_structure(rho);
        let shift = DVector::from_vec(vec![0.9, -0.4, 0.0, 0.0]);
        let pushed =
            catalog::affine_pushforward_structure(&j, &DMatrix::identity(4, 4), &shift).unwrap();
        let surface = catalog::winding_torus_surface();
        let ctx_orig = FrameContext::symbolic(&j);
        let ctx_push = FrameContext::symbolic(&pushed);
        for st in [[0.8, 1.9], [2.5, 0.6], [4.0, 3.3], [5.5, 5.0]] {
            let moved = invariant_sample(&ctx_push, &pushed, &surface, &st).unwrap();
            let back = [st[0] - shift[0], st[1] - shift[1]];
            let original = invariant_sample(&ctx_orig, &j, &surface, &back).unwrap();
            assert!(
                (moved.gamma1 - original.gamma1).abs() <= 1e-5
                    && (moved.gamma2 - original.gamma2).abs() <= 1e-5,
                "gammas ({}, {}) vs ({}, {}) at {:?}",
                moved.gamma1,
                moved.gamma2,
                original.gamma1,
                original.gamma2,
                st
            );
            assert_eq!(moved.gamma3, original.gamma3);
        }
    }

    #[test]
    fn singular_scan_classifies_catalog_curves() {
        // Winding torus: no tangencies, full third space, but the second
        // derived step stays rank 3 on the invariant torus, so every
        // sample lands in the fourth-rank bucket.
        let j = catalog::winding_torus_structure(1.0);
        let surface = catalog::winding_torus_surface();
        let grid = surface.sampling_grid(6);
        let total = grid.points().len();
        let scan = sigma0_scan(&j, &surface, &grid).unwrap();
        assert!(scan.tangency.is_empty());
        assert!(scan.third_rank_drop.is_empty());
        assert_eq!(scan.fourth_rank_drop.len(), total);

        // Fiber plane in the bundle-like structure: transversal to the
        // plane everywhere, but the flag never grows past the plane.
        let j1 = catalog::parallel_plane_structure();
        let fiber = catalog::second_plane_surface(1.0, 1.0);
        let fgrid = fiber.sampling_grid(5);
        let ftotal = fgrid.points().len();
        let fscan = sigma0_scan(&j1, &fiber, &fgrid).unwrap();
        assert!(fscan.tangency.is_empty());
        assert_eq!(fscan.third_rank_drop.len(), ftotal);
    }

    #[test]
    fn singular_scan_localizes_interpolated_tangency() {
        let j = catalog::tangency_interpolation_structure();
        let surface = catalog::first_plane_surface(2.0, 0.5);
        let scan = sigma0_scan(&j, &surface, &surface.sampling_grid(9)).unwrap();
        assert!(!scan.tangency.is_empty(), "expected tangency points");
        for st in &scan.tangency {
            assert!(
                st[0] <= -0.15,
                "tangency flagged outside the tangent-plane zone at {st:?}"
            );
        }
        let left = scan.tangency.iter().filter(|st| st[0] <= -1.0).count();
        assert!(left > 0, "no tangencies in the deep tangent-plane zone");
    }

    #[test]
    fn tangency_error_reported_inside_tangent_zone() {
        let j = catalog::tangency_interpolation_structure();
        let surface = catalog::first_plane_surface(2.0, 0.5);
        let grid = Grid::new(vec![-1.05, -0.1], vec![-0.95, 0.1], 2).unwrap();
        match l1_field(&j, &surface, &grid) {
            Err(CurveError::TangencyPoint { st, .. }) => {
                assert!(st[0] <= -0.9, "tangency at {st:?}");
            }
            other => panic!("expected a tangency error, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_flag_error_on_bundle_curve() {
        let j = catalog::parallel_plane_structure();
        let fiber = catalog::second_plane_surface(0.5, 0.5);
        match l1_field(&j, &fiber, &fiber.sampling_grid(2)) {
            Err(CurveError::DegenerateFlag { ranks, .. }) => {
                assert_eq!(ranks, (2, 2, 2));
            }
            other => panic!("expected a degenerate flag error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

        /// The induced line does not depend on how the derived space is
        /// spanned.
        #[test]
        fn direction_line_survives_random_recombination(
            entries in proptest::array::uniform9(-1.0f64..1.0),
            s in 0.0f64..6.2,
            t in 0.0f64..6.2,
        ) {
            let rm = DMatrix::from_fn(3, 3, |i, k| entries[3 * i + k]);
            let det = rm.determinant();
            prop_assume!(det.abs() >= 0.05);
            let j = catalog::winding_torus_structure(1.0);
            let surface = catalog::winding_torus_surface();
            let st = [s, t];
            let td = tangent_data(&surface, &st).unwrap();
            let ctx = FrameContext::symbolic(&j);
            let flag = ctx.derived_flag(&td.point).unwrap();
            let third = flag.third.unwrap();
            let (base_dir, _, _) = span_intersection(&td.basis, &third.basis);
            let recombined = &third.basis * rm;
            let ortho = column_image(&recombined, 1e-10);
            prop_assume!(ortho.rank() == 3);
            let (dir, _, _) = span_intersection(&td.basis, &ortho.basis);
            let align = dir.dot(&base_dir).abs();
            prop_assert!((align - 1.0).abs() <= 1e-6, "alignment {}", align);
        }
    }
}
