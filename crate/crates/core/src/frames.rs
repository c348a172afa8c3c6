//! The characteristic plane distribution of an almost complex structure in
//! dimension four, its derived flag, the induced canonical frame, the
//! structure functions of that frame, and grid scans for the loci where
//! the construction degenerates.
//!
//! All constructions are pointwise: the frame has no closed form, so
//! brackets of constructed fields are taken by central finite differences
//! with one Richardson extrapolation level.

use nalgebra::{DMatrix, DVector};

use crate::chart::{Chart, Grid};
use crate::fd::{fd_bracket, fd_nijenhuis_pair_matrix, StructureLike, DEFAULT_FD_STEP};
use crate::geom::{
    column_image, index_pairs, lie_bracket, AlmostComplexField, GeomError, ImageBasis,
    TensorField21, VectorField,
};

/// Below this absolute size, all tensor components at a point count as zero.
pub const PLANE_ZERO_TOL: f64 = 1e-10;
/// Relative singular-value threshold for every rank decision.
pub const RANK_REL_TOL: f64 = 1e-8;
/// Condition-number cap for solving frame-coefficient systems.
pub const FRAME_COND_LIMIT: f64 = 1e8;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("degenerate derived flag at {point:?}: ranks {ranks:?}")]
    DegenerateFlag {
        point: Vec<f64>,
        ranks: (usize, usize, usize),
    },
    #[error("frame construction degenerated at {point:?}: {detail}")]
    DegenerateFrame { point: Vec<f64>, detail: String },
    #[error("frame matrix ill-conditioned at {point:?}: condition {cond:.3e}")]
    IllConditioned { point: Vec<f64>, cond: f64 },
}

/// A distribution presented by explicit symbolic spanning fields.
#[derive(Debug, Clone)]
pub struct PlaneField {
    chart: Chart,
    spans: Vec<VectorField>,
}

impl PlaneField {
    pub fn new(chart: Chart, spans: Vec<VectorField>) -> Result<PlaneField, GeomError> {
        let dim = chart.dim();
        if let Some(bad) = spans.iter().find(|s| s.dim() != dim) {
            return Err(GeomError::Dimension {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(PlaneField { chart, spans })
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn spans(&self) -> &[VectorField] {
        &self.spans
    }

    /// Matrix whose columns are the spanning fields evaluated at `point`.
    pub fn span_matrix_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        let dim = self.chart.dim();
        let mut m = DMatrix::zeros(dim, self.spans.len());
        for (c, s) in self.spans.iter().enumerate() {
            let v = s.eval_at(&self.chart, point)?;
            m.set_column(c, &v);
        }
        Ok(m)
    }

    /// Numerical rank of the span at a point.
    pub fn rank_at(&self, point: &[f64]) -> Result<usize, GeomError> {
        Ok(self.basis_at(point)?.rank())
    }

    /// Orthonormal basis of the span at a point.
    pub fn basis_at(&self, point: &[f64]) -> Result<ImageBasis, GeomError> {
        Ok(column_image(&self.span_matrix_at(point)?, RANK_REL_TOL))
    }
}

/// The characteristic plane at one point: either all tensor components
/// vanish, or an orthonormal spanning pair of the image plane.
#[derive(Debug, Clone)]
pub enum PlaneAt {
    Zero,
    Basis {
        /// dim × 2 matrix with orthonormal columns.
        basis: DMatrix<f64>,
        /// All singular values of the pair-value matrix, descending.
        singular_values: Vec<f64>,
    },
}

impl PlaneAt {
    pub fn is_zero(&self) -> bool {
        matches!(self, PlaneAt::Zero)
    }
}

/// Ranks and bases of the derived flag at one point.
#[derive(Debug, Clone)]
pub struct FlagReport {
    /// (rank of the plane, rank after one bracket step, rank after the
    /// mixed second step).
    pub ranks: (usize, usize, usize),
    /// Orthonormal plane basis (dim × 2), absent when the plane is zero.
    pub plane: Option<DMatrix<f64>>,
    /// Basis of the first derived space.
    pub third: Option<ImageBasis>,
    /// Basis of the second derived space.
    pub fourth: Option<ImageBasis>,
}

/// How the sign of the first frame field was fixed at the anchor point.
#[derive(Debug, Clone, Copy)]
pub struct SignRecord {
    /// Coordinate index whose positivity determined the sign.
    pub component: usize,
    /// Whether the raw construction had to be flipped.
    pub flipped: bool,
}

/// The canonical frame anchored at a point. Columns of `vectors` are the
/// four frame fields evaluated at the anchor; nearby values are
/// reconstructed on demand (see [`FrameContext::frame_vectors_at`]) with
/// signs aligned to the anchor.
#[derive(Debug, Clone)]
pub struct CanonicalFrame {
    pub anchor: Vec<f64>,
    /// dim × 4; columns are the frame fields at the anchor.
    pub vectors: DMatrix<f64>,
    /// Normalization factor applied to the unit eigenvector.
    pub scale: f64,
    /// Positive eigenvalue of the antilinear pairing on the plane.
    pub eigenvalue: f64,
    /// Transversal bracket coefficient of the unit eigenvector.
    pub transversal_factor: f64,
    pub sign: SignRecord,
}

/// Structure functions c^i_jk with `[ξ_j, ξ_k] = Σ_i c^i_jk ξ_i`.
#[derive(Debug, Clone)]
pub struct StructureFunctions {
    dim: usize,
    /// Dense storage, index `i * dim * dim + j * dim + k`.
    c: Vec<f64>,
}

impl StructureFunctions {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[i * self.dim * self.dim + j * self.dim + k]
    }

    /// The independent coefficients: one entry per lower pair `j < k` and
    /// upper index `i`, as `((i, j, k), value)`.
    pub fn independent(&self) -> Vec<((usize, usize, usize), f64)> {
        let mut out = Vec::new();
        for (j, k) in index_pairs(self.dim) {
            for i in 0..self.dim {
                out.push(((i, j, k), self.get(i, j, k)));
            }
        }
        out
    }

    pub fn max_abs_difference(&self, other: &StructureFunctions) -> f64 {
        self.c
            .iter()
            .zip(other.c.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Grid classification of degeneracy loci.
#[derive(Debug, Clone, Default)]
pub struct SingularScan {
    /// Points where all tensor components vanish (or the plane rank drops).
    pub zero_set: Vec<Vec<f64>>,
    /// Points where the first derived space fails to reach rank 3.
    pub flag3_degenerate: Vec<Vec<f64>>,
    /// Points where the second derived space fails to reach rank 4.
    pub flag4_degenerate: Vec<Vec<f64>>,
}

/// Evaluation context: a structure, an optional exact symbolic Nijenhuis
/// tensor (used when the structure is symbolic), and the bracket step.
pub struct FrameContext<'a> {
    structure: &'a dyn StructureLike,
    symbolic: Option<TensorField21>,
    sym_structure: Option<&'a AlmostComplexField>,
    pub fd_step: f64,
}

impl<'a> FrameContext<'a> {
    /// Context with the exact symbolic tensor of a symbolic structure.
    pub fn symbolic(j: &'a AlmostComplexField) -> FrameContext<'a> {
        FrameContext {
            structure: j,
            symbolic: Some(j.nijenhuis()),
            sym_structure: Some(j),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    /// Context for a structure only available as point samples; tensor
    /// values come from finite differences of the samples.
    pub fn pointwise(structure: &'a dyn StructureLike) -> FrameContext<'a> {
        FrameContext {
            structure,
            symbolic: None,
            sym_structure: None,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    /// Exact symbolic spanning sections of the plane near `p`, when the
    /// structure is symbolic and its tensor does not vanish at `p`.
    fn plane_sections(&self, p: &[f64]) -> Result<Option<PlaneSections>, GeomError> {
        match (&self.symbolic, self.sym_structure) {
            (Some(n), Some(j)) => {
                if n.pair_matrix_at(p)?.amax() < PLANE_ZERO_TOL {
                    return Ok(None);
                }
                Ok(Some(PlaneSections::new(n, j, p)?))
            }
            _ => Ok(None),
        }
    }

    /// Reusable evaluator of the derived flag anchored near `p`: the
    /// symbolic plane sections chosen at `p` are shared across evaluations,
    /// which keeps repeated nearby queries (curve scans, leaf integration)
    /// cheap. Valid while the section-defining tensor value stays nonzero.
    pub fn flag_evaluator(&self, p: &[f64]) -> Result<FlagEvaluator<'a, '_>, FrameError> {
        Ok(FlagEvaluator {
            ctx: self,
            sections: self.plane_sections(p)?,
        })
    }

    pub fn with_fd_step(mut self, h: f64) -> FrameContext<'a> {
        self.fd_step = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    fn j_at(&self, p: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        self.structure.j_at(p)
    }

    fn n_pair_matrix(&self, p: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        match &self.symbolic {
            Some(n) => n.pair_matrix_at(p),
            None => fd_nijenhuis_pair_matrix(self.structure, p, self.fd_step),
        }
    }

    fn n_apply(
        &self,
        p: &[f64],
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>, GeomError> {
        match &self.symbolic {
            Some(n) => n.apply_at(p, xi, eta),
            None => crate::fd::fd_nijenhuis_apply(self.structure, p, xi, eta, self.fd_step),
        }
    }

    /// The characteristic plane at a point.
    pub fn characteristic_plane(&self, p: &[f64]) -> Result<PlaneAt, FrameError> {
        let m = self.n_pair_matrix(p)?;
        if m.amax() < PLANE_ZERO_TOL {
            return Ok(PlaneAt::Zero);
        }
        let svd = m.svd(true, false);
        let u = svd.u.as_ref().expect("svd with u");
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let dim = u.nrows();
        let mut basis = DMatrix::zeros(dim, 2);
        basis.set_column(0, &u.column(0).into_owned());
        basis.set_column(1, &u.column(1).into_owned());
        Ok(PlaneAt::Basis {
            basis,
            singular_values: sv,
        })
    }

    fn plane_basis(&self, p: &[f64]) -> Result<(DMatrix<f64>, usize), FrameError> {
        match self.characteristic_plane(p)? {
            PlaneAt::Zero => Err(FrameError::DegenerateFlag {
                point: p.to_vec(),
                ranks: (0, 0, 0),
            }),
            PlaneAt::Basis {
                basis,
                singular_values,
            } => {
                let top = singular_values[0];
                let rank = singular_values
                    .iter()
                    .filter(|s| **s > RANK_REL_TOL * top)
                    .count();
                Ok((basis, rank))
            }
        }
    }

    /// Unit vector in the plane at `q` obtained by projecting `reference`
    /// into the plane; sign aligned with `reference`. Only meaningful when
    /// `q` is close to the point where `reference` was taken.
    fn transport_into_plane(
        &self,
        q: &[f64],
        reference: &DVector<f64>,
    ) -> Result<DVector<f64>, FrameError> {
        let (basis, rank) = self.plane_basis(q)?;
        if rank < 2 {
            return Err(FrameError::DegenerateFrame {
                point: q.to_vec(),
                detail: format!("plane rank {rank} during transport"),
            });
        }
        let coeffs = basis.transpose() * reference;
        let mut v = &basis * coeffs;
        let norm = v.norm();
        if norm < 0.2 * reference.norm() {
            return Err(FrameError::DegenerateFrame {
                point: q.to_vec(),
                detail: "plane transport collapsed".into(),
            });
        }
        v /= norm;
        if v.dot(reference) < 0.0 {
            v = -v;
        }
        Ok(v)
    }

    /// Ranks and bases of the derived flag at a point.
    pub fn derived_flag(&self, p: &[f64]) -> Result<FlagReport, FrameError> {
        self.flag_evaluator(p)?.flag_at(p)
    }

    /// Core of the frame construction at one point: the normalized first
    /// frame vector (sign not yet fixed), the plane basis, the transversal
    /// bracket representative, and the normalization data.
    fn frame_core(
        &self,
        p: &[f64],
        w_hint: Option<&DVector<f64>>,
        sections: Option<&PlaneSections>,
    ) -> Result<FrameCore, FrameError> {
        let (basis, rank) = self.plane_basis(p)?;
        if rank < 2 {
            return Err(FrameError::DegenerateFlag {
                point: p.to_vec(),
                ranks: (rank, rank, rank),
            });
        }
        let owned_sections;
        let sections = match sections {
            Some(s) => Some(s),
            None => {
                owned_sections = self.plane_sections(p)?;
                owned_sections.as_ref()
            }
        };
        let j = self.j_at(p)?;
        let w: DVector<f64> = match w_hint {
            None => basis.column(0).into(),
            Some(h) => {
                let coeffs = basis.transpose() * h;
                let mut v = &basis * coeffs;
                let norm = v.norm();
                if norm < 1e-8 * h.norm() {
                    return Err(FrameError::DegenerateFrame {
                        point: p.to_vec(),
                        detail: "spanning hint orthogonal to the plane".into(),
                    });
                }
                v /= norm;
                v
            }
        };
        let jw = &j * &w;

        // Transversal representative: bracket of the plane frame, reduced
        // modulo the plane. The class modulo the plane only depends on the
        // point values, so any smooth extension works: exact symbolic
        // sections when available, otherwise the fixed vector projected
        // into nearby planes and bracketed by finite differences.
        let b = match sections {
            Some(sx) => sx.rotation_bracket(p, &w)?,
            None => {
                let w_field = |q: &[f64]| -> Result<DVector<f64>, GeomError> {
                    self.transport_into_plane(q, &w).map_err(flatten_frame_err)
                };
                let jw_field = |q: &[f64]| -> Result<DVector<f64>, GeomError> {
                    let wv = self.transport_into_plane(q, &w).map_err(flatten_frame_err)?;
                    Ok(self.j_at(q)? * wv)
                };
                fd_bracket(&w_field, &jw_field, p, self.fd_step)?
            }
        };
        let u = &b - &basis * (basis.transpose() * &b);
        let u_norm = u.norm();
        if u_norm < 1e-7 {
            return Err(FrameError::DegenerateFlag {
                point: p.to_vec(),
                ranks: (2, 2, 2),
            });
        }

        // The pairing v ↦ N(v, u) maps the plane to itself and reverses the
        // complex orientation; in the basis (w, Jw) its matrix has the
        // symmetric traceless form [[a, b], [b, -a]]. Coefficients are
        // taken in the (generally non-orthogonal) basis (w, Jw).
        let n_w = self.n_apply(p, &w, &u)?;
        let n_jw = self.n_apply(p, &jw, &u)?;
        let gram = basis_coeff_matrix(&w, &jw);
        let x = solve_coeffs(&gram, &w, &jw, &n_w)?;
        let y = solve_coeffs(&gram, &w, &jw, &n_jw)?;
        let a = 0.5 * (x[0] - y[1]);
        let bb = 0.5 * (x[1] + y[0]);
        let s = a.hypot(bb);
        if s < 1e-12 {
            return Err(FrameError::DegenerateFrame {
                point: p.to_vec(),
                detail: "antilinear pairing with the transversal vanishes".into(),
            });
        }
        // Unit eigenvector for the positive eigenvalue of [[a, b], [b, -a]].
        let (ea, eb) = if a >= 0.0 { (s + a, bb) } else { (bb, s - a) };
        let mut e = ea * &w + eb * &jw;
        let e_norm = e.norm();
        if e_norm < 1e-12 {
            return Err(FrameError::DegenerateFrame {
                point: p.to_vec(),
                detail: "eigenvector collapsed".into(),
            });
        }
        e /= e_norm;

        // Transversal coefficient of the eigenvector's own bracket.
        let be = match sections {
            Some(sx) => sx.rotation_bracket(p, &e)?,
            None => {
                let e_ref = e.clone();
                let e_field = |q: &[f64]| -> Result<DVector<f64>, GeomError> {
                    self.transport_into_plane(q, &e_ref)
                        .map_err(flatten_frame_err)
                };
                let je_field = |q: &[f64]| -> Result<DVector<f64>, GeomError> {
                    let ev = self
                        .transport_into_plane(q, &e_ref)
                        .map_err(flatten_frame_err)?;
                    Ok(self.j_at(q)? * ev)
                };
                fd_bracket(&e_field, &je_field, p, self.fd_step)?
            }
        };
        let be_perp = &be - &basis * (basis.transpose() * &be);
        let c = be_perp.dot(&u) / u.dot(&u);
        let cs = c * s;
        if cs <= 0.0 {
            return Err(FrameError::DegenerateFrame {
                point: p.to_vec(),
                detail: format!("coorientation branch failed: c*s = {cs:.3e}"),
            });
        }
        let alpha = 1.0 / cs.sqrt();
        Ok(FrameCore {
            xi1: alpha * e,
            eigenvalue: s,
            transversal_factor: c,
            scale: alpha,
        })
    }

    /// First frame field near the anchor, sign-aligned with `reference`.
    fn xi1_at(
        &self,
        q: &[f64],
        reference: &DVector<f64>,
        sections: Option<&PlaneSections>,
    ) -> Result<DVector<f64>, FrameError> {
        let core = self.frame_core(q, None, sections)?;
        let mut v = core.xi1;
        if v.dot(reference) < 0.0 {
            v = -v;
        }
        Ok(v)
    }

    /// The canonical frame anchored at `p`.
    ///
    /// Construction needs the characteristic plane to have rank 2 and the
    /// bracket of the plane frame to leave the plane (third flag space of
    /// rank 3); violations surface as [`FrameError::DegenerateFlag`]. The
    /// fourth frame vector is obtained by rotating the third, which can in
    /// principle fall back into the third flag space; that is caught by a
    /// conditioning check on the assembled frame matrix and reported as
    /// [`FrameError::DegenerateFrame`]. Note the derived flag itself may
    /// stop growing at rank 3 (its fourth space uses brackets, not the
    /// rotation) at points where the frame still exists.
    pub fn canonical_frame(&self, p: &[f64]) -> Result<CanonicalFrame, FrameError> {
        self.canonical_frame_with_hint(p, None)
    }

    /// Same as [`FrameContext::canonical_frame`] but seeding the plane
    /// basis with a caller-provided spanning vector (projected into the
    /// plane). The output does not depend on the seed beyond roundoff;
    /// tests use this to confirm it.
    pub fn canonical_frame_with_hint(
        &self,
        p: &[f64],
        w_hint: Option<&DVector<f64>>,
    ) -> Result<CanonicalFrame, FrameError> {
        let core = self.frame_core(p, w_hint, None)?;
        let mut xi1 = core.xi1;
        // Sign convention: make the first sufficiently large component (in
        // coordinate order) positive at the anchor.
        let norm = xi1.norm();
        let component = (0..xi1.len())
            .find(|i| xi1[*i].abs() > 1e-9 * norm)
            .unwrap_or(0);
        let flipped = xi1[component] < 0.0;
        if flipped {
            xi1 = -xi1;
        }
        let j = self.j_at(p)?;
        let xi2 = &j * &xi1;

        let field = CachedFirstField::new(self, p, xi1.clone())?;
        let xi3 = field.bracket_with_rotated(p)?;
        let xi4 = &j * &xi3;

        let dim = self.dim();
        let mut vectors = DMatrix::zeros(dim, 4);
        vectors.set_column(0, &xi1);
        vectors.set_column(1, &xi2);
        vectors.set_column(2, &xi3);
        vectors.set_column(3, &xi4);

        let sv = vectors.clone().singular_values();
        let cond = sv[0] / sv[sv.len() - 1];
        if !cond.is_finite() || cond > FRAME_COND_LIMIT {
            return Err(FrameError::DegenerateFrame {
                point: p.to_vec(),
                detail: format!(
                    "frame matrix nearly singular (condition number {cond:.3e}): \
                     the rotated transversal stays in the third flag space"
                ),
            });
        }
        Ok(CanonicalFrame {
            anchor: p.to_vec(),
            vectors,
            scale: core.scale,
            eigenvalue: core.eigenvalue,
            transversal_factor: core.transversal_factor,
            sign: SignRecord { component, flipped },
        })
    }

    /// All four frame fields at a point near the frame's anchor, signs
    /// aligned with the anchor values. Columns are the frame fields.
    pub fn frame_vectors_at(
        &self,
        frame: &CanonicalFrame,
        q: &[f64],
    ) -> Result<DMatrix<f64>, FrameError> {
        let field = CachedFirstField::new(self, &frame.anchor, frame.vectors.column(0).into_owned())?;
        let xi1 = field.value(q)?;
        let j = self.j_at(q)?;
        let xi2 = &j * &xi1;
        let xi3 = field.bracket_with_rotated(q)?;
        let xi4 = &j * &xi3;
        let dim = self.dim();
        let mut vectors = DMatrix::zeros(dim, 4);
        vectors.set_column(0, &xi1);
        vectors.set_column(1, &xi2);
        vectors.set_column(2, &xi3);
        vectors.set_column(3, &xi4);
        Ok(vectors)
    }

    /// Tensor values on the frame, expressed in frame coordinates:
    /// `table[a][b]` holds the coefficients of the value on
    /// (frame field a, frame field b).
    pub fn frame_tensor_table(
        &self,
        frame: &CanonicalFrame,
    ) -> Result<Vec<Vec<DVector<f64>>>, FrameError> {
        let p = &frame.anchor;
        let b = &frame.vectors;
        let svd = b.clone().svd(true, true);
        let cond = svd.singular_values[0] / svd.singular_values[svd.singular_values.len() - 1];
        if !cond.is_finite() || cond > FRAME_COND_LIMIT {
            return Err(FrameError::IllConditioned {
                point: p.clone(),
                cond,
            });
        }
        let mut table = vec![vec![DVector::zeros(4); 4]; 4];
        for a in 0..4 {
            for c in 0..4 {
                if a == c {
                    continue;
                }
                let va: DVector<f64> = b.column(a).into_owned();
                let vc: DVector<f64> = b.column(c).into_owned();
                let val = self.n_apply(p, &va, &vc)?;
                let coeffs = svd.solve(&val, 0.0).expect("frame solve");
                table[a][c] = coeffs;
            }
        }
        Ok(table)
    }

    /// Determinant of the 2×2 matrix of v ↦ N(v, ξ₃) restricted to the
    /// plane, in the basis (ξ₁, ξ₂). Negative at valid frames: the pairing
    /// reverses the plane's complex orientation.
    pub fn antilinear_orientation_det(
        &self,
        frame: &CanonicalFrame,
    ) -> Result<f64, FrameError> {
        let p = &frame.anchor;
        let xi1: DVector<f64> = frame.vectors.column(0).into_owned();
        let xi2: DVector<f64> = frame.vectors.column(1).into_owned();
        let xi3: DVector<f64> = frame.vectors.column(2).into_owned();
        let gram = basis_coeff_matrix(&xi1, &xi2);
        let col1 = solve_coeffs(&gram, &xi1, &xi2, &self.n_apply(p, &xi1, &xi3)?)?;
        let col2 = solve_coeffs(&gram, &xi1, &xi2, &self.n_apply(p, &xi2, &xi3)?)?;
        Ok(col1[0] * col2[1] - col1[1] * col2[0])
    }

    /// Structure functions of the frame at a point near its anchor.
    pub fn structure_functions(
        &self,
        frame: &CanonicalFrame,
        p: &[f64],
    ) -> Result<StructureFunctions, FrameError> {
        let dim = self.dim();
        let basis = self.frame_vectors_at(frame, p)?;
        let svd = basis.clone().svd(true, true);
        let cond = svd.singular_values[0] / svd.singular_values[svd.singular_values.len() - 1];
        if !cond.is_finite() || cond > FRAME_COND_LIMIT {
            return Err(FrameError::IllConditioned {
                point: p.to_vec(),
                cond,
            });
        }
        let field =
            CachedFirstField::new(self, &frame.anchor, frame.vectors.column(0).into_owned())?;
        let frame_col = |idx: usize, q: &[f64]| -> Result<DVector<f64>, GeomError> {
            match idx {
                0 => field.value(q),
                1 => Ok(self.j_at(q)? * field.value(q)?),
                2 => field.bracket_with_rotated(q),
                _ => Ok(self.j_at(q)? * field.bracket_with_rotated(q)?),
            }
        };
        let mut c = vec![0.0; dim * dim * dim];
        for (j, k) in index_pairs(4) {
            let fj =
                |q: &[f64]| -> Result<DVector<f64>, GeomError> { frame_col(j, q) };
            let fk =
                |q: &[f64]| -> Result<DVector<f64>, GeomError> { frame_col(k, q) };
            let br = fd_bracket(&fj, &fk, p, self.fd_step)?;
            let coeffs = svd.solve(&br, 0.0).expect("frame solve");
            for i in 0..dim {
                c[i * dim * dim + j * dim + k] = coeffs[i];
                c[i * dim * dim + k * dim + j] = -coeffs[i];
            }
        }
        Ok(StructureFunctions { dim, c })
    }

    /// Classify each grid point by the first degeneracy it exhibits.
    pub fn scan_singular_loci(&self, grid: &Grid) -> Result<SingularScan, FrameError> {
        let mut scan = SingularScan::default();
        for p in grid.points() {
            let m = self.n_pair_matrix(&p)?;
            if m.amax() < PLANE_ZERO_TOL {
                scan.zero_set.push(p);
                continue;
            }
            match self.derived_flag(&p) {
                Ok(flag) => {
                    let (r2, r3, r4) = flag.ranks;
                    if r2 < 2 {
                        scan.zero_set.push(p);
                    } else if r3 < 3 {
                        scan.flag3_degenerate.push(p);
                    } else if r4 < 4 {
                        scan.flag4_degenerate.push(p);
                    }
                }
                // A bracket stencil that leaves the region where the plane
                // has full rank counts as a first-derived degeneracy
                // candidate.
                Err(_) => scan.flag3_degenerate.push(p),
            }
        }
        Ok(scan)
    }
}

struct FrameCore {
    xi1: DVector<f64>,
    eigenvalue: f64,
    transversal_factor: f64,
    scale: f64,
}

/// Symbolic spanning sections of the characteristic plane near an anchor:
/// the tensor value on the coordinate pair with the largest value at the
/// anchor, its rotation by the structure, and their iterated commutators.
///
/// A smooth plane section through a prescribed plane vector `v` at `q` is
/// the constant-coefficient combination `X = c₁w₁ + c₂w₂` with
/// `v = c₁w₁(q) + c₂w₂(q)`. Because the coefficients are constant, the
/// brackets the constructions need collapse to exact multiples of the
/// precomputed commutators:
///
/// `[X, JX] = (c₁² + c₂²)[w₁, w₂]`, and for the second derived step
/// `[X, [w₁, w₂]] = c₁[w₁, [w₁, w₂]] + c₂[w₂, [w₁, w₂]]`.
///
/// This keeps every inner bracket of the frame construction exact, so the
/// only finite differences left are the outer brackets of the frame fields
/// themselves.
struct PlaneSections {
    chart: Chart,
    w1: VectorField,
    w2: VectorField,
    /// `[w₁, w₂]`.
    w12: VectorField,
    /// `[w₁, [w₁, w₂]]`.
    b1: VectorField,
    /// `[w₂, [w₁, w₂]]`.
    b2: VectorField,
}

impl PlaneSections {
    fn new(n: &TensorField21, j: &AlmostComplexField, anchor: &[f64]) -> Result<Self, GeomError> {
        let m = n.pair_matrix_at(anchor)?;
        let pairs = index_pairs(n.dim());
        let mut best = 0usize;
        for col in 1..pairs.len() {
            if m.column(col).norm() > m.column(best).norm() {
                best = col;
            }
        }
        if m.column(best).norm() < PLANE_ZERO_TOL {
            return Err(GeomError::Numeric {
                detail: "all tensor values vanish at the section anchor".into(),
            });
        }
        let (a, b) = pairs[best];
        let chart = n.chart().clone();
        let w1 = n.pair_field(a, b);
        let w2 = VectorField {
            components: j.matrix().apply_vec(&w1.components),
        };
        let w12 = lie_bracket(&chart, &w1, &w2);
        let b1 = lie_bracket(&chart, &w1, &w12);
        let b2 = lie_bracket(&chart, &w2, &w12);
        Ok(PlaneSections {
            chart,
            w1,
            w2,
            w12,
            b1,
            b2,
        })
    }

    /// Constant coefficients `(c₁, c₂)` with `v ≈ c₁w₁(q) + c₂w₂(q)`, by
    /// least squares in the span.
    fn coefficients(&self, q: &[f64], v: &DVector<f64>) -> Result<(f64, f64), GeomError> {
        let a = self.w1.eval_at(&self.chart, q)?;
        let b = self.w2.eval_at(&self.chart, q)?;
        let gram = basis_coeff_matrix(&a, &b);
        let det = gram[(0, 0)] * gram[(1, 1)] - gram[(0, 1)] * gram[(1, 0)];
        if det.abs() < 1e-24 * (gram.amax() * gram.amax()).max(1e-300) {
            return Err(GeomError::Numeric {
                detail: "plane section basis degenerate".into(),
            });
        }
        let c = solve_coeffs(&gram, &a, &b, v)?;
        Ok((c[0], c[1]))
    }

    /// `[X, JX](q)` for the constant-coefficient section `X` through `v`
    /// at `q`.
    fn rotation_bracket(&self, q: &[f64], v: &DVector<f64>) -> Result<DVector<f64>, GeomError> {
        let (c1, c2) = self.coefficients(q, v)?;
        let w12 = self.w12.eval_at(&self.chart, q)?;
        Ok((c1 * c1 + c2 * c2) * w12)
    }

    /// Values at `q` of `[X, B]` and `[JX, B]`, where `X` is the section
    /// through `v` at `q` and `B = [X, JX]` is its own defining bracket.
    fn second_brackets(
        &self,
        q: &[f64],
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), GeomError> {
        let (c1, c2) = self.coefficients(q, v)?;
        let k = c1 * c1 + c2 * c2;
        let b1 = self.b1.eval_at(&self.chart, q)?;
        let b2 = self.b2.eval_at(&self.chart, q)?;
        // JX = c₁w₂ − c₂w₁, and B = k[w₁, w₂] with constant k.
        let first = k * (c1 * &b1 + c2 * &b2);
        let second = k * (c1 * &b2 - c2 * &b1);
        Ok((first, second))
    }
}

/// Derived-flag evaluator that shares the symbolic plane sections chosen
/// at its anchor between evaluations. Repeated queries near the anchor
/// (grid scans over a surface, leaf integration of a direction field) then
/// cost only expression evaluations instead of fresh bracket
/// differentiations.
pub struct FlagEvaluator<'a, 'b> {
    ctx: &'b FrameContext<'a>,
    sections: Option<PlaneSections>,
}

impl FlagEvaluator<'_, '_> {
    /// Orthonormal plane basis at `q` together with the first derived
    /// space (plane plus the rotation bracket of its sections). This is
    /// the part of the flag that cuts out direction fields on surfaces,
    /// and is cheaper than the full flag.
    ///
    /// Returns `None` when the plane vanishes at `q`.
    pub fn plane_and_third(
        &self,
        q: &[f64],
    ) -> Result<Option<(DMatrix<f64>, ImageBasis)>, FrameError> {
        let Some((basis, w, jw, b)) = self.first_bracket(q)? else {
            return Ok(None);
        };
        let dim = self.ctx.dim();
        let mut cols3 = DMatrix::zeros(dim, 3);
        cols3.set_column(0, &w);
        cols3.set_column(1, &jw);
        cols3.set_column(2, &b);
        let third = column_image(&cols3, RANK_REL_TOL);
        Ok(Some((basis, third)))
    }

    /// Full flag report at `q`; see [`FrameContext::derived_flag`].
    pub fn flag_at(&self, q: &[f64]) -> Result<FlagReport, FrameError> {
        let Some((basis, w, jw, b)) = self.first_bracket(q)? else {
            return Ok(FlagReport {
                ranks: (0, 0, 0),
                plane: None,
                third: None,
                fourth: None,
            });
        };
        let (c1, c2) = match &self.sections {
            Some(sections) => sections.second_brackets(q, &w).map_err(FrameError::from)?,
            None => {
                let ctx = self.ctx;
                let w_field = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
                    ctx.transport_into_plane(r, &w).map_err(flatten_frame_err)
                };
                let jw_field = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
                    let wv = ctx.transport_into_plane(r, &w).map_err(flatten_frame_err)?;
                    Ok(ctx.j_at(r)? * wv)
                };
                let b_field = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
                    fd_bracket(&w_field, &jw_field, r, ctx.fd_step)
                };
                let c1 = fd_bracket(&w_field, &b_field, q, ctx.fd_step)?;
                let c2 = fd_bracket(&jw_field, &b_field, q, ctx.fd_step)?;
                (c1, c2)
            }
        };

        let dim = self.ctx.dim();
        let mut cols3 = DMatrix::zeros(dim, 3);
        cols3.set_column(0, &w);
        cols3.set_column(1, &jw);
        cols3.set_column(2, &b);
        let third = column_image(&cols3, RANK_REL_TOL);
        let r3 = third.rank();
        let mut cols5 = DMatrix::zeros(dim, 5);
        for (i, col) in [&w, &jw, &b, &c1, &c2].iter().enumerate() {
            cols5.set_column(i, *col);
        }
        let fourth = column_image(&cols5, RANK_REL_TOL);
        let r4 = fourth.rank();

        Ok(FlagReport {
            ranks: (2, r3, r4),
            plane: Some(basis),
            third: Some(third),
            fourth: Some(fourth),
        })
    }

    /// Shared first stage: plane basis at `q`, its leading vector `w`,
    /// the rotated vector `Jw`, and the rotation bracket `[W, JW](q)` of
    /// the section `W` through `w`. `None` when the plane vanishes.
    #[allow(clippy::type_complexity)]
    fn first_bracket(
        &self,
        q: &[f64],
    ) -> Result<Option<(DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>)>, FrameError> {
        let m = self.ctx.n_pair_matrix(q)?;
        if m.amax() < PLANE_ZERO_TOL {
            return Ok(None);
        }
        let (basis, rank) = self.ctx.plane_basis(q)?;
        if rank < 2 {
            return Err(FrameError::DegenerateFlag {
                point: q.to_vec(),
                ranks: (rank, rank, rank),
            });
        }
        let w: DVector<f64> = basis.column(0).into();
        let jw = self.ctx.j_at(q)? * &w;
        let b = match &self.sections {
            Some(sections) => sections.rotation_bracket(q, &w).map_err(FrameError::from)?,
            None => {
                let ctx = self.ctx;
                let w_field = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
                    ctx.transport_into_plane(r, &w).map_err(flatten_frame_err)
                };
                let jw_field = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
                    let wv = ctx.transport_into_plane(r, &w).map_err(flatten_frame_err)?;
                    Ok(ctx.j_at(r)? * wv)
                };
                fd_bracket(&w_field, &jw_field, q, ctx.fd_step)?
            }
        };
        Ok(Some((basis, w, jw, b)))
    }
}

/// Memoized evaluations of the first frame field near an anchor, keyed by
/// the bit pattern of the query point. The nested bracket stencils reuse
/// points heavily, so sharing one cache across a computation removes most
/// of the repeated plane constructions.
struct CachedFirstField<'a, 'b> {
    ctx: &'b FrameContext<'a>,
    reference: DVector<f64>,
    sections: Option<PlaneSections>,
    cache: std::cell::RefCell<std::collections::HashMap<Vec<u64>, DVector<f64>>>,
}

impl<'a, 'b> CachedFirstField<'a, 'b> {
    /// Field evaluator anchored at `anchor`; the symbolic plane sections
    /// chosen there stay valid on the surrounding bracket stencils.
    fn new(
        ctx: &'b FrameContext<'a>,
        anchor: &[f64],
        reference: DVector<f64>,
    ) -> Result<Self, GeomError> {
        Ok(CachedFirstField {
            ctx,
            reference,
            sections: ctx.plane_sections(anchor)?,
            cache: std::cell::RefCell::new(std::collections::HashMap::new()),
        })
    }

    fn value(&self, q: &[f64]) -> Result<DVector<f64>, GeomError> {
        let key: Vec<u64> = q.iter().map(|x| x.to_bits()).collect();
        if let Some(v) = self.cache.borrow().get(&key) {
            return Ok(v.clone());
        }
        let v = self
            .ctx
            .xi1_at(q, &self.reference, self.sections.as_ref())
            .map_err(flatten_frame_err)?;
        self.cache.borrow_mut().insert(key, v.clone());
        Ok(v)
    }

    /// Bracket of the field with its rotation by the structure operator,
    /// i.e. the third frame field, at `q`.
    fn bracket_with_rotated(&self, q: &[f64]) -> Result<DVector<f64>, GeomError> {
        let f1 = |r: &[f64]| -> Result<DVector<f64>, GeomError> { self.value(r) };
        let f2 = |r: &[f64]| -> Result<DVector<f64>, GeomError> {
            Ok(self.ctx.j_at(r)? * self.value(r)?)
        };
        fd_bracket(&f1, &f2, q, self.ctx.fd_step)
    }
}

/// Gram matrix of the (generally non-orthogonal) pair (w, Jw).
fn basis_coeff_matrix(w: &DVector<f64>, jw: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(
        2,
        2,
        &[w.dot(w), w.dot(jw), jw.dot(w), jw.dot(jw)],
    )
}

/// Coefficients (a, b) with v ≈ a w + b Jw, by the normal equations.
fn solve_coeffs(
    gram: &DMatrix<f64>,
    w: &DVector<f64>,
    jw: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, GeomError> {
    let rhs = DVector::from_vec(vec![w.dot(v), jw.dot(v)]);
    gram.clone().lu().solve(&rhs).ok_or(GeomError::Numeric {
        detail: "plane basis degenerate".into(),
    })
}

/// Frame errors surfacing inside numeric closures are carried through the
/// shared numeric error type.
fn flatten_frame_err(e: FrameError) -> GeomError {
    match e {
        FrameError::Geom(g) => g,
        other => GeomError::Numeric {
            detail: other.to_string(),
        },
    }
}

/// Reference tensor table of the canonical frame in frame coordinates:
/// entry `[a][b]` is the coefficient vector of the value on (field a,
/// field b). Only four independent pairs are nonzero.
pub fn canonical_frame_reference_table() -> Vec<Vec<DVector<f64>>> {
    let e = |i: usize, sign: f64| {
        let mut v = DVector::zeros(4);
        v[i] = sign;
        v
    };
    let mut t = vec![vec![DVector::zeros(4); 4]; 4];
    t[0][2] = e(0, 1.0); // value ξ₁
    t[0][3] = e(1, -1.0); // value −ξ₂
    t[1][2] = e(1, -1.0); // value −ξ₂
    t[1][3] = e(0, -1.0); // value −ξ₁
    for (a, b) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
        t[b][a] = -t[a][b].clone();
    }
    t
}

/// Convenience wrappers building a symbolic context per call.
pub fn characteristic_plane(
    j: &AlmostComplexField,
    p: &[f64],
) -> Result<PlaneAt, FrameError> {
    FrameContext::symbolic(j).characteristic_plane(p)
}

pub fn derived_flag(j: &AlmostComplexField, p: &[f64]) -> Result<FlagReport, FrameError> {
    FrameContext::symbolic(j).derived_flag(p)
}

pub fn canonical_frame(
    j: &AlmostComplexField,
    p: &[f64],
) -> Result<CanonicalFrame, FrameError> {
    FrameContext::symbolic(j).canonical_frame(p)
}

pub fn scan_singular_loci(
    j: &AlmostComplexField,
    grid: &Grid,
) -> Result<SingularScan, FrameError> {
    FrameContext::symbolic(j).scan_singular_loci(grid)
}
