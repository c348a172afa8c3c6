//! Spectral workbench for the twisted linearized deformation equation on a
//! torus bundle chart.
//!
//! The base torus is the quotient of the `φ` plane by the lattice spanned by
//! `2π` and a period `ν` with nonzero imaginary part.  A section of the
//! deformation bundle picks up a gluing factor `λ` when `φ` moves by `ν`, so
//! we work in lattice coordinates `(s, t) ∈ [0,1)²` with `φ = 2πs + νt` and
//! represent sections as twisted double Fourier series
//!
//! ```text
//! f(s, t) = e^{iθt} · Σ_{|m|≤M, |n|≤N} c_{mn} e^{2πi(ms + nt)},    θ = arg λ.
//! ```
//!
//! The prefactor absorbs the twist: `f(s+1, t) = f(s, t)` exactly and
//! `f(s, t+1) = λ f(s, t)` whenever `|λ| = 1`.  On this basis the
//! anti-holomorphic derivative acts diagonally, multiplication by a smooth
//! coefficient becomes a convolution of Fourier coefficients, and complex
//! conjugation reflects modes, so the equation
//!
//! ```text
//! f_φ̄ + a·f + b·f̄ = g
//! ```
//!
//! assembles into a real matrix acting on the interleaved real and imaginary
//! parts of the coefficients.  The module also provides the singular-value
//! kernel report, the inhomogeneous solver, a quadrature check of the energy
//! identity that underlies the rigidity of the zero section, and the residual
//! checker for the first-order integrability system satisfied by the
//! structure coefficients of a hyperbolic plane field.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::TAU;

use crate::chart::Grid;
use crate::expr::{EvalError, Expr};

/// Gluing factors must sit on the unit circle to this accuracy.
pub const UNIT_GLUING_TOL: f64 = 1e-12;
/// Relative singular-value threshold below which a mode counts as kernel.
pub const KERNEL_RATIO: f64 = 1e-8;
/// Absolute smallest-singular-value floor for the inhomogeneous solver.
pub const SOLVE_FLOOR: f64 = 1e-8;
/// Tolerance for the coefficient hypotheses of the energy identity.
pub const HYPOTHESIS_TOL: f64 = 1e-8;

const LATTICE_TOL: f64 = 1e-12;
const COMPAT_TOL: f64 = 1e-12;

/// Errors reported by the spectral workbench.
#[derive(Debug, thiserror::Error)]
pub enum TorusError {
    /// The lattice period is real, so the quotient is not a torus.
    #[error("the lattice period must have nonzero imaginary part (got {imaginary:.3e})")]
    DegenerateLattice { imaginary: f64 },
    /// The gluing factor vanishes, so the bundle identification is singular.
    #[error("the gluing factor must be nonzero")]
    ZeroGluing,
    /// Twisted Fourier series only exist for unit-modulus gluing factors; a
    /// non-unit factor would force unbounded weights and is refused.
    #[error(
        "spectral assembly needs a unit-modulus gluing factor: |lambda| = {modulus:.12} \
         admits no bounded twisted Fourier basis"
    )]
    NotUnitGluing { modulus: f64 },
    /// The assembled operator is numerically singular.
    #[error(
        "the operator is numerically singular (smallest singular value {sigma:.3e} \
         is below the 1e-8 solvability floor)"
    )]
    NearSingular { sigma: f64 },
    /// A hypothesis required by the requested identity fails.
    #[error("hypothesis check failed: {detail}")]
    Hypothesis { detail: String },
    /// The integrability system degenerates where `1 + A2` vanishes.
    #[error("the coefficient system degenerates at {point:?}: 1 + A2 vanishes there")]
    DegenerateCoefficient { point: Vec<f64> },
    /// A coefficient expression could not be evaluated.
    #[error("coefficient evaluation failed: {0}")]
    Eval(#[from] EvalError),
    /// Anything else the module cannot handle.
    #[error("{0}")]
    Unsupported(String),
}

/// Deformation problem data on the torus bundle: lattice period `ν`, gluing
/// factor `λ`, the linear coefficient `a(φ)` and conjugate-linear coefficient
/// `b(φ)` as real/imaginary expression pairs in the variables `phi1`, `phi2`,
/// and an optional right-hand side.
#[derive(Debug, Clone)]
pub struct TorusBundleSpec {
    nu: Complex64,
    lambda: Complex64,
    a: (Expr, Expr),
    b: (Expr, Expr),
    rhs: Option<(Expr, Expr)>,
}

impl TorusBundleSpec {
    /// Builds a problem description, rejecting degenerate lattices and zero
    /// gluing factors.
    pub fn new(
        nu: Complex64,
        lambda: Complex64,
        a: (Expr, Expr),
        b: (Expr, Expr),
    ) -> Result<TorusBundleSpec, TorusError> {
        if nu.im.abs() <= LATTICE_TOL {
            return Err(TorusError::DegenerateLattice { imaginary: nu.im });
        }
        if lambda.norm() <= LATTICE_TOL {
            return Err(TorusError::ZeroGluing);
        }
        Ok(TorusBundleSpec { nu, lambda, a, b, rhs: None })
    }

    /// Attaches a right-hand side `g(φ)` as a real/imaginary expression pair.
    pub fn with_rhs(mut self, re: Expr, im: Expr) -> TorusBundleSpec {
        self.rhs = Some((re, im));
        self
    }

    pub fn nu(&self) -> Complex64 {
        self.nu
    }

    pub fn lambda(&self) -> Complex64 {
        self.lambda
    }

    pub fn a(&self) -> &(Expr, Expr) {
        &self.a
    }

    pub fn b(&self) -> &(Expr, Expr) {
        &self.b
    }

    pub fn rhs(&self) -> Option<&(Expr, Expr)> {
        self.rhs.as_ref()
    }

    /// Twist angle `θ = arg λ` carried by the Fourier prefactor.
    pub fn twist_angle(&self) -> f64 {
        self.lambda.arg()
    }

    /// The same problem over the index-two cover in the fiber direction:
    /// period `2ν` and gluing factor `λ²`.  Resonant gluing factors whose
    /// square is trivial acquire their kernel only on this cover.
    pub fn doubled(&self) -> TorusBundleSpec {
        TorusBundleSpec {
            nu: 2.0 * self.nu,
            lambda: self.lambda * self.lambda,
            a: self.a.clone(),
            b: self.b.clone(),
            rhs: self.rhs.clone(),
        }
    }

    /// The holomorphic coefficient paired with `b` by `Λ = −2i·conj(b)`,
    /// returned as a real/imaginary expression pair.
    pub fn structure_coefficient(&self) -> (Expr, Expr) {
        // −2i·(b₁ − i·b₂) = −2b₂ − 2i·b₁.
        (
            Expr::scale(-2.0, self.b.1.clone()),
            Expr::scale(-2.0, self.b.0.clone()),
        )
    }
}

/// Multiplier of the anti-holomorphic derivative on the lattice mode
/// `e^{iθt} e^{2πi(ms + nt)}`:
///
/// ```text
/// ∂_φ̄  ↦  (mν − 2πn − θ) / (2·Im ν).
/// ```
pub fn cr_mode_multiplier(nu: Complex64, twist: f64, m: i64, n: i64) -> Complex64 {
    (nu * m as f64 - Complex64::new(TAU * n as f64 + twist, 0.0)) / (2.0 * nu.im)
}

/// Multiplier of the holomorphic derivative on the same mode; it is the
/// negated conjugate of [`cr_mode_multiplier`].
pub fn holomorphic_mode_multiplier(nu: Complex64, twist: f64, m: i64, n: i64) -> Complex64 {
    -cr_mode_multiplier(nu, twist, m, n).conj()
}

/// Truncated twisted Fourier section: coefficients `c_{mn}` for `|m| ≤ M`,
/// `|n| ≤ N` of `f(s,t) = e^{iθt} Σ c_{mn} e^{2πi(ms + nt)}`.
#[derive(Debug, Clone)]
pub struct TwistedSection {
    m_trunc: usize,
    n_trunc: usize,
    twist: f64,
    nu: Complex64,
    coeffs: Vec<Complex64>,
}

impl TwistedSection {
    /// The zero section at the given truncation, twist taken from `lambda`.
    pub fn zero(
        m_trunc: usize,
        n_trunc: usize,
        nu: Complex64,
        lambda: Complex64,
    ) -> Result<TwistedSection, TorusError> {
        if nu.im.abs() <= LATTICE_TOL {
            return Err(TorusError::DegenerateLattice { imaginary: nu.im });
        }
        let modulus = lambda.norm();
        if (modulus - 1.0).abs() > UNIT_GLUING_TOL {
            return Err(TorusError::NotUnitGluing { modulus });
        }
        let count = (2 * m_trunc + 1) * (2 * n_trunc + 1);
        Ok(TwistedSection {
            m_trunc,
            n_trunc,
            twist: lambda.arg(),
            nu,
            coeffs: vec![Complex64::new(0.0, 0.0); count],
        })
    }

    /// Truncation orders `(M, N)`.
    pub fn truncation(&self) -> (usize, usize) {
        (self.m_trunc, self.n_trunc)
    }

    /// Twist angle `θ` of the prefactor.
    pub fn twist(&self) -> f64 {
        self.twist
    }

    /// Lattice period.
    pub fn nu(&self) -> Complex64 {
        self.nu
    }

    /// Gluing factor `e^{iθ}` realised by the section.
    pub fn lambda(&self) -> Complex64 {
        Complex64::from_polar(1.0, self.twist)
    }

    /// Number of retained modes.
    pub fn mode_count(&self) -> usize {
        self.coeffs.len()
    }

    fn index(&self, m: i64, n: i64) -> usize {
        debug_assert!(m.unsigned_abs() as usize <= self.m_trunc);
        debug_assert!(n.unsigned_abs() as usize <= self.n_trunc);
        let row = (m + self.m_trunc as i64) as usize;
        let col = (n + self.n_trunc as i64) as usize;
        row * (2 * self.n_trunc + 1) + col
    }

    /// Coefficient of the `(m, n)` lattice mode.
    pub fn coeff(&self, m: i64, n: i64) -> Complex64 {
        self.coeffs[self.index(m, n)]
    }

    /// Overwrites the coefficient of the `(m, n)` lattice mode.
    pub fn set_coeff(&mut self, m: i64, n: i64, value: Complex64) {
        let idx = self.index(m, n);
        self.coeffs[idx] = value;
    }

    /// All coefficients in row-major `(m, n)` order.
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    fn weighted_value(
        &self,
        s: f64,
        t: f64,
        weight: &dyn Fn(i64, i64) -> Complex64,
    ) -> Complex64 {
        let mut sum = Complex64::new(0.0, 0.0);
        for m in -(self.m_trunc as i64)..=self.m_trunc as i64 {
            for n in -(self.n_trunc as i64)..=self.n_trunc as i64 {
                let c = self.coeffs[self.index(m, n)];
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                let phase = TAU * (m as f64 * s + n as f64 * t);
                sum += weight(m, n) * c * Complex64::from_polar(1.0, phase);
            }
        }
        sum * Complex64::from_polar(1.0, self.twist * t)
    }

    /// Value `f(s, t)` of the reconstructed section.
    pub fn value(&self, s: f64, t: f64) -> Complex64 {
        self.weighted_value(s, t, &|_, _| Complex64::new(1.0, 0.0))
    }

    /// Value of the anti-holomorphic derivative `f_φ̄` at `(s, t)`.
    pub fn dbar_value(&self, s: f64, t: f64) -> Complex64 {
        let (nu, twist) = (self.nu, self.twist);
        self.weighted_value(s, t, &|m, n| cr_mode_multiplier(nu, twist, m, n))
    }

    /// Value of the holomorphic derivative `f_φ` at `(s, t)`.
    pub fn dphi_value(&self, s: f64, t: f64) -> Complex64 {
        let (nu, twist) = (self.nu, self.twist);
        self.weighted_value(s, t, &|m, n| holomorphic_mode_multiplier(nu, twist, m, n))
    }

    /// Value of the mixed second derivative `f_φ̄φ` at `(s, t)`.
    pub fn dbar_dphi_value(&self, s: f64, t: f64) -> Complex64 {
        let (nu, twist) = (self.nu, self.twist);
        self.weighted_value(s, t, &|m, n| {
            cr_mode_multiplier(nu, twist, m, n) * holomorphic_mode_multiplier(nu, twist, m, n)
        })
    }

    fn as_real_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(2 * self.coeffs.len());
        for (k, c) in self.coeffs.iter().enumerate() {
            v[2 * k] = c.re;
            v[2 * k + 1] = c.im;
        }
        v
    }

    fn with_real_vector(&self, v: &DVector<f64>) -> TwistedSection {
        let mut out = self.clone();
        for (k, c) in out.coeffs.iter_mut().enumerate() {
            *c = Complex64::new(v[2 * k], v[2 * k + 1]);
        }
        out
    }
}

/// Assembled real-linear operator `f ↦ f_φ̄ + a·f + b·f̄` on interleaved
/// real/imaginary coefficient vectors.
#[derive(Debug, Clone)]
pub struct CrOperator {
    matrix: DMatrix<f64>,
    m_trunc: usize,
    n_trunc: usize,
    twist: f64,
    nu: Complex64,
}

impl CrOperator {
    /// The real matrix, of size `2(2M+1)(2N+1)` squared.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Real dimension of the coefficient space.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Truncation orders `(M, N)`.
    pub fn truncation(&self) -> (usize, usize) {
        (self.m_trunc, self.n_trunc)
    }

    /// Twist angle of the basis the operator acts on.
    pub fn twist(&self) -> f64 {
        self.twist
    }

    /// Lattice period of the basis the operator acts on.
    pub fn nu(&self) -> Complex64 {
        self.nu
    }

    /// The zero section in the operator's coefficient space.
    pub fn zero_section(&self) -> TwistedSection {
        TwistedSection {
            m_trunc: self.m_trunc,
            n_trunc: self.n_trunc,
            twist: self.twist,
            nu: self.nu,
            coeffs: vec![
                Complex64::new(0.0, 0.0);
                (2 * self.m_trunc + 1) * (2 * self.n_trunc + 1)
            ],
        }
    }

    fn check_compatible(&self, f: &TwistedSection) -> Result<(), TorusError> {
        let same_trunc = f.m_trunc == self.m_trunc && f.n_trunc == self.n_trunc;
        let same_basis = (f.twist - self.twist).abs() <= COMPAT_TOL
            && (f.nu - self.nu).norm() <= COMPAT_TOL;
        if same_trunc && same_basis {
            Ok(())
        } else {
            Err(TorusError::Unsupported(format!(
                "the section lives in a different coefficient space than the operator \
                 (truncation {:?} vs {:?}, twist {:.6} vs {:.6})",
                (f.m_trunc, f.n_trunc),
                (self.m_trunc, self.n_trunc),
                f.twist,
                self.twist,
            )))
        }
    }

    /// Applies the operator to a section of matching truncation and basis.
    pub fn apply(&self, f: &TwistedSection) -> Result<TwistedSection, TorusError> {
        self.check_compatible(f)?;
        let y = &self.matrix * f.as_real_vector();
        Ok(f.with_real_vector(&y))
    }
}

/// Evaluates a real/imaginary expression pair on the uniform lattice grid,
/// binding `phi1 = 2πs + Re(ν)t` and `phi2 = Im(ν)t`.
fn lattice_samples(
    re: &Expr,
    im: &Expr,
    nu: Complex64,
    gs: usize,
    gt: usize,
) -> Result<Vec<Complex64>, TorusError> {
    let mut out = Vec::with_capacity(gs * gt);
    for i in 0..gs {
        let s = i as f64 / gs as f64;
        for j in 0..gt {
            let t = j as f64 / gt as f64;
            let phi1 = TAU * s + nu.re * t;
            let phi2 = nu.im * t;
            let bindings = [("phi1", phi1), ("phi2", phi2)];
            out.push(Complex64::new(re.eval(&bindings)?, im.eval(&bindings)?));
        }
    }
    Ok(out)
}

/// Discrete Fourier coefficient of frequency `(j, k)` from uniform samples.
fn fourier_mode(samples: &[Complex64], gs: usize, gt: usize, j: i64, k: i64) -> Complex64 {
    let mut sum = Complex64::new(0.0, 0.0);
    for i1 in 0..gs {
        for i2 in 0..gt {
            let phase = -TAU * (j as f64 * i1 as f64 / gs as f64 + k as f64 * i2 as f64 / gt as f64);
            sum += samples[i1 * gt + i2] * Complex64::from_polar(1.0, phase);
        }
    }
    sum / (gs * gt) as f64
}

/// Fourier coefficients on the band `|j| ≤ jmax`, `|k| ≤ kmax`.
struct CoefficientBand {
    jmax: i64,
    kmax: i64,
    data: Vec<Complex64>,
}

impl CoefficientBand {
    fn compute(samples: &[Complex64], gs: usize, gt: usize, jmax: i64, kmax: i64) -> CoefficientBand {
        let mut data = Vec::with_capacity(((2 * jmax + 1) * (2 * kmax + 1)) as usize);
        for j in -jmax..=jmax {
            for k in -kmax..=kmax {
                data.push(fourier_mode(samples, gs, gt, j, k));
            }
        }
        CoefficientBand { jmax, kmax, data }
    }

    fn get(&self, j: i64, k: i64) -> Complex64 {
        debug_assert!(j.abs() <= self.jmax && k.abs() <= self.kmax);
        let row = (j + self.jmax) as usize;
        let col = (k + self.kmax) as usize;
        self.data[row * (2 * self.kmax + 1) as usize + col]
    }
}

fn add_linear_block(matrix: &mut DMatrix<f64>, row: usize, col: usize, z: Complex64) {
    // Complex multiplication c ↦ z·c on interleaved (Re, Im).
    matrix[(2 * row, 2 * col)] += z.re;
    matrix[(2 * row, 2 * col + 1)] += -z.im;
    matrix[(2 * row + 1, 2 * col)] += z.im;
    matrix[(2 * row + 1, 2 * col + 1)] += z.re;
}

fn add_antilinear_block(matrix: &mut DMatrix<f64>, row: usize, col: usize, w: Complex64) {
    // Conjugate-linear action c ↦ w·conj(c) on interleaved (Re, Im).
    matrix[(2 * row, 2 * col)] += w.re;
    matrix[(2 * row, 2 * col + 1)] += w.im;
    matrix[(2 * row + 1, 2 * col)] += w.im;
    matrix[(2 * row + 1, 2 * col + 1)] += -w.re;
}

/// Assembles the real-linear spectral matrix of `f ↦ f_φ̄ + a·f + b·f̄` at
/// truncation `(M, N)`.
///
/// The anti-holomorphic derivative is diagonal with the lattice multiplier of
/// [`cr_mode_multiplier`].  Multiplication by `a` convolves coefficients with
/// the Fourier modes of `a`.  The conjugate-linear term reflects modes:
/// writing `W = b·e^{−2iθt}`, mode `(p, q)` feeds `conj(c_{pq})` into mode
/// `(m, n)` with weight `Ŵ_{m+p, n+q}`, which for trivial twist couples
/// `(m, n)` with `(−m, −n)`.  Coefficient transforms are taken on a uniform
/// grid of at least `4M × 4N` points so that products of retained modes are
/// read off without aliasing.
pub fn assemble_cr_operator(
    spec: &TorusBundleSpec,
    m_trunc: usize,
    n_trunc: usize,
) -> Result<CrOperator, TorusError> {
    let modulus = spec.lambda.norm();
    if (modulus - 1.0).abs() > UNIT_GLUING_TOL {
        return Err(TorusError::NotUnitGluing { modulus });
    }
    if spec.nu.im.abs() <= LATTICE_TOL {
        return Err(TorusError::DegenerateLattice { imaginary: spec.nu.im });
    }
    let twist = spec.lambda.arg();
    let nu = spec.nu;
    let mm = m_trunc as i64;
    let nn = n_trunc as i64;
    let modes = ((2 * mm + 1) * (2 * nn + 1)) as usize;
    let mut matrix = DMatrix::<f64>::zeros(2 * modes, 2 * modes);

    let mode_index = |m: i64, n: i64| -> usize {
        ((m + mm) * (2 * nn + 1) + (n + nn)) as usize
    };

    // Diagonal derivative term.
    for m in -mm..=mm {
        for n in -nn..=nn {
            let idx = mode_index(m, n);
            add_linear_block(&mut matrix, idx, idx, cr_mode_multiplier(nu, twist, m, n));
        }
    }

    let gs = (4 * m_trunc).max(4);
    let gt = (4 * n_trunc).max(4);

    // Linear coefficient: convolution with the modes of a.
    if !(spec.a.0.is_zero() && spec.a.1.is_zero()) {
        let samples = lattice_samples(&spec.a.0, &spec.a.1, nu, gs, gt)?;
        let band = CoefficientBand::compute(&samples, gs, gt, 2 * mm, 2 * nn);
        for m in -mm..=mm {
            for n in -nn..=nn {
                let row = mode_index(m, n);
                for p in -mm..=mm {
                    for q in -nn..=nn {
                        let z = band.get(m - p, n - q);
                        if z.norm_sqr() > 0.0 {
                            add_linear_block(&mut matrix, row, mode_index(p, q), z);
                        }
                    }
                }
            }
        }
    }

    // Conjugate-linear coefficient: reflection weights from W = b·e^{−2iθt}.
    if !(spec.b.0.is_zero() && spec.b.1.is_zero()) {
        let mut samples = lattice_samples(&spec.b.0, &spec.b.1, nu, gs, gt)?;
        for i1 in 0..gs {
            for i2 in 0..gt {
                let t = i2 as f64 / gt as f64;
                samples[i1 * gt + i2] *= Complex64::from_polar(1.0, -2.0 * twist * t);
            }
        }
        let band = CoefficientBand::compute(&samples, gs, gt, 2 * mm, 2 * nn);
        for m in -mm..=mm {
            for n in -nn..=nn {
                let row = mode_index(m, n);
                for p in -mm..=mm {
                    for q in -nn..=nn {
                        let w = band.get(m + p, n + q);
                        if w.norm_sqr() > 0.0 {
                            add_antilinear_block(&mut matrix, row, mode_index(p, q), w);
                        }
                    }
                }
            }
        }
    }

    Ok(CrOperator { matrix, m_trunc, n_trunc, twist, nu })
}

/// Singular-value summary of an assembled operator.
#[derive(Debug, Clone)]
pub struct KernelReport {
    /// Number of singular values below `1e-8` times the largest.
    pub kernel_dimension: usize,
    /// Up to five smallest singular values, ascending.
    pub smallest: Vec<f64>,
    /// Largest singular value.
    pub largest: f64,
}

/// Estimates the kernel of the assembled operator by dense SVD.
pub fn kernel_analysis(op: &CrOperator) -> KernelReport {
    let svd = op.matrix.clone().svd(false, false);
    let mut sigmas: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigmas.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let largest = sigmas.last().copied().unwrap_or(0.0);
    let kernel_dimension = if largest <= f64::MIN_POSITIVE {
        sigmas.len()
    } else {
        sigmas.iter().filter(|&&s| s < KERNEL_RATIO * largest).count()
    };
    let smallest: Vec<f64> = sigmas.iter().take(5).copied().collect();
    KernelReport { kernel_dimension, smallest, largest }
}

/// Solves `L f = g` for an operator with trivial kernel.  Refuses with
/// [`TorusError::NearSingular`] when the smallest singular value drops below
/// the `1e-8` floor.
pub fn solve_inhomogeneous(
    op: &CrOperator,
    g: &TwistedSection,
) -> Result<TwistedSection, TorusError> {
    op.check_compatible(g)?;
    let svd = op.matrix.clone().svd(true, true);
    let sigma = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if sigma.is_nan() || sigma < SOLVE_FLOOR {
        return Err(TorusError::NearSingular { sigma });
    }
    let solution = svd
        .solve(&g.as_real_vector(), 0.0)
        .map_err(|e| TorusError::Unsupported(format!("dense solve failed: {e}")))?;
    Ok(g.with_real_vector(&solution))
}

/// The two quadratures certifying the energy identity.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    /// Modulus of the fundamental-domain quadrature of `∂_φ(f_φ̄ · conj f)`;
    /// vanishes for every twisted section with unit-modulus gluing.
    pub derivative_residual: f64,
    /// Quadrature of `|b|²|f|² + |f_φ̄|²`; for a kernel section this is the
    /// energy that forces `f = 0` whenever `b` is nonzero.
    pub energy_value: f64,
}

/// [`energy_identity_residual`] with an explicit quadrature resolution.
pub fn energy_identity_residual_with_resolution(
    f: &TwistedSection,
    spec: &TorusBundleSpec,
    resolution: usize,
) -> Result<EnergyReport, TorusError> {
    let modulus = spec.lambda.norm();
    if (modulus - 1.0).abs() > UNIT_GLUING_TOL {
        return Err(TorusError::NotUnitGluing { modulus });
    }
    if (f.twist - spec.lambda.arg()).abs() > 1e-9 || (f.nu - spec.nu).norm() > 1e-9 {
        return Err(TorusError::Unsupported(
            "the section's twist or period does not match the problem data".into(),
        ));
    }
    if resolution < 2 {
        return Err(TorusError::Unsupported(
            "the quadrature needs at least a 2x2 grid".into(),
        ));
    }

    // Hypothesis: the conjugate-linear coefficient must be annihilated by the
    // holomorphic derivative, b_φ = ½(∂_{φ₁} − i∂_{φ₂}) b = 0.
    let b_re = &spec.b.0;
    let b_im = &spec.b.1;
    let d1_re = b_re.differentiate("phi1");
    let d2_re = b_re.differentiate("phi2");
    let d1_im = b_im.differentiate("phi1");
    let d2_im = b_im.differentiate("phi2");

    let nu = spec.nu;
    let res = resolution;
    let cell = (TAU * nu.im).abs() / (res * res) as f64;

    let mut worst_hypothesis = 0.0f64;
    let mut derivative_sum = Complex64::new(0.0, 0.0);
    let mut energy_sum = 0.0f64;
    for i in 0..res {
        let s = i as f64 / res as f64;
        for j in 0..res {
            let t = j as f64 / res as f64;
            let phi1 = TAU * s + nu.re * t;
            let phi2 = nu.im * t;
            let bindings = [("phi1", phi1), ("phi2", phi2)];
            let b_phi = Complex64::new(
                0.5 * (d1_re.eval(&bindings)? + d2_im.eval(&bindings)?),
                0.5 * (d1_im.eval(&bindings)? - d2_re.eval(&bindings)?),
            );
            worst_hypothesis = worst_hypothesis.max(b_phi.norm());

            let value = f.value(s, t);
            let dbar = f.dbar_value(s, t);
            let mixed = f.dbar_dphi_value(s, t);
            derivative_sum += mixed * value.conj() + Complex64::new(dbar.norm_sqr(), 0.0);

            let b = Complex64::new(b_re.eval(&bindings)?, b_im.eval(&bindings)?);
            energy_sum += b.norm_sqr() * value.norm_sqr() + dbar.norm_sqr();
        }
    }

    if worst_hypothesis > HYPOTHESIS_TOL {
        return Err(TorusError::Hypothesis {
            detail: format!(
                "the conjugate-linear coefficient is not annihilated by the holomorphic \
                 derivative (max |b_phi| = {worst_hypothesis:.3e})"
            ),
        });
    }

    Ok(EnergyReport {
        derivative_residual: (derivative_sum * cell).norm(),
        energy_value: energy_sum * cell,
    })
}

/// Quadrature check of the energy identity for a twisted section: the total
/// `φ`-derivative of `f_φ̄·conj(f)` integrates to zero over the fundamental
/// domain, and the accompanying energy `∫ |b|²|f|² + |f_φ̄|²` is reported.
/// Requires a unit-modulus gluing factor and an anti-holomorphic `b`.
pub fn energy_identity_residual(
    f: &TwistedSection,
    spec: &TorusBundleSpec,
) -> Result<EnergyReport, TorusError> {
    let (m_trunc, n_trunc) = f.truncation();
    let resolution = (4 * m_trunc + 1).max(4 * n_trunc + 1).max(32);
    energy_identity_residual_with_resolution(f, spec, resolution)
}

/// Maximum residual of the first-order system tying together the structure
/// coefficients `A1(x, y)`, `A2(x, y)` of an integrable hyperbolic plane
/// field:
///
/// ```text
/// ∂_y A1 − A1·∂_x A1 + ((1 + A1²)/(1 + A2))·∂_x A2 = 0,
/// ∂_y A2 − (1 + A2)·∂_x A1 + A1·∂_x A2 = 0.
/// ```
///
/// Evaluated over the supplied two-dimensional grid; refuses where `1 + A2`
/// vanishes.
pub fn integrability_residual(a1: &Expr, a2: &Expr, grid: &Grid) -> Result<f64, TorusError> {
    if grid.lo.len() != 2 {
        return Err(TorusError::Unsupported(format!(
            "the integrability system lives on a 2-dimensional (x, y) grid, got dimension {}",
            grid.lo.len()
        )));
    }
    let a1x = a1.differentiate("x");
    let a1y = a1.differentiate("y");
    let a2x = a2.differentiate("x");
    let a2y = a2.differentiate("y");

    let mut worst = 0.0f64;
    for point in grid.points() {
        let bindings = [("x", point[0]), ("y", point[1])];
        let v1 = a1.eval(&bindings)?;
        let v2 = a2.eval(&bindings)?;
        let denom = 1.0 + v2;
        if denom.abs() <= 1e-12 {
            return Err(TorusError::DegenerateCoefficient { point });
        }
        let d1x = a1x.eval(&bindings)?;
        let d1y = a1y.eval(&bindings)?;
        let d2x = a2x.eval(&bindings)?;
        let d2y = a2y.eval(&bindings)?;
        let first = d1y - v1 * d1x + (1.0 + v1 * v1) / denom * d2x;
        let second = d2y - denom * d1x + v1 * d2x;
        worst = worst.max(first.abs()).max(second.abs());
    }
    Ok(worst)
}

/// Projects a smooth right-hand side `g(φ)`, given as a real/imaginary
/// expression pair in `phi1`, `phi2`, onto the twisted coefficient basis at
/// truncation `(M, N)`.
pub fn section_from_exprs(
    spec: &TorusBundleSpec,
    m_trunc: usize,
    n_trunc: usize,
    re: &Expr,
    im: &Expr,
) -> Result<TwistedSection, TorusError> {
    let modulus = spec.lambda.norm();
    if (modulus - 1.0).abs() > UNIT_GLUING_TOL {
        return Err(TorusError::NotUnitGluing { modulus });
    }
    let twist = spec.lambda.arg();
    let gs = (4 * m_trunc).max(4);
    let gt = (4 * n_trunc).max(4);
    let mut samples = lattice_samples(re, im, spec.nu, gs, gt)?;
    // Remove the twist prefactor before reading off plain lattice modes.
    for i1 in 0..gs {
        for i2 in 0..gt {
            let t = i2 as f64 / gt as f64;
            samples[i1 * gt + i2] *= Complex64::from_polar(1.0, -twist * t);
        }
    }
    let mut section = TwistedSection::zero(m_trunc, n_trunc, spec.nu, spec.lambda)?;
    for m in -(m_trunc as i64)..=m_trunc as i64 {
        for n in -(n_trunc as i64)..=n_trunc as i64 {
            section.set_coeff(m, n, fourier_mode(&samples, gs, gt, m, n));
        }
    }
    Ok(section)
}
