//! Symbolic tensor calculus on a chart: expression-valued matrices, vector
//! fields, Lie brackets, almost complex structures and their Nijenhuis
//! tensors, and singular value based image extraction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chart::Chart;
use crate::expr::{EvalError, Expr};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeomError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("almost complex structures need even dimension, chart has {0}")]
    OddDimension(usize),
    #[error("J*J differs from -identity at {point:?}: residual {residual:.3e} exceeds {tol:.3e}")]
    NotAlmostComplex {
        point: Vec<f64>,
        residual: f64,
        tol: f64,
    },
    #[error("numeric degeneracy: {detail}")]
    Numeric { detail: String },
}

/// Dense matrix of expressions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Expr>,
}

impl ExprMatrix {
    pub fn zeros(rows: usize, cols: usize) -> ExprMatrix {
        ExprMatrix {
            rows,
            cols,
            data: vec![Expr::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> ExprMatrix {
        let mut m = ExprMatrix::zeros(n, n);
        for i in 0..n {
            *m.get_mut(i, i) = Expr::one();
        }
        m
    }

    /// Rows given as vectors of entries.
    pub fn from_rows(rows: Vec<Vec<Expr>>) -> ExprMatrix {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        ExprMatrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Columns given as vectors of entries; convenient when a structure is
    /// described by the images of the coordinate frame.
    pub fn from_columns(cols: Vec<Vec<Expr>>) -> ExprMatrix {
        let c = cols.len();
        let r = cols.first().map_or(0, |col| col.len());
        assert!(cols.iter().all(|col| col.len() == r), "ragged columns");
        let mut m = ExprMatrix::zeros(r, c);
        for (j, col) in cols.into_iter().enumerate() {
            for (i, e) in col.into_iter().enumerate() {
                *m.get_mut(i, j) = e;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Expr {
        &self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Expr {
        &mut self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<Expr> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    pub fn map(&self, f: impl Fn(&Expr) -> Expr) -> ExprMatrix {
        ExprMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn add(&self, other: &ExprMatrix) -> ExprMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ExprMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| Expr::add(a.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn sub(&self, other: &ExprMatrix) -> ExprMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ExprMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| Expr::sub(a.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn neg(&self) -> ExprMatrix {
        self.map(|e| Expr::neg(e.clone()))
    }

    pub fn scale(&self, factor: &Expr) -> ExprMatrix {
        self.map(|e| Expr::mul(factor.clone(), e.clone()))
    }

    pub fn matmul(&self, other: &ExprMatrix) -> ExprMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = ExprMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Expr::zero();
                for k in 0..self.cols {
                    acc = Expr::add(
                        acc,
                        Expr::mul(self.get(i, k).clone(), other.get(k, j).clone()),
                    );
                }
                *out.get_mut(i, j) = acc;
            }
        }
        out
    }

    pub fn apply_vec(&self, v: &[Expr]) -> Vec<Expr> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                let mut acc = Expr::zero();
                for j in 0..self.cols {
                    acc = Expr::add(acc, Expr::mul(self.get(i, j).clone(), v[j].clone()));
                }
                acc
            })
            .collect()
    }

    pub fn differentiate(&self, var: &str) -> ExprMatrix {
        self.map(|e| e.differentiate(var))
    }

    pub fn substitute(&self, map: &[(&str, Expr)]) -> ExprMatrix {
        self.map(|e| e.substitute(map))
    }

    pub fn eval_at(&self, chart: &Chart, point: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let bindings = chart.bindings(point);
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self.get(i, j).eval(&bindings)?;
            }
        }
        Ok(out)
    }
}

/// Vector field with symbolic components in chart order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub components: Vec<Expr>,
}

impl VectorField {
    pub fn new(components: Vec<Expr>) -> VectorField {
        VectorField { components }
    }

    pub fn zero(dim: usize) -> VectorField {
        VectorField {
            components: vec![Expr::zero(); dim],
        }
    }

    /// The coordinate field `∂_i`.
    pub fn coordinate(dim: usize, i: usize) -> VectorField {
        let mut components = vec![Expr::zero(); dim];
        components[i] = Expr::one();
        VectorField { components }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval_at(&self, chart: &Chart, point: &[f64]) -> Result<DVector<f64>, EvalError> {
        let bindings = chart.bindings(point);
        let mut out = DVector::zeros(self.dim());
        for (i, c) in self.components.iter().enumerate() {
            out[i] = c.eval(&bindings)?;
        }
        Ok(out)
    }

    pub fn add(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| Expr::add(a.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| Expr::sub(a.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn scale(&self, factor: &Expr) -> VectorField {
        VectorField {
            components: self
                .components
                .iter()
                .map(|c| Expr::mul(factor.clone(), c.clone()))
                .collect(),
        }
    }

    pub fn from_numeric(v: &DVector<f64>) -> VectorField {
        VectorField {
            components: v.iter().map(|x| Expr::num(*x)).collect(),
        }
    }
}

/// Commutator of vector fields: `[X,Y]^k = X^l ∂_l Y^k − Y^l ∂_l X^k`.
pub fn lie_bracket(chart: &Chart, x: &VectorField, y: &VectorField) -> VectorField {
    let dim = chart.dim();
    assert_eq!(x.dim(), dim);
    assert_eq!(y.dim(), dim);
    let names = chart.names();
    let mut components = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut acc = Expr::zero();
        for (l, name) in names.iter().enumerate() {
            acc = Expr::add(
                acc,
                Expr::mul(x.components[l].clone(), y.components[k].differentiate(name)),
            );
            acc = Expr::sub(
                acc,
                Expr::mul(y.components[l].clone(), x.components[k].differentiate(name)),
            );
        }
        components.push(acc);
    }
    VectorField { components }
}

/// Almost complex structure: `j.get(i, k)` is the coefficient of `∂_i` in
/// `J ∂_k`, so columns of the matrix are the images of the coordinate frame.
#[derive(Debug, Clone)]
pub struct AlmostComplexField {
    chart: Chart,
    j: ExprMatrix,
}

impl AlmostComplexField {
    pub fn new(chart: Chart, j: ExprMatrix) -> Result<AlmostComplexField, GeomError> {
        let dim = chart.dim();
        if dim % 2 != 0 {
            return Err(GeomError::OddDimension(dim));
        }
        if j.nrows() != dim || j.ncols() != dim {
            return Err(GeomError::Dimension {
                expected: dim,
                got: j.nrows().max(j.ncols()),
            });
        }
        Ok(AlmostComplexField { chart, j })
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn matrix(&self) -> &ExprMatrix {
        &self.j
    }

    pub fn matrix_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        Ok(self.j.eval_at(&self.chart, point)?)
    }

    /// `J v` as a symbolic field.
    pub fn apply(&self, v: &VectorField) -> VectorField {
        VectorField {
            components: self.j.apply_vec(&v.components),
        }
    }

    /// Max-norm of `J^2 + I` at a point.
    pub fn square_residual_at(&self, point: &[f64]) -> Result<f64, GeomError> {
        let j = self.matrix_at(point)?;
        let dim = self.dim();
        let res = &j * &j + DMatrix::<f64>::identity(dim, dim);
        Ok(res.amax())
    }

    /// Largest `J^2 + I` residual over the sample points; errors out when the
    /// worst offender exceeds the tolerance.
    pub fn check_square(&self, points: &[Vec<f64>], tol: f64) -> Result<f64, GeomError> {
        let mut worst = 0.0_f64;
        let mut worst_point = None;
        for p in points {
            let r = self.square_residual_at(p)?;
            if r > worst {
                worst = r;
                worst_point = Some(p.clone());
            }
        }
        if worst > tol {
            return Err(GeomError::NotAlmostComplex {
                point: worst_point.unwrap_or_default(),
                residual: worst,
                tol,
            });
        }
        Ok(worst)
    }

    /// Full symbolic Nijenhuis tensor. Components satisfy
    /// `N(X,Y)^k = N^k_{ij} X^i Y^j` with `N^k_{ij}` antisymmetric in `i, j`.
    pub fn nijenhuis(&self) -> TensorField21 {
        let dim = self.dim();
        let names = self.chart.names();
        // partials[l] holds the entrywise derivative of J along coordinate l
        let partials: Vec<ExprMatrix> =
            names.iter().map(|n| self.j.differentiate(n)).collect();
        let mut comp = Vec::with_capacity(dim);
        for k in 0..dim {
            let mut mk = ExprMatrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    if i == j {
                        continue;
                    }
                    let mut acc = Expr::zero();
                    for l in 0..dim {
                        acc = Expr::add(
                            acc,
                            Expr::mul(
                                self.j.get(l, i).clone(),
                                partials[l].get(k, j).clone(),
                            ),
                        );
                        acc = Expr::sub(
                            acc,
                            Expr::mul(
                                self.j.get(l, j).clone(),
                                partials[l].get(k, i).clone(),
                            ),
                        );
                        acc = Expr::sub(
                            acc,
                            Expr::mul(
                                self.j.get(k, l).clone(),
                                partials[i].get(l, j).clone(),
                            ),
                        );
                        acc = Expr::add(
                            acc,
                            Expr::mul(
                                self.j.get(k, l).clone(),
                                partials[j].get(l, i).clone(),
                            ),
                        );
                    }
                    *mk.get_mut(i, j) = acc;
                }
            }
            comp.push(mk);
        }
        TensorField21 {
            chart: self.chart.clone(),
            comp,
            antisymmetric: true,
        }
    }
}

/// Unordered index pairs `(i, j)` with `i < j`, lexicographic.
pub fn index_pairs(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..dim {
        for j in (i + 1)..dim {
            out.push((i, j));
        }
    }
    out
}

/// A twice-covariant, once-contravariant tensor field with symbolic
/// components `comp[k].get(i, j) = T^k_{ij}`; the value on vectors is
/// `T(X,Y)^k = T^k_{ij} X^i Y^j`. Used for the Nijenhuis tensor and for
/// connection torsion, both of which are antisymmetric in the lower
/// indices.
#[derive(Debug, Clone)]
pub struct TensorField21 {
    chart: Chart,
    comp: Vec<ExprMatrix>,
    antisymmetric: bool,
}

impl TensorField21 {
    /// Wrap explicit components. `comp[k]` holds the `dim × dim` matrix of
    /// `T^k_{ij}` over lower indices `(i, j)`.
    pub fn new(
        chart: Chart,
        comp: Vec<ExprMatrix>,
        antisymmetric: bool,
    ) -> Result<Self, GeomError> {
        let dim = chart.dim();
        if comp.len() != dim || comp.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(GeomError::Dimension {
                expected: dim,
                got: comp.len(),
            });
        }
        Ok(TensorField21 {
            chart,
            comp,
            antisymmetric,
        })
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    pub fn is_antisymmetric(&self) -> bool {
        self.antisymmetric
    }

    pub fn component(&self, k: usize, i: usize, j: usize) -> &Expr {
        self.comp[k].get(i, j)
    }

    /// Symbolic `T(∂_i, ∂_j)`.
    pub fn pair_field(&self, i: usize, j: usize) -> VectorField {
        VectorField {
            components: (0..self.dim())
                .map(|k| self.comp[k].get(i, j).clone())
                .collect(),
        }
    }

    /// Numeric `T(ξ, η)` at a point for arbitrary vectors.
    pub fn apply_at(
        &self,
        point: &[f64],
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>, GeomError> {
        let dim = self.dim();
        let bindings = self.chart.bindings(point);
        let mut out = DVector::zeros(dim);
        for k in 0..dim {
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    if i == j {
                        continue;
                    }
                    let c = self.comp[k].get(i, j);
                    if c.is_zero() {
                        continue;
                    }
                    acc += c.eval(&bindings)? * xi[i] * eta[j];
                }
            }
            out[k] = acc;
        }
        Ok(out)
    }

    /// Values `T(∂_i, ∂_j)` for `i < j` as columns of a `dim × #pairs`
    /// matrix, pairs in lexicographic order.
    pub fn pair_matrix_at(&self, point: &[f64]) -> Result<DMatrix<f64>, GeomError> {
        let dim = self.dim();
        let pairs = index_pairs(dim);
        let bindings = self.chart.bindings(point);
        let mut out = DMatrix::zeros(dim, pairs.len());
        for (col, (i, j)) in pairs.iter().enumerate() {
            for k in 0..dim {
                out[(k, col)] = self.comp[k].get(*i, *j).eval(&bindings)?;
            }
        }
        Ok(out)
    }

    /// Orthonormal basis of the pointwise image over all coordinate pairs.
    pub fn image_at(
        &self,
        point: &[f64],
        rel_threshold: f64,
    ) -> Result<ImageBasis, GeomError> {
        Ok(column_image(&self.pair_matrix_at(point)?, rel_threshold))
    }
}

/// Column span of a numeric matrix, from its SVD.
#[derive(Debug, Clone)]
pub struct ImageBasis {
    /// Orthonormal basis of the column span, one column per retained
    /// singular direction.
    pub basis: DMatrix<f64>,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
}

impl ImageBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Residual of a vector against the span (norm of its orthogonal part).
    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        let mut rest = v.clone();
        for c in 0..self.basis.ncols() {
            let col = self.basis.column(c);
            let coeff = col.dot(v);
            rest -= coeff * DVector::from_column_slice(col.as_slice());
        }
        rest.norm()
    }

    /// Orthogonal projection of a vector onto the span.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for c in 0..self.basis.ncols() {
            let col = self.basis.column(c);
            let coeff = col.dot(v);
            out += coeff * DVector::from_column_slice(col.as_slice());
        }
        out
    }
}

/// Singular directions with `σ > rel_threshold · σ_max` span the image.
pub fn column_image(m: &DMatrix<f64>, rel_threshold: f64) -> ImageBasis {
    let svd = m.clone().svd(true, false);
    let mut singulars: Vec<f64> = svd.singular_values.iter().copied().collect();
    singulars.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma_max = singulars.first().copied().unwrap_or(0.0);
    let cutoff = rel_threshold * sigma_max;
    let u = svd.u.expect("left singular vectors requested");
    // svd.u columns are ordered to match svd.singular_values
    let mut cols: Vec<usize> = Vec::new();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| {
        svd.singular_values[*b]
            .partial_cmp(&svd.singular_values[*a])
            .unwrap()
    });
    for idx in order {
        if sigma_max > 0.0 && svd.singular_values[idx] > cutoff {
            cols.push(idx);
        }
    }
    let mut basis = DMatrix::zeros(m.nrows(), cols.len());
    for (out_c, src_c) in cols.iter().enumerate() {
        basis.set_column(out_c, &u.column(*src_c));
    }
    ImageBasis {
        basis,
        singular_values: singulars,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn e(text: &str) -> Expr {
        parse(text).unwrap()
    }

    fn standard_j4() -> (Chart, AlmostComplexField) {
        let chart = Chart::new(&["x1", "y1", "x2", "y2"]).unwrap();
        let j = ExprMatrix::from_columns(vec![
            vec![e("0"), e("1"), e("0"), e("0")],
            vec![e("-1"), e("0"), e("0"), e("0")],
            vec![e("0"), e("0"), e("0"), e("1")],
            vec![e("0"), e("0"), e("-1"), e("0")],
        ]);
        let acx = AlmostComplexField::new(chart.clone(), j).unwrap();
        (chart, acx)
    }

    #[test]
    fn bracket_hand_case() {
        let chart = Chart::new(&["x", "y"]).unwrap();
        let x = VectorField::new(vec![e("0"), e("x")]);
        let y = VectorField::new(vec![e("1"), e("0")]);
        let b = lie_bracket(&chart, &x, &y);
        assert_eq!(b.components, vec![e("0"), e("-1")]);
    }

    #[test]
    fn bracket_antisymmetry_numeric() {
        let chart = Chart::new(&["x", "y", "z"]).unwrap();
        let a = VectorField::new(vec![e("x*y"), e("sin(z)"), e("1")]);
        let b = VectorField::new(vec![e("y^2"), e("x"), e("z*x")]);
        let ab = lie_bracket(&chart, &a, &b);
        let ba = lie_bracket(&chart, &b, &a);
        let p = [0.3, -0.7, 1.1];
        let va = ab.eval_at(&chart, &p).unwrap();
        let vb = ba.eval_at(&chart, &p).unwrap();
        assert!((va + vb).norm() < 1e-13);
    }

    #[test]
    fn standard_structure_is_integrable() {
        let (chart, acx) = standard_j4();
        assert!(acx.square_residual_at(&[0.1, 0.2, 0.3, 0.4]).unwrap() < 1e-15);
        let n = acx.nijenhuis();
        for k in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!(n.component(k, i, j).is_zero());
                }
            }
        }
        let img = n.image_at(&[0.0; 4], 1e-8).unwrap();
        assert_eq!(img.rank(), 0);
        let _ = chart;
    }

    #[test]
    fn nijenhuis_antisymmetric_components() {
        // a deliberately non-integrable structure
        let chart = Chart::new(&["x1", "y1", "x2", "y2"]).unwrap();
        let j = ExprMatrix::from_columns(vec![
            vec![e("0"), e("1"), e("0"), e("0")],
            vec![e("-1"), e("0"), e("0"), e("0")],
            vec![e("x1"), e("0"), e("0"), e("1")],
            vec![e("0"), e("-x1"), e("-1"), e("0")],
        ]);
        let acx = AlmostComplexField::new(chart, j).unwrap();
        let n = acx.nijenhuis();
        let p = [0.7, 0.3, 0.2, -0.4];
        for k in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    let a = acx.chart().eval(n.component(k, i, j), &p).unwrap();
                    let b = acx.chart().eval(n.component(k, j, i), &p).unwrap();
                    assert!((a + b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn image_basis_rank_and_residuals() {
        let m = DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1e-12, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, 0.0, 3.0, 0.0]),
        ]);
        let img = column_image(&m, 1e-8);
        assert_eq!(img.rank(), 2);
        let inside = DVector::from_vec(vec![2.0, 0.0, -1.0, 0.0]);
        assert!(img.residual(&inside) < 1e-9);
        let outside = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        assert!((img.residual(&outside) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expr_matrix_algebra() {
        let a = ExprMatrix::from_rows(vec![
            vec![e("1"), e("x")],
            vec![e("0"), e("2")],
        ]);
        let b = ExprMatrix::from_rows(vec![
            vec![e("y"), e("0")],
            vec![e("1"), e("1")],
        ]);
        let prod = a.matmul(&b);
        let chart = Chart::new(&["x", "y"]).unwrap();
        let at = prod.eval_at(&chart, &[2.0, 3.0]).unwrap();
        // [[y + x, x], [2, 2]] at (2, 3)
        assert_eq!(at[(0, 0)], 5.0);
        assert_eq!(at[(0, 1)], 2.0);
        assert_eq!(at[(1, 0)], 2.0);
        assert_eq!(at[(1, 1)], 2.0);
    }
}
