//! Coordinate charts: named coordinates, optional periodicity, and
//! rectangular sample grids.

use thiserror::Error;

use crate::expr::Expr;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChartError {
    #[error("chart dimension {0} outside the supported range 2..=4")]
    BadDimension(usize),
    #[error("coordinate name `{0}` is not a valid identifier")]
    BadName(String),
    #[error("duplicate coordinate name `{0}`")]
    DuplicateName(String),
    #[error("period for `{name}` must be positive, got {period}")]
    BadPeriod { name: String, period: f64 },
    #[error("expected {expected} coordinates, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("unknown coordinate `{0}`")]
    UnknownCoordinate(String),
}

/// A coordinate chart on an open set, dimension 2 to 4. Periodic coordinates
/// carry their period so torus examples can wrap scans and windings.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    names: Vec<String>,
    periods: Vec<Option<f64>>,
}

fn valid_ident(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Chart {
    pub fn new(names: &[&str]) -> Result<Chart, ChartError> {
        Chart::with_periods(names, &vec![None; names.len()])
    }

    pub fn with_periods(names: &[&str], periods: &[Option<f64>]) -> Result<Chart, ChartError> {
        if !(2..=4).contains(&names.len()) {
            return Err(ChartError::BadDimension(names.len()));
        }
        if periods.len() != names.len() {
            return Err(ChartError::WrongLength {
                expected: names.len(),
                got: periods.len(),
            });
        }
        let mut seen: Vec<&str> = Vec::new();
        for name in names {
            if !valid_ident(name) {
                return Err(ChartError::BadName(name.to_string()));
            }
            if seen.contains(name) {
                return Err(ChartError::DuplicateName(name.to_string()));
            }
            seen.push(name);
        }
        for (name, period) in names.iter().zip(periods) {
            if let Some(p) = period {
                if !(p.is_finite() && *p > 0.0) {
                    return Err(ChartError::BadPeriod {
                        name: name.to_string(),
                        period: *p,
                    });
                }
            }
        }
        Ok(Chart {
            names: names.iter().map(|s| s.to_string()).collect(),
            periods: periods.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.names.iter().map(|s| s.as_str()).collect()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn period(&self, i: usize) -> Option<f64> {
        self.periods[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize, ChartError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ChartError::UnknownCoordinate(name.to_string()))
    }

    /// Pair coordinates with values for expression evaluation.
    pub fn bindings<'a>(&'a self, point: &[f64]) -> Vec<(&'a str, f64)> {
        assert_eq!(point.len(), self.dim(), "point/chart dimension mismatch");
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(point.iter().copied())
            .collect()
    }

    /// Evaluate an expression at a chart point.
    pub fn eval(&self, e: &Expr, point: &[f64]) -> Result<f64, crate::expr::EvalError> {
        e.eval(&self.bindings(point))
    }

    /// Coordinate variables as expressions, in chart order.
    pub fn coordinate_exprs(&self) -> Vec<Expr> {
        self.names.iter().map(|n| Expr::var(n)).collect()
    }
}

/// A rectangular sampling grid: `samples` points per axis, endpoints
/// included (periodic axes stop one step short of the period wrap).
#[derive(Debug, Clone)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: usize,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, samples: usize) -> Result<Grid, ChartError> {
        if lo.len() != hi.len() {
            return Err(ChartError::WrongLength {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        Ok(Grid { lo, hi, samples: samples.max(1) })
    }

    /// Cube of side 2`half` centred at `point`.
    pub fn around(point: &[f64], half: f64, samples: usize) -> Grid {
        Grid {
            lo: point.iter().map(|v| v - half).collect(),
            hi: point.iter().map(|v| v + half).collect(),
            samples,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// All grid points in row-major order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let n = self.samples;
        let total = n.pow(dim as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut idx = flat;
            let mut point = vec![0.0; dim];
            for (a, slot) in point.iter_mut().enumerate() {
                let i = idx % n;
                idx /= n;
                *slot = if n == 1 {
                    0.5 * (self.lo[a] + self.hi[a])
                } else {
                    self.lo[a] + (self.hi[a] - self.lo[a]) * (i as f64) / ((n - 1) as f64)
                };
            }
            out.push(point);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_charts() {
        assert!(matches!(
            Chart::new(&["x"]),
            Err(ChartError::BadDimension(1))
        ));
        assert!(matches!(
            Chart::new(&["a", "b", "c", "d", "e"]),
            Err(ChartError::BadDimension(5))
        ));
        assert!(matches!(
            Chart::new(&["x", "x"]),
            Err(ChartError::DuplicateName(_))
        ));
        assert!(matches!(
            Chart::new(&["x", "2y"]),
            Err(ChartError::BadName(_))
        ));
        assert!(matches!(
            Chart::with_periods(&["x", "y"], &[Some(-1.0), None]),
            Err(ChartError::BadPeriod { .. })
        ));
    }

    #[test]
    fn lookup_and_bindings() {
        let chart = Chart::new(&["x1", "y1", "x2", "y2"]).unwrap();
        assert_eq!(chart.dim(), 4);
        assert_eq!(chart.index_of("x2").unwrap(), 2);
        assert!(chart.index_of("z").is_err());
        let e = crate::expr::parse("x1 + 2*y2").unwrap();
        assert_eq!(chart.eval(&e, &[1.0, 0.0, 0.0, 3.0]).unwrap(), 7.0);
    }

    #[test]
    fn grid_enumeration() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], 3).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], vec![0.0, 0.0]);
        assert_eq!(pts[1], vec![0.5, 0.0]);
        assert_eq!(pts[8], vec![1.0, 2.0]);
        let single = Grid::new(vec![-1.0], vec![1.0], 1).unwrap();
        assert_eq!(single.points(), vec![vec![0.0]]);
    }
}
