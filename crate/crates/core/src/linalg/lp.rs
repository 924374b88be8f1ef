//! Dense two-phase simplex with Bland's rule.
//!
//! Sized for the handful-of-dozens-variable programs used by the geometry
//! checks; no attempt at sparsity or warm starts.

use crate::error::{invalid, Result};

const PIVOT_TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub rel: Relation,
    pub rhs: f64,
}

/// maximize cᵀx subject to the constraints and x ≥ 0.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpSolution {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        Self {
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn add(&mut self, coeffs: Vec<f64>, rel: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, rel, rhs });
    }

    pub fn solve(&self) -> Result<LpSolution> {
        let n = self.objective.len();
        if self.constraints.iter().any(|c| c.coeffs.len() != n) {
            return Err(invalid("constraint width differs from objective width"));
        }
        let finite = self.objective.iter().all(|x| x.is_finite())
            && self
                .constraints
                .iter()
                .all(|c| c.rhs.is_finite() && c.coeffs.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(crate::Error::NonFinite("linear program"));
        }
        Ok(Tableau::build(self).run(&self.objective))
    }
}

struct Tableau {
    m: usize,
    n: usize,
    n_cols: usize,
    art_start: usize,
    // (m + 1) rows × (n_cols + 1) columns; last row is the objective row, last
    // column the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.objective.len();
        let m = lp.constraints.len();
        let rows: Vec<(Vec<f64>, Relation, f64)> = lp
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let rel = match c.rel {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (c.coeffs.iter().map(|x| -x).collect(), rel, -c.rhs)
                } else {
                    (c.coeffs.clone(), c.rel, c.rhs)
                }
            })
            .collect();

        let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let art_start = n + n_slack;
        let n_cols = art_start + n_art;

        let mut t = vec![vec![0.0; n_cols + 1]; m + 1];
        let mut basis = vec![0; m];
        let (mut s, mut a) = (n, art_start);
        for (i, (coeffs, rel, rhs)) in rows.into_iter().enumerate() {
            t[i][..n].copy_from_slice(&coeffs);
            t[i][n_cols] = rhs;
            match rel {
                Relation::Le => {
                    t[i][s] = 1.0;
                    basis[i] = s;
                    s += 1;
                }
                Relation::Ge => {
                    t[i][s] = -1.0;
                    s += 1;
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
                Relation::Eq => {
                    t[i][a] = 1.0;
                    basis[i] = a;
                    a += 1;
                }
            }
        }
        Tableau {
            m,
            n,
            n_cols,
            art_start,
            t,
            basis,
        }
    }

    fn run(mut self, objective: &[f64]) -> LpSolution {
        // Phase 1: maximize -sum(artificials).
        if self.art_start < self.n_cols {
            let mut c = vec![0.0; self.n_cols];
            for x in c.iter_mut().skip(self.art_start) {
                *x = -1.0;
            }
            self.set_objective(&c);
            if !self.optimize(self.n_cols) {
                return LpSolution::Unbounded;
            }
            if self.t[self.m][self.n_cols] < -1e-8 {
                return LpSolution::Infeasible;
            }
            self.drive_out_artificials();
        }

        let mut c = vec![0.0; self.n_cols];
        c[..self.n].copy_from_slice(objective);
        self.set_objective(&c);
        if !self.optimize(self.art_start) {
            return LpSolution::Unbounded;
        }
        let mut x = vec![0.0; self.n];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < self.n {
                x[b] = self.t[i][self.n_cols];
            }
        }
        let value = objective.iter().zip(&x).map(|(c, x)| c * x).sum();
        LpSolution::Optimal { x, value }
    }

    fn set_objective(&mut self, c: &[f64]) {
        let m = self.m;
        for (j, cj) in c.iter().enumerate() {
            self.t[m][j] = -cj;
        }
        self.t[m][self.n_cols] = 0.0;
        for i in 0..m {
            let b = self.basis[i];
            let f = self.t[m][b];
            if f != 0.0 {
                for j in 0..=self.n_cols {
                    self.t[m][j] -= f * self.t[i][j];
                }
            }
        }
    }

    /// Returns false on unboundedness. Only columns below `col_limit` may enter.
    fn optimize(&mut self, col_limit: usize) -> bool {
        for _ in 0..MAX_ITERS {
            let Some(enter) = (0..col_limit).find(|&j| self.t[self.m][j] < -PIVOT_TOL) else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.t[i][enter];
                if a > PIVOT_TOL {
                    let ratio = self.t[i][self.n_cols] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((r, best)) => {
                            if ratio < best - 1e-12
                                || ((ratio - best).abs() <= 1e-12 && self.basis[i] < self.basis[r])
                            {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return false,
                Some((r, _)) => self.pivot(r, enter),
            }
        }
        true
    }

    fn drive_out_artificials(&mut self) {
        for i in 0..self.m {
            if self.basis[i] < self.art_start {
                continue;
            }
            if let Some(j) = (0..self.art_start).find(|&j| self.t[i][j].abs() > 1e-9) {
                self.pivot(i, j);
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[r][c];
        for x in self.t[r].iter_mut() {
            *x /= p;
        }
        let row = self.t[r].clone();
        for (i, ti) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = ti[c];
            if f != 0.0 {
                for (x, y) in ti.iter_mut().zip(&row) {
                    *x -= f * y;
                }
            }
        }
        self.basis[r] = c;
    }
}
