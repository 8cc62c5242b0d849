//! Small dense linear-program solver (two-phase primal simplex).
//!
//! Solves `maximize c·x subject to A x ≤ b, x ≥ 0` for problems with a
//! handful of variables, which is all the σ-weight feasibility program
//! needs. Bland's rule keeps the pivoting cycle-free.

const EPS: f64 = 1e-9;

/// Result of an LP solve.
#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// Constraint rows, each `cols + 1` wide (last entry is the rhs).
    rows: Vec<Vec<f64>>,
    /// Objective row holding reduced costs; last entry is −(objective value).
    obj: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.cols]
    }

    fn value(&self) -> f64 {
        -self.obj[self.cols]
    }

    /// Zero the reduced costs of the current basic columns.
    fn price_out(&mut self) {
        for i in 0..self.rows.len() {
            let bj = self.basis[i];
            let coeff = self.obj[bj];
            if coeff != 0.0 {
                for j in 0..=self.cols {
                    self.obj[j] -= coeff * self.rows[i][j];
                }
            }
        }
    }

    fn pivot(&mut self, ir: usize, jc: usize) {
        let piv = self.rows[ir][jc];
        for j in 0..=self.cols {
            self.rows[ir][j] /= piv;
        }
        for i in 0..self.rows.len() {
            if i == ir {
                continue;
            }
            let f = self.rows[i][jc];
            if f != 0.0 {
                for j in 0..=self.cols {
                    let v = self.rows[ir][j];
                    self.rows[i][j] -= f * v;
                }
            }
        }
        let f = self.obj[jc];
        if f != 0.0 {
            for j in 0..=self.cols {
                let v = self.rows[ir][j];
                self.obj[j] -= f * v;
            }
        }
        self.basis[ir] = jc;
    }

    /// Bland-rule primal simplex on the current objective row.
    /// Returns false when an unbounded improving direction is found.
    fn run(&mut self) -> bool {
        let m = self.rows.len();
        for _ in 0..20_000 {
            let Some(jc) = (0..self.cols).find(|&j| self.obj[j] > EPS) else {
                return true;
            };
            let mut leave: Option<usize> = None;
            let mut best = f64::INFINITY;
            for i in 0..m {
                let aij = self.rows[i][jc];
                if aij > EPS {
                    let ratio = self.rhs(i) / aij;
                    let better = ratio < best - EPS
                        || ((ratio - best).abs() <= EPS
                            && leave.map(|li| self.basis[i] < self.basis[li]).unwrap_or(false));
                    if better {
                        best = ratio;
                        leave = Some(i);
                    }
                }
            }
            match leave {
                Some(ir) => self.pivot(ir, jc),
                None => return false,
            }
        }
        true
    }
}

/// Maximize `c·x` subject to `a·x ≤ b`, `x ≥ 0`.
pub fn solve_lp(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let m = a.len();
    let n = c.len();
    assert_eq!(b.len(), m, "rhs length must match row count");
    for row in a {
        assert_eq!(row.len(), n, "row length must match variable count");
    }

    // Normalize to nonnegative rhs; rows that flip get a surplus column and
    // an artificial basic variable.
    let mut need_art = vec![false; m];
    let mut base_rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = a[i].clone();
        let mut bi = b[i];
        if bi < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            bi = -bi;
            need_art[i] = true;
        }
        base_rows.push(row);
        rhs.push(bi);
    }
    let n_art = need_art.iter().filter(|&&x| x).count();
    let cols1 = n + m + n_art;

    let mut t = Tableau {
        rows: vec![vec![0.0; cols1 + 1]; m],
        obj: vec![0.0; cols1 + 1],
        basis: vec![0; m],
        cols: cols1,
    };
    let mut next_art = n + m;
    for i in 0..m {
        for j in 0..n {
            t.rows[i][j] = base_rows[i][j];
        }
        t.rows[i][n + i] = if need_art[i] { -1.0 } else { 1.0 };
        if need_art[i] {
            t.rows[i][next_art] = 1.0;
            t.basis[i] = next_art;
            next_art += 1;
        } else {
            t.basis[i] = n + i;
        }
        t.rows[i][cols1] = rhs[i];
    }

    if n_art > 0 {
        // Phase 1: maximize −Σ artificials.
        for j in (n + m)..cols1 {
            t.obj[j] = -1.0;
        }
        t.price_out();
        t.run();
        if t.value() < -EPS {
            return LpOutcome::Infeasible;
        }
        // Drive lingering artificials out of the basis, then drop their columns.
        for i in 0..m {
            if t.basis[i] >= n + m {
                if let Some(jc) = (0..(n + m)).find(|&j| t.rows[i][j].abs() > EPS) {
                    t.pivot(i, jc);
                }
            }
        }
        let cols2 = n + m;
        for row in &mut t.rows {
            let r = row[cols1];
            row.truncate(cols2);
            row.push(r);
        }
        t.obj = vec![0.0; cols2 + 1];
        t.cols = cols2;
        // A basis row still holding an artificial is identically zero
        // (redundant constraint); park it on its slack column.
        for i in 0..m {
            if t.basis[i] >= cols2 {
                t.basis[i] = n + i;
            }
        }
    }

    // Phase 2.
    for j in 0..n {
        t.obj[j] = c[j];
    }
    t.price_out();
    if !t.run() {
        return LpOutcome::Unbounded;
    }

    let mut x = vec![0.0; n];
    for i in 0..m {
        if t.basis[i] < n {
            x[t.basis[i]] = t.rhs(i);
        }
    }
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, value }
}
