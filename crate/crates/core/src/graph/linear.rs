//! Block Cholesky of the Gauss-Newton normal equations.
//!
//! Navigation columns are eliminated in timestamp order; all landmark dofs
//! form one dense border block eliminated last. Factored columns are cached,
//! so after a change that only touches columns `≥ m` elimination restarts at
//! `m`: the border contributions of columns `< m` are kept as prefix sums.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};

use super::factor::LinearizedFactor;
use super::{nav_block_name, VarKey, LANDMARK_DIM, NAV_DIM};

/// Relative pivot tolerance against the pivot's own original diagonal.
const PIVOT_REL: f64 = 1e-13;
/// Relative pivot tolerance against the largest original diagonal of the block.
const PIVOT_BLOCK_REL: f64 = 1e-16;

struct Column {
    l_diag: DMatrix<f64>,
    /// `(i, L_ij)` for navigation rows `i > j`, ascending in `i`.
    l_rows: Vec<(usize, DMatrix<f64>)>,
    /// Border rows, `nb × NAV_DIM`.
    l_border: DMatrix<f64>,
    y: DVector<f64>,
    /// `Σ_{k ≤ j} L_Bk L_Bkᵀ`.
    bb_prefix: DMatrix<f64>,
    /// `Σ_{k ≤ j} L_Bk y_k`.
    by_prefix: DVector<f64>,
    failed: Vec<usize>,
}

impl Column {
    fn row(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.l_rows.iter().find(|(r, _)| *r == i).map(|(_, m)| m)
    }
}

struct Border {
    l: DMatrix<f64>,
    y: DVector<f64>,
    failed: Vec<usize>,
}

/// Solution of one linear solve, in tangent coordinates.
pub(crate) struct Step {
    pub nav: Vec<DVector<f64>>,
    pub landmarks: Vec<Vector3<f64>>,
}

impl Step {
    pub fn amax(&self) -> f64 {
        self.nav
            .iter()
            .map(|d| d.amax())
            .chain(self.landmarks.iter().map(|d| d.amax()))
            .fold(0.0, f64::max)
    }
}

/// Normal equations `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀe` over cached linearizations.
pub(crate) struct LinearSystem {
    n_nav: usize,
    n_lm: usize,
    factors: Vec<Option<LinearizedFactor>>,
    nav_factors: Vec<Vec<usize>>,
    border_factors: Vec<usize>,
    columns: Vec<Column>,
    /// `refs[i]`: eliminated columns `k < i` with a row at `i`.
    refs: Vec<Vec<usize>>,
    dirty_from: usize,
    lambda: f64,
    border: Option<Border>,
}

impl LinearSystem {
    pub fn new() -> Self {
        Self {
            n_nav: 0,
            n_lm: 0,
            factors: Vec::new(),
            nav_factors: Vec::new(),
            border_factors: Vec::new(),
            columns: Vec::new(),
            refs: Vec::new(),
            dirty_from: 0,
            lambda: 0.0,
            border: None,
        }
    }

    pub fn resize(&mut self, n_nav: usize, n_lm: usize) {
        assert!(n_nav >= self.n_nav && n_lm >= self.n_lm, "variables cannot be removed");
        if n_lm != self.n_lm {
            self.dirty_from = 0;
        }
        self.dirty_from = self.dirty_from.min(self.n_nav);
        self.n_nav = n_nav;
        self.n_lm = n_lm;
        self.nav_factors.resize_with(n_nav, Vec::new);
        self.refs.resize_with(n_nav, Vec::new);
    }

    /// Inserts or replaces the linearization of factor `id`.
    pub fn set_factor(&mut self, id: usize, lf: LinearizedFactor) {
        if id >= self.factors.len() {
            self.factors.resize_with(id + 1, || None);
        }
        let is_new = self.factors[id].is_none();
        for key in &lf.keys {
            match *key {
                VarKey::Nav(j) => {
                    self.dirty_from = self.dirty_from.min(j);
                    if is_new {
                        self.nav_factors[j].push(id);
                    }
                }
                VarKey::Landmark(_) => {}
            }
        }
        if is_new && lf.keys.iter().any(|k| matches!(k, VarKey::Landmark(_))) {
            self.border_factors.push(id);
        }
        self.factors[id] = Some(lf);
    }

    pub fn set_damping(&mut self, lambda: f64) {
        if lambda != self.lambda {
            self.lambda = lambda;
            self.dirty_from = 0;
        }
    }

    /// `‖Jᵀe‖∞` at the cached linearization point.
    pub fn gradient_amax(&self) -> f64 {
        let mut g_nav = vec![DVector::<f64>::zeros(NAV_DIM); self.n_nav];
        let mut g_lm = vec![DVector::<f64>::zeros(LANDMARK_DIM); self.n_lm];
        for f in self.factors.iter().flatten() {
            for (key, j) in f.keys.iter().zip(&f.jacobians) {
                let g = j.tr_mul(&f.residual);
                match *key {
                    VarKey::Nav(i) => g_nav[i] += g,
                    VarKey::Landmark(i) => g_lm[i] += g,
                }
            }
        }
        g_nav.iter().chain(&g_lm).map(|g| g.amax()).fold(0.0, f64::max)
    }

    /// Factors the system, reusing cached columns before the first changed one.
    /// Returns the names of the variable blocks with non-positive pivots.
    pub fn factorize(&mut self) -> Result<(), Vec<String>> {
        let m = self.dirty_from.min(self.n_nav);
        self.columns.truncate(m);
        for r in &mut self.refs[m..] {
            r.retain(|&k| k < m);
        }
        for j in m..self.n_nav {
            let col = self.eliminate(j);
            for (i, _) in &col.l_rows {
                self.refs[*i].push(j);
            }
            self.columns.push(col);
        }
        self.dirty_from = self.n_nav;
        self.border = Some(self.eliminate_border());

        let mut names = Vec::new();
        for (j, c) in self.columns.iter().enumerate() {
            for &d in &c.failed {
                push_unique(&mut names, format!("nav[{j}].{}", nav_block_name(d)));
            }
        }
        if let Some(b) = &self.border {
            for &d in &b.failed {
                push_unique(&mut names, format!("landmark[{}].position", d / LANDMARK_DIM));
            }
        }
        if names.is_empty() {
            Ok(())
        } else {
            Err(names)
        }
    }

    /// Back-substitution; requires a preceding [`factorize`](Self::factorize).
    pub fn solve(&self) -> Step {
        let border = self.border.as_ref().expect("factorize before solve");
        let x_b = if border.y.is_empty() {
            DVector::zeros(0)
        } else {
            border.l.tr_solve_lower_triangular_unchecked(&border.y)
        };
        let mut nav = vec![DVector::zeros(NAV_DIM); self.n_nav];
        for j in (0..self.n_nav).rev() {
            let c = &self.columns[j];
            let mut r = c.y.clone();
            for (i, l_ij) in &c.l_rows {
                r -= l_ij.tr_mul(&nav[*i]);
            }
            if !x_b.is_empty() {
                r -= c.l_border.tr_mul(&x_b);
            }
            nav[j] = c.l_diag.tr_solve_lower_triangular_unchecked(&r);
        }
        let landmarks = (0..self.n_lm)
            .map(|k| Vector3::from_iterator(x_b.rows(k * LANDMARK_DIM, LANDMARK_DIM).iter().copied()))
            .collect();
        Step { nav, landmarks }
    }

    fn nb(&self) -> usize {
        self.n_lm * LANDMARK_DIM
    }

    fn lin(&self, id: usize) -> &LinearizedFactor {
        self.factors[id].as_ref().expect("adjacency only lists set factors")
    }

    /// Column `j` of the damped normal matrix and right-hand side.
    fn assemble_column(&self, j: usize) -> (DMatrix<f64>, BTreeMap<usize, DMatrix<f64>>, DMatrix<f64>, DVector<f64>) {
        let nb = self.nb();
        let mut a_jj = DMatrix::zeros(NAV_DIM, NAV_DIM);
        let mut rows = BTreeMap::new();
        let mut a_bj = DMatrix::zeros(nb, NAV_DIM);
        let mut b = DVector::zeros(NAV_DIM);
        for &id in &self.nav_factors[j] {
            let f = self.lin(id);
            let q = f
                .keys
                .iter()
                .position(|k| *k == VarKey::Nav(j))
                .expect("adjacent factor");
            let jj = &f.jacobians[q];
            a_jj += jj.tr_mul(jj);
            b -= jj.tr_mul(&f.residual);
            for (key, jk) in f.keys.iter().zip(&f.jacobians) {
                match *key {
                    VarKey::Nav(i) if i > j => {
                        *rows.entry(i).or_insert_with(|| DMatrix::zeros(NAV_DIM, NAV_DIM)) += jk.tr_mul(jj);
                    }
                    VarKey::Landmark(l) => {
                        let mut blk = a_bj.rows_mut(l * LANDMARK_DIM, LANDMARK_DIM);
                        blk += jk.tr_mul(jj);
                    }
                    VarKey::Nav(_) => {}
                }
            }
        }
        damp(&mut a_jj, self.lambda);
        (a_jj, rows, a_bj, b)
    }

    fn eliminate(&self, j: usize) -> Column {
        let nb = self.nb();
        let (mut a_jj, mut rows, mut a_bj, mut b) = self.assemble_column(j);
        let orig_diag: Vec<f64> = a_jj.diagonal().iter().copied().collect();
        for &k in &self.refs[j] {
            let ck = &self.columns[k];
            let l_jk = ck.row(j).expect("refs mirror l_rows");
            a_jj -= l_jk * l_jk.transpose();
            for (i, l_ik) in &ck.l_rows {
                if *i > j {
                    *rows.entry(*i).or_insert_with(|| DMatrix::zeros(NAV_DIM, NAV_DIM)) -= l_ik * l_jk.transpose();
                }
            }
            if nb > 0 {
                a_bj -= &ck.l_border * l_jk.transpose();
            }
            b -= l_jk * &ck.y;
        }
        let failed = cholesky_in_place(&mut a_jj, &orig_diag);
        let l = a_jj;
        let below = |a: &DMatrix<f64>| {
            let mut x = l.solve_lower_triangular_unchecked(&a.transpose()).transpose();
            for &d in &failed {
                x.column_mut(d).fill(0.0);
            }
            x
        };
        let l_rows: Vec<_> = rows.iter().map(|(i, a)| (*i, below(a))).collect();
        let l_border = if nb > 0 {
            below(&a_bj)
        } else {
            DMatrix::zeros(0, NAV_DIM)
        };
        let y = l.solve_lower_triangular_unchecked(&b);

        let (mut bb_prefix, mut by_prefix) = match j.checked_sub(1).map(|p| &self.columns[p]) {
            Some(prev) => (prev.bb_prefix.clone(), prev.by_prefix.clone()),
            None => (DMatrix::zeros(nb, nb), DVector::zeros(nb)),
        };
        if nb > 0 {
            bb_prefix += &l_border * l_border.transpose();
            by_prefix += &l_border * &y;
        }
        Column {
            l_diag: l,
            l_rows,
            l_border,
            y,
            bb_prefix,
            by_prefix,
            failed,
        }
    }

    fn eliminate_border(&self) -> Border {
        let nb = self.nb();
        let mut a = DMatrix::zeros(nb, nb);
        let mut b = DVector::zeros(nb);
        for &id in &self.border_factors {
            let f = self.lin(id);
            for (ka, ja) in f.keys.iter().zip(&f.jacobians) {
                let VarKey::Landmark(la) = *ka else { continue };
                let mut seg = b.rows_mut(la * LANDMARK_DIM, LANDMARK_DIM);
                seg -= ja.tr_mul(&f.residual);
                for (kb, jb) in f.keys.iter().zip(&f.jacobians) {
                    let VarKey::Landmark(lb) = *kb else { continue };
                    let mut blk = a.view_mut((la * LANDMARK_DIM, lb * LANDMARK_DIM), (LANDMARK_DIM, LANDMARK_DIM));
                    blk += ja.tr_mul(jb);
                }
            }
        }
        damp(&mut a, self.lambda);
        let orig_diag: Vec<f64> = a.diagonal().iter().copied().collect();
        if let Some(last) = self.columns.last() {
            a -= &last.bb_prefix;
            b -= &last.by_prefix;
        }
        let failed = cholesky_in_place(&mut a, &orig_diag);
        let y = if nb > 0 {
            a.solve_lower_triangular_unchecked(&b)
        } else {
            b
        };
        Border { l: a, y, failed }
    }
}

fn damp(a: &mut DMatrix<f64>, lambda: f64) {
    if lambda > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] *= 1.0 + lambda;
        }
    }
}

fn push_unique(names: &mut Vec<String>, name: String) {
    if !names.contains(&name) {
        names.push(name);
    }
}

/// Lower Cholesky factor in place; the strict upper triangle is zeroed.
///
/// A pivot `d ≤ max(1e-13·a₀ₖₖ, 1e-16·maxᵢ a₀ᵢᵢ)` is recorded as failed and
/// replaced by a unit pivot with a zero column below it.
pub(crate) fn cholesky_in_place(a: &mut DMatrix<f64>, orig_diag: &[f64]) -> Vec<usize> {
    let n = a.nrows();
    let block_max = orig_diag.iter().copied().fold(0.0, f64::max);
    let mut failed = Vec::new();
    for k in 0..n {
        let mut d = a[(k, k)];
        for c in 0..k {
            d -= a[(k, c)] * a[(k, c)];
        }
        let tol = (PIVOT_REL * orig_diag[k]).max(PIVOT_BLOCK_REL * block_max);
        if !(d > tol) {
            failed.push(k);
            a[(k, k)] = 1.0;
            for i in k + 1..n {
                a[(i, k)] = 0.0;
            }
        } else {
            let lkk = d.sqrt();
            a[(k, k)] = lkk;
            for i in k + 1..n {
                let mut s = a[(i, k)];
                for c in 0..k {
                    s -= a[(i, c)] * a[(k, c)];
                }
                a[(i, k)] = s / lkk;
            }
        }
        for c in k + 1..n {
            a[(k, c)] = 0.0;
        }
    }
    failed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let m = DMatrix::from_fn(n, n, |_, _| next());
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn cholesky_matches_nalgebra() {
        let a = random_spd(9, 3);
        let mut l = a.clone();
        let diag: Vec<f64> = a.diagonal().iter().copied().collect();
        assert!(cholesky_in_place(&mut l, &diag).is_empty());
        let reference = a.clone().cholesky().unwrap().l();
        assert!((l - reference).amax() < 1e-12);
    }

    #[test]
    fn cholesky_flags_rank_deficiency() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let w = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, -1.0]);
        let mut a = &v * v.transpose() + &w * w.transpose();
        let diag: Vec<f64> = a.diagonal().iter().copied().collect();
        assert_eq!(cholesky_in_place(&mut a, &diag), vec![2]);
    }

    #[test]
    fn cholesky_flags_zero_diagonal() {
        let mut a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0, 9.0]));
        assert_eq!(cholesky_in_place(&mut a, &[4.0, 0.0, 9.0]), vec![1]);
        assert_eq!(a[(1, 1)], 1.0);
    }
}
