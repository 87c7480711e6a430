//! Compressed-sparse-column matrices and a supernode-free sparse Cholesky
//! (up-looking, elimination-tree driven) with selected inversion.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Column-compressed sparse matrix; row indices sorted within each column.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CscMatrix {
    n_rows: usize,
    n_cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Sums duplicate `(row, col, value)` entries.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_cols + 1];
        for &(r, c, _) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            counts[c + 1] += 1;
        }
        for j in 0..n_cols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..n_cols {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|e| e.0);
            for &(r, v) in scratch.iter() {
                if row_idx.len() > col_ptr[j] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix { n_rows, n_cols, col_ptr, row_idx, values }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        CscMatrix {
            n_rows: n,
            n_cols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(row, value)` pairs of column `j`.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Storage position of entry `(i, j)` if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        self.row_idx[lo..hi].binary_search(&i).ok().map(|k| lo + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = vec![0.0; self.n_rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.col(j) {
                y[i] += v * xj;
            }
        }
        y
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_rows);
        (0..self.n_cols).map(|j| self.col(j).map(|(i, v)| v * x[i]).sum()).collect()
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for j in 0..self.n_cols {
            for (i, v) in self.col(j) {
                trip.push((j, i, v));
            }
        }
        CscMatrix::from_triplets(self.n_cols, self.n_rows, &trip)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `a·self + b·other` on the union pattern.
    pub fn add_scaled(&self, a: f64, other: &CscMatrix, b: f64) -> CscMatrix {
        assert_eq!((self.n_rows, self.n_cols), (other.n_rows, other.n_cols));
        let mut trip = Vec::with_capacity(self.nnz() + other.nnz());
        for j in 0..self.n_cols {
            trip.extend(self.col(j).map(|(i, v)| (i, j, a * v)));
            trip.extend(other.col(j).map(|(i, v)| (i, j, b * v)));
        }
        CscMatrix::from_triplets(self.n_rows, self.n_cols, &trip)
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.n_cols, other.n_rows);
        let mut acc = vec![0.0; self.n_rows];
        let mut mark = vec![usize::MAX; self.n_rows];
        let mut pattern = Vec::new();
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..other.n_cols {
            pattern.clear();
            for (k, bkj) in other.col(j) {
                for (i, aik) in self.col(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        pattern.push(i);
                    }
                    acc[i] += aik * bkj;
                }
            }
            pattern.sort_unstable();
            for &i in pattern.iter() {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix { n_rows: self.n_rows, n_cols: other.n_cols, col_ptr, row_idx, values }
    }

    /// Same entries stored on the (superset) pattern of `pattern`; panics if an
    /// entry of `self` is missing there.
    pub fn on_pattern_of(&self, pattern: &CscMatrix) -> CscMatrix {
        let mut out = pattern.clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..self.n_cols {
            for (i, v) in self.col(j) {
                let p = out.position(i, j).expect("entry outside target pattern");
                out.values[p] = v;
            }
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n_rows, self.n_cols);
        for j in 0..self.n_cols {
            for (i, v) in self.col(j) {
                m[(i, j)] += v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_cols).all(|j| self.col(j).all(|(i, v)| libm::fabs(v - self.get(j, i)) <= tol))
    }
}

/// Reverse Cuthill–McKee ordering of a symmetric pattern; `perm[new] = old`.
pub fn rcm_ordering(a: &CscMatrix) -> Vec<usize> {
    let n = a.n_cols;
    let degree: Vec<usize> = (0..n).map(|j| a.col(j).filter(|&(i, _)| i != j).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nbrs = Vec::new();
    while order.len() < n {
        // Pseudo-peripheral start: lowest degree unvisited node, then the last
        // node reached by a BFS from it.
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).unwrap();
        let start = farthest_bfs(a, seed, &visited, &degree);
        let head = order.len();
        visited[start] = true;
        order.push(start);
        let mut q = head;
        while q < order.len() {
            let v = order[q];
            q += 1;
            nbrs.clear();
            nbrs.extend(a.col(v).map(|(i, _)| i).filter(|&i| !visited[i]));
            nbrs.sort_by_key(|&i| (degree[i], i));
            for &i in nbrs.iter() {
                visited[i] = true;
                order.push(i);
            }
        }
    }
    order.reverse();
    order
}

fn farthest_bfs(a: &CscMatrix, seed: usize, visited: &[bool], degree: &[usize]) -> usize {
    let n = a.n_cols;
    let mut level = vec![usize::MAX; n];
    let mut queue = vec![seed];
    level[seed] = 0;
    let mut q = 0;
    let mut best = seed;
    while q < queue.len() {
        let v = queue[q];
        q += 1;
        if (level[v], usize::MAX - degree[v]) > (level[best], usize::MAX - degree[best]) {
            best = v;
        }
        for (i, _) in a.col(v) {
            if !visited[i] && level[i] == usize::MAX {
                level[i] = level[v] + 1;
                queue.push(i);
            }
        }
    }
    best
}

/// Symbolic analysis of `P A Pᵀ` for a fixed symmetric pattern.
#[derive(Clone, Debug)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    // upper triangle of the permuted matrix, CSC
    c_ptr: Vec<usize>,
    c_idx: Vec<usize>,
    // storage position in the source matrix for each upper entry
    c_src: Vec<usize>,
    parent: Vec<usize>,
    l_ptr: Vec<usize>,
    source_nnz: usize,
}

const NONE: usize = usize::MAX;

impl SymbolicCholesky {
    /// Analyses `a` (full symmetric storage) under ordering `perm` (`perm[new] = old`).
    pub fn new(a: &CscMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n_cols;
        if a.n_rows != n || perm.len() != n {
            return Err(Error::InvalidInput("Cholesky needs a square matrix and matching ordering".into()));
        }
        let mut inv_perm = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        if inv_perm.contains(&NONE) {
            return Err(Error::InvalidInput("ordering is not a permutation".into()));
        }
        let mut trip: Vec<(usize, usize, usize)> = Vec::new();
        for j in 0..n {
            for p in a.col_ptr[j]..a.col_ptr[j + 1] {
                let (r, c) = (inv_perm[a.row_idx[p]], inv_perm[j]);
                if r <= c {
                    trip.push((c, r, p));
                }
            }
        }
        trip.sort_unstable();
        let mut c_ptr = vec![0usize; n + 1];
        let mut c_idx = Vec::with_capacity(trip.len());
        let mut c_src = Vec::with_capacity(trip.len());
        for &(c, r, p) in trip.iter() {
            c_ptr[c + 1] += 1;
            c_idx.push(r);
            c_src.push(p);
        }
        for j in 0..n {
            c_ptr[j + 1] += c_ptr[j];
        }
        for j in 0..n {
            if c_ptr[j] == c_ptr[j + 1] || c_idx[c_ptr[j + 1] - 1] != j {
                return Err(Error::NotPositiveDefinite { column: j });
            }
        }

        // elimination tree (Liu), upper-triangular input
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in c_ptr[k]..c_ptr[k + 1] {
                let mut i = c_idx[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // column counts via row subtrees
        let mut counts = vec![1usize; n];
        let mut flag = vec![NONE; n];
        for k in 0..n {
            flag[k] = k;
            for p in c_ptr[k]..c_ptr[k + 1] {
                let mut i = c_idx[p];
                while i < k && flag[i] != k {
                    counts[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_ptr[j + 1] = l_ptr[j] + counts[j];
        }
        Ok(SymbolicCholesky {
            n,
            perm,
            inv_perm,
            c_ptr,
            c_idx,
            c_src,
            parent,
            l_ptr,
            source_nnz: a.nnz(),
        })
    }

    pub fn with_rcm(a: &CscMatrix) -> Result<Self> {
        SymbolicCholesky::new(a, rcm_ordering(a))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.l_ptr[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Numeric factorization of a matrix with exactly the analysed pattern.
    pub fn factor(&self, a: &CscMatrix) -> Result<CholeskyFactor> {
        if a.nnz() != self.source_nnz || a.n_cols != self.n {
            return Err(Error::InvalidInput("matrix pattern differs from the analysed one".into()));
        }
        let n = self.n;
        let nnz = self.nnz_l();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut c: Vec<usize> = self.l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut s = vec![0usize; n];
        let mut w = vec![NONE; n];
        for k in 0..n {
            // nonzero pattern of row k of L (ereach)
            let mut top = n;
            w[k] = k;
            for p in self.c_ptr[k]..self.c_ptr[k + 1] {
                let mut i = self.c_idx[p];
                x[i] = a.values[self.c_src[p]];
                if i >= k {
                    continue;
                }
                let mut len = 0;
                while w[i] != k {
                    s[len] = i;
                    len += 1;
                    w[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    s[top] = s[len];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in s[top..n].iter() {
                let lki = x[i] / lx[self.l_ptr[i]];
                x[i] = 0.0;
                for p in (self.l_ptr[i] + 1)..c[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = c[i];
                c[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { column: k });
            }
            let p = c[k];
            c[k] += 1;
            li[p] = k;
            lx[p] = libm::sqrt(d);
        }
        Ok(CholeskyFactor {
            n,
            perm: self.perm.clone(),
            inv_perm: self.inv_perm.clone(),
            l_ptr: self.l_ptr.clone(),
            l_idx: li,
            l_val: lx,
        })
    }
}

/// `P A Pᵀ = L Lᵀ`, with `L` stored column-compressed, diagonal first.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn logdet(&self) -> f64 {
        (0..self.n).map(|j| 2.0 * libm::log(self.l_val[self.l_ptr[j]])).sum()
    }

    /// In place `y ← L⁻¹ y` (permuted space).
    pub fn forward_permuted(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let p0 = self.l_ptr[j];
            y[j] /= self.l_val[p0];
            let yj = y[j];
            for p in (p0 + 1)..self.l_ptr[j + 1] {
                y[self.l_idx[p]] -= self.l_val[p] * yj;
            }
        }
    }

    /// In place `y ← L⁻ᵀ y` (permuted space).
    pub fn backward_permuted(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let p0 = self.l_ptr[j];
            let mut s = y[j];
            for p in (p0 + 1)..self.l_ptr[j + 1] {
                s -= self.l_val[p] * y[self.l_idx[p]];
            }
            y[j] = s / self.l_val[p0];
        }
    }

    pub fn permute(&self, b: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&old| b[old]).collect()
    }

    pub fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        self.inv_perm.iter().map(|&new| y[new]).collect()
    }

    /// `L⁻¹ P b`.
    pub fn half_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = self.permute(b);
        self.forward_permuted(&mut y);
        y
    }

    /// `Pᵀ L⁻ᵀ z`: maps white noise to a draw with covariance `A⁻¹`.
    pub fn half_solve_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.backward_permuted(&mut y);
        self.unpermute(&y)
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = self.permute(b);
        self.forward_permuted(&mut y);
        self.backward_permuted(&mut y);
        self.unpermute(&y)
    }

    /// Entries of `A⁻¹` on the pattern of `L` (Takahashi recursions).
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.n;
        let mut z = vec![0.0; self.l_val.len()];
        let mut buf: Vec<f64> = Vec::new();
        for j in (0..n).rev() {
            let p0 = self.l_ptr[j];
            let p1 = self.l_ptr[j + 1];
            let ljj = self.l_val[p0];
            // off-diagonal entries Z(i, j), i > j, processed so that every
            // Z(k, i) with k, i > j is already known
            buf.clear();
            for p in (p0 + 1)..p1 {
                let i = self.l_idx[p];
                let mut s = 0.0;
                for q in (p0 + 1)..p1 {
                    let k = self.l_idx[q];
                    s += self.l_val[q] * self.lookup(&z, k, i);
                }
                buf.push(-s / ljj);
            }
            let mut diag = 1.0 / (ljj * ljj);
            for (off, p) in ((p0 + 1)..p1).enumerate() {
                z[p] = buf[off];
                diag -= self.l_val[p] * buf[off] / ljj;
            }
            z[p0] = diag;
        }
        SelectedInverse {
            inv_perm: self.inv_perm.clone(),
            l_ptr: self.l_ptr.clone(),
            l_idx: self.l_idx.clone(),
            values: z,
        }
    }

    fn lookup(&self, z: &[f64], a: usize, b: usize) -> f64 {
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        let lo = self.l_ptr[c];
        let hi = self.l_ptr[c + 1];
        match self.l_idx[lo..hi].binary_search(&r) {
            Ok(k) => z[lo + k],
            Err(_) => unreachable!("selected inverse entry outside the filled pattern"),
        }
    }
}

/// `A⁻¹` restricted to the filled pattern, addressed in original indices.
#[derive(Clone, Debug)]
pub struct SelectedInverse {
    inv_perm: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SelectedInverse {
    /// `(A⁻¹)_{ij}` if `(i, j)` lies in the filled pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (self.inv_perm[i], self.inv_perm[j]);
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        let lo = self.l_ptr[c];
        let hi = self.l_ptr[c + 1];
        self.l_idx[lo..hi].binary_search(&r).ok().map(|k| self.values[lo + k])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.inv_perm.iter().map(|&p| self.values[self.l_ptr[p]]).collect()
    }
}
