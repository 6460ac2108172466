//! Up-looking sparse Cholesky factorization (elimination tree + row
//! subtree reach), for symmetric positive definite matrices stored as the
//! upper triangle in compressed-column form. Variables are eliminated in
//! the given order; no fill-reducing permutation is applied.

/// Upper triangle of a symmetric matrix, compressed by column.
/// Row indices within a column must be `<=` the column index.
#[derive(Debug, Clone, Default)]
pub struct UpperCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl UpperCsc {
    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        Self {
            n: 0,
            col_ptr,
            row_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    /// Appends the next column from `(row, value)` entries with `row <= n`.
    pub fn push_column(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        let k = self.n;
        for (row, value) in entries {
            debug_assert!(row <= k);
            self.row_idx.push(row);
            self.values.push(value);
        }
        self.col_ptr.push(self.row_idx.len());
        self.n += 1;
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

const NONE: usize = usize::MAX;

fn etree(a: &UpperCsc) -> Vec<usize> {
    let mut parent = vec![NONE; a.n];
    let mut ancestor = vec![NONE; a.n];
    for k in 0..a.n {
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = a.row_idx[p];
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
    parent
}

/// Nonzero pattern of row `k` of L, written to `stack[top..n]` in
/// topological order; returns `top`.
fn ereach(
    a: &UpperCsc,
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [bool],
) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = true;
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.row_idx[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while !mark[i] {
            stack[len] = i;
            len += 1;
            mark[i] = true;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    for &i in &stack[top..n] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

impl SparseCholesky {
    /// Factors `A = L Lᵀ`. Returns `None` if a pivot is not positive.
    pub fn factor(a: &UpperCsc) -> Option<Self> {
        let n = a.n;
        let parent = etree(a);
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];

        // Column counts from the row patterns.
        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark);
            for &j in &stack[top..n] {
                counts[j] += 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for &c in &counts {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0f64; nnz];
        let mut next: Vec<usize> = col_ptr[..n].to_vec();
        let mut x = vec![0.0f64; n];

        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark);
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.row_idx[p];
                if i <= k {
                    x[i] += a.values[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &j in &stack[top..n] {
                let lkj = x[j] / values[col_ptr[j]];
                x[j] = 0.0;
                for p in col_ptr[j] + 1..next[j] {
                    x[row_idx[p]] -= values[p] * lkj;
                }
                d -= lkj * lkj;
                let p = next[j];
                next[j] += 1;
                row_idx[p] = k;
                values[p] = lkj;
            }
            if !(d > 0.0) {
                return None;
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = d.sqrt();
        }
        Some(Self {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        // L y = b
        for j in 0..self.n {
            let start = self.col_ptr[j];
            b[j] /= self.values[start];
            let bj = b[j];
            for p in start + 1..self.col_ptr[j + 1] {
                b[self.row_idx[p]] -= self.values[p] * bj;
            }
        }
        // Lᵀ x = y
        for j in (0..self.n).rev() {
            let start = self.col_ptr[j];
            let mut s = b[j];
            for p in start + 1..self.col_ptr[j + 1] {
                s -= self.values[p] * b[self.row_idx[p]];
            }
            b[j] = s / self.values[start];
        }
    }
}
