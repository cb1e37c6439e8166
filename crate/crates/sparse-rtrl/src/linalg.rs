//! Deterministic numeric primitives: dense matrices, bit masks, row-compressed
//! sparse storage, and the event-driven matrix-vector kernels.
//!
//! All arithmetic is in `f64` and every kernel accumulates in ascending index
//! order. That fixed order is a contract, not an implementation detail: the
//! dense and sparse execution paths of the influence recursion are compared
//! bit-for-bit in the test suite, which is only meaningful if both paths add
//! the same numbers in the same order (skipped terms being exact zeros).

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from row-major data. Panics if the length does not match or any
    /// entry is non-finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        assert!(
            data.iter().all(|x| x.is_finite()),
            "matrix entries must be finite"
        );
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Fixed-length bit vector, word-packed.
///
/// Carries both static patterns (the parameter-sparsity mask, frozen at
/// initialization) and dynamic ones (which influence rows are live this step).
#[derive(Clone, Debug, PartialEq)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        BitMask {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self::zeros(len);
        for i in 0..len {
            m.set(i, true);
        }
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set(i, b);
        }
        m
    }

    /// Mask with exactly `count` set bits at positions chosen uniformly
    /// without replacement (partial Fisher-Yates over the index range).
    pub fn random_with_popcount(len: usize, count: usize, rng: &mut crate::prng::Prng) -> Self {
        assert!(count <= len, "popcount exceeds length");
        let mut idx: Vec<usize> = (0..len).collect();
        let mut m = Self::zeros(len);
        for i in 0..count {
            let j = i + rng.next_below((len - i) as u64) as usize;
            idx.swap(i, j);
            m.set(idx[i], true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices of set bits, ascending.
    pub fn ones_indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }
}

/// Row-compressed sparse matrix.
///
/// Rows absent from `active_rows` are semantically all-zero. Stored values
/// may themselves be zero — a position is stored because it is structurally
/// active, not because its current value is nonzero. Absent positions read
/// back as `+0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowCompressedMatrix {
    rows: usize,
    cols: usize,
    active_rows: Vec<usize>, // ascending
    row_ptr: Vec<usize>,     // active_rows.len() + 1 offsets into col_idx/values
    col_idx: Vec<usize>,     // strictly increasing within each row
    values: Vec<f64>,
}

impl RowCompressedMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        RowCompressedMatrix {
            rows,
            cols,
            active_rows: Vec::new(),
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds directly from parts; checks the structural invariants.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        active_rows: Vec<usize>,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(row_ptr.len(), active_rows.len() + 1);
        assert_eq!(col_idx.len(), values.len());
        assert_eq!(*row_ptr.last().unwrap(), col_idx.len());
        assert!(active_rows.windows(2).all(|w| w[0] < w[1]));
        assert!(active_rows.iter().all(|&r| r < rows));
        for i in 0..active_rows.len() {
            let cs = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            assert!(
                cs.windows(2).all(|w| w[0] < w[1]),
                "col indices must ascend"
            );
            assert!(cs.iter().all(|&c| c < cols));
        }
        RowCompressedMatrix {
            rows,
            cols,
            active_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn active_rows(&self) -> &[usize] {
        &self.active_rows
    }

    pub fn stored_entries(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`, or `None` if the row is inactive.
    pub fn row(&self, r: usize) -> Option<(&[usize], &[f64])> {
        let i = self.active_rows.binary_search(&r).ok()?;
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        Some((&self.col_idx[span.clone()], &self.values[span]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        match self.row(r) {
            Some((cols, vals)) => match cols.binary_search(&c) {
                Ok(j) => vals[j],
                Err(_) => 0.0,
            },
            None => 0.0,
        }
    }
}

/// Compresses `m` down to the rows/columns flagged active.
///
/// Every active (row, column) position is stored, zero-valued or not, so the
/// round trip through [`from_row_compressed`] is exact on the active
/// submatrix.
pub fn to_row_compressed(
    m: &DenseMatrix,
    row_active: &BitMask,
    col_active: &BitMask,
) -> RowCompressedMatrix {
    assert_eq!(row_active.len(), m.rows(), "row mask length mismatch");
    assert_eq!(col_active.len(), m.cols(), "col mask length mismatch");
    let cols: Vec<usize> = col_active.ones_indices();
    let mut active_rows = Vec::new();
    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for r in 0..m.rows() {
        if !row_active.get(r) {
            continue;
        }
        active_rows.push(r);
        let row = m.row(r);
        for &c in &cols {
            col_idx.push(c);
            values.push(row[c]);
        }
        row_ptr.push(col_idx.len());
    }
    RowCompressedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        active_rows,
        row_ptr,
        col_idx,
        values,
    }
}

/// Expands back to dense; positions outside the stored pattern are `+0.0`.
pub fn from_row_compressed(m: &RowCompressedMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for (i, &r) in m.active_rows.iter().enumerate() {
        let span = m.row_ptr[i]..m.row_ptr[i + 1];
        let row = out.row_mut(r);
        for (j, &c) in m.col_idx[span.clone()].iter().enumerate() {
            row[c] = m.values[span.start + j];
        }
    }
    out
}

/// Plain dense matrix-vector product, ascending-index accumulation.
pub fn matvec(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), x.len(), "matvec dimension mismatch");
    (0..w.rows())
        .map(|r| {
            let row = w.row(r);
            let mut acc = 0.0;
            for (v, xv) in row.iter().zip(x) {
                acc += v * xv;
            }
            acc
        })
        .collect()
}

/// Dense transpose-matvec: `Wᵀ·y`.
pub fn transpose_matvec(w: &DenseMatrix, y: &[f64]) -> Vec<f64> {
    assert_eq!(w.rows(), y.len(), "transpose_matvec dimension mismatch");
    let mut out = vec![0.0; w.cols()];
    for r in 0..w.rows() {
        let row = w.row(r);
        for (o, v) in out.iter_mut().zip(row) {
            *o += y[r] * v;
        }
    }
    out
}

/// `W·a` for a binary activation vector `a`, computed as a sum of the columns
/// belonging to active units. Cost (and the counted MACs) scale with the
/// number of active units, not with `len(a)`.
pub fn event_matvec(w: &DenseMatrix, a: &[f64], macs: &mut u64) -> Vec<f64> {
    assert_eq!(w.cols(), a.len(), "event_matvec dimension mismatch");
    debug_assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
    let mut out = vec![0.0; w.rows()];
    for (l, &al) in a.iter().enumerate() {
        if al == 0.0 {
            continue;
        }
        *macs += w.rows() as u64;
        for (r, o) in out.iter_mut().enumerate() {
            *o += w.get(r, l);
        }
    }
    out
}

/// `(W ⊙ mask)·x` for dense `x`; only unmasked entries multiply and count.
pub fn masked_matvec(w: &DenseMatrix, mask: &BitMask, x: &[f64], macs: &mut u64) -> Vec<f64> {
    assert_eq!(w.cols(), x.len(), "masked_matvec dimension mismatch");
    assert_eq!(mask.len(), w.rows() * w.cols(), "mask length mismatch");
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let base = r * w.cols();
        let mut acc = 0.0;
        for (c, (&v, &xv)) in row.iter().zip(x).enumerate() {
            if mask.get(base + c) {
                acc += v * xv;
                *macs += 1;
            }
        }
        *o = acc;
    }
    out
}

/// `(W ⊙ mask)·a` for binary `a`: skips both masked entries and inactive
/// columns, so the count realizes the product of parameter and activity
/// density.
pub fn masked_event_matvec(w: &DenseMatrix, mask: &BitMask, a: &[f64], macs: &mut u64) -> Vec<f64> {
    assert_eq!(w.cols(), a.len(), "masked_event_matvec dimension mismatch");
    assert_eq!(mask.len(), w.rows() * w.cols(), "mask length mismatch");
    debug_assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
    let cols = w.cols();
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let base = r * cols;
        let mut acc = 0.0;
        for (c, (&v, &al)) in row.iter().zip(a).enumerate() {
            if al != 0.0 && mask.get(base + c) {
                acc += v;
                *macs += 1;
            }
        }
        *o = acc;
    }
    out
}
