use std::fmt;

use crate::error::{bail, Result};

/// Dense boolean matrix; `true` means "query row may attend to key column".
#[derive(Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Lower-triangular (causal) mask of size `n x n`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&b| b).count()
    }
}

impl fmt::Debug for BoolMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BoolMatrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: String = self.row(r).iter().map(|&b| if b { 'T' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Attention mask in row-list form: for each query row, the ascending
/// list of permitted key indices. Keys are visited in this order, which
/// fixes the floating-point summation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    keys: usize,
    rows: Vec<Vec<u32>>,
}

impl AttnMask {
    /// Fails if any row permits no key (the softmax would be undefined).
    pub fn from_rows(keys: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.is_empty() {
                bail!(Config, "attention mask row {i} permits no key");
            }
            if r.windows(2).any(|w| w[0] >= w[1]) || r.last().is_some_and(|&k| k as usize >= keys) {
                bail!(Config, "attention mask row {i} is not an ascending list of keys below {keys}");
            }
        }
        Ok(Self { keys, rows })
    }

    pub fn from_matrix(m: &BoolMatrix) -> Result<Self> {
        let rows = (0..m.rows())
            .map(|r| (0..m.cols()).filter(|&c| m.get(r, c)).map(|c| c as u32).collect())
            .collect();
        Self::from_rows(m.cols(), rows)
    }

    /// Causal mask over `n` fresh keys that follow `prefix` cached keys.
    pub fn causal_with_prefix(prefix: usize, n: usize) -> Self {
        let rows = (0..n).map(|i| (0..(prefix + i + 1) as u32).collect()).collect();
        Self { keys: prefix + n, rows }
    }

    /// Prepends `prefix` always-visible keys to every row of `inner`.
    pub fn with_prefix(prefix: usize, inner: &BoolMatrix) -> Result<Self> {
        let rows = (0..inner.rows())
            .map(|r| {
                (0..prefix as u32)
                    .chain((0..inner.cols()).filter(|&c| inner.get(r, c)).map(|c| (prefix + c) as u32))
                    .collect()
            })
            .collect();
        Self::from_rows(prefix + inner.cols(), rows)
    }

    pub fn queries(&self) -> usize {
        self.rows.len()
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_matrix(&self) -> BoolMatrix {
        let mut m = BoolMatrix::new(self.rows.len(), self.keys);
        for (r, ks) in self.rows.iter().enumerate() {
            for &k in ks {
                m.set(r, k as usize, true);
            }
        }
        m
    }
}
