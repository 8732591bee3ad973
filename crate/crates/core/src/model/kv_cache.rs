use std::sync::Arc;

use crate::error::{bail, Result};
use crate::numerics::{Float, Tensor};

/// Per-layer key/value rows for incremental decoding.
///
/// Rows are stored post-rotary, one row per position. Layers share a
/// single length cursor. Cloning is copy-on-write: a fork shares storage
/// until either side appends.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    layers: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    width: usize,
    capacity: usize,
}

/// Keys and values produced by one forward, one pair per layer.
pub type LayerKv<T> = Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>;

impl<T: Float> KvCache<T> {
    pub fn new(n_layers: usize, width: usize, capacity: usize) -> Self {
        let empty = || Arc::new(Tensor::zeros(&[0, width]));
        Self { layers: (0..n_layers).map(|_| (empty(), empty())).collect(), width, capacity }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> (&Arc<Tensor<T>>, &Arc<Tensor<T>>) {
        let (k, v) = &self.layers[i];
        (k, v)
    }

    /// Appends the selected rows (all rows when `rows` is `None`) of a
    /// forward's new keys and values.
    pub fn append(&mut self, new: &LayerKv<T>, rows: Option<&[usize]>) -> Result<()> {
        if new.len() != self.layers.len() {
            bail!(Shape, "cache has {} layers, got {}", self.layers.len(), new.len());
        }
        let count = rows.map_or_else(|| new.first().map_or(0, |(k, _)| k.rows()), <[usize]>::len);
        if self.len() + count > self.capacity {
            bail!(Capacity, "cache of capacity {} cannot grow from {} by {}", self.capacity, self.len(), count);
        }
        for ((k, v), (nk, nv)) in self.layers.iter_mut().zip(new) {
            if nk.cols() != self.width || nv.cols() != self.width {
                bail!(Shape, "cache width {} vs new rows of width {}", self.width, nk.cols());
            }
            let (k, v) = (Arc::make_mut(k), Arc::make_mut(v));
            match rows {
                Some(rows) => {
                    for &r in rows {
                        k.push_row(nk.row(r))?;
                        v.push_row(nv.row(r))?;
                    }
                }
                None => {
                    for r in 0..nk.rows() {
                        k.push_row(nk.row(r))?;
                        v.push_row(nv.row(r))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops every position at or beyond `n`.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        for (k, v) in &mut self.layers {
            Arc::make_mut(k).truncate_rows(n);
            Arc::make_mut(v).truncate_rows(n);
        }
    }

    /// Independent copy (copy-on-write).
    pub fn fork(&self) -> Self {
        self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, start: f32) -> LayerKv<f32> {
        let t = Arc::new(Tensor::from_fn(&[n, 2], |i| start + i as f32));
        vec![(Arc::clone(&t), t)]
    }

    #[test]
    fn truncate_then_read_sees_prefix() {
        let mut c = KvCache::<f32>::new(1, 2, 8);
        c.append(&rows(3, 0.0), None).unwrap();
        c.append(&rows(2, 100.0), Some(&[1])).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.layer(0).0.row(3), &[102.0, 103.0]);
        c.truncate(2);
        assert_eq!(c.len(), 2);
        assert_eq!(c.layer(0).0.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut c = KvCache::<f32>::new(1, 2, 4);
        c.append(&rows(3, 0.0), None).unwrap();
        assert!(matches!(c.append(&rows(2, 0.0), None), Err(crate::HassError::Capacity(_))));
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn fork_is_copy_on_write() {
        let mut a = KvCache::<f32>::new(1, 2, 8);
        a.append(&rows(2, 0.0), None).unwrap();
        let mut b = a.fork();
        b.append(&rows(1, 9.0), None).unwrap();
        a.truncate(1);
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 3);
        assert_eq!(b.layer(0).0.row(0), &[0.0, 1.0]);
    }
}
