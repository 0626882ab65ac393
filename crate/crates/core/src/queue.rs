//! FIFO bank of negative keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 1024;

const UNIT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    store: Tensor,
    head: usize,
    filled: usize,
}

impl NegativeQueue {
    /// A queue of `capacity` rows of width `dim`, pre-filled with
    /// unit-normalised Gaussian rows so the loss is defined from step one.
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config("queue", "capacity and dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Tensor::zeros(&[capacity, dim]);
        for i in 0..capacity {
            let row = store.row_mut(i);
            loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    row.iter_mut().for_each(|x| *x /= n);
                    break;
                }
            }
        }
        Ok(Self {
            store,
            head: 0,
            filled: 0,
        })
    }

    /// Restores a queue from its parts (checkpoint loading).
    pub fn from_parts(store: Tensor, head: usize, filled: usize) -> Result<Self> {
        let (k, _) = store.dims2()?;
        if head >= k.max(1) || filled > k {
            return Err(Error::Format(format!(
                "queue head {head} / filled {filled} out of range for capacity {k}"
            )));
        }
        Ok(Self {
            store,
            head,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.store.rows()
    }

    pub fn dim(&self) -> usize {
        self.store.cols()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn store(&self) -> &Tensor {
        &self.store
    }

    /// Overwrites the `n` oldest rows with `keys` and advances the head.
    pub fn push_batch(&mut self, keys: &Tensor) -> Result<()> {
        let (n, d) = keys.dims2()?;
        let k = self.capacity();
        if d != self.dim() {
            return Err(Error::dim("push_batch", format!("key width {d}, queue width {}", self.dim())));
        }
        if n > k {
            return Err(Error::Contract(format!("push of {n} keys exceeds capacity {k}")));
        }
        if let Some((i, norm)) = keys
            .row_norms()
            .into_iter()
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > UNIT_TOL)
        {
            return Err(Error::Contract(format!("key row {i} has norm {norm}, expected 1")));
        }
        for i in 0..n {
            let slot = (self.head + i) % k;
            self.store.row_mut(slot).copy_from_slice(keys.row(i));
        }
        self.head = (self.head + n) % k;
        self.filled = (self.filled + n).min(k);
        Ok(())
    }

    /// Detached `K×d` snapshot of every row, warm-start rows included.
    pub fn as_negatives(&self) -> Tensor {
        self.store.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn keys(rows: &[[f64; 2]]) -> Tensor {
        let r: Vec<Vec<f64>> = rows.iter().map(|r| unit(r)).collect();
        Tensor::from_rows(&r).unwrap()
    }

    fn as_set(t: &Tensor) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..t.rows())
            .map(|i| t.row(i).iter().map(|x| x.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn fifo_eviction() {
        let mut q = NegativeQueue::new(4, 2, 0).unwrap();
        let (a, b, c, d, e, f) = ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0], [2.0, 1.0], [1.0, 2.0]);
        q.push_batch(&keys(&[a, b])).unwrap();
        q.push_batch(&keys(&[c, d])).unwrap();
        q.push_batch(&keys(&[e, f])).unwrap();
        assert_eq!(as_set(&q.as_negatives()), as_set(&keys(&[c, d, e, f])));
        assert_eq!(q.head(), 2);
        assert_eq!(q.filled(), 4);
    }

    #[test]
    fn full_push_replaces_everything() {
        let mut q = NegativeQueue::new(2, 2, 0).unwrap();
        let k = keys(&[[3.0, 4.0], [0.0, 1.0]]);
        q.push_batch(&k).unwrap();
        assert_eq!(q.as_negatives(), k);
        assert_eq!(q.head(), 0);
    }

    #[test]
    fn contract_errors() {
        let mut q = NegativeQueue::new(2, 2, 0).unwrap();
        assert!(matches!(
            q.push_batch(&keys(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])),
            Err(Error::Contract(_))
        ));
        let bad = Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap();
        assert!(q.push_batch(&bad).is_err());
    }

    #[test]
    fn warm_start_rows_are_unit() {
        let q = NegativeQueue::new(16, 5, 7).unwrap();
        assert!(q.as_negatives().row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
        assert_eq!(q.as_negatives().shape(), &[16, 5]);
    }

    #[test]
    fn snapshot_is_a_value() {
        let mut q = NegativeQueue::new(2, 2, 1).unwrap();
        let snap = q.as_negatives();
        q.push_batch(&keys(&[[1.0, 0.0]])).unwrap();
        assert_ne!(snap, q.as_negatives());
        assert_eq!(snap.row(1), q.as_negatives().row(1));
    }
}
