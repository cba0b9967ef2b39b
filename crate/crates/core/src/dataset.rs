use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Row-major samples of fixed dimension, with an optional mode label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of {dim}",
                values.len()
            )));
        }
        let n = values.len() / dim;
        Ok(Dataset {
            dim,
            values,
            labels: vec![None; n],
        })
    }

    pub fn with_labels(dim: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let mut d = Dataset::new(dim, values)?;
        if labels.len() != d.len() {
            return Err(Error::Dimension("label count".into()));
        }
        d.labels = labels.into_iter().map(Some).collect();
        Ok(d)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "expected 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        Dataset::new(t.shape()[1], t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.values.clone())
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            values,
            labels,
        }
    }

    /// A training batch: without replacement when `batch <= len`, otherwise
    /// with replacement.
    pub fn sample_batch(&self, batch: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Contract(
                "cannot sample from an empty dataset".into(),
            ));
        }
        let n = self.len();
        let idx: Vec<usize> = if batch <= n {
            index::sample(rng, n, batch).into_vec()
        } else {
            (0..batch).map(|_| rng.random_range(0..n)).collect()
        };
        self.select(&idx).to_tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn batches_without_replacement_are_distinct() {
        let d = Dataset::new(1, (0..10).map(f64::from).collect()).unwrap();
        let mut rng = stream(0, Stream::Train);
        for _ in 0..50 {
            let b = d.sample_batch(4, &mut rng).unwrap();
            let mut v = b.data().to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            assert_eq!(v.len(), 4);
        }
    }

    #[test]
    fn oversized_batch_uses_replacement() {
        let d = Dataset::new(2, vec![1.0, 2.0]).unwrap();
        let b = d.sample_batch(4, &mut stream(0, Stream::Train)).unwrap();
        assert_eq!(b.shape(), &[4, 2]);
        assert_eq!(b.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
