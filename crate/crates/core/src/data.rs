use crate::error::{dim, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression targets, `[N, outputs]`.
    Values(Tensor),
    /// Class labels in `0..classes`.
    Classes { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(t) => t.shape()[0],
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            Targets::Values(t) => Targets::Values(t.select_rows(rows)),
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                classes: *classes,
            },
        }
    }
}

/// Inputs `[N, ...]` paired with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(dim("dataset", format!("inputs need a batch axis, got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != targets.len() {
            return Err(dim(
                "dataset",
                format!("{} inputs but {} targets", inputs.shape()[0], targets.len()),
            ));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select(rows),
        }
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Argument(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_and_split() {
        let x = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let d = Dataset::new(x, Targets::Classes { labels: vec![0, 1, 2, 1], classes: 3 }).unwrap();
        let s = d.subset(&[3, 0]);
        assert_eq!(s.inputs.data(), &[6., 7., 0., 1.]);
        assert_eq!(s.targets, Targets::Classes { labels: vec![1, 0], classes: 3 });
        let (a, b) = d.split_at(1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 3));
        assert!(d.split_at(4).is_err());
    }

    #[test]
    fn rejects_mismatch() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(Dataset::new(x.clone(), Targets::Values(Tensor::zeros(&[2, 1]))).is_err());
        assert!(Dataset::new(x, Targets::Classes { labels: vec![0, 5, 1], classes: 3 }).is_err());
    }
}
