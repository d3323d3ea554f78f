use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Unordered points of a fixed dimension, stored as a `[n, dim]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    columns: Vec<String>,
    points: Tensor,
}

impl SampleSet {
    pub fn new(columns: Vec<String>, points: Tensor) -> Result<Self> {
        if points.shape().len() != 2 || points.cols() != columns.len() {
            return Err(Error::Shape(format!(
                "{} column names for points of shape {:?}",
                columns.len(),
                points.shape()
            )));
        }
        Ok(SampleSet { columns, points })
    }

    /// Samples with default column names `x`, `y`, `x2`, ...
    pub fn from_points(points: Tensor) -> Result<Self> {
        let columns = default_columns(points.cols());
        SampleSet::new(columns, points)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not split into rows of {dim}", data.len())));
        }
        let n = data.len() / dim;
        SampleSet::from_points(Tensor::new(vec![n, dim], data)?)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn into_points(self) -> Tensor {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    /// Values of one coordinate across all samples.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.points.iter_rows().map(|r| r[j]).collect()
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> SampleSet {
        let dim = self.dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(self.point(i));
        }
        SampleSet {
            columns: self.columns.clone(),
            points: Tensor::from_vec_unchecked(vec![idx.len(), dim], data),
        }
    }
}

pub(crate) fn default_columns(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|j| match j {
            0 => "x".to_string(),
            1 => "y".to_string(),
            _ => format!("x{j}"),
        })
        .collect()
}

/// Positions stored during a simulation, ordered by chain and then by step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: SampleSet,
    pub chain: Vec<u32>,
}

impl Trajectory {
    /// Positions of one chain, in time order.
    pub fn chain_samples(&self, c: u32) -> SampleSet {
        let idx: Vec<usize> = (0..self.chain.len()).filter(|&i| self.chain[i] == c).collect();
        self.samples.select(&idx)
    }

    pub fn n_chains(&self) -> usize {
        self.chain.iter().max().map_or(0, |&c| c as usize + 1)
    }

    /// Flattens into a sample set with a trailing `chain` column.
    pub fn to_sample_set(&self) -> SampleSet {
        let dim = self.samples.dim();
        let mut data = Vec::with_capacity(self.chain.len() * (dim + 1));
        for (row, &c) in self.samples.points().iter_rows().zip(&self.chain) {
            data.extend_from_slice(row);
            data.push(c as f64);
        }
        let mut columns = self.samples.columns().to_vec();
        columns.push("chain".into());
        SampleSet {
            columns,
            points: Tensor::from_vec_unchecked(vec![self.chain.len(), dim + 1], data),
        }
    }

    /// Inverse of [`Trajectory::to_sample_set`].
    pub fn from_sample_set(set: &SampleSet) -> Result<Self> {
        if set.columns().last().map(String::as_str) != Some("chain") {
            return Err(Error::Shape("sample set has no trailing `chain` column".into()));
        }
        let dim = set.dim() - 1;
        let mut data = Vec::with_capacity(set.len() * dim);
        let mut chain = Vec::with_capacity(set.len());
        for row in set.points().iter_rows() {
            data.extend_from_slice(&row[..dim]);
            let c = row[dim];
            if c < 0.0 || c.fract() != 0.0 || c > u32::MAX as f64 {
                return Err(Error::Shape(format!("invalid chain index {c}")));
            }
            chain.push(c as u32);
        }
        let samples = SampleSet::new(
            set.columns()[..dim].to_vec(),
            Tensor::new(vec![set.len(), dim], data)?,
        )?;
        Ok(Trajectory { samples, chain })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_chain_column_round_trip() {
        let samples = SampleSet::from_flat(2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let traj = Trajectory {
            samples,
            chain: vec![0, 0, 1],
        };
        let flat = traj.to_sample_set();
        assert_eq!(flat.columns(), &["x", "y", "chain"]);
        assert_eq!(Trajectory::from_sample_set(&flat).unwrap(), traj);
        assert_eq!(traj.n_chains(), 2);
        assert_eq!(traj.chain_samples(1).point(0), &[4.0, 5.0]);
    }
}
