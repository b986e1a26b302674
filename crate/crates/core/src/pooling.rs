//! Reduction of per-token encoder outputs to one vector per sequence.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedBatch;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolingError {
    #[error("every position is masked; {0} pooling is undefined")]
    AllMasked(PoolingStrategy),
    #[error("empty sequence")]
    EmptySequence,
    #[error("mask has {mask} entries for {rows} rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("unknown pooling strategy {0:?} (expected mean, cls, max or mean-noattn)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingStrategy {
    /// Mean over attended positions.
    #[default]
    #[serde(rename = "mean")]
    MeanWithAttention,
    /// Position 0, regardless of the mask.
    Cls,
    /// Per-dimension maximum over attended positions.
    Max,
    /// Mean over every position, padding included.
    #[serde(rename = "mean-noattn")]
    MeanWithoutAttention,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 4] = [
        PoolingStrategy::MeanWithAttention,
        PoolingStrategy::Cls,
        PoolingStrategy::Max,
        PoolingStrategy::MeanWithoutAttention,
    ];

    /// The name accepted on the command line.
    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::MeanWithAttention => "mean",
            PoolingStrategy::Cls => "cls",
            PoolingStrategy::Max => "max",
            PoolingStrategy::MeanWithoutAttention => "mean-noattn",
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingStrategy {
    type Err = PoolingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoolingStrategy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PoolingError::UnknownStrategy(s.to_owned()))
    }
}

fn check(x: &ArrayView2<f64>, mask: &[u8]) -> Result<(), PoolingError> {
    if x.nrows() == 0 {
        return Err(PoolingError::EmptySequence);
    }
    if mask.len() != x.nrows() {
        return Err(PoolingError::MaskLength { mask: mask.len(), rows: x.nrows() });
    }
    Ok(())
}

/// Row index of the maximum of each column over attended rows; the first
/// such row wins ties.
fn argmax_rows(x: &ArrayView2<f64>, mask: &[u8]) -> Vec<usize> {
    (0..x.ncols())
        .map(|d| {
            let mut best: Option<usize> = None;
            for (i, &m) in mask.iter().enumerate() {
                if m == 1 && best.is_none_or(|b| x[[i, d]] > x[[b, d]]) {
                    best = Some(i);
                }
            }
            best.expect("caller checked for an attended row")
        })
        .collect()
}

/// Pools token embeddings `x` `[L, H]` under `mask` `[L]`.
pub fn pool(x: &ArrayView2<f64>, mask: &[u8], strategy: PoolingStrategy) -> Result<Array1<f64>, PoolingError> {
    check(x, mask)?;
    let attended = mask.iter().filter(|&&m| m == 1).count();
    match strategy {
        PoolingStrategy::MeanWithAttention | PoolingStrategy::Max if attended == 0 => {
            Err(PoolingError::AllMasked(strategy))
        }
        PoolingStrategy::MeanWithAttention => {
            let mut sum = Array1::zeros(x.ncols());
            for (row, &m) in x.rows().into_iter().zip(mask) {
                if m == 1 {
                    sum += &row;
                }
            }
            Ok(sum / attended as f64)
        }
        PoolingStrategy::Cls => Ok(x.row(0).to_owned()),
        PoolingStrategy::Max => {
            let rows = argmax_rows(x, mask);
            Ok(rows.iter().enumerate().map(|(d, &i)| x[[i, d]]).collect())
        }
        PoolingStrategy::MeanWithoutAttention => Ok(x.mean_axis(Axis(0)).expect("non-empty")),
    }
}

/// Gradient of [`pool`] with respect to `x`, given the gradient `dy` of the
/// pooled vector.
pub fn pool_backward(
    x: &ArrayView2<f64>,
    mask: &[u8],
    strategy: PoolingStrategy,
    dy: &ArrayView1<f64>,
) -> Result<Array2<f64>, PoolingError> {
    check(x, mask)?;
    let attended = mask.iter().filter(|&&m| m == 1).count();
    let mut dx = Array2::zeros(x.raw_dim());
    match strategy {
        PoolingStrategy::MeanWithAttention | PoolingStrategy::Max if attended == 0 => {
            return Err(PoolingError::AllMasked(strategy))
        }
        PoolingStrategy::MeanWithAttention => {
            let g = dy / attended as f64;
            for (mut row, &m) in dx.rows_mut().into_iter().zip(mask) {
                if m == 1 {
                    row.assign(&g);
                }
            }
        }
        PoolingStrategy::Cls => dx.row_mut(0).assign(dy),
        PoolingStrategy::Max => {
            for (d, i) in argmax_rows(x, mask).into_iter().enumerate() {
                dx[[i, d]] = dy[d];
            }
        }
        PoolingStrategy::MeanWithoutAttention => {
            let g = dy / x.nrows() as f64;
            for mut row in dx.rows_mut() {
                row.assign(&g);
            }
        }
    }
    Ok(dx)
}

/// Pools every sequence of an encoder output `[B, L, H]`, giving `[B, H]`.
pub fn pool_batch(out: &Array3<f64>, batch: &EncodedBatch, strategy: PoolingStrategy) -> Result<Array2<f64>, PoolingError> {
    let mut pooled = Array2::zeros((out.shape()[0], out.shape()[2]));
    for (b, mut row) in pooled.rows_mut().into_iter().enumerate() {
        row.assign(&pool(&out.index_axis(Axis(0), b), batch.row_mask(b), strategy)?);
    }
    Ok(pooled)
}

/// Gradient of [`pool_batch`] with respect to the encoder output.
pub fn pool_batch_backward(
    out: &Array3<f64>,
    batch: &EncodedBatch,
    strategy: PoolingStrategy,
    dpooled: &ArrayView2<f64>,
) -> Result<Array3<f64>, PoolingError> {
    let mut dout = Array3::zeros(out.raw_dim());
    for b in 0..out.shape()[0] {
        let g = pool_backward(&out.index_axis(Axis(0), b), batch.row_mask(b), strategy, &dpooled.row(b))?;
        dout.index_axis_mut(Axis(0), b).assign(&g);
    }
    Ok(dout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> (Array2<f64>, [u8; 3]) {
        (array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], [1, 1, 0])
    }

    #[test]
    fn worked_examples() {
        let (x, m) = sample();
        let v = x.view();
        assert_eq!(pool(&v, &m, PoolingStrategy::MeanWithAttention).unwrap(), array![2.0, 3.0]);
        assert_eq!(pool(&v, &m, PoolingStrategy::Max).unwrap(), array![3.0, 4.0]);
        assert_eq!(pool(&v, &m, PoolingStrategy::MeanWithoutAttention).unwrap(), array![3.0, 4.0]);
        assert_eq!(pool(&v, &m, PoolingStrategy::Cls).unwrap(), array![1.0, 2.0]);
    }

    #[test]
    fn all_masked_errors_only_for_mask_aware_strategies() {
        let (x, _) = sample();
        let m = [0, 0, 0];
        assert_eq!(
            pool(&x.view(), &m, PoolingStrategy::MeanWithAttention),
            Err(PoolingError::AllMasked(PoolingStrategy::MeanWithAttention))
        );
        assert!(pool(&x.view(), &m, PoolingStrategy::Max).is_err());
        assert!(pool(&x.view(), &m, PoolingStrategy::Cls).is_ok());
        assert!(pool(&x.view(), &m, PoolingStrategy::MeanWithoutAttention).is_ok());
    }

    #[test]
    fn names_round_trip() {
        for p in PoolingStrategy::ALL {
            assert_eq!(p.name().parse::<PoolingStrategy>().unwrap(), p);
            let j = serde_json::to_string(&p).unwrap();
            assert_eq!(j, format!("\"{}\"", p.name()));
        }
        assert!("avg".parse::<PoolingStrategy>().is_err());
    }

    #[test]
    fn backward_matches_differences() {
        let x = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.7], [0.1, 0.9, 0.4], [9.0, 9.0, 9.0]];
        let m = [1, 1, 1, 0];
        let dy = array![0.5, -2.0, 1.0];
        for s in PoolingStrategy::ALL {
            let g = pool_backward(&x.view(), &m, s, &dy.view()).unwrap();
            let f = |x: &Array2<f64>| pool(&x.view(), &m, s).unwrap().dot(&dy);
            for i in 0..4 {
                for j in 0..3 {
                    let h = 1e-6;
                    let mut p = x.clone();
                    p[[i, j]] += h;
                    let mut q = x.clone();
                    q[[i, j]] -= h;
                    let num = (f(&p) - f(&q)) / (2.0 * h);
                    assert!((num - g[[i, j]]).abs() < 1e-8, "{s} [{i},{j}]");
                }
            }
        }
    }
}
