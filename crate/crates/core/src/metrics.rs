//! Continual-learning summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[t][i]`: accuracy (%) on the classes of task `i` after stage `t`
/// (`i ≤ t`); `seen[t]`: accuracy on every class seen by stage `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<f64>>,
    pub seen: Vec<f64>,
}

impl AccuracyMatrix {
    /// Appends stage `t = a.len()`; `row` must have `t + 1` entries.
    pub fn push(&mut self, row: Vec<f64>, seen: f64) -> Result<()> {
        if row.len() != self.a.len() + 1 {
            return Err(Error::Contract(format!(
                "stage {} row has {} entries",
                self.a.len(),
                row.len()
            )));
        }
        if let Some(v) = row.iter().chain([&seen]).find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 100]")));
        }
        self.a.push(row);
        self.seen.push(seen);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.a.len()
    }
}

pub fn avg_incremental_accuracy(seen: &[f64]) -> Result<f64> {
    if seen.is_empty() {
        return Err(Error::Contract("average of zero stages".into()));
    }
    Ok(seen.iter().sum::<f64>() / seen.len() as f64)
}

/// `(1/(T−1)) Σ_{i<T−1} (a[T−1][i] − a[i][i])`.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.stages();
    if t < 2 {
        return Err(Error::Contract("backward transfer needs at least two stages".into()));
    }
    let last = &m.a[t - 1];
    Ok((0..t - 1).map(|i| last[i] - m.a[i][i]).sum::<f64>() / (t - 1) as f64)
}

/// Mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let last = m
        .a
        .last()
        .ok_or_else(|| Error::Contract("average accuracy of an empty matrix".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::default();
        for r in rows {
            m.push(r.to_vec(), r[r.len() - 1]).unwrap();
        }
        m
    }

    #[test]
    fn incremental_average() {
        assert_eq!(avg_incremental_accuracy(&[80.0, 70.0, 60.0]).unwrap(), 70.0);
        assert_eq!(avg_incremental_accuracy(&[55.0]).unwrap(), 55.0);
        assert_eq!(avg_incremental_accuracy(&[42.5; 7]).unwrap(), 42.5);
        assert!(avg_incremental_accuracy(&[]).is_err());
    }

    #[test]
    fn backward_transfer_examples() {
        assert_eq!(backward_transfer(&matrix(&[&[90.0], &[90.0, 50.0]])).unwrap(), 0.0);
        assert_eq!(backward_transfer(&matrix(&[&[90.0], &[70.0, 50.0]])).unwrap(), -20.0);
        let m = matrix(&[&[80.0], &[75.0, 60.0], &[70.0, 50.0, 40.0]]);
        assert_eq!(backward_transfer(&m).unwrap(), -10.0);
        assert!(backward_transfer(&matrix(&[&[50.0]])).is_err());
    }

    #[test]
    fn average_accuracy_examples() {
        assert_eq!(average_accuracy(&matrix(&[&[1.0], &[0.0, 0.0], &[60.0, 70.0, 80.0]])).unwrap(), 70.0);
        assert_eq!(average_accuracy(&matrix(&[&[33.0]])).unwrap(), 33.0);
        assert_eq!(average_accuracy(&matrix(&[&[0.0], &[0.0, 0.0]])).unwrap(), 0.0);
    }

    #[test]
    fn push_validates() {
        let mut m = AccuracyMatrix::default();
        assert!(m.push(vec![1.0, 2.0], 1.0).is_err());
        assert!(m.push(vec![101.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn bwt_nonpositive_without_improvement(
            diag in proptest::collection::vec(0.0f64..100.0, 2..6),
            drops in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let t = diag.len();
            let mut m = AccuracyMatrix::default();
            for s in 0..t {
                let row: Vec<f64> = (0..=s)
                    .map(|i| if i == s { diag[i] } else { diag[i] * (1.0 - drops[i]) })
                    .collect();
                m.push(row, diag[s]).unwrap();
            }
            prop_assert!(backward_transfer(&m).unwrap() <= 0.0);
        }

        #[test]
        fn incremental_average_is_monotone(
            seen in proptest::collection::vec(0.0f64..90.0, 1..8),
            i in 0usize..8,
            bump in 0.0f64..10.0,
        ) {
            let mut up = seen.clone();
            let i = i % seen.len();
            up[i] += bump;
            prop_assert!(avg_incremental_accuracy(&up).unwrap() >= avg_incremental_accuracy(&seen).unwrap());
        }
    }
}
