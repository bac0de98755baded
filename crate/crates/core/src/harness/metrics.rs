use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Lower-triangular test accuracies: `row(stage)[task]` after training
/// through `stage`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the next stage; it must cover exactly the tasks seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return contract(format!(
                "stage {} needs {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            ));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return contract("accuracies must lie in [0, 1]");
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage)?.get(task).copied()
    }

    pub fn row(&self, stage: usize) -> Option<&[f64]> {
        self.rows.get(stage).map(Vec::as_slice)
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// `stage,task,accuracy` lines with shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,task,accuracy\n");
        for (stage, row) in self.rows.iter().enumerate() {
            for (task, a) in row.iter().enumerate() {
                writeln!(s, "{stage},{task},{a:?}").expect("string write");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("stage,task,accuracy") {
            return contract("accuracy matrix CSV lacks its header");
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = match parts.as_slice() {
                [s, t, a] => s
                    .parse::<usize>()
                    .ok()
                    .zip(t.parse::<usize>().ok())
                    .zip(a.parse::<f64>().ok()),
                _ => None,
            };
            let Some(((stage, task), acc)) = parsed else {
                return contract(format!("malformed accuracy line {}: {line}", n + 2));
            };
            if stage == rows.len() {
                rows.push(Vec::new());
            }
            if stage + 1 != rows.len() || task != rows[stage].len() {
                return contract(format!("accuracy line {} is out of order", n + 2));
            }
            rows[stage].push(acc);
        }
        Self::from_rows(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub final_accuracies: Vec<f64>,
    pub average_accuracy: f64,
    /// One value per task except the last.
    pub forgetting: Vec<f64>,
}

/// Final-row average and per-task forgetting, the best earlier accuracy
/// minus the final one.
pub fn compute_metrics(matrix: &AccuracyMatrix) -> Result<Metrics> {
    let Some(last) = matrix.final_row() else {
        return contract("accuracy matrix is empty");
    };
    let t = matrix.stages() - 1;
    let average_accuracy = last.iter().sum::<f64>() / last.len() as f64;
    let forgetting = (0..t)
        .map(|i| {
            let best = (i..t)
                .map(|s| matrix.rows[s][i])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[i]
        })
        .collect();
    Ok(Metrics {
        final_accuracies: last.to_vec(),
        average_accuracy,
        forgetting,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over points with Euclidean distance. A point alone in
/// its group scores 0, as does a point with `a = b`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return contract("silhouette needs one label per point");
    }
    let mut groups: Vec<usize> = labels.to_vec();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return contract("silhouette needs at least two groups");
    }
    if let Some(p) = points.iter().find(|p| p.len() != points[0].len()) {
        return contract(format!("point width {} differs from {}", p.len(), points[0].len()));
    }
    let slot = |l: usize| groups.binary_search(&l).expect("label present");
    let counts = labels.iter().fold(vec![0usize; groups.len()], |mut c, &l| {
        c[slot(l)] += 1;
        c
    });
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = slot(labels[i]);
        if counts[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; groups.len()];
        for (j, q) in points.iter().enumerate() {
            if j != i {
                sums[slot(labels[j])] += distance(p, q);
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..groups.len())
            .filter(|&g| g != own)
            .map(|g| sums[g] / counts[g] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.95], vec![0.6, 1.0 / 3.0]]).unwrap();
        assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.95], vec![0.6, 1.0]]).unwrap();
        let r = compute_metrics(&m).unwrap();
        assert!((r.forgetting[0] - 0.35).abs() < 1e-12);
        assert!((r.average_accuracy - 0.8).abs() < 1e-12);
        let one = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.7]]).unwrap()).unwrap();
        assert!(one.forgetting.is_empty());
        assert!(compute_metrics(&AccuracyMatrix::new()).is_err());
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let pts = vec![vec![1.0, 1.0]; 4];
        assert_eq!(silhouette(&pts, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }
}
