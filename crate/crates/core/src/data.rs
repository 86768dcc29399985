//! Synthetic datasets.

use std::fmt::Write as _;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Target;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
    /// Number of classes for classification data.
    pub classes: Option<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inputs of `indices` flattened sample-major, with their targets.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<Target>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut t = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.inputs[i]);
            t.push(self.targets[i].clone());
        }
        (x, t)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            classes: self.classes,
            seed: self.seed,
        }
    }

    /// Disjoint train/test partition; classification data is split per class.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
        }
        let mut rng = SplitMix64::new(SplitMix64::derive(seed, 0x5EED));
        let groups: Vec<Vec<usize>> = match self.classes {
            Some(k) => (0..k)
                .map(|c| {
                    (0..self.len())
                        .filter(|&i| self.targets[i] == Target::Class(c))
                        .collect()
                })
                .collect(),
            None => vec![(0..self.len()).collect()],
        };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for mut g in groups {
            rng.shuffle(&mut g);
            let n_test = (g.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&g[..n_test]);
            train.extend_from_slice(&g[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Header `x0,…,x{d-1},label` (or `y0,…` columns for vector targets).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let xs: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        out.push_str(&xs.join(","));
        match self.targets.first() {
            Some(Target::Vector(v)) => {
                for i in 0..v.len() {
                    let _ = write!(out, ",y{i}");
                }
            }
            _ => out.push_str(",label"),
        }
        out.push('\n');
        for (x, t) in self.inputs.iter().zip(&self.targets) {
            let mut cells: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            match t {
                Target::Class(c) => cells.push(c.to_string()),
                Target::Vector(v) => cells.extend(v.iter().map(|y| format!("{y:.17e}"))),
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Two interleaved spirals: `r(φ) = φ/4π` on `φ ∈ [0, 4π]`, class `k` rotated
/// by `kπ`, plus isotropic Gaussian noise.
pub fn make_spirals(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_counts(n_per_class, noise_sd)?;
    let mut rng = SplitMix64::new(SplitMix64::derive(seed, 1));
    let mut inputs = Vec::with_capacity(2 * n_per_class);
    let mut targets = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for i in 0..n_per_class {
            let phi = if n_per_class > 1 {
                4.0 * PI * i as f64 / (n_per_class - 1) as f64
            } else {
                0.0
            };
            let r = phi / (4.0 * PI);
            let ang = phi + class as f64 * PI;
            let (nx, ny) = (rng.normal(), rng.normal());
            inputs.push(vec![r * ang.cos() + noise_sd * nx, r * ang.sin() + noise_sd * ny]);
            targets.push(Target::Class(class));
        }
    }
    Ok(Dataset {
        dim: 2,
        inputs,
        targets,
        classes: Some(2),
        seed,
    })
}

/// Concentric circles with uniformly drawn angles; class `k` has radius `radii[k]`.
pub fn make_circles(n_per_class: usize, radii: [f64; 2], noise_sd: f64, seed: u64) -> Result<Dataset> {
    check_counts(n_per_class, noise_sd)?;
    let mut rng = SplitMix64::new(SplitMix64::derive(seed, 2));
    let mut inputs = Vec::with_capacity(2 * n_per_class);
    let mut targets = Vec::with_capacity(2 * n_per_class);
    for (class, &r) in radii.iter().enumerate() {
        for _ in 0..n_per_class {
            let ang = rng.uniform(0.0, 2.0 * PI);
            let (nx, ny) = (rng.normal(), rng.normal());
            inputs.push(vec![r * ang.cos() + noise_sd * nx, r * ang.sin() + noise_sd * ny]);
            targets.push(Target::Class(class));
        }
    }
    Ok(Dataset {
        dim: 2,
        inputs,
        targets,
        classes: Some(2),
        seed,
    })
}

/// The smooth target used by [`make_regression`].
pub fn regression_target(x: &[f64]) -> Vec<f64> {
    vec![(PI * x[0]).sin() * x[1].cos(), 0.5 * x[0] * x[1] + 0.25 * x[1]]
}

/// Inputs uniform on `[-1, 1]²`, targets from [`regression_target`].
pub fn make_regression(n: usize, seed: u64) -> Result<Dataset> {
    check_counts(n, 0.0)?;
    let mut rng = SplitMix64::new(SplitMix64::derive(seed, 3));
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
        .collect();
    let targets = inputs.iter().map(|x| Target::Vector(regression_target(x))).collect();
    Ok(Dataset {
        dim: 2,
        inputs,
        targets,
        classes: None,
        seed,
    })
}

fn check_counts(n: usize, noise_sd: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample per class".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be non-negative, got {noise_sd}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Spirals,
    Circles,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Per class for classification data, total for regression.
    pub n_per_class: usize,
    pub noise: f64,
    pub radii: [f64; 2],
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            n_per_class: 250,
            noise: 0.05,
            radii: [0.5, 1.0],
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    /// Generates the data and splits it into (train, test).
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let all = match self.kind {
            DatasetKind::Spirals => make_spirals(self.n_per_class, self.noise, seed)?,
            DatasetKind::Circles => make_circles(self.n_per_class, self.radii, self.noise, seed)?,
            DatasetKind::Regression => make_regression(self.n_per_class, seed)?,
        };
        all.split(self.test_fraction, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_starts_at_origin() {
        let d = make_spirals(10, 0.0, 1).unwrap();
        assert_eq!(d.inputs[0], vec![0.0, 0.0]);
        assert_eq!(d.targets[0], Target::Class(0));
        // Last point of class 0 sits at φ = 4π, r = 1.
        assert!((d.inputs[9][0] - 1.0).abs() < 1e-12 && d.inputs[9][1].abs() < 1e-12);
        // Class 1 is the π-rotation of class 0.
        assert!((d.inputs[19][0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(make_spirals(50, 0.05, 9).unwrap(), make_spirals(50, 0.05, 9).unwrap());
        assert_ne!(make_spirals(50, 0.05, 9).unwrap(), make_spirals(50, 0.05, 10).unwrap());
        assert_eq!(make_circles(20, [0.5, 1.0], 0.1, 3).unwrap(), make_circles(20, [0.5, 1.0], 0.1, 3).unwrap());
        assert_eq!(make_regression(30, 4).unwrap(), make_regression(30, 4).unwrap());
    }

    #[test]
    fn noiseless_circles_lie_on_their_radii() {
        let d = make_circles(25, [0.5, 1.5], 0.0, 2).unwrap();
        for (x, t) in d.inputs.iter().zip(&d.targets) {
            let r = x[0].hypot(x[1]);
            let want = if *t == Target::Class(0) { 0.5 } else { 1.5 };
            assert!((r - want).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_targets_follow_formula() {
        let d = make_regression(10, 5).unwrap();
        for (x, t) in d.inputs.iter().zip(&d.targets) {
            assert_eq!(*t, Target::Vector(regression_target(x)));
            assert!(x.iter().all(|v| (-1.0..1.0).contains(v)));
        }
    }

    #[test]
    fn labels_are_balanced_and_splits_disjoint() {
        let d = make_spirals(100, 0.05, 7).unwrap();
        let ones = d.targets.iter().filter(|t| **t == Target::Class(1)).count();
        assert_eq!(ones, 100);
        let (train, test) = d.split(0.2, 7).unwrap();
        assert_eq!((train.len(), test.len()), (160, 40));
        for x in &test.inputs {
            assert!(!train.inputs.contains(x));
        }
        let test_ones = test.targets.iter().filter(|t| **t == Target::Class(1)).count();
        assert_eq!(test_ones, 20);
        assert_eq!(d.split(0.2, 7).unwrap(), (train, test));
    }

    #[test]
    fn csv_export() {
        let d = make_spirals(2, 0.0, 1).unwrap();
        let csv = d.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1,label");
        assert_eq!(lines.len(), 5);
        let cells: Vec<f64> = lines[2].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells[..2], d.inputs[1][..]);
        assert!(make_regression(3, 1).unwrap().to_csv().starts_with("x0,x1,y0,y1\n"));
    }

    #[test]
    fn invalid_arguments() {
        assert!(make_spirals(0, 0.1, 1).is_err());
        assert!(make_circles(5, [1.0, 2.0], -1.0, 1).is_err());
        assert!(make_spirals(5, 0.0, 1).unwrap().split(1.0, 1).is_err());
    }
}
