//! Gaussian-mixture classification data with deliberately confusable class pairs.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::output::{fmt_num, parse_num};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Distance from the origin to each class mean along its own axis.
    pub class_separation: f64,
    pub confusion_pairs: Vec<(usize, usize)>,
    /// Fraction of the way each confused mean moves toward the pair midpoint.
    pub confusion_pull: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            samples_per_class: 2000,
            feature_dim: 8,
            class_separation: 3.0,
            confusion_pairs: vec![(0, 1), (2, 3)],
            confusion_pull: 0.6,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 classes, got {k}")));
        }
        if self.feature_dim < k {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} must be >= num_classes {k}",
                self.feature_dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("samples_per_class must be positive".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_scale must be positive, got {}", self.noise_scale)));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "class_separation must be finite and >= 0, got {}",
                self.class_separation
            )));
        }
        if !(0.0..=1.0).contains(&self.confusion_pull) {
            return Err(Error::InvalidArgument(format!(
                "confusion_pull must lie in [0, 1], got {}",
                self.confusion_pull
            )));
        }
        for &(a, b) in &self.confusion_pairs {
            if a >= k || b >= k || a == b {
                return Err(Error::InvalidArgument(format!("bad confusion pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    /// Class means after applying the confusion pulls in listed order.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut means: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|k| {
                let mut m = vec![0.0; self.feature_dim];
                m[k] = self.class_separation;
                m
            })
            .collect();
        for &(a, b) in &self.confusion_pairs {
            let t = self.confusion_pull / 2.0;
            let (ma, mb) = (means[a].clone(), means[b].clone());
            for d in 0..self.feature_dim {
                means[a][d] = ma[d] + t * (mb[d] - ma[d]);
                means[b][d] = mb[d] + t * (ma[d] - mb[d]);
            }
        }
        means
    }
}

/// Balanced, shuffled samples; identical output for identical specs.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for _ in 0..spec.samples_per_class {
        for (label, mean) in means.iter().enumerate() {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise_scale * z
                })
                .collect();
            data.push(LabeledSample::new(features, label));
        }
    }
    data.shuffle(&mut rng);
    Ok(data)
}

pub fn write_dataset_csv<W: Write>(mut out: W, data: &[LabeledSample]) -> Result<()> {
    let dim = data.first().map_or(0, |s| s.features.len());
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in data {
        if s.features.len() != dim {
            return Err(Error::Shape("samples have differing feature counts".into()));
        }
        write!(out, "{}", s.label)?;
        for v in &s.features {
            write!(out, ",{}", fmt_num(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<Vec<LabeledSample>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.first() != Some(&"label") || cols.iter().skip(1).enumerate().any(|(i, c)| *c != format!("f{i}")) {
        return Err(Error::Format(format!("bad dataset header `{header}`")));
    }
    let dim = cols.len() - 1;
    let mut data = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.trim().split(',');
        let label = fields
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| Error::Format(format!("row {}: bad label", n + 1)))?;
        let features = fields.map(parse_num).collect::<Result<Vec<f64>>>()?;
        if features.len() != dim {
            return Err(Error::Format(format!("row {}: expected {dim} features, got {}", n + 1, features.len())));
        }
        data.push(LabeledSample::new(features, label));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            samples_per_class: 20,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small().validate().is_ok());
        assert!(DatasetSpec { num_classes: 2, ..small() }.validate().is_err());
        assert!(DatasetSpec { feature_dim: 4, ..small() }.validate().is_err());
        assert!(DatasetSpec { noise_scale: 0.0, ..small() }.validate().is_err());
        assert!(DatasetSpec { confusion_pairs: vec![(1, 1)], ..small() }.validate().is_err());
        assert!(DatasetSpec { confusion_pairs: vec![(0, 5)], ..small() }.validate().is_err());
        assert!(DatasetSpec { confusion_pull: 1.5, ..small() }.validate().is_err());
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic(&small()).unwrap();
        assert_eq!(a, gen_synthetic(&small()).unwrap());
        assert_ne!(a, gen_synthetic(&DatasetSpec { seed: 1, ..small() }).unwrap());
        assert_eq!(a.len(), 100);
        for k in 0..5 {
            assert_eq!(a.iter().filter(|s| s.label == k).count(), 20);
        }
        assert!(a.iter().all(|s| s.features.len() == 8));
    }

    #[test]
    fn pull_moves_pair_means_together() {
        let spec = DatasetSpec { class_separation: 2.0, confusion_pull: 0.5, ..small() };
        let m = spec.class_means();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let base = 2.0 * 2f64.sqrt();
        assert!((dist(&m[0], &m[1]) - base / 2.0).abs() < 1e-12);
        assert!((dist(&m[2], &m[3]) - base / 2.0).abs() < 1e-12);
        assert_eq!(m[4][4], 2.0);
        let full = DatasetSpec { confusion_pull: 1.0, ..spec }.class_means();
        assert!(dist(&full[0], &full[1]) < 1e-12);
    }

    #[test]
    fn empirical_means_track_spec() {
        let spec = DatasetSpec { samples_per_class: 4000, ..DatasetSpec::default() };
        let data = gen_synthetic(&spec).unwrap();
        let means = spec.class_means();
        for k in 0..spec.num_classes {
            let rows: Vec<_> = data.iter().filter(|s| s.label == k).collect();
            for d in 0..spec.feature_dim {
                let m = rows.iter().map(|s| s.features[d]).sum::<f64>() / rows.len() as f64;
                // 5 standard errors of a unit-variance mean over 4000 draws
                assert!((m - means[k][d]).abs() < 5.0 / 4000f64.sqrt(), "class {k} dim {d}: {m}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let data = gen_synthetic(&small()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,f0,f1,f2,f3,f4,f5,f6,f7\n"));
        assert_eq!(read_dataset_csv(&buf[..]).unwrap(), data);
        assert!(read_dataset_csv("lbl,f0\n1,2\n".as_bytes()).is_err());
        assert!(read_dataset_csv("label,f0\n1,2,3\n".as_bytes()).is_err());
    }
}
