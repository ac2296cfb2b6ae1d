//! Turning an archive into labelled train/test sets for the attacker.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::delta::DeltaArchive;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user_id: u32,
    pub x: Vec<f64>,
    pub y: usize,
}

/// Compromised users (train) and everyone else (test), standardized with
/// train statistics.
#[derive(Debug, Clone)]
pub struct AttackDataset {
    pub classes: usize,
    pub dim: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl AttackDataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.y).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|s| s.y).collect()
    }

    /// Same split with the labels of each side permuted. A control: any
    /// attacker should fall to chance.
    pub fn shuffled_labels<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        for side in [&mut out.train, &mut out.test] {
            let mut ys: Vec<usize> = side.iter().map(|s| s.y).collect();
            ys.shuffle(rng);
            for (s, y) in side.iter_mut().zip(ys) {
                s.y = y;
            }
        }
        out
    }
}

/// Number of compromised users for a population of `n`.
pub fn train_size(n: usize, zeta: f64) -> usize {
    ((zeta * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Splits archived users, not records, into a ζ-fraction train side and the
/// rest. Fails when a class is missing from the train side.
pub fn build_attack_dataset<R: Rng + ?Sized>(
    archive: &DeltaArchive,
    labels: &BTreeMap<u32, usize>,
    classes: usize,
    zeta: f64,
    rng: &mut R,
) -> Result<AttackDataset> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Config(format!("zeta must be in (0, 1), got {zeta}")));
    }
    if archive.len() < 2 {
        return Err(Error::DegenerateSplit(format!("{} archived users", archive.len())));
    }
    let mut order: Vec<usize> = (0..archive.len()).collect();
    order.shuffle(rng);
    let n_train = train_size(order.len(), zeta);

    let sample = |i: usize| -> Result<Sample> {
        let r = &archive.records()[i];
        let y = *labels
            .get(&r.user_id)
            .ok_or_else(|| Error::Data(format!("no label for user {}", r.user_id)))?;
        if y >= classes {
            return Err(Error::Data(format!("label {y} of user {} out of range", r.user_id)));
        }
        Ok(Sample { user_id: r.user_id, x: r.delta.clone(), y })
    };
    let mut train: Vec<Sample> = order[..n_train].iter().map(|&i| sample(i)).collect::<Result<_>>()?;
    let mut test: Vec<Sample> = order[n_train..].iter().map(|&i| sample(i)).collect::<Result<_>>()?;
    train.sort_by_key(|s| s.user_id);
    test.sort_by_key(|s| s.user_id);

    for c in 0..classes {
        if !train.iter().any(|s| s.y == c) {
            return Err(Error::DegenerateSplit(format!("class {c} absent from {} train users", train.len())));
        }
    }

    let dim = archive.mask.len(&archive.layout);
    let (mean, scale) = standardizer(&train, dim);
    for s in train.iter_mut().chain(test.iter_mut()) {
        for ((v, m), k) in s.x.iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) * k;
        }
    }
    Ok(AttackDataset { classes, dim, train, test })
}

/// Feature means and inverse standard deviations; constant features are
/// only centred.
fn standardizer(train: &[Sample], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in train {
        mean.iter_mut().zip(&s.x).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for s in train {
        var.iter_mut()
            .zip(&s.x)
            .zip(&mean)
            .for_each(|((a, v), m)| *a += (v - m) * (v - m) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt().recip() } else { 1.0 })
        .collect();
    (mean, scale)
}
