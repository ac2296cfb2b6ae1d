//! The honest-but-curious server's attribute inference attack on
//! per-client parameter deltas.

mod classifier;
mod dataset;
mod delta;
mod metrics;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classifier::{infer, knn_attack, predict_all, random_attack, train_aia, AiaConfig, AiaModel};
pub use dataset::{build_attack_dataset, train_size, AttackDataset, Sample};
pub use delta::{
    compute_delta, ArchiveHeader, ComponentMask, DeltaArchive, DeltaHarvester, DeltaRecord,
    HarvestMode, HarvestSpec, DELTA_FORMAT,
};
pub use metrics::{confusion, f1_score, macro_f1, per_class_f1, F1Average};

use crate::dataset::{Attribute, PrivateLabels};
use crate::error::{Error, Result};
use crate::rng::{self, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attacker {
    Aia,
    Knn,
    Random,
}

impl Attacker {
    pub fn name(self) -> &'static str {
        match self {
            Attacker::Aia => "aia",
            Attacker::Knn => "knn",
            Attacker::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub attributes: Vec<Attribute>,
    /// Compromised fractions.
    pub zeta: Vec<f64>,
    pub masks: Vec<ComponentMask>,
    pub attackers: Vec<Attacker>,
    /// Attacker seeds per cell.
    pub seeds: usize,
    pub knn_k: usize,
    pub average: F1Average,
    pub harvest: HarvestSpec,
    pub aia: AiaConfig,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            attributes: vec![Attribute::Gender, Attribute::Age],
            zeta: vec![0.1],
            masks: vec![ComponentMask::Full],
            attackers: vec![Attacker::Aia, Attacker::Knn, Attacker::Random],
            seeds: 5,
            knn_k: 5,
            average: F1Average::Macro,
            harvest: HarvestSpec::default(),
            aia: AiaConfig::default(),
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        self.aia.validate()?;
        if let Some(z) = self.zeta.iter().find(|z| !(**z > 0.0 && **z < 1.0)) {
            return Err(Error::Config(format!("zeta must be in (0, 1), got {z}")));
        }
        if self.knn_k == 0 || self.knn_k % 2 == 0 {
            return Err(Error::Config(format!("knn_k must be odd, got {}", self.knn_k)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("at least one attacker seed is needed".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attribute: Attribute,
    pub attacker: Attacker,
    pub mask: ComponentMask,
    pub zeta: f64,
    pub seed: usize,
    pub f1: f64,
}

pub const ATTACK_CSV_HEADER: &str = "attribute,attacker,component_mask,zeta,seed,f1";

pub fn attack_csv(results: &[AttackResult]) -> String {
    let mut out = format!("{ATTACK_CSV_HEADER}\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.attribute.name(),
            r.attacker.name(),
            r.mask,
            r.zeta,
            r.seed,
            r.f1
        ));
    }
    out
}

/// Mean F1 over seeds for one cell, if any result matches.
pub fn mean_f1(results: &[AttackResult], attribute: Attribute, attacker: Attacker, mask: ComponentMask, zeta: f64) -> Option<f64> {
    let hits: Vec<f64> = results
        .iter()
        .filter(|r| r.attribute == attribute && r.attacker == attacker && r.mask == mask && r.zeta == zeta)
        .map(|r| r.f1)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

const SPLIT_ATTEMPTS: u64 = 16;

/// Splits, redrawing on degenerate class coverage.
fn split_for(
    archive: &DeltaArchive,
    labels: &BTreeMap<u32, usize>,
    classes: usize,
    zeta: f64,
    seeds: &SeedTree,
    path: [u64; 3],
) -> Result<AttackDataset> {
    let mut last = None;
    for attempt in 0..SPLIT_ATTEMPTS {
        let mut r = seeds.stream(rng::ATTACK_SPLIT, &[path[0], path[1], path[2], attempt]);
        match build_attack_dataset(archive, labels, classes, zeta, &mut r) {
            Err(e @ Error::DegenerateSplit(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn run_attacker(
    attacker: Attacker,
    ds: &AttackDataset,
    spec: &AttackSpec,
    seeds: &SeedTree,
    path: &[u64],
) -> Result<f64> {
    let mut r = seeds.stream(rng::ATTACKER, path);
    let preds = match attacker {
        Attacker::Aia => predict_all(&train_aia(ds, &spec.aia, &mut r)?, &ds.test)?,
        Attacker::Knn => knn_attack(ds, spec.knn_k)?,
        Attacker::Random => random_attack(ds, &mut r),
    };
    Ok(f1_score(&preds, &ds.test_labels(), ds.classes, spec.average))
}

/// Every (mask, attribute, ζ, seed, attacker) cell against a full-model
/// archive. Splits depend on (attribute, ζ, seed) only, so masks and
/// attackers are compared on the same users.
pub fn run_attacks(
    archive: &DeltaArchive,
    labels: &BTreeMap<u32, PrivateLabels>,
    spec: &AttackSpec,
    seeds: &SeedTree,
    workers: usize,
) -> Result<Vec<AttackResult>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut results = Vec::new();
    for (mi, &mask) in spec.masks.iter().enumerate() {
        let view = archive.restrict(mask)?;
        let mut jobs = Vec::new();
        for &attribute in &spec.attributes {
            for (zi, &zeta) in spec.zeta.iter().enumerate() {
                for seed in 0..spec.seeds {
                    jobs.push((attribute, zi, zeta, seed));
                }
            }
        }
        let cells: Vec<Vec<AttackResult>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(attribute, zi, zeta, seed)| {
                    let y: BTreeMap<u32, usize> = labels.iter().map(|(&u, l)| (u, l.get(attribute))).collect();
                    let attr = attribute as u64;
                    let ds = split_for(&view, &y, attribute.classes(), zeta, seeds, [attr, zi as u64, seed as u64])?;
                    spec.attackers
                        .iter()
                        .enumerate()
                        .map(|(ai, &attacker)| {
                            let path = [attr, mi as u64, zi as u64, seed as u64, ai as u64];
                            Ok(AttackResult {
                                attribute,
                                attacker,
                                mask,
                                zeta,
                                seed,
                                f1: run_attacker(attacker, &ds, spec, seeds, &path)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()
        })?;
        results.extend(cells.into_iter().flatten());
    }
    Ok(results)
}
