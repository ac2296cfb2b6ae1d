//! The end-to-end pipeline: load → train → evaluate → attack → report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{attack_csv, run_attacks, AttackResult, Attacker, ComponentMask, DeltaArchive, DeltaHarvester};
use crate::config::{DataConfig, ExperimentConfig};
use crate::dataset::{build_shards, load_movielens, synthetic_movielens, Attribute, MovieLens, PrivateLabels, UserShard};
use crate::error::{Error, Result};
use crate::evaluation::{held_out_ranks, hit_rates};
use crate::federation::{load_checkpoint, run_training, save_checkpoint, LocalClient, TrainLog};
use crate::privacy::ComponentNoise;
use crate::recommender::{ComponentTag, ItemFeatureTable, ParamHeader, ParamLayout, ParamSet};
use crate::rng::{self, SeedTree};
use crate::dataset::FEATURE_DIM;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DELTAS_FILE: &str = "deltas.bin";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const HITS_FILE: &str = "hits.csv";
pub const ATTACKS_FILE: &str = "attacks.csv";
pub const F1_CURVE_FILE: &str = "f1_by_component.csv";
pub const SWEEP_HITS_FILE: &str = "sweep_hits.csv";
pub const SWEEP_F1_FILE: &str = "sweep_f1.csv";

/// Everything derived from the config before training starts.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub seeds: SeedTree,
    pub data: MovieLens,
    pub shards: Vec<UserShard>,
    pub items: ItemFeatureTable,
    pub layout: ParamLayout,
}

impl Prepared {
    pub fn labels(&self) -> BTreeMap<u32, PrivateLabels> {
        self.shards.iter().map(|s| (s.user_id, s.labels)).collect()
    }

    pub fn initial_params(&self) -> ParamSet {
        ParamSet::init(self.layout, self.config.model.init, &mut self.seeds.stream(rng::INIT, &[]))
    }

    pub fn header(&self, round: usize) -> ParamHeader {
        ParamHeader {
            round: Some(round),
            config_hash: Some(self.config.hash()),
            master_seed: Some(self.config.master_seed),
            ..ParamHeader::for_layout(self.layout)
        }
    }
}

pub fn load_data(config: &ExperimentConfig, seeds: &SeedTree) -> Result<MovieLens> {
    match &config.data {
        DataConfig::Synthetic { shape } => synthetic_movielens(shape, &mut seeds.stream("synthetic-data", &[])),
        DataConfig::Files { .. } => {
            let (format, ratings, users) = config.resolved_data_paths().expect("file source");
            load_movielens(&ratings, &users, format)
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let seeds = SeedTree::new(config.master_seed);
    let data = load_data(config, &seeds).map_err(|e| e.in_stage("data"))?;
    let shards = build_shards(&data, config.model.negative_ratio, &seeds).map_err(|e| e.in_stage("data"))?;
    if shards.is_empty() {
        return Err(Error::Data("dataset has no usable users".into()).in_stage("data"));
    }
    let d = config.model.dim;
    let items = ItemFeatureTable::generate(data.num_items(), d, &mut seeds.stream(rng::ITEM_FEATURES, &[]));
    Ok(Prepared {
        config: config.clone(),
        seeds,
        data,
        shards,
        items,
        layout: ParamLayout::new(d, FEATURE_DIM, d),
    })
}

pub struct Trained {
    pub params: ParamSet,
    pub log: TrainLog,
    pub archive: Option<DeltaArchive>,
    pub rounds_run: usize,
    pub stopped_early: bool,
}

/// Runs federated training, harvesting deltas when any attacker is
/// configured.
pub fn train(p: &Prepared, workers: usize) -> Result<Trained> {
    let cfg = &p.config;
    let hyper = cfg.model.hyper();
    let clients: Vec<LocalClient<'_>> = p
        .shards
        .iter()
        .map(|s| LocalClient::new(s, &p.items, hyper, &cfg.privacy, p.seeds).with_negatives(cfg.model.negatives))
        .collect();
    let harvest = !cfg.attack.attackers.is_empty() || cfg.output.save_deltas;
    let mut harvester = DeltaHarvester::new(p.layout, hyper.learning_rate, cfg.federation.rounds, cfg.attack.harvest);
    let k = cfg.eval.hit_k.iter().copied().max().unwrap_or(20);
    let mut validate = |_: usize, params: &ParamSet| -> Result<f64> {
        let ranks = held_out_ranks(params, &p.items, &p.shards)?;
        Ok(hit_rates(&ranks, &[k])?[0].1)
    };
    let observer: &mut dyn crate::federation::RoundObserver = if harvest && hyper.learning_rate > 0.0 {
        &mut harvester
    } else {
        &mut ()
    };
    let outcome = run_training(
        &clients,
        p.initial_params(),
        &cfg.federation,
        &p.seeds,
        workers,
        observer,
        Some(&mut validate),
    )
    .map_err(|e| e.in_stage("train"))?;
    let archive = if harvest && hyper.learning_rate > 0.0 {
        let mut a = harvester.finish()?;
        a.config_hash = cfg.hash();
        a.master_seed = cfg.master_seed;
        Some(a)
    } else {
        None
    };
    Ok(Trained {
        params: outcome.params,
        log: outcome.log,
        archive,
        rounds_run: outcome.rounds_run,
        stopped_early: outcome.stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub k: usize,
    pub hit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub component: ComponentTag,
    pub kind: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attribute: Attribute,
    pub attacker: Attacker,
    pub mask: ComponentMask,
    pub zeta: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub evaluable_users: usize,
}

/// Everything a run measured. Contains no timings or output paths, so equal
/// config hashes give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub rounds_run: usize,
    pub stopped_early: bool,
    pub final_mean_loss: Option<f64>,
    pub hit_at_k: Vec<HitRow>,
    pub noise: Vec<NoiseRow>,
    pub attacks: Vec<AttackResult>,
    pub attack_summary: Vec<AttackSummary>,
}

impl ExperimentReport {
    pub fn hit(&self, k: usize) -> Option<f64> {
        self.hit_at_k.iter().find(|r| r.k == k).map(|r| r.hit)
    }

    pub fn mean_f1(&self, attribute: Attribute, attacker: Attacker, mask: ComponentMask) -> Option<f64> {
        self.attack_summary
            .iter()
            .find(|s| s.attribute == attribute && s.attacker == attacker && s.mask == mask)
            .map(|s| s.mean)
    }

    fn stamp(&self) -> String {
        format!("# config_hash={} master_seed={}\n", self.config_hash, self.master_seed)
    }

    pub fn hits_csv(&self) -> String {
        let mut out = self.stamp() + "k,hit\n";
        for r in &self.hit_at_k {
            out.push_str(&format!("{},{}\n", r.k, r.hit));
        }
        out
    }

    pub fn attacks_csv(&self) -> String {
        self.stamp() + &attack_csv(&self.attacks)
    }

    /// Long format, one row per (attribute, attacker, mask, ζ).
    pub fn f1_curve_csv(&self) -> String {
        let mut out = self.stamp() + "attribute,attacker,component_mask,zeta,f1_mean,f1_std,n\n";
        for s in &self.attack_summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.attribute.name(),
                s.attacker.name(),
                s.mask,
                s.zeta,
                s.mean,
                s.std,
                s.n
            ));
        }
        out
    }
}

pub fn noise_rows(config: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    ComponentTag::ALL
        .iter()
        .map(|&tag| {
            let (kind, scale) = match config.privacy.component_noise(tag)? {
                ComponentNoise::Zero => ("none", 0.0),
                ComponentNoise::Laplace(l) => ("laplace", l),
                ComponentNoise::Gaussian(s) => ("gaussian", s),
            };
            Ok(NoiseRow { component: tag, kind: kind.into(), scale })
        })
        .collect()
}

pub fn summarize_attacks(results: &[AttackResult]) -> Vec<AttackSummary> {
    let mut groups: Vec<(AttackSummary, Vec<f64>)> = Vec::new();
    for r in results {
        let pos = groups.iter().position(|(s, _)| {
            s.attribute == r.attribute && s.attacker == r.attacker && s.mask == r.mask && s.zeta == r.zeta
        });
        let idx = pos.unwrap_or_else(|| {
            groups.push((
                AttackSummary {
                    attribute: r.attribute,
                    attacker: r.attacker,
                    mask: r.mask,
                    zeta: r.zeta,
                    mean: 0.0,
                    std: 0.0,
                    n: 0,
                },
                Vec::new(),
            ));
            groups.len() - 1
        });
        groups[idx].1.push(r.f1);
    }
    groups
        .into_iter()
        .map(|(mut s, v)| {
            let n = v.len() as f64;
            s.mean = v.iter().sum::<f64>() / n;
            s.std = (v.iter().map(|x| (x - s.mean).powi(2)).sum::<f64>() / n).sqrt();
            s.n = v.len();
            s
        })
        .collect()
}

pub fn evaluate(p: &Prepared, params: &ParamSet) -> Result<Vec<HitRow>> {
    let ranks = held_out_ranks(params, &p.items, &p.shards).map_err(|e| e.in_stage("eval"))?;
    Ok(hit_rates(&ranks, &p.config.eval.hit_k)
        .map_err(|e| e.in_stage("eval"))?
        .into_iter()
        .map(|(k, hit)| HitRow { k, hit })
        .collect())
}

pub fn attack(p: &Prepared, archive: &DeltaArchive, workers: usize) -> Result<Vec<AttackResult>> {
    if p.config.attack.attackers.is_empty() {
        return Ok(Vec::new());
    }
    run_attacks(archive, &p.labels(), &p.config.attack, &p.seeds, workers).map_err(|e| e.in_stage("attack"))
}

pub fn dataset_summary(p: &Prepared) -> DatasetSummary {
    DatasetSummary {
        users: p.data.num_users(),
        items: p.data.num_items(),
        interactions: p.data.interactions.len(),
        evaluable_users: p.shards.iter().filter(|s| s.held_out_item.is_some()).count(),
    }
}

pub fn build_report(
    p: &Prepared,
    trained: Option<&Trained>,
    hit_at_k: Vec<HitRow>,
    attacks: Vec<AttackResult>,
) -> Result<ExperimentReport> {
    Ok(ExperimentReport {
        config_hash: p.config.hash(),
        master_seed: p.config.master_seed,
        config: p.config.canonical(),
        dataset: dataset_summary(p),
        rounds_run: trained.map_or(0, |t| t.rounds_run),
        stopped_early: trained.is_some_and(|t| t.stopped_early),
        final_mean_loss: trained.and_then(|t| t.log.rows().last()).map(|r| r.mean_loss),
        hit_at_k,
        noise: noise_rows(&p.config)?,
        attack_summary: summarize_attacks(&attacks),
        attacks,
    })
}

pub struct RunOutput {
    pub report: ExperimentReport,
    pub trained: Trained,
}

/// Train, evaluate and attack in memory.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<RunOutput> {
    run_prepared(&prepare(config)?, workers)
}

pub fn run_prepared(p: &Prepared, workers: usize) -> Result<RunOutput> {
    let trained = train(p, workers)?;
    let hits = evaluate(p, &trained.params)?;
    let attacks = match &trained.archive {
        Some(a) => attack(p, a, workers)?,
        None => Vec::new(),
    };
    let report = build_report(p, Some(&trained), hits, attacks)?;
    Ok(RunOutput { report, trained })
}

/// Writes into a sibling staging directory and renames it over `dir` only
/// once `fill` succeeds, so failures leave nothing behind.
pub fn write_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no final component", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging: PathBuf = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Checkpoint, delta archive, training log and report files.
pub fn write_run(dir: &Path, p: &Prepared, run: &RunOutput) -> Result<()> {
    write_atomically(dir, |d| {
        save_checkpoint(&d.join(CHECKPOINT_FILE), &run.trained.params, &p.header(run.trained.rounds_run))?;
        if let (true, Some(a)) = (p.config.output.save_deltas, &run.trained.archive) {
            a.save(&d.join(DELTAS_FILE))?;
        }
        write_text(d, TRAIN_LOG_FILE, &run.trained.log.to_csv())?;
        write_report(d, &run.report)
    })
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    write_text(dir, REPORT_FILE, &(serde_json::to_string_pretty(report)? + "\n"))?;
    write_text(dir, HITS_FILE, &report.hits_csv())?;
    if !report.attacks.is_empty() {
        write_text(dir, ATTACKS_FILE, &report.attacks_csv())?;
        write_text(dir, F1_CURVE_FILE, &report.f1_curve_csv())?;
    }
    Ok(())
}

fn check_provenance(what: &Path, layout: ParamLayout, seed: Option<u64>, hash: Option<&str>, p: &Prepared) -> Result<()> {
    if layout != p.layout {
        return Err(Error::Config(format!(
            "{} has layout {:?}, config implies {:?}",
            what.display(),
            layout,
            p.layout
        )));
    }
    if let Some(s) = seed.filter(|&s| s != p.config.master_seed) {
        return Err(Error::Config(format!(
            "{} was written with master seed {s}, config has {}",
            what.display(),
            p.config.master_seed
        )));
    }
    if hash.is_some_and(|h| h != p.config.hash()) {
        log::warn!("{} was written under a different config hash", what.display());
    }
    Ok(())
}

/// Loads the checkpoint of a run directory, checking it belongs to `p`.
pub fn load_run_checkpoint(dir: &Path, p: &Prepared) -> Result<(ParamSet, ParamHeader)> {
    let path = dir.join(CHECKPOINT_FILE);
    let (params, header) = load_checkpoint(&path)?;
    check_provenance(&path, header.layout, header.master_seed, header.config_hash.as_deref(), p)?;
    Ok((params, header))
}

pub fn load_run_deltas(dir: &Path, p: &Prepared) -> Result<DeltaArchive> {
    let path = dir.join(DELTAS_FILE);
    let archive = DeltaArchive::load(&path)?;
    check_provenance(&path, archive.layout, Some(archive.master_seed), Some(&archive.config_hash), p)?;
    Ok(archive)
}

fn sweep_stamp(reports: &[(String, ExperimentReport)]) -> String {
    let mut out = String::new();
    for (label, r) in reports {
        out.push_str(&format!("# cell={label} config_hash={} master_seed={}\n", r.config_hash, r.master_seed));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Hit@K against the noise actually applied, one row per (cell, K).
pub fn sweep_hits_csv(reports: &[(String, ExperimentReport)]) -> String {
    let mut out = sweep_stamp(reports);
    out.push_str("cell,dim,mode,noise_user,noise_item,noise_mlp1,noise_mlp2,k,hit\n");
    for (label, r) in reports {
        let scales: Vec<String> = r.noise.iter().map(|n| n.scale.to_string()).collect();
        for h in &r.hit_at_k {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(label),
                r.config.model.dim,
                r.config.privacy.mode.name(),
                scales.join(","),
                h.k,
                h.hit
            ));
        }
    }
    out
}

pub fn sweep_f1_csv(reports: &[(String, ExperimentReport)]) -> String {
    let mut out = sweep_stamp(reports);
    out.push_str("cell,attribute,attacker,component_mask,zeta,f1_mean,f1_std,n\n");
    for (label, r) in reports {
        for s in &r.attack_summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(label),
                s.attribute.name(),
                s.attacker.name(),
                s.mask,
                s.zeta,
                s.mean,
                s.std,
                s.n
            ));
        }
    }
    out
}
