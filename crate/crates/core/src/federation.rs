//! Round-based federated averaging over in-process clients.
//!
//! The server side only sees [`Client`] handles: a user id going in and a
//! [`ClientUpload`] coming out. Features, labels and interactions stay behind
//! the trait.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_negatives, UserShard};
use crate::error::{Error, Result};
use crate::privacy::BudgetPlan;
use crate::recommender::{
    local_train, local_train_with, read_params, write_params, Hyper, ItemFeatureTable,
    ParamHeader, ParamSet, UserContext,
};
use crate::rng::{self, SeedTree};

#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub user_id: u32,
    pub params: ParamSet,
    /// Per-example loss of the client's last local epoch.
    pub mean_loss: f64,
}

pub trait Client: Sync {
    fn user_id(&self) -> u32;
    /// Trains on the broadcast model and returns what the client uploads.
    fn train(&self, global: &ParamSet, round: usize) -> Result<ClientUpload>;
}

/// When a client draws its negative examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampling {
    /// Once, when the shard is built.
    #[default]
    Fixed,
    /// Afresh every round the client is sampled.
    Round,
}

/// A simulated user: local SGD on its shard, then the privacy plan.
pub struct LocalClient<'a> {
    user_id: u32,
    ctx: UserContext,
    shard: &'a UserShard,
    items: &'a ItemFeatureTable,
    hyper: Hyper,
    plan: &'a BudgetPlan,
    seeds: SeedTree,
    negatives: NegativeSampling,
}

impl<'a> LocalClient<'a> {
    pub fn new(
        shard: &'a UserShard,
        items: &'a ItemFeatureTable,
        hyper: Hyper,
        plan: &'a BudgetPlan,
        seeds: SeedTree,
    ) -> Self {
        Self {
            user_id: shard.user_id,
            ctx: UserContext::new(shard.features.as_slice(), shard.neighbors(), items),
            shard,
            items,
            hyper,
            plan,
            seeds,
            negatives: NegativeSampling::Fixed,
        }
    }

    pub fn with_negatives(mut self, negatives: NegativeSampling) -> Self {
        self.negatives = negatives;
        self
    }

    fn examples(&self, round: usize) -> Cow<'a, [(u32, u8)]> {
        match self.negatives {
            NegativeSampling::Fixed => Cow::Borrowed(&self.shard.examples),
            NegativeSampling::Round => {
                let mut ex: Vec<(u32, u8)> = self.shard.examples.iter().copied().filter(|e| e.1 == 1).collect();
                let mut r = self.seeds.stream(rng::NEGATIVES, &[u64::from(self.user_id), round as u64 + 1]);
                let drawn = sample_negatives(
                    self.user_id,
                    &self.shard.positives,
                    ex.len(),
                    self.items.num_items(),
                    self.hyper.negative_ratio,
                    &mut r,
                );
                ex.extend(drawn);
                Cow::Owned(ex)
            }
        }
    }
}

impl Client for LocalClient<'_> {
    fn user_id(&self) -> u32 {
        self.user_id
    }

    fn train(&self, global: &ParamSet, round: usize) -> Result<ClientUpload> {
        let path = [u64::from(self.user_id), round as u64];
        let mut shuffle = self.seeds.stream(rng::LOCAL_SHUFFLE, &path);
        let mut noise = self.seeds.stream(rng::NOISE, &path);
        let examples = self.examples(round);
        let examples = examples.as_ref();
        let outcome = if self.plan.per_epoch {
            local_train_with(global, self.items, &self.ctx, examples, &self.hyper, &mut shuffle, |p, _| {
                self.plan.perturb_in_place(p, &mut noise)
            })?
        } else {
            let mut out = local_train(global, self.items, &self.ctx, examples, &self.hyper, &mut shuffle)?;
            self.plan.perturb_in_place(&mut out.params, &mut noise)?;
            out
        };
        Ok(ClientUpload {
            user_id: self.user_id,
            mean_loss: outcome.mean_loss(),
            params: outcome.params,
        })
    }
}

/// Draws `⌈fraction·n⌉` distinct indices uniformly, returned sorted.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("client fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Element-wise mean. Summation runs in ascending user id order whatever the
/// order of `uploads`. Offsets from the lowest id's upload are averaged
/// rather than raw values, so identical uploads come back bit for bit.
pub fn aggregate(uploads: &[ClientUpload]) -> Result<ParamSet> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Data("aggregation needs at least one upload".into()))?;
    let mut order: Vec<&ClientUpload> = uploads.iter().collect();
    order.sort_by_key(|u| u.user_id);
    let pivot = order[0].params.as_slice();
    let mut sum = vec![0.0; pivot.len()];
    for upload in &order {
        if !upload.params.congruent(&first.params) {
            return Err(Error::Shape(format!("upload from user {} has a different layout", upload.user_id)));
        }
        for ((s, v), p) in sum.iter_mut().zip(upload.params.as_slice()).zip(pivot) {
            *s += v - p;
        }
    }
    let n = uploads.len() as f64;
    let mean = sum.iter().zip(pivot).map(|(s, p)| p + s / n).collect();
    ParamSet::from_values(*first.params.layout(), mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub client_fraction: f64,
    /// Evaluate the validator every this many rounds; 0 disables it.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement; 0 never stops.
    pub patience: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            client_fraction: 0.5,
            eval_every: 0,
            patience: 10,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "client_fraction must be in (0, 1], got {}",
                self.client_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub bytes: u64,
}

/// Append-only per-round record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    rows: Vec<RoundLog>,
}

impl TrainLog {
    pub fn push(&mut self, row: RoundLog) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[RoundLog] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mean_loss,seconds,bytes\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3},{}\n", r.round, r.mean_loss, r.seconds, r.bytes));
        }
        out
    }
}

pub struct RoundInfo<'a> {
    pub round: usize,
    pub broadcast: &'a ParamSet,
    pub uploads: &'a [ClientUpload],
}

/// Sees every round between local training and aggregation.
pub trait RoundObserver {
    fn observe(&mut self, info: &RoundInfo<'_>) -> Result<()>;
}

impl RoundObserver for () {
    fn observe(&mut self, _: &RoundInfo<'_>) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&RoundInfo<'_>) -> Result<()>> RoundObserver for F {
    fn observe(&mut self, info: &RoundInfo<'_>) -> Result<()> {
        self(info)
    }
}

pub type Validator<'a> = dyn FnMut(usize, &ParamSet) -> Result<f64> + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: TrainLog,
    pub rounds_run: usize,
    pub stopped_early: bool,
}

/// Runs federated averaging. `clients` must be sorted by user id; `workers`
/// bounds the number of clients trained concurrently and never changes the
/// result.
pub fn run_training<C: Client>(
    clients: &[C],
    init: ParamSet,
    cfg: &FedConfig,
    seeds: &SeedTree,
    workers: usize,
    observer: &mut dyn RoundObserver,
    mut validator: Option<&mut Validator<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Data("no clients to train".into()));
    }
    if clients.windows(2).any(|w| w[0].user_id() >= w[1].user_id()) {
        return Err(Error::Data("clients must be sorted by unique user id".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut global = init;
    let mut log = TrainLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let mut sampler = seeds.stream(rng::CLIENT_SAMPLING, &[round as u64]);
        let sampled = sample_clients(clients.len(), cfg.client_fraction, &mut sampler)?;
        let uploads: Vec<ClientUpload> = pool.install(|| {
            sampled
                .par_iter()
                .map(|&i| clients[i].train(&global, round))
                .collect::<Result<_>>()
        })?;
        observer.observe(&RoundInfo { round, broadcast: &global, uploads: &uploads })?;

        let next = aggregate(&uploads)?;
        if !next.is_finite() {
            let bad = uploads.iter().filter(|u| !u.params.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "aggregate after round {round} ({bad} of {} uploads non-finite)",
                uploads.len()
            )));
        }
        global = next;
        let mean_loss = uploads.iter().map(|u| u.mean_loss).sum::<f64>() / uploads.len() as f64;
        let bytes = (uploads.len() * global.len() * 8) as u64;
        log.push(RoundLog {
            round,
            mean_loss,
            seconds: started.elapsed().as_secs_f64(),
            bytes,
        });
        log::info!("round {round}: {} clients, mean loss {mean_loss:.4}", uploads.len());

        if let Some(v) = validator.as_deref_mut() {
            if cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0 {
                let score = v(round, &global)?;
                if score > best {
                    best = score;
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        params: global,
        rounds_run: log.len(),
        log,
        stopped_early,
    })
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, header: &ParamHeader) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_params(&mut out, params, header)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ParamHeader)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut BufReader::new(file))
}
