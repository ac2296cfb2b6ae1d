//! Attackers: the three-layer inference network, k-nearest neighbours and
//! a prior-matched random guess.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{AttackDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{relu_in_place, softmax, DenseLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AiaConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: [usize; 2],
    /// Stop once an epoch's mean cross-entropy falls below this; 0 runs
    /// every epoch.
    pub stop_loss: f64,
}

impl Default for AiaConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.01,
            batch_size: 16,
            hidden: [100, 30],
            stop_loss: 1e-3,
        }
    }
}

impl AiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("attack batch size and hidden widths must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("attack learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Dense `in → h1 → h2 → C` with ReLU between layers and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct AiaModel {
    pub layers: [DenseLayer; 3],
}

struct Activations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

impl AiaModel {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: [usize; 2], classes: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                DenseLayer::glorot(inputs, hidden[0], rng),
                DenseLayer::glorot(hidden[0], hidden[1], rng),
                DenseLayer::glorot(hidden[1], classes, rng),
            ],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers[2].outputs
    }

    fn forward(&self, x: &[f64], batch: usize) -> Activations {
        let mut h1 = self.layers[0].forward_batch(x, batch);
        relu_in_place(&mut h1);
        let mut h2 = self.layers[1].forward_batch(&h1, batch);
        relu_in_place(&mut h2);
        let logits = self.layers[2].forward_batch(&h2, batch);
        Activations { h1, h2, logits }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = infer(self, x)?;
        Ok(argmax(&p))
    }
}

/// Class probabilities for one delta.
pub fn infer(model: &AiaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.inputs() {
        return Err(Error::Shape(format!("model takes {} inputs, got {}", model.inputs(), x.len())));
    }
    Ok(softmax(&model.forward(x, 1).logits))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD on mean cross-entropy over the train split.
pub fn train_aia<R: Rng + ?Sized>(ds: &AttackDataset, cfg: &AiaConfig, rng: &mut R) -> Result<AiaModel> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Data("attack training split is empty".into()));
    }
    let mut model = AiaModel::new(ds.dim, cfg.hidden, ds.classes, rng);
    let mut grads = [
        DenseLayer::zeros(ds.dim, cfg.hidden[0]),
        DenseLayer::zeros(cfg.hidden[0], cfg.hidden[1]),
        DenseLayer::zeros(cfg.hidden[1], ds.classes),
    ];
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut x = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            x.clear();
            for &i in chunk {
                x.extend_from_slice(&ds.train[i].x);
            }
            let act = model.forward(&x, b);
            let mut dlogits = Vec::with_capacity(act.logits.len());
            for (row, &i) in act.logits.chunks_exact(ds.classes).zip(chunk) {
                let p = softmax(row);
                let y = ds.train[i].y;
                total -= p[y].max(f64::MIN_POSITIVE).ln();
                for (c, pc) in p.into_iter().enumerate() {
                    dlogits.push((pc - f64::from(u8::from(c == y))) / b as f64);
                }
            }
            grads.iter_mut().for_each(|g| {
                g.weights.fill(0.0);
                g.bias.fill(0.0);
            });
            let mut dh2 = model.layers[2].backward_batch(&act.h2, &dlogits, b, &mut grads[2]);
            relu_grad(&mut dh2, &act.h2);
            let mut dh1 = model.layers[1].backward_batch(&act.h1, &dh2, b, &mut grads[1]);
            relu_grad(&mut dh1, &act.h1);
            model.layers[0].accumulate_grad(&x, &dh1, b, &mut grads[0]);
            for (layer, grad) in model.layers.iter_mut().zip(&grads) {
                layer.sgd_step(grad, cfg.learning_rate)?;
            }
        }
        let mean = total / ds.train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!(
                "attack loss {mean} in epoch {epoch}; try a learning rate below {}",
                cfg.learning_rate
            )));
        }
        if mean < cfg.stop_loss {
            break;
        }
    }
    Ok(model)
}

fn relu_grad(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn predict_all(model: &AiaModel, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| model.predict(&s.x)).collect()
}

/// Majority label of the `k` nearest train deltas (Euclidean). Tied classes
/// are decided by the smaller mean distance.
pub fn knn_attack(ds: &AttackDataset, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("k must be odd and positive, got {k}")));
    }
    let k = k.min(ds.train.len());
    Ok(ds
        .test
        .iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = ds
                .train
                .iter()
                .map(|t| (squared_distance(&q.x, &t.x).sqrt(), t.y))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut votes = vec![(0usize, 0.0f64); ds.classes];
            for &(d, y) in &dist[..k] {
                votes[y].0 += 1;
                votes[y].1 += d;
            }
            let mut best = 0;
            for c in 1..ds.classes {
                let (n, s) = votes[c];
                let (bn, bs) = votes[best];
                if n > bn || (n == bn && n > 0 && (s / n as f64) < (bs / bn as f64)) {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Labels drawn from the train split's class frequencies.
pub fn random_attack<R: Rng + ?Sized>(ds: &AttackDataset, rng: &mut R) -> Vec<usize> {
    let labels = ds.train_labels();
    ds.test
        .iter()
        .map(|_| *labels.choose(rng).expect("train split is non-empty"))
        .collect()
}
