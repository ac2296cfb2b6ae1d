//! Forward and backward passes of the local GCN recommender.
//!
//! User side: `z_u = E_U x_u`, `z_N = mean_v W1 z_v`,
//! `z* = ReLU(W2 (z_u + z_N) + b)`. Item side: `z_v = E_V x_v`.
//! Scorer: `r = σ(mlp2(ReLU(mlp1(z* ⊕ z_v))))`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Block, ParamSet};
use crate::error::{Error, Result};
use crate::nn::{self, add_outer, bce_with_logit, gemm_strided, matvec, matvec_t, sigmoid};

/// Frozen random raw features of every item, `num_items × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatureTable {
    dim: usize,
    values: Vec<f64>,
}

impl ItemFeatureTable {
    pub fn generate<R: Rng + ?Sized>(num_items: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            dim,
            values: (0..num_items * dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn from_values(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_items(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, item: u32) -> &[f64] {
        let start = item as usize * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Element-wise mean of the rows of `items`; zeros when empty.
    pub fn mean_row(&self, items: impl IntoIterator<Item = u32>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for v in items {
            for (a, x) in acc.iter_mut().zip(self.row(v)) {
                *a += x;
            }
            n += 1;
        }
        if n > 0 {
            for a in &mut acc {
                *a /= n as f64;
            }
        }
        acc
    }
}

/// `z = E·x` for an `out × in` embedding matrix.
pub fn embed(e: &[f64], x: &[f64], out: usize) -> Result<Vec<f64>> {
    if out == 0 || e.len() != out * x.len() {
        return Err(Error::Shape(format!(
            "embedding of {} values cannot map a {}-vector to {out} outputs",
            e.len(),
            x.len()
        )));
    }
    Ok(matvec(e, x, out))
}

pub fn embed_user(params: &ParamSet, x_u: &[f64]) -> Result<Vec<f64>> {
    embed(params.block(Block::UserEmbedding), x_u, params.layout().dim)
}

pub fn embed_item(params: &ParamSet, x_v: &[f64]) -> Result<Vec<f64>> {
    embed(params.block(Block::ItemEmbedding), x_v, params.layout().dim)
}

/// Mean of `W1·z_v` over the neighbour embeddings; the zero vector when there
/// are none.
pub fn aggregate_neighbors(neighbors: &[Vec<f64>], w1: &[f64], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    if neighbors.is_empty() {
        return acc;
    }
    for z in neighbors {
        for (a, v) in acc.iter_mut().zip(matvec(w1, z, dim)) {
            *a += v;
        }
    }
    let n = neighbors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `ReLU(W2·(z_u + z_N) + b)`.
pub fn user_convolution(z_u: &[f64], z_n: &[f64], w2: &[f64], b: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = z_u.iter().zip(z_n).map(|(a, c)| a + c).collect();
    let mut p = matvec(w2, &s, b.len());
    for (pi, bi) in p.iter_mut().zip(b) {
        *pi += bi;
    }
    nn::relu(&p)
}

/// `σ(mlp2(ReLU(mlp1(z* ⊕ z_v))))`, user embedding first.
pub fn score(params: &ParamSet, z_star: &[f64], z_v: &[f64]) -> f64 {
    sigmoid(score_logit(params, z_star, z_v))
}

pub fn score_logit(params: &ParamSet, z_star: &[f64], z_v: &[f64]) -> f64 {
    let d = params.layout().dim;
    let c: Vec<f64> = z_star.iter().chain(z_v).copied().collect();
    let mut h = matvec(params.block(Block::Mlp1Weight), &c, d);
    for (hi, bi) in h.iter_mut().zip(params.block(Block::Mlp1Bias)) {
        *hi = (*hi + bi).max(0.0);
    }
    let w = params.block(Block::Mlp2Weight);
    h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + params.block(Block::Mlp2Bias)[0]
}

/// What a client knows locally: its raw feature vector and the mean raw
/// feature of its neighbour items.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub features: Vec<f64>,
    pub neighbor_mean: Vec<f64>,
}

impl UserContext {
    pub fn new(
        features: &[f64],
        neighbors: impl IntoIterator<Item = u32>,
        items: &ItemFeatureTable,
    ) -> Self {
        Self {
            features: features.to_vec(),
            neighbor_mean: items.mean_row(neighbors),
        }
    }
}

/// Intermediate user-side activations.
#[derive(Debug, Clone)]
pub struct UserState {
    pub z_u: Vec<f64>,
    /// `E_V · mean x_v`, which equals the mean neighbour embedding.
    pub neighbor_embedding: Vec<f64>,
    pub z_n: Vec<f64>,
    pub sum: Vec<f64>,
    pub pre: Vec<f64>,
    pub z_star: Vec<f64>,
}

/// User tower. Averaging commutes with the linear maps, so the neighbour
/// term is computed as `W1·E_V·mean(x_v)`.
pub fn user_state(params: &ParamSet, ctx: &UserContext) -> UserState {
    let d = params.layout().dim;
    let z_u = matvec(params.block(Block::UserEmbedding), &ctx.features, d);
    let neighbor_embedding = matvec(params.block(Block::ItemEmbedding), &ctx.neighbor_mean, d);
    let z_n = matvec(params.block(Block::NeighborWeight), &neighbor_embedding, d);
    let sum: Vec<f64> = z_u.iter().zip(&z_n).map(|(a, b)| a + b).collect();
    let mut pre = matvec(params.block(Block::ConvWeight), &sum, d);
    for (p, b) in pre.iter_mut().zip(params.block(Block::ConvBias)) {
        *p += b;
    }
    let z_star = nn::relu(&pre);
    UserState {
        z_u,
        neighbor_embedding,
        z_n,
        sum,
        pre,
        z_star,
    }
}

fn check_context(params: &ParamSet, ctx: &UserContext, items: &ItemFeatureTable) -> Result<()> {
    let l = params.layout();
    if ctx.features.len() != l.user_dim
        || ctx.neighbor_mean.len() != l.item_dim
        || items.dim() != l.item_dim
    {
        return Err(Error::Shape(format!(
            "context ({}, {}) / item table {} do not match layout {l:?}",
            ctx.features.len(),
            ctx.neighbor_mean.len(),
            items.dim()
        )));
    }
    Ok(())
}

/// Summed cross-entropy of a minibatch and, if `grad` is given, its exact
/// gradient accumulated into `grad`.
///
/// The loss is evaluated in logit form, `softplus(o) - r·o`, which equals the
/// clamped probability form wherever the clamp is inactive and keeps the
/// gradient `σ(o) - r` alive when the sigmoid saturates.
pub fn batch_loss(
    params: &ParamSet,
    items: &ItemFeatureTable,
    ctx: &UserContext,
    batch: &[(u32, u8)],
    grad: Option<&mut ParamSet>,
) -> Result<f64> {
    check_context(params, ctx, items)?;
    if let Some(g) = grad.as_deref() {
        if !g.congruent(params) {
            return Err(Error::Shape("gradient tape layout differs from parameters".into()));
        }
    }
    let layout = *params.layout();
    let d = layout.dim;
    let d2 = layout.item_dim;
    let n = batch.len();
    let two_d = 2 * d;

    let user = user_state(params, ctx);
    let m1 = params.block(Block::Mlp1Weight);
    let m1b = params.block(Block::Mlp1Bias);
    let m2 = params.block(Block::Mlp2Weight);
    let m2b = params.block(Block::Mlp2Bias)[0];

    // user half of the first MLP layer, shared by every row of the batch
    let mut hu = m1b.to_vec();
    gemm_strided(d, d, 1, 1.0, (m1, two_d, 1), (&user.z_star, 1, 1), 1.0, (&mut hu, 1, 1));

    let mut xb = Vec::with_capacity(n * d2);
    for &(v, _) in batch {
        xb.extend_from_slice(items.row(v));
    }
    let e_v = params.block(Block::ItemEmbedding);
    let mut zv = vec![0.0; n * d];
    gemm_strided(n, d2, d, 1.0, (&xb, d2, 1), (e_v, 1, d2), 0.0, (&mut zv, d, 1));

    let mut h_pre = Vec::with_capacity(n * d);
    for _ in 0..n {
        h_pre.extend_from_slice(&hu);
    }
    // item half: rows of m1 at column offset d
    gemm_strided(n, d, d, 1.0, (&zv, d, 1), (&m1[d..], 1, two_d), 1.0, (&mut h_pre, d, 1));

    let mut loss = 0.0;
    let mut d_logit = Vec::with_capacity(n);
    for (row, &(_, r)) in h_pre.chunks_exact(d).zip(batch) {
        let logit = row
            .iter()
            .zip(m2)
            .map(|(h, w)| h.max(0.0) * w)
            .sum::<f64>()
            + m2b;
        let r = f64::from(r);
        loss += bce_with_logit(logit, r);
        d_logit.push(sigmoid(logit) - r);
    }

    let Some(g) = grad else {
        return Ok(loss);
    };

    // second layer
    let mut d_h_pre = vec![0.0; n * d];
    {
        let gm2 = g.block_mut(Block::Mlp2Weight);
        for ((row, dst), &dl) in h_pre.chunks_exact(d).zip(d_h_pre.chunks_exact_mut(d)).zip(&d_logit) {
            for j in 0..d {
                if row[j] > 0.0 {
                    gm2[j] += dl * row[j];
                    dst[j] = dl * m2[j];
                }
            }
        }
    }
    g.block_mut(Block::Mlp2Bias)[0] += d_logit.iter().sum::<f64>();

    // first layer
    let mut dhu = vec![0.0; d];
    for row in d_h_pre.chunks_exact(d) {
        for (a, b) in dhu.iter_mut().zip(row) {
            *a += b;
        }
    }
    for (a, b) in g.block_mut(Block::Mlp1Bias).iter_mut().zip(&dhu) {
        *a += b;
    }
    {
        let gm1 = g.block_mut(Block::Mlp1Weight);
        for (j, &dh) in dhu.iter().enumerate() {
            if dh != 0.0 {
                for (w, z) in gm1[j * two_d..j * two_d + d].iter_mut().zip(&user.z_star) {
                    *w += dh * z;
                }
            }
        }
        gemm_strided(d, n, d, 1.0, (&d_h_pre, 1, d), (&zv, d, 1), 1.0, (&mut gm1[d..], two_d, 1));
    }
    let mut dzv = vec![0.0; n * d];
    gemm_strided(n, d, d, 1.0, (&d_h_pre, d, 1), (&m1[d..], two_d, 1), 0.0, (&mut dzv, d, 1));

    // item embedding through the scored items
    gemm_strided(
        d,
        n,
        d2,
        1.0,
        (&dzv, 1, d),
        (&xb, d2, 1),
        1.0,
        (g.block_mut(Block::ItemEmbedding), d2, 1),
    );

    // user tower
    let mut dz_star = vec![0.0; d];
    gemm_strided(1, d, d, 1.0, (&dhu, d, 1), (m1, two_d, 1), 0.0, (&mut dz_star, d, 1));
    let dp: Vec<f64> = dz_star
        .iter()
        .zip(&user.pre)
        .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
        .collect();
    add_outer(g.block_mut(Block::ConvWeight), &dp, &user.sum);
    for (a, b) in g.block_mut(Block::ConvBias).iter_mut().zip(&dp) {
        *a += b;
    }
    let ds = matvec_t(params.block(Block::ConvWeight), &dp, d);
    add_outer(g.block_mut(Block::UserEmbedding), &ds, &ctx.features);
    add_outer(g.block_mut(Block::NeighborWeight), &ds, &user.neighbor_embedding);
    let da = matvec_t(params.block(Block::NeighborWeight), &ds, d);
    add_outer(g.block_mut(Block::ItemEmbedding), &da, &ctx.neighbor_mean);

    Ok(loss)
}

/// Scores the whole catalogue for many users against one model. The item
/// half of the first MLP layer is computed once.
pub struct CatalogScorer<'a> {
    params: &'a ParamSet,
    /// `num_items × d`: `mlp1_item · z_v + mlp1_bias`.
    item_hidden: Vec<f64>,
    num_items: usize,
}

impl<'a> CatalogScorer<'a> {
    pub fn new(params: &'a ParamSet, items: &ItemFeatureTable) -> Result<Self> {
        let l = params.layout();
        if items.dim() != l.item_dim {
            return Err(Error::Shape(format!(
                "item table width {} vs layout {}",
                items.dim(),
                l.item_dim
            )));
        }
        let (d, d2, n) = (l.dim, l.item_dim, items.num_items());
        let mut zv = vec![0.0; n * d];
        gemm_strided(
            n,
            d2,
            d,
            1.0,
            (items.as_slice(), d2, 1),
            (params.block(Block::ItemEmbedding), 1, d2),
            0.0,
            (&mut zv, d, 1),
        );
        let mut item_hidden = Vec::with_capacity(n * d);
        for _ in 0..n {
            item_hidden.extend_from_slice(params.block(Block::Mlp1Bias));
        }
        gemm_strided(
            n,
            d,
            d,
            1.0,
            (&zv, d, 1),
            (&params.block(Block::Mlp1Weight)[d..], 1, 2 * d),
            1.0,
            (&mut item_hidden, d, 1),
        );
        Ok(Self {
            params,
            item_hidden,
            num_items: n,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Logits of every catalogue item for this user.
    pub fn logits(&self, ctx: &UserContext) -> Vec<f64> {
        let d = self.params.layout().dim;
        let user = user_state(self.params, ctx);
        let m1 = self.params.block(Block::Mlp1Weight);
        let mut hu = vec![0.0; d];
        gemm_strided(d, d, 1, 1.0, (m1, 2 * d, 1), (&user.z_star, 1, 1), 0.0, (&mut hu, 1, 1));
        let m2 = self.params.block(Block::Mlp2Weight);
        let m2b = self.params.block(Block::Mlp2Bias)[0];
        self.item_hidden
            .chunks_exact(d)
            .map(|row| {
                row.iter()
                    .zip(&hu)
                    .zip(m2)
                    .map(|((a, b), w)| (a + b).max(0.0) * w)
                    .sum::<f64>()
                    + m2b
            })
            .collect()
    }
}
