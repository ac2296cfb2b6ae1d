//! Built-in checks that need no dataset download.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig};
use crate::dataset::SyntheticSpec;
use crate::error::Result;
use crate::experiment::run_experiment;
use crate::nn::finite_diff_check;
use crate::privacy::{gaussian_sigma_for, laplace_scale, sample_laplace, BudgetPlan};
use crate::recommender::{batch_loss, ItemFeatureTable, ParamLayout, ParamSet, UserContext};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Laplace scales 2δ/ε for the budgets in `eps` at δ = 0.5.
pub fn lambda_table(eps: &[f64]) -> Vec<f64> {
    eps.iter().map(|&e| laplace_scale(e, 0.5)).collect()
}

pub fn check_lambda_table() -> Check {
    let got = lambda_table(&[30.0, 40.0, 50.0, 60.0]);
    let want = [0.0333, 0.025, 0.020, 0.0167];
    let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() < 5e-5);
    let plan = BudgetPlan::default();
    let adaptive = plan.adaptive_scales();
    let detail = format!("lambda {got:.4?}, adaptive per component {adaptive:.4?}");
    Check::new("lambda_table", ok && adaptive.is_ok(), detail)
}

/// Finite-difference check of the full local model at d = 8.
pub fn check_gradients(instances: u64) -> Result<Check> {
    let layout = ParamLayout::new(8, 44, 8);
    let batch = [(0u32, 1u8), (2, 0), (5, 1), (9, 0), (11, 0)];
    let seeds = SeedTree::new(0x5e1f);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..instances {
        let mut rng = seeds.stream("selftest-grad", &[i]);
        let mut params = ParamSet::init_normal(layout, &mut rng);
        params.as_mut_slice().iter_mut().for_each(|v| *v *= 0.5);
        let items = ItemFeatureTable::generate(12, 8, &mut rng);
        let features: Vec<f64> = (0..44).map(|_| rng.random_range(0.0..1.0)).collect();
        let ctx = UserContext::new(&features, [1u32, 4, 7], &items);
        let mut tape = ParamSet::zeros(layout);
        batch_loss(&params, &items, &ctx, &batch, Some(&mut tape))?;
        let report = finite_diff_check(params.as_slice(), tape.as_slice(), &layout.param_blocks(), 1e-4, 1e-4, |p| {
            ParamSet::from_values(layout, p.to_vec())
                .and_then(|c| batch_loss(&c, &items, &ctx, &batch, None))
                .unwrap_or(f64::NAN)
        })?;
        worst = worst.max(report.max_rel_error());
        failures += usize::from(!report.passed());
    }
    Ok(Check::new(
        "gradient_check_d8",
        failures == 0,
        format!("{instances} instances, {failures} failed, max relative error {worst:.2e}"),
    ))
}

pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

pub fn moments(samples: impl Iterator<Item = f64>) -> Moments {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in samples {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    Moments { mean, variance: m2 / n }
}

pub fn check_laplace(lambda: f64, draws: usize) -> Check {
    let mut rng = SeedTree::new(0x1a91).stream("selftest-laplace", &[]);
    let m = moments((0..draws).map(|_| sample_laplace(lambda, &mut rng)));
    let target = 2.0 * lambda * lambda;
    let rel = (m.variance / target - 1.0).abs();
    Check::new(
        "laplace_moments",
        m.mean.abs() < 3e-4 && rel < 0.02,
        format!("lambda {lambda}: mean {:.2e}, variance off by {:.2}%", m.mean, rel * 100.0),
    )
}

pub fn check_gaussian(lambda: f64, draws: usize) -> Check {
    let sigma = gaussian_sigma_for(lambda);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut rng = SeedTree::new(0x6a55).stream("selftest-gaussian", &[]);
    let m = moments((0..draws).map(|_| normal.sample(&mut rng)));
    let target = 2.0 * lambda * lambda;
    let rel = (m.variance / target - 1.0).abs();
    Check::new(
        "gaussian_matched_variance",
        rel < 0.02,
        format!("sigma {sigma:.4}: variance off by {:.2}% of 2 lambda^2", rel * 100.0),
    )
}

pub fn smoke_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataConfig::Synthetic { shape: SyntheticSpec::default() },
        ..Default::default()
    };
    cfg.model.dim = 8;
    cfg.federation.rounds = 3;
    cfg.attack.seeds = 2;
    cfg.attack.zeta = vec![0.5];
    cfg.attack.aia.epochs = 20;
    cfg
}

pub fn check_smoke() -> Check {
    let start = Instant::now();
    let outcome = run_experiment(&smoke_config(), 1);
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(run) => {
            let finite = run.trained.params.is_finite();
            Check::new(
                "synthetic_smoke_run",
                finite && secs < 10.0,
                format!(
                    "{} rounds in {secs:.2}s, hit@{:?}, {} attack scores",
                    run.report.rounds_run,
                    run.report.hit_at_k.iter().map(|h| (h.k, h.hit)).collect::<Vec<_>>(),
                    run.report.attacks.len()
                ),
            )
        }
        Err(e) => Check::new("synthetic_smoke_run", false, e.to_string()),
    }
}

pub fn run_all() -> Vec<Check> {
    let grad = check_gradients(20).unwrap_or_else(|e| Check::new("gradient_check_d8", false, e.to_string()));
    vec![
        check_lambda_table(),
        grad,
        check_laplace(0.025, 1_000_000),
        check_gaussian(0.025, 1_000_000),
        check_smoke(),
    ]
}
