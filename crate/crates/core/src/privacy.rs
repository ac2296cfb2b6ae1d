//! Upload perturbation: element-wise clipping followed by per-component
//! Laplace noise, with fixed-scale and Gaussian baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recommender::{ComponentTag, ParamSet};

/// Vulnerability level of each component. Lower levels are treated as more
/// sensitive and receive a smaller budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ResistanceRepr", into = "ResistanceRepr")]
pub struct ResistanceMap {
    levels: [u8; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResistancePreset {
    /// Ordering observed in the per-component attack: User 0, MLP1 1,
    /// MLP2 2, Item 3. The default.
    Measured,
    /// User 0, Item 1, MLP1 2, MLP2 3.
    Equation,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ResistanceRepr {
    Preset(ResistancePreset),
    Levels { user: u8, item: u8, mlp1: u8, mlp2: u8 },
}

impl From<ResistanceRepr> for ResistanceMap {
    fn from(repr: ResistanceRepr) -> Self {
        match repr {
            ResistanceRepr::Preset(p) => ResistanceMap::preset(p),
            ResistanceRepr::Levels { user, item, mlp1, mlp2 } => {
                ResistanceMap::new([user, item, mlp1, mlp2])
            }
        }
    }
}

impl From<ResistanceMap> for ResistanceRepr {
    fn from(map: ResistanceMap) -> Self {
        let [user, item, mlp1, mlp2] = map.levels;
        ResistanceRepr::Levels { user, item, mlp1, mlp2 }
    }
}

impl Default for ResistanceMap {
    fn default() -> Self {
        Self::preset(ResistancePreset::Measured)
    }
}

impl ResistanceMap {
    /// Levels in [`ComponentTag::ALL`] order (User, Item, MLP1, MLP2).
    pub fn new(levels: [u8; 4]) -> Self {
        Self { levels }
    }

    pub fn preset(preset: ResistancePreset) -> Self {
        match preset {
            ResistancePreset::Measured => Self::new([0, 3, 1, 2]),
            ResistancePreset::Equation => Self::new([0, 1, 2, 3]),
        }
    }

    pub fn level(&self, tag: ComponentTag) -> u8 {
        self.levels[tag.index()]
    }

    fn validate(&self) -> Result<()> {
        match self.levels.iter().find(|&&l| l > 3) {
            Some(l) => Err(Error::Config(format!("resistance level {l} outside 0..=3"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Raw uploads, no clipping. The undefended baseline.
    None,
    /// Clip only.
    Off,
    /// Laplace noise with a per-component scale from the resistance map.
    #[default]
    Adaptive,
    /// Laplace noise with one scale `lambda` everywhere.
    Fixed,
    /// Gaussian noise, `sigma` everywhere or variance-matched per component
    /// when `sigma` is unset.
    Gaussian,
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::Off => "off",
            NoiseMode::Adaptive => "adaptive",
            NoiseMode::Fixed => "fixed",
            NoiseMode::Gaussian => "gaussian",
        }
    }
}

/// Everything that decides how an upload is perturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetPlan {
    pub mode: NoiseMode,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    /// Clip bound.
    pub delta: f64,
    pub resistance: ResistanceMap,
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    /// Perturb after every local epoch instead of once before upload.
    pub per_epoch: bool,
}

impl Default for BudgetPlan {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Adaptive,
            epsilon_min: 30.0,
            epsilon_max: 60.0,
            delta: 0.5,
            resistance: ResistanceMap::default(),
            lambda: None,
            sigma: None,
            per_epoch: false,
        }
    }
}

/// Scale of the fixed-budget baseline at the smallest noise level.
pub const FIXREC_MIN_LAMBDA: f64 = 0.017;
/// Scale of the fixed-budget baseline at the largest noise level.
pub const FIXREC_MAX_LAMBDA: f64 = 0.033;

/// Per-component noise applied by a plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentNoise {
    Zero,
    Laplace(f64),
    Gaussian(f64),
}

impl BudgetPlan {
    pub fn pure() -> Self {
        Self { mode: NoiseMode::None, ..Self::default() }
    }

    pub fn fixed(lambda: f64) -> Self {
        Self { mode: NoiseMode::Fixed, lambda: Some(lambda), ..Self::default() }
    }

    pub fn gaussian_matched() -> Self {
        Self { mode: NoiseMode::Gaussian, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.resistance.validate()?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.delta)));
        }
        if !(self.epsilon_min > 0.0 && self.epsilon_min <= self.epsilon_max && self.epsilon_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < epsilon_min <= epsilon_max, got {} and {}",
                self.epsilon_min, self.epsilon_max
            )));
        }
        match self.mode {
            NoiseMode::Fixed => match self.lambda {
                Some(l) if l.is_finite() && l > 0.0 => {}
                other => return Err(Error::Config(format!("fixed mode needs lambda > 0, got {other:?}"))),
            },
            NoiseMode::Gaussian => {
                if let Some(s) = self.sigma {
                    if !(s.is_finite() && s >= 0.0) {
                        return Err(Error::Config(format!("sigma must be non-negative, got {s}")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Adaptive Laplace scale `2δ / (ε_min + b·l)` with `b = (ε_max − ε_min)/3`.
    pub fn noise_scale(&self, tag: ComponentTag) -> Result<f64> {
        let b = (self.epsilon_max - self.epsilon_min) / 3.0;
        let p = self.epsilon_min + b * f64::from(self.resistance.level(tag));
        if !(p > 0.0) {
            return Err(Error::Config(format!("budget for {tag} is {p}, must be positive")));
        }
        Ok(laplace_scale(p, self.delta))
    }

    /// Adaptive scales in [`ComponentTag::ALL`] order.
    pub fn adaptive_scales(&self) -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for tag in ComponentTag::ALL {
            out[tag.index()] = self.noise_scale(tag)?;
        }
        Ok(out)
    }

    pub fn component_noise(&self, tag: ComponentTag) -> Result<ComponentNoise> {
        Ok(match self.mode {
            NoiseMode::None | NoiseMode::Off => ComponentNoise::Zero,
            NoiseMode::Adaptive => ComponentNoise::Laplace(self.noise_scale(tag)?),
            NoiseMode::Fixed => ComponentNoise::Laplace(
                self.lambda.ok_or_else(|| Error::Config("fixed mode needs lambda".into()))?,
            ),
            NoiseMode::Gaussian => ComponentNoise::Gaussian(match self.sigma {
                Some(s) => s,
                None => gaussian_sigma_for(self.noise_scale(tag)?),
            }),
        })
    }

    pub fn clips(&self) -> bool {
        self.mode != NoiseMode::None
    }

    /// Returns the perturbed copy of `params`; the input is untouched.
    pub fn perturb<R: Rng + ?Sized>(&self, params: &ParamSet, rng: &mut R) -> Result<ParamSet> {
        let mut out = params.clone();
        self.perturb_in_place(&mut out, rng)?;
        Ok(out)
    }

    pub fn perturb_in_place<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        if self.clips() {
            clip_params(params.as_mut_slice(), self.delta);
        }
        for tag in ComponentTag::ALL {
            let noise = self.component_noise(tag)?;
            let values = params.component_mut(tag);
            match noise {
                ComponentNoise::Zero => {}
                ComponentNoise::Laplace(lambda) => {
                    for v in values {
                        *v += sample_laplace(lambda, rng);
                    }
                }
                ComponentNoise::Gaussian(sigma) => {
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma)
                            .map_err(|e| Error::Config(format!("gaussian noise: {e}")))?;
                        for v in values {
                            *v += normal.sample(rng);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Laplace scale `2δ/ε` for a clip bound δ, whose per-coordinate sensitivity is 2δ.
pub fn laplace_scale(epsilon: f64, delta: f64) -> f64 {
    2.0 * delta / epsilon
}

/// Clamps every value to `[-delta, delta]`.
pub fn clip_params(values: &mut [f64], delta: f64) {
    for v in values {
        *v = v.clamp(-delta, delta);
    }
}

/// Inverse CDF of the zero-mean Laplace distribution at `u ∈ (-½, ½)`.
pub fn laplace_from_uniform(u: f64, lambda: f64) -> f64 {
    -lambda * u.signum() * (1.0 - 2.0 * u.abs()).ln() * f64::from(u != 0.0)
}

pub fn sample_laplace<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if 1.0 - 2.0 * u.abs() > 0.0 {
            return laplace_from_uniform(u, lambda);
        }
    }
}

pub fn laplace_density(x: f64, mean: f64, lambda: f64) -> f64 {
    (-(x - mean).abs() / lambda).exp() / (2.0 * lambda)
}

/// Gaussian width whose variance matches Laplace(λ), i.e. `λ·√2`.
pub fn gaussian_sigma_for(lambda: f64) -> f64 {
    lambda * std::f64::consts::SQRT_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::ParamLayout;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn clip_examples() {
        let mut v = vec![0.7, -0.9, 0.2, 0.5, -0.5];
        clip_params(&mut v, 0.5);
        assert_eq!(v, vec![0.5, -0.5, 0.2, 0.5, -0.5]);
    }

    #[test]
    fn lambda_table() {
        let plan = BudgetPlan::default();
        let expect = [
            (ComponentTag::User, 1.0 / 30.0),
            (ComponentTag::Mlp1, 1.0 / 40.0),
            (ComponentTag::Mlp2, 1.0 / 50.0),
            (ComponentTag::Item, 1.0 / 60.0),
        ];
        for (tag, lambda) in expect {
            assert!((plan.noise_scale(tag).unwrap() - lambda).abs() < 1e-15, "{tag}");
        }
        let eq = BudgetPlan {
            resistance: ResistanceMap::preset(ResistancePreset::Equation),
            ..BudgetPlan::default()
        };
        assert!((eq.noise_scale(ComponentTag::Item).unwrap() - 0.025).abs() < 1e-15);
        assert!((eq.noise_scale(ComponentTag::Mlp2).unwrap() - 1.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_is_a_config_error() {
        let plan = BudgetPlan { epsilon_min: 0.0, epsilon_max: 0.0, ..BudgetPlan::default() };
        assert!(plan.noise_scale(ComponentTag::User).unwrap_err().is_config());
        assert!(plan.validate().is_err());
    }

    #[test]
    fn laplace_median_is_zero() {
        assert_eq!(laplace_from_uniform(0.0, 0.3), 0.0);
        assert!(laplace_from_uniform(0.25, 1.0) > 0.0);
        assert!((laplace_from_uniform(0.25, 1.0) + laplace_from_uniform(-0.25, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn laplace_moments() {
        let lambda = 0.025;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..1_000_000).map(|_| sample_laplace(lambda, &mut rng)).collect();
        let (mean, var) = moments(&draws);
        assert!(mean.abs() < 3e-4, "mean {mean}");
        let target = 2.0 * lambda * lambda;
        assert!((var / target - 1.0).abs() < 0.02, "var {var} vs {target}");
    }

    #[test]
    fn gaussian_matching() {
        assert!((gaussian_sigma_for(0.020) - 0.028284).abs() < 1e-6);
        assert_eq!(gaussian_sigma_for(0.0), 0.0);
        let lambda = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0, gaussian_sigma_for(lambda)).unwrap();
        let g: Vec<f64> = (0..1_000_000).map(|_| normal.sample(&mut rng)).collect();
        let l: Vec<f64> = (0..1_000_000).map(|_| sample_laplace(lambda, &mut rng)).collect();
        let (_, vg) = moments(&g);
        let (_, vl) = moments(&l);
        assert!((vg / vl - 1.0).abs() < 0.02, "{vg} vs {vl}");
    }

    #[test]
    fn per_component_noise_width() {
        let layout = ParamLayout::new(64, 44, 64);
        let zero = ParamSet::zeros(layout);
        let plan = BudgetPlan::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // MLP2 is small, so pool repeated perturbations
        let mut pooled: [Vec<f64>; 4] = Default::default();
        while pooled.iter().any(|p| p.len() < 4096) {
            let noisy = plan.perturb(&zero, &mut rng).unwrap();
            for tag in ComponentTag::ALL {
                pooled[tag.index()].extend_from_slice(noisy.component(tag));
            }
        }
        assert_eq!(zero, ParamSet::zeros(layout));
        for tag in ComponentTag::ALL {
            let (_, var) = moments(&pooled[tag.index()]);
            let want = std::f64::consts::SQRT_2 * plan.noise_scale(tag).unwrap();
            assert!((var.sqrt() / want - 1.0).abs() < 0.1, "{tag}");
        }
    }

    #[test]
    fn off_mode_is_clip_and_none_is_identity() {
        let layout = ParamLayout::new(4, 44, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ParamSet::init_normal(layout, &mut rng);
        let off = BudgetPlan { mode: NoiseMode::Off, ..BudgetPlan::default() };
        let mut clipped = params.clone();
        clip_params(clipped.as_mut_slice(), 0.5);
        assert_eq!(off.perturb(&params, &mut rng).unwrap(), clipped);
        assert_eq!(BudgetPlan::pure().perturb(&params, &mut rng).unwrap(), params);
    }

    #[test]
    fn equal_budgets_reduce_to_fixed_mode() {
        let layout = ParamLayout::new(4, 44, 4);
        let params = ParamSet::init_normal(layout, &mut ChaCha8Rng::seed_from_u64(6));
        let adaptive = BudgetPlan { epsilon_min: 40.0, epsilon_max: 40.0, ..BudgetPlan::default() };
        let fixed = BudgetPlan::fixed(2.0 * 0.5 / 40.0);
        let a = adaptive.perturb(&params, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = fixed.perturb(&params, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resistance_config_forms() {
        #[derive(Deserialize)]
        struct Wrap {
            r: ResistanceMap,
        }
        let preset: Wrap = toml::from_str("r = \"equation\"").unwrap();
        assert_eq!(preset.r, ResistanceMap::preset(ResistancePreset::Equation));
        let table: Wrap = toml::from_str("r = { user = 0, item = 3, mlp1 = 1, mlp2 = 2 }").unwrap();
        assert_eq!(table.r, ResistanceMap::default());
    }

    proptest! {
        #[test]
        fn more_vulnerable_gets_more_noise(
            eps_min in 1.0f64..100.0,
            spread in 0.1f64..100.0,
            delta in 0.01f64..2.0,
        ) {
            let plan = BudgetPlan { epsilon_min: eps_min, epsilon_max: eps_min + spread, delta, ..BudgetPlan::default() };
            let lo = 2.0 * delta / plan.epsilon_max;
            let hi = 2.0 * delta / plan.epsilon_min;
            for a in ComponentTag::ALL {
                let la = plan.noise_scale(a).unwrap();
                prop_assert!(la >= lo * (1.0 - 1e-12) && la <= hi * (1.0 + 1e-12));
                for b in ComponentTag::ALL {
                    if plan.resistance.level(a) < plan.resistance.level(b) {
                        prop_assert!(la > plan.noise_scale(b).unwrap());
                    }
                }
            }
        }

        #[test]
        fn clip_is_idempotent_and_bounded(v in prop::collection::vec(-10.0f64..10.0, 0..50), delta in 0.01f64..3.0) {
            let mut once = v.clone();
            clip_params(&mut once, delta);
            let mut twice = once.clone();
            clip_params(&mut twice, delta);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|x| x.abs() <= delta));
        }

        #[test]
        fn laplace_density_ratio_is_bounded(
            theta in -0.5f64..0.5,
            theta2 in -0.5f64..0.5,
            level in 0u8..4,
        ) {
            let plan = BudgetPlan::default();
            let tag = ComponentTag::ALL[level as usize];
            let lambda = plan.noise_scale(tag).unwrap();
            let bound = (2.0 * plan.delta / lambda).exp();
            for k in -50..=50 {
                let y = f64::from(k) * 0.03;
                let ratio = laplace_density(y, theta, lambda) / laplace_density(y, theta2, lambda);
                prop_assert!(ratio <= bound * (1.0 + 1e-9));
            }
        }

        #[test]
        fn perturb_keeps_shape(seed in 0u64..50) {
            let layout = ParamLayout::new(3, 44, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ParamSet::init_normal(layout, &mut rng);
            for plan in [BudgetPlan::default(), BudgetPlan::fixed(0.02), BudgetPlan::gaussian_matched()] {
                let out = plan.perturb(&params, &mut rng).unwrap();
                prop_assert!(out.congruent(&params));
            }
        }
    }
}
