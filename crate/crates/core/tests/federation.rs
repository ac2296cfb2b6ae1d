use fedrec_core::config::{DataConfig, ExperimentConfig};
use fedrec_core::dataset::SyntheticSpec;
use fedrec_core::experiment::{prepare, train, Prepared};
use fedrec_core::federation::{run_training, Client, FedConfig, LocalClient};
use fedrec_core::privacy::BudgetPlan;
use fedrec_core::recommender::{local_train, UserContext};
use fedrec_core::rng;

fn synthetic(users: usize, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataConfig::Synthetic {
            shape: SyntheticSpec { users, ..Default::default() },
        },
        ..Default::default()
    };
    cfg.model.dim = 8;
    cfg.federation.rounds = rounds;
    cfg.attack.attackers.clear();
    cfg.output.save_deltas = false;
    cfg
}

fn clients<'a>(p: &'a Prepared, plan: &'a BudgetPlan) -> Vec<LocalClient<'a>> {
    p.shards
        .iter()
        .map(|s| LocalClient::new(s, &p.items, p.config.model.hyper(), plan, p.seeds))
        .collect()
}

#[test]
fn single_client_round_equals_its_local_training() {
    let mut cfg = synthetic(20, 1);
    cfg.federation.client_fraction = 1.0;
    cfg.privacy = BudgetPlan::pure();
    let p = prepare(&cfg).unwrap();
    let shard = &p.shards[3];
    let plan = BudgetPlan::pure();
    let one = vec![LocalClient::new(shard, &p.items, cfg.model.hyper(), &plan, p.seeds)];
    let init = p.initial_params();
    let out = run_training(&one, init.clone(), &cfg.federation, &p.seeds, 1, &mut (), None).unwrap();

    let ctx = UserContext::new(shard.features.as_slice(), shard.neighbors(), &p.items);
    let mut r = p.seeds.stream(rng::LOCAL_SHUFFLE, &[u64::from(shard.user_id), 0]);
    let local = local_train(&init, &p.items, &ctx, &shard.examples, &cfg.model.hyper(), &mut r).unwrap();
    assert_eq!(out.params, local.params);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let mut cfg = synthetic(20, 3);
    cfg.model.learning_rate = 0.0;
    cfg.privacy = BudgetPlan::pure();
    let p = prepare(&cfg).unwrap();
    let init = p.initial_params();
    let cs = clients(&p, &cfg.privacy);
    let out = run_training(&cs, init.clone(), &cfg.federation, &p.seeds, 2, &mut (), None).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.rounds_run, 3);
}

#[test]
fn worker_count_does_not_change_bytes() {
    for mode in [BudgetPlan::pure(), BudgetPlan::default()] {
        let mut cfg = synthetic(20, 5);
        cfg.privacy = mode;
        let p = prepare(&cfg).unwrap();
        let a = train(&p, 1).unwrap();
        let b = train(&p, 4).unwrap();
        let again = train(&prepare(&cfg).unwrap(), 3).unwrap();
        assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
        assert_eq!(a.params.to_le_bytes(), again.params.to_le_bytes());
        let losses = |t: &fedrec_core::experiment::Trained| t.log.rows().iter().map(|r| r.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }
}

#[test]
fn master_seed_changes_the_model() {
    let cfg = synthetic(20, 2);
    let mut other = cfg.clone();
    other.master_seed += 1;
    let a = train(&prepare(&cfg).unwrap(), 1).unwrap();
    let b = train(&prepare(&other).unwrap(), 1).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn noise_only_touches_uploads() {
    // The broadcast model a client receives is never modified in place.
    let cfg = synthetic(20, 1);
    let p = prepare(&cfg).unwrap();
    let plan = BudgetPlan::default();
    let c = LocalClient::new(&p.shards[0], &p.items, cfg.model.hyper(), &plan, p.seeds);
    let global = p.initial_params();
    let before = global.clone();
    let up = c.train(&global, 0).unwrap();
    assert_eq!(global, before);
    assert_ne!(up.params, global);
    assert!(up.params.as_slice().iter().all(|v| v.is_finite()));
}

#[test]
fn per_epoch_noise_differs_from_upload_noise() {
    let cfg = synthetic(20, 1);
    let p = prepare(&cfg).unwrap();
    let once = BudgetPlan::default();
    let each = BudgetPlan { per_epoch: true, ..BudgetPlan::default() };
    let g = p.initial_params();
    let a = LocalClient::new(&p.shards[1], &p.items, cfg.model.hyper(), &once, p.seeds).train(&g, 0).unwrap();
    let b = LocalClient::new(&p.shards[1], &p.items, cfg.model.hyper(), &each, p.seeds).train(&g, 0).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn sampled_fraction_trains_expected_client_count() {
    let mut cfg = synthetic(30, 1);
    cfg.federation = FedConfig { rounds: 1, client_fraction: 0.5, ..FedConfig::default() };
    let p = prepare(&cfg).unwrap();
    let mut seen = 0;
    let mut count = |info: &fedrec_core::federation::RoundInfo<'_>| {
        seen = info.uploads.len();
        Ok(())
    };
    let cs = clients(&p, &cfg.privacy);
    run_training(&cs, p.initial_params(), &cfg.federation, &p.seeds, 1, &mut count, None).unwrap();
    assert_eq!(seen, 15);
}
