use rand::{Rng, SeedableRng};

use super::*;
use crate::controller::ControllerConfig;
use crate::env::{make_track, Split, ANCHOR_ROW, HEIGHT, NUM_ROUTES, PALETTE_OBSTACLE, WIDTH};
use crate::episodes::CoastPolicy;
use crate::worldmodel::MdnConfig;

const LATENT: usize = 4;

fn mdn(concept_dim: usize, seed: u64) -> Mdn<f64> {
    Mdn::new(
        MdnConfig {
            latent_dim: LATENT,
            action_dim: 9,
            concept_dim,
            lstm_hidden: 8,
            n_mixtures: 2,
        },
        seed,
    )
    .unwrap()
}

/// Zeroes the done row of the head and sets its bias, fixing the done logit.
fn fix_done_logit(mdn: &mut Mdn<f64>, logit: f64) {
    let row = mdn.config.head_dim() - 1;
    let hidden = mdn.config.lstm_hidden;
    let names: Vec<String> = mdn.params.iter().map(|(n, _)| n.to_string()).collect();
    let w = names.iter().position(|n| n == "mdn.head.weight").unwrap();
    let b = names.iter().position(|n| n == "mdn.head.bias").unwrap();
    mdn.params.tensors_mut()[w].data_mut()[row * hidden..(row + 1) * hidden].fill(0.0);
    mdn.params.tensors_mut()[b].data_mut()[row] = logit;
}

fn seeds(lengths: &[usize], seed: u64) -> SeedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SeedData {
        episodes: lengths
            .iter()
            .map(|&len| SeedEpisode {
                z: Tensor::from_vec(&[len, LATENT], (0..len * LATENT).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap(),
                actions: (0..len).map(|_| Action::new(rng.random_range(0..9)).unwrap()).collect(),
            })
            .collect(),
    }
}

fn controller() -> Controller<f64> {
    Controller::new(
        ControllerConfig {
            latent_dim: LATENT,
            hidden: 16,
        },
        5,
    )
    .unwrap()
}

fn small_config(budget: usize) -> DreamConfig {
    DreamConfig {
        budget_steps: budget,
        parallel_sessions: 4,
        ppo: PpoConfig {
            rollout_horizon: 128,
            minibatch: 64,
            ..PpoConfig::offline()
        },
        ..DreamConfig::default()
    }
}

#[test]
fn seeding_teacher_forces_ten_stored_pairs() {
    let model = mdn(0, 1);
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[4, 25, 9, 12], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = DreamSession::seed(&world, &data, MAX_DREAM_LEN, &mut rng).unwrap();
        let (e, start) = s.origin;
        let ep = &data.episodes[e];
        assert!(ep.actions.len() >= SEED_LEN && start + SEED_LEN <= ep.actions.len());
        let mut state = model.initial_state(1);
        for t in start..start + SEED_LEN {
            state = model.step(ep.z.row(t), ep.actions[t], None, &state).unwrap().1;
        }
        assert_eq!(s.state, state);
        assert_ne!(s.state, model.initial_state(1));
        assert_eq!(s.z, ep.z.row(start + SEED_LEN - 1));
        assert_eq!(s.steps_elapsed, 0);
    }
}

#[test]
fn seeding_is_deterministic_and_rejects_short_data() {
    let model = mdn(0, 1);
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[30, 40, 12], 4);
    let pick = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DreamSession::seed(&world, &data, MAX_DREAM_LEN, &mut rng).unwrap().origin
    };
    assert_eq!(pick(7), pick(7));
    let short = seeds(&[3, 9], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(DreamSession::seed(&world, &short, MAX_DREAM_LEN, &mut rng).is_err());
}

#[test]
fn done_probability_above_half_ends_the_session() {
    let mut model = mdn(0, 2);
    fix_done_logit(&mut model, (0.51f64 / 0.49).ln());
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[20], 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = DreamSession::seed(&world, &data, MAX_DREAM_LEN, &mut rng).unwrap();
    assert!(s.step(&world, Action::COAST, &mut rng).unwrap().done);
    assert!(matches!(
        s.step(&world, Action::COAST, &mut rng),
        Err(Error::ContractViolation(_))
    ));
}

#[test]
fn length_cap_forces_done() {
    let mut model = mdn(0, 3);
    fix_done_logit(&mut model, (0.49f64 / 0.51).ln());
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[20], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = DreamSession::seed(&world, &data, MAX_DREAM_LEN, &mut rng).unwrap();
    let mut steps = 0;
    loop {
        steps += 1;
        if s.step(&world, Action::new(steps % 9).unwrap(), &mut rng).unwrap().done {
            break;
        }
    }
    assert_eq!(steps, 300);
    assert_eq!(s.steps_elapsed, 300);
}

#[test]
fn equal_centers_feed_all_ones_concepts() {
    let model = mdn(3, 4);
    let centers = ConceptModel::new(Tensor::from_vec(&[3, LATENT], vec![0.2; 3 * LATENT]).unwrap()).unwrap();
    let world = DreamWorld::new(&model, Some(&centers)).unwrap();
    let data = seeds(&[15], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = DreamSession::seed(&world, &data, MAX_DREAM_LEN, &mut rng).unwrap();
    s.z = vec![0.2; LATENT];
    let state = s.state.clone();
    let step = s.step(&world, Action::COAST, &mut rng).unwrap();
    assert!(step.z_next.iter().all(|v| v.is_finite()));
    let expected = model.step(&[0.2; LATENT], Action::COAST, Some(&[1.0; 3]), &state).unwrap().1;
    assert_eq!(s.state, expected);
}

#[test]
fn concept_model_must_match_variant() {
    let plain = mdn(0, 1);
    let cm = mdn(3, 1);
    let centers = ConceptModel::new(Tensor::from_vec(&[3, LATENT], (0..12).map(|i| i as f64).collect()).unwrap()).unwrap();
    assert!(DreamWorld::new(&plain, Some(&centers)).is_err());
    assert!(DreamWorld::new(&cm, None).is_err());
    let wrong = ConceptModel::new(Tensor::from_vec(&[2, LATENT], vec![0.0; 8]).unwrap()).unwrap();
    assert!(DreamWorld::new(&cm, Some(&wrong)).is_err());
    assert!(DreamWorld::new(&cm, Some(&centers)).is_ok());
}

#[test]
fn dream_training_consumes_exact_budget() {
    let model = mdn(0, 5);
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[30, 30], 8);
    let out = dream_train(controller(), world, &data, &small_config(1000)).unwrap();
    assert_eq!(out.counts.transitions, 1000);
    assert_eq!(out.stats.iter().map(|s| s.samples).sum::<usize>(), 1000);
    assert_ne!(out.controller.params, controller().params);
}

#[test]
fn dream_collection_is_reproducible_and_capped() {
    let model = mdn(0, 6);
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[30, 30], 9);
    let config = DreamConfig {
        max_dream_len: 7,
        ..small_config(0)
    };
    let ctrl = controller();
    let run = || DreamRunner::new(world, &data, &config).unwrap().collect(&ctrl, 200).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.iter().map(Segment::len).sum::<usize>(), 200);
    assert!(a.iter().all(|s| s.len() <= 7));
}

#[test]
fn immediate_done_everywhere_is_reported_degenerate() {
    let mut model = mdn(0, 7);
    fix_done_logit(&mut model, 10.0);
    let world = DreamWorld::new(&model, None).unwrap();
    let data = seeds(&[30], 10);
    let err = dream_train(controller(), world, &data, &small_config(500)).unwrap_err();
    assert!(matches!(err, Error::DegenerateWorldModel(_)));
}

#[test]
fn mb_and_cm_configs_share_everything_but_the_model() {
    let mut plain = mdn(0, 8);
    let mut cm = mdn(3, 8);
    fix_done_logit(&mut plain, -3.0);
    fix_done_logit(&mut cm, -3.0);
    let centers = ConceptModel::new(Tensor::from_vec(&[3, LATENT], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap()).unwrap();
    let data = seeds(&[30, 30], 11);
    let config = small_config(300);
    let a = dream_train(controller(), DreamWorld::new(&plain, None).unwrap(), &data, &config).unwrap();
    let b = dream_train(controller(), DreamWorld::new(&cm, Some(&centers)).unwrap(), &data, &config).unwrap();
    assert_eq!(a.counts.transitions, b.counts.transitions);
    assert_eq!(a.stats.len(), b.stats.len());
}

#[test]
fn failure_seed_dataset_has_obstacle_ahead_on_every_route() {
    let tracks: Vec<_> = (0..NUM_ROUTES).map(|r| make_track(r, Split::Train).unwrap()).collect();
    let d = make_failure_seed_dataset(&tracks, &mut CoastPolicy, 10.0, &RewardWeights::default(), 0).unwrap();
    assert_eq!(d.episodes.len(), 5);
    for (r, ep) in d.episodes.iter().enumerate() {
        assert_eq!(ep.info.route_id, r);
        assert_eq!(ep.info.scenario.unwrap().distance, 10.0);
        let first = &ep.transitions[0].s;
        let ahead = (0..ANCHOR_ROW - 2).any(|row| (0..WIDTH).any(|col| first.pixel(row, col) == PALETTE_OBSTACLE));
        assert!(ahead, "route {r}");
        let behind = (ANCHOR_ROW + 3..HEIGHT).any(|row| (0..WIDTH).any(|col| first.pixel(row, col) == PALETTE_OBSTACLE));
        assert!(!behind);
    }
}
