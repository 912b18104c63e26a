use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::controller::ControllerConfig;
use crate::env::{straight_track, Action, Observation};
use crate::episodes::CoastPolicy;
use crate::vae::VaeConfig;

struct Fixed(Action);

impl Policy for Fixed {
    fn act(&mut self, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.0)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn norm_d_examples() {
    assert_eq!(norm_d(100.0, 25.0).unwrap(), 0.25);
    assert_eq!(norm_d(100.0, 0.0).unwrap(), 0.0);
    assert_eq!(norm_d(100.0, 150.0).unwrap(), 1.0);
    assert!(matches!(norm_d(0.0, 10.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(norm_d(-3.0, 10.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn norm_r_is_clamped_reward_over_distance_scale() {
    assert_eq!(norm_r(40.0, 100.0, 1.0).unwrap(), 0.4);
    assert_eq!(norm_r(-5.0, 100.0, 1.0).unwrap(), 0.0);
    assert_eq!(norm_r(500.0, 100.0, 1.0).unwrap(), 1.0);
    assert_eq!(norm_r(10.0, 100.0, 0.5).unwrap(), 0.2);
    assert!(norm_r(1.0, 0.0, 1.0).is_err());
}

#[test]
fn balanced_binary_ci_matches_normal_approximation() {
    let samples: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
    let (lo, hi) = bootstrap_ci(&samples, 10_000, 0.95, &mut rng(1)).unwrap();
    // Independent reference: mean ± 1.96·sqrt(p(1-p)/n) = 0.5 ± 0.098.
    assert!((lo - 0.402).abs() < 0.02, "{lo}");
    assert!((hi - 0.598).abs() < 0.02, "{hi}");
}

#[test]
fn ci_width_halves_when_sample_count_quadruples() {
    let mut r = rng(2);
    let draw = |n: usize, r: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| r.random_range(0.0..1.0)).collect() };
    let small = draw(100, &mut r);
    let large = draw(400, &mut r);
    let w = |s: &[f64]| {
        let (lo, hi) = bootstrap_ci(s, 10_000, 0.95, &mut rng(3)).unwrap();
        hi - lo
    };
    let ratio = w(&large) / w(&small);
    assert!(ratio < 1.0 && (ratio - 0.5).abs() < 0.1, "{ratio}");
}

#[test]
fn constant_samples_give_a_point_interval() {
    let (lo, hi) = bootstrap_ci(&[0.3; 17], 500, 0.95, &mut rng(0)).unwrap();
    assert!((lo - 0.3).abs() < 1e-12 && (hi - 0.3).abs() < 1e-12);
}

#[test]
fn bootstrap_rejects_bad_input() {
    assert!(bootstrap_ci(&[], 100, 0.95, &mut rng(0)).is_err());
    assert!(bootstrap_ci(&[1.0], 0, 0.95, &mut rng(0)).is_err());
    assert!(bootstrap_ci(&[1.0], 10, 1.5, &mut rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ci_brackets_the_mean_within_sample_range(
        samples in prop::collection::vec(-5.0f64..5.0, 1..40),
        seed in any::<u64>(),
    ) {
        let (lo, hi) = bootstrap_ci(&samples, 400, 0.9, &mut rng(seed)).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min - 1e-12 <= lo && lo <= hi && hi <= max + 1e-12);
        prop_assert!(lo <= mean + 1e-9 && mean - 1e-9 <= hi);
    }

    #[test]
    fn norm_d_lies_in_unit_interval(initial in 0.01f64..500.0, fin in -10.0f64..1000.0) {
        let v = norm_d(initial, fin).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn coasting_stays_put_and_braking_avoids_the_obstacle() {
    let track = straight_track(60.0).unwrap();
    let w = RewardWeights::default();
    let out = evaluate_episode(&mut CoastPolicy, &track, 4, None, &w).unwrap();
    assert!(out.norm_d > 0.95 && out.collisions == 0);
    assert_eq!(out.steps, 300);

    let full = Action::from_controls(0, 1);
    let hit = evaluate_episode(&mut Fixed(full), &track, 4, Some(ObstacleScenario::failure_case(10.0)), &w).unwrap();
    assert!(hit.collisions > 0);
    let free = evaluate_episode(&mut Fixed(full), &track, 4, None, &w).unwrap();
    assert!(free.norm_d < 0.05 && free.collisions == 0);
    assert!(free.norm_r > hit.norm_r);
}

#[test]
fn episode_seeds_are_distinct_across_cells() {
    let mut seen = std::collections::HashSet::new();
    for split in [Split::Train, Split::Test] {
        for route in 0..NUM_ROUTES {
            for ep in 0..5 {
                for d in [None, Some(5.0), Some(10.0)] {
                    assert!(seen.insert(episode_seed(0, split, route, ep, d)));
                }
            }
        }
    }
}

fn tiny_models() -> (Vae<f32>, Controller<f32>) {
    let vae = Vae::new(
        VaeConfig {
            latent_dim: 4,
            conv_channels: [2, 2, 2],
            ..VaeConfig::default()
        },
        0,
    )
    .unwrap();
    let ctrl = Controller::new(ControllerConfig { latent_dim: 4, hidden: 8 }, 1).unwrap();
    (vae, ctrl)
}

#[test]
fn specified_run_covers_every_cell_and_is_thread_count_invariant() {
    let (vae, ctrl) = tiny_models();
    let agents = [AgentUnderTest {
        kind: AgentKind::Cm,
        run_index: 0,
        controller: &ctrl,
    }];
    let config = EvalConfig {
        episodes_per_route: 1,
        n_resamples: 200,
        ..EvalConfig::default()
    };
    let records = run_specified(&vae, &agents, &[10.0, 5.0], &config).unwrap();
    assert_eq!(records.len(), 2 * 2 * NUM_ROUTES);
    assert!(records.iter().all(|r| r.avoided_obstacle == Some(!r.collided)));
    let parallel = run_specified(&vae, &agents, &[10.0, 5.0], &EvalConfig { jobs: 3, ..config }).unwrap();
    assert_eq!(records, parallel);

    let rows = summarize(&records, &[Metric::Success], &config).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.n == NUM_ROUTES && r.agent == AgentKind::Cm));
    assert_eq!(rows[0].distance, Some(10.0));
    assert_eq!(rows[0].split, Split::Train);
}

#[test]
fn unspecified_records_have_no_obstacle_outcome() {
    let (vae, ctrl) = tiny_models();
    let agents = [
        AgentUnderTest {
            kind: AgentKind::Mf,
            run_index: 0,
            controller: &ctrl,
        },
        AgentUnderTest {
            kind: AgentKind::Mb,
            run_index: 1,
            controller: &ctrl,
        },
    ];
    let config = EvalConfig {
        episodes_per_route: 1,
        n_resamples: 100,
        ..EvalConfig::default()
    };
    let records = run_unspecified(&vae, &agents, &config).unwrap();
    assert_eq!(records.len(), 2 * 2 * NUM_ROUTES);
    assert!(records.iter().all(|r| r.avoided_obstacle.is_none() && r.distance.is_none()));
    let rows = summarize(&records, &[Metric::NormD, Metric::NormR], &config).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    // Identical controllers see identical episodes.
    for (a, b) in rows.iter().filter(|r| r.agent == AgentKind::Mf).zip(rows.iter().filter(|r| r.agent == AgentKind::Mb)) {
        assert_eq!(a.mean, b.mean);
    }
}

fn row(agent: AgentKind, split: Split, metric: &str, mean: f64) -> ReportRow {
    ReportRow {
        agent,
        split,
        distance: None,
        metric: metric.into(),
        mean,
        ci_low: mean - 0.1,
        ci_high: mean + 0.1,
        n: 75,
    }
}

#[test]
fn report_renderings() {
    let rows = vec![
        row(AgentKind::Mf, Split::Train, "norm_d", 0.5),
        row(AgentKind::Cm, Split::Test, "norm_d", 0.25),
        row(AgentKind::Cm, Split::Test, "norm_r", 0.75),
    ];
    let csv = report_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "agent,split,distance,metric,mean,ci_low,ci_high,n");
    assert_eq!(lines.next().unwrap(), "MF,train,,norm_d,0.500000,0.400000,0.600000,75");
    assert_eq!(csv.lines().count(), 4);
    let md = report_md("Unspecified", &rows);
    assert!(md.contains("| CM | test | - | norm_r | 0.750 | [0.650, 0.850] | 75 |"));
    let svg = bar_chart_svg("Unspecified", &rows, "norm_d");
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<rect").count(), 2 + AgentKind::ALL.len());
}
