use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::verify;

fn head_row(latent: usize, k: usize, logits: &[f64], mu: &[f64], log_sigma: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(3 * latent * k + 2);
    row.extend_from_slice(logits);
    row.extend_from_slice(mu);
    row.extend_from_slice(log_sigma);
    row.extend_from_slice(&[0.0, 0.0]);
    row
}

fn direct_nll(mix: &MixtureOutput, y: &[f64]) -> f64 {
    let k = mix.n_mixtures;
    let mut nll = 0.0;
    for (d, &yd) in y.iter().enumerate() {
        let mut p = 0.0;
        for j in 0..k {
            let i = d * k + j;
            let s = mix.sigma[i];
            p += mix.pi[i] * (-(yd - mix.mu[i]).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        }
        nll -= p.ln();
    }
    nll
}

fn small_config(concept_dim: usize) -> MdnConfig {
    MdnConfig {
        latent_dim: 4,
        action_dim: NUM_ACTIONS,
        concept_dim,
        lstm_hidden: 8,
        n_mixtures: 3,
    }
}

#[test]
fn step_outputs_valid_mixture_and_is_pure() {
    let mdn = Mdn::<f32>::new(MdnConfig::default(), 1).unwrap();
    let z = vec![0.3f32; 64];
    let state = mdn.initial_state(1);
    let (mix, next) = mdn.step(&z, Action::new(2).unwrap(), None, &state).unwrap();
    for d in 0..64 {
        let s: f64 = mix.pi[d * 5..(d + 1) * 5].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(mix.sigma.iter().all(|&s| s > 0.0));
    assert!(next.all_finite());
    let (again, next2) = mdn.step(&z, Action::new(2).unwrap(), None, &state).unwrap();
    assert_eq!(mix, again);
    assert_eq!(next, next2);
}

#[test]
fn concept_width_must_match_variant() {
    let mb = Mdn::<f32>::new(small_config(0), 0).unwrap();
    let cm = Mdn::<f32>::new(small_config(10), 0).unwrap();
    let z = [0.0f32; 4];
    let c = [0.5f32; 10];
    let s = mb.initial_state(1);
    assert!(matches!(mb.step(&z, Action::COAST, Some(&c), &s), Err(Error::InvalidArgument(_))));
    assert!(matches!(cm.step(&z, Action::COAST, None, &s), Err(Error::InvalidArgument(_))));
    assert!(matches!(cm.step(&z, Action::COAST, Some(&c[..3]), &s), Err(Error::InvalidArgument(_))));
    assert!(cm.step(&z, Action::COAST, Some(&c), &s).is_ok());
}

#[test]
fn variants_differ_only_in_concept_input_rows() {
    let mb = Mdn::<f32>::new(MdnConfig::default(), 3).unwrap();
    let cm = Mdn::<f32>::new(
        MdnConfig {
            concept_dim: 10,
            ..MdnConfig::default()
        },
        3,
    )
    .unwrap();
    assert_eq!(cm.params.scalar_count() - mb.params.scalar_count(), 4 * 256 * 10);
    let w_mb = mb.params.get(mb.lstm().input_weight());
    let w_cm = cm.params.get(cm.lstm().input_weight());
    assert_eq!(w_mb.shape(), &[1024, 73]);
    assert_eq!(w_cm.shape(), &[1024, 83]);
}

#[test]
fn unit_gaussian_on_target_gives_closed_form_nll() {
    let y: Vec<f64> = (0..64).map(|i| i as f64 * 0.1 - 3.0).collect();
    let row = head_row(64, 1, &[0.0; 64], &y, &[0.0; 64]);
    let mix = MixtureOutput::from_head(&row, 64, 1);
    let nll = gmm_nll(&mix, &y);
    assert!((nll - 64.0 * 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
    assert!((nll - 58.812).abs() < 1e-3);
}

#[test]
fn sharp_component_on_target_beats_unit_gaussian() {
    let y = [0.7];
    let unit = MixtureOutput::from_head(&head_row(1, 1, &[0.0], &y, &[0.0]), 1, 1);
    let sharp = MixtureOutput::from_head(&head_row(1, 2, &[0.0, 0.0], &[0.7, -2.0], &[-6.0, 0.0]), 1, 2);
    assert!(gmm_nll(&sharp, &y) < gmm_nll(&unit, &y));
}

#[test]
fn softmax_shift_leaves_nll_unchanged() {
    let y = [0.2, -1.0];
    let base = head_row(2, 2, &[0.3, -0.4, 1.0, 2.0], &[0.0, 1.0, -1.0, 0.5], &[0.1, -0.2, 0.3, 0.0]);
    let mut shifted = base.clone();
    for v in &mut shifted[..2] {
        *v += 37.0;
    }
    let a = gmm_nll(&MixtureOutput::from_head(&base, 2, 2), &y);
    let b = gmm_nll(&MixtureOutput::from_head(&shifted, 2, 2), &y);
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn extreme_logits_do_not_overflow() {
    let row = head_row(1, 3, &[100.0, -100.0, 99.0], &[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]);
    let mix = MixtureOutput::from_head(&row, 1, 3);
    assert!(mix.pi.iter().all(|p| p.is_finite()));
    assert!(gmm_nll(&mix, &[0.5]).is_finite());
    let row = head_row(1, 2, &[-100.0, -100.0], &[0.0, 1.0], &[0.0, 0.0]);
    assert!((MixtureOutput::from_head(&row, 1, 2).pi[0] - 0.5).abs() < 1e-12);
}

#[test]
fn sigma_is_clamped() {
    let row = head_row(1, 2, &[0.0, 0.0], &[0.0, 0.0], &[-50.0, 50.0]);
    let mix = MixtureOutput::from_head(&row, 1, 2);
    assert!((mix.sigma[0] - SIGMA_MIN).abs() < 1e-12);
    assert!((mix.sigma[1] - SIGMA_MAX).abs() < 1e-6);
}

#[test]
fn near_deterministic_sampling_returns_dominant_mean() {
    let row = head_row(2, 2, &[20.0, -20.0, -20.0, 20.0], &[1.5, -3.0, 9.0, -0.25], &[-9.3; 4]);
    let mix = MixtureOutput::from_head(&row, 2, 2);
    let (z, _, _) = sample_next(&mix, &mut ChaCha8Rng::seed_from_u64(0));
    assert!((z[0] - 1.5).abs() < 1e-2);
    assert!((z[1] + 0.25).abs() < 1e-2);
}

#[test]
fn done_threshold_is_strictly_above_half() {
    let mut row = head_row(1, 1, &[0.0], &[0.0], &[0.0]);
    let logit_06 = (0.6f64 / 0.4).ln();
    row[4] = logit_06;
    let (_, _, done) = sample_next(&MixtureOutput::from_head(&row, 1, 1), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(done);
    row[4] = 0.0;
    let (_, _, done) = sample_next(&MixtureOutput::from_head(&row, 1, 1), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(!done);
}

#[test]
fn sampled_mean_matches_mixture_mean() {
    let w: f64 = 0.3;
    let logits = [w.ln(), (1.0 - w).ln()];
    let row = head_row(1, 2, &logits, &[-2.0, 1.0], &[0.5f64.ln(), 1.0f64.ln()]);
    let mix = MixtureOutput::from_head(&row, 1, 2);
    let mean = w * -2.0 + (1.0 - w) * 1.0;
    let second = w * (4.0 + 0.25) + (1.0 - w) * (1.0 + 1.0);
    let sd = (second - mean * mean).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let emp: f64 = (0..n).map(|_| sample_next(&mix, &mut rng).0[0]).sum::<f64>() / n as f64;
    assert!((emp - mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{emp} vs {mean}");
    assert!((mix.mean()[0] - mean).abs() < 1e-12);
}

fn constant_head_model(reward: f64) -> Mdn<f64> {
    let mut mdn = Mdn::<f64>::new(small_config(0), 0).unwrap();
    let lk = 4 * 3;
    let w = mdn.params.get_mut(mdn.head.weight());
    w.fill(0.0);
    let b = mdn.params.get_mut(mdn.head.bias());
    b.fill(0.0);
    b.data_mut()[3 * lk] = reward;
    mdn
}

fn constant_episode(len: usize, reward: f32) -> EpisodeSeq {
    EpisodeSeq {
        z: Tensor::filled(&[len, 4], 0.25),
        actions: vec![Action::COAST; len],
        rewards: vec![reward; len],
        dones: vec![false; len],
        concepts: None,
    }
}

#[test]
fn loss_terms_sum_and_match_closed_forms() {
    let mdn = constant_head_model(1.5);
    let ep = constant_episode(6, 1.5);
    let loss = mdn.loss(&[&ep]).unwrap();
    assert_eq!(loss.mse, 0.0);
    assert!((loss.bce - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(loss.total, loss.gmm + loss.mse + loss.bce);
    let k3 = 4.0 * (0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * 0.25f64.powi(2));
    assert!((loss.gmm - k3).abs() < 1e-9);
}

#[test]
fn padding_does_not_change_per_episode_loss() {
    let mdn = Mdn::<f64>::new(small_config(0), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ep = |len: usize| EpisodeSeq {
        z: Tensor::from_vec(&[len, 4], (0..len * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        actions: vec![Action::new(1).unwrap(); len],
        rewards: vec![0.5; len],
        dones: (0..len).map(|t| t + 1 == len).collect(),
        concepts: None,
    };
    let (a, b) = (ep(7), ep(7));
    let short = EpisodeSeq {
        z: Tensor::from_vec(&[3, 4], b.z.data()[..12].to_vec()).unwrap(),
        actions: b.actions[..3].to_vec(),
        rewards: b.rewards[..3].to_vec(),
        dones: b.dones[..3].to_vec(),
        concepts: None,
    };
    let alone = mdn.loss(&[&short]).unwrap();
    let long_alone = mdn.loss(&[&a]).unwrap();
    let together = mdn.loss(&[&a, &short]).unwrap();
    let expected_gmm = (long_alone.gmm * 6.0 + alone.gmm * 2.0) / 8.0;
    assert!((together.gmm - expected_gmm).abs() < 1e-9);
}

#[test]
fn mdn_gradients_match_finite_differences() {
    for seed in 0..20 {
        let r = verify::mdn_gradcheck(seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn recovers_known_two_component_mixture() {
    let (fitted, truth) = verify::mdn_recovery(0).unwrap();
    assert!(fitted <= truth * 1.02, "fitted {fitted}, generator {truth}");
}

#[test]
fn predicts_a_deterministic_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut episodes = Vec::new();
    for _ in 0..210 {
        let len = 40;
        let mut z = Vec::with_capacity(len * 2);
        let mut actions = Vec::with_capacity(len);
        let mut angle: f64 = rng.random_range(0.0..6.28);
        for _ in 0..len {
            z.extend_from_slice(&[angle.cos() as f32, angle.sin() as f32]);
            let a = Action::new(rng.random_range(0..NUM_ACTIONS)).unwrap();
            angle += 0.1 * (a.index() as f64 - 4.0);
            actions.push(a);
        }
        episodes.push(EpisodeSeq {
            z: Tensor::from_vec(&[len, 2], z).unwrap(),
            actions,
            rewards: vec![0.0; len],
            dones: vec![false; len],
            concepts: None,
        });
    }
    let (train, test) = episodes.split_at(200);
    let config = MdnConfig {
        latent_dim: 2,
        action_dim: NUM_ACTIONS,
        concept_dim: 0,
        lstm_hidden: 32,
        n_mixtures: 2,
    };
    let tc = MdnTrainConfig {
        lr: 3e-3,
        batch_episodes: 10,
        max_epochs: 150,
        patience: 20,
        ..MdnTrainConfig::default()
    };
    let (mdn, _) = train_mdn(Mdn::<f32>::new(config, 0).unwrap(), train, test, &tc).unwrap();
    let (mut err, mut delta_sq, mut delta_sum, mut n) = (0.0, 0.0, [0.0; 2], 0.0);
    for ep in test {
        let mut state = mdn.initial_state(1);
        for t in 0..ep.len() - 1 {
            let (mix, next) = mdn.step(ep.z.row(t), ep.actions[t], None, &state).unwrap();
            state = next;
            let pred = mix.mean();
            for d in 0..2 {
                let target = ep.z.row(t + 1)[d] as f64;
                let delta = target - ep.z.row(t)[d] as f64;
                err += (pred[d] - target).powi(2);
                delta_sq += delta * delta;
                delta_sum[d] += delta;
            }
            n += 1.0;
        }
    }
    let var = delta_sq / (2.0 * n) - (delta_sum[0] / n).powi(2) / 2.0 - (delta_sum[1] / n).powi(2) / 2.0;
    let mse = err / (2.0 * n);
    assert!(mse <= 0.1 * var, "mse {mse}, delta variance {var}");
}

#[test]
fn training_defaults_follow_protocol() {
    let c = MdnTrainConfig::default();
    assert_eq!((c.batch_episodes, c.patience, c.max_epochs), (20, 10, 500));
}

#[test]
fn training_writes_one_log_row_per_epoch() {
    let eps: Vec<EpisodeSeq> = (0..4).map(|_| constant_episode(5, 0.0)).collect();
    let tc = MdnTrainConfig {
        max_epochs: 3,
        ..MdnTrainConfig::default()
    };
    let (_, log) = train_mdn(Mdn::<f32>::new(small_config(0), 0).unwrap(), &eps, &eps[..1], &tc).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log_csv(&log).starts_with("epoch,train_loss,test_loss,gmm,mse,bce\n"));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mdn = Mdn::<f32>::new(small_config(10), 2).unwrap();
    let path = dir.path().join("mdn.cmpw");
    mdn.save(&path).unwrap();
    let back = Mdn::<f32>::load(&path).unwrap();
    assert_eq!(back.params, mdn.params);
    assert_eq!(back.config, mdn.config);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nll_matches_direct_density(
        raw in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0, -1.0f64..0.8), 6),
        y in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let logits: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mu: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let ls: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let mix = MixtureOutput::from_head(&head_row(2, 3, &logits, &mu, &ls), 2, 3);
        let a = gmm_nll(&mix, &y);
        let b = direct_nll(&mix, &y);
        prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{} vs {}", a, b);
    }
}
