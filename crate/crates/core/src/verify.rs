//! Reusable correctness checks: finite-difference gradient checks on small
//! randomized instances and closed-form oracles. Shared by the test suites and
//! the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::concepts::ConceptModel;
use crate::controller::{self, Controller, ControllerConfig, PpoConfig, TrajectoryBatch};
use crate::env::{Action, NUM_ACTIONS};
use crate::error::Result;
use crate::nn::gradcheck::{self, GradCheckReport};
use crate::nn::{
    Conv2d, ConvGeometry, ConvTranspose2d, Dense, EarlyStopping, Layer, Lstm, LstmState, LstmTape, ParamSet, Sequential, Tape,
};
use crate::tensor::Tensor;
use crate::vae::{self, Vae, VaeConfig, VaeTrainConfig};
use crate::worldmodel::{self, EpisodeSeq, Mdn, MdnConfig, MdnTrainConfig};

/// Finite-difference step used by every check.
pub const FD_EPS: f64 = 1e-3;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("length matches")
}

/// Loss `Σ w ⊙ net(x)` for a fixed random projection `w`, so `dL/dy = w`.
fn layer_gradcheck(net: &Sequential, params: &mut ParamSet<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let y = net.forward(params, x, None)?;
    let w = random_tensor(y.shape(), -1.0, 1.0, rng);
    let mut tape = Tape::new();
    net.forward(params, x, Some(&mut tape))?;
    let mut grads = params.zeros_like();
    net.backward(params, &tape, &w, &mut grads)?;
    Ok(gradcheck::check(params, &grads, FD_EPS, |p| {
        let mut t = Tape::new();
        let y = net.forward(p, x, Some(&mut t)).expect("shapes fixed");
        let l = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        (l, t.kink_pattern(&net.layers))
    }))
}

const GEOMETRY: ConvGeometry = ConvGeometry {
    kernel: 4,
    stride: 2,
    padding: 1,
};

pub fn dense_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let net = Sequential::new(vec![Layer::Dense(Dense::new(&mut params, "d", 5, 4, &mut rng))]);
    let x = random_tensor(&[3, 5], -1.0, 1.0, &mut rng);
    layer_gradcheck(&net, &mut params, &x, &mut rng)
}

pub fn conv_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let net = Sequential::new(vec![Layer::Conv2d(Conv2d::new(&mut params, "c", 2, 3, GEOMETRY, &mut rng))]);
    let x = random_tensor(&[2, 6, 6, 2], -1.0, 1.0, &mut rng);
    layer_gradcheck(&net, &mut params, &x, &mut rng)
}

pub fn deconv_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let net = Sequential::new(vec![Layer::ConvTranspose2d(ConvTranspose2d::new(
        &mut params, "t", 3, 2, GEOMETRY, &mut rng,
    ))]);
    let x = random_tensor(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    layer_gradcheck(&net, &mut params, &x, &mut rng)
}

/// Five-step BPTT from a random initial state.
pub fn lstm_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let lstm = Lstm::new(&mut params, "l", 3, 4, &mut rng);
    let xs = random_tensor(&[5, 2, 3], -1.0, 1.0, &mut rng);
    let init = LstmState {
        h: random_tensor(&[2, 4], -1.0, 1.0, &mut rng),
        c: random_tensor(&[2, 4], -1.0, 1.0, &mut rng),
    };
    let w = random_tensor(&[5, 2, 4], -1.0, 1.0, &mut rng);
    let mut tape = LstmTape::default();
    lstm.forward_seq(&params, &xs, &init, Some(&mut tape))?;
    let mut grads = params.zeros_like();
    lstm.backward_seq(&params, &tape, &w, &mut grads)?;
    Ok(gradcheck::check(&mut params, &grads, FD_EPS, |p| {
        let (h, _) = lstm.forward_seq(p, &xs, &init, None).expect("shapes fixed");
        (h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(), Vec::new())
    }))
}

/// A named gradient check over seeds `0..n`.
pub type GradCheckFn = fn(u64) -> Result<GradCheckReport>;

pub const GRADCHECKS: [(&str, GradCheckFn); 7] = [
    ("dense", dense_gradcheck),
    ("conv", conv_gradcheck),
    ("deconv", deconv_gradcheck),
    ("lstm", lstm_gradcheck),
    ("vae_loss", vae_gradcheck),
    ("mdn_loss", mdn_gradcheck),
    ("ppo_loss", ppo_gradcheck),
];

/// VAE loss (reconstruction + weighted KL through the reparameterization) on an
/// 8×8 instance.
pub fn vae_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let config = VaeConfig {
        height: 8,
        width: 8,
        channels: 3,
        latent_dim: 3,
        conv_channels: [2, 3, 4],
        kl_weight: Some(0.3),
    };
    let mut model = Vae::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let x = random_tensor(&[2, 8, 8, 3], 0.0, 1.0, &mut rng);
    let eps = vae::noise::<f64>(2, 3, &mut rng);
    let (_, analytic) = model.loss_and_grad(&x, &eps)?;
    let mut params = model.params.clone();
    Ok(gradcheck::check(&mut params, &analytic, FD_EPS, |p| {
        model.params.clone_from(p);
        let (loss, kinks) = model.loss_with_kinks(&x, &eps).expect("shapes fixed");
        (loss.total, kinks)
    }))
}

fn random_episode(
    len: usize,
    latent: usize,
    concept: usize,
    terminal: bool,
    rng: &mut ChaCha8Rng,
) -> EpisodeSeq {
    let z = random_tensor(&[len, latent], -1.5, 1.5, rng).cast();
    EpisodeSeq {
        z,
        actions: (0..len).map(|_| Action::new(rng.random_range(0..NUM_ACTIONS)).expect("in range")).collect(),
        rewards: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
        dones: (0..len).map(|t| terminal && t + 1 == len).collect(),
        concepts: (concept > 0).then(|| random_tensor(&[len, concept], 0.0, 1.0, rng).cast()),
    }
}

/// World-model loss (GMM + reward MSE + done BCE) through a full BPTT pass on
/// a two-episode padded batch.
pub fn mdn_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let config = MdnConfig {
        latent_dim: 3,
        action_dim: NUM_ACTIONS,
        concept_dim: 2,
        lstm_hidden: 4,
        n_mixtures: 2,
    };
    let mut model = Mdn::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(202));
    let episodes = [
        random_episode(5, 3, 2, true, &mut rng),
        random_episode(3, 3, 2, false, &mut rng),
    ];
    let batch: Vec<&EpisodeSeq> = episodes.iter().collect();
    let (_, analytic) = model.loss_and_grad(&batch)?;
    let mut params = model.params.clone();
    Ok(gradcheck::check(&mut params, &analytic, FD_EPS, |p| {
        model.params.clone_from(p);
        (model.loss(&batch).expect("shapes fixed").total, Vec::new())
    }))
}

/// A small controller and a batch whose stored log-probabilities are jittered
/// away from the current policy, so ratios land on both sides of a 0.1 clip.
pub fn ppo_instance(seed: u64) -> Result<(Controller<f64>, TrajectoryBatch<f64>)> {
    let mut ctrl = Controller::<f64>::new(ControllerConfig { latent_dim: 4, hidden: 6 }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(303));
    // wider weights than the default init give non-trivial policies
    for v in ctrl.params.tensors_mut().iter_mut().flat_map(|t| t.data_mut().iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    let n = 8;
    let z = random_tensor(&[n, 4], -1.5, 1.5, &mut rng);
    let (logits, values) = ctrl.forward(&z)?;
    let actions: Vec<Action> = (0..n).map(|_| Action::new(rng.random_range(0..NUM_ACTIONS)).expect("in range")).collect();
    let logprob_old = (0..n)
        .map(|i| {
            let row: Vec<f64> = logits.row(i).to_vec();
            controller::log_softmax(&row)[actions[i].index()] + rng.random_range(-0.4..0.4)
        })
        .collect();
    let batch = TrajectoryBatch {
        z,
        actions,
        logprob_old,
        rewards: vec![0.0; n],
        dones: vec![false; n],
        values_old: values,
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    Ok((ctrl, batch))
}

/// Clipped PPO loss (ε = 0.1, value and entropy terms included).
pub fn ppo_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (mut ctrl, batch) = ppo_instance(seed)?;
    let config = PpoConfig::online();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let clip = Some(config.clip_epsilon);
    let (_, analytic) = controller::ppo_loss_and_grad(&ctrl, &batch, &idx, clip, &config)?;
    let mut params = ctrl.params.clone();
    Ok(gradcheck::check(&mut params, &analytic, FD_EPS, |p| {
        ctrl.params.clone_from(p);
        let (loss, kinks) = controller::ppo_loss(&ctrl, &batch, &idx, clip, &config).expect("shapes fixed");
        (loss.total, kinks)
    }))
}

/// Known two-component 1-D mixture used by [`mdn_recovery`].
pub const RECOVERY_MIXTURE: [(f64, f64, f64); 2] = [(0.35, -1.5, 0.4), (0.65, 1.0, 0.7)];

fn recovery_sample(rng: &mut ChaCha8Rng) -> f64 {
    let (w, m0, s0) = RECOVERY_MIXTURE[0];
    let (_, m1, s1) = RECOVERY_MIXTURE[1];
    let e: f64 = StandardNormal.sample(rng);
    if rng.random::<f64>() < w {
        m0 + s0 * e
    } else {
        m1 + s1 * e
    }
}

fn recovery_episodes(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<EpisodeSeq> {
    (0..n)
        .map(|_| {
            let z: Vec<f32> = (0..len).map(|_| recovery_sample(rng) as f32).collect();
            EpisodeSeq {
                z: Tensor::from_vec(&[len, 1], z).expect("length matches"),
                actions: (0..len).map(|_| Action::new(rng.random_range(0..NUM_ACTIONS)).expect("in range")).collect(),
                rewards: vec![0.0; len],
                dones: vec![false; len],
                concepts: None,
            }
        })
        .collect()
}

/// Mean per-sample NLL of the generating mixture on the targets of `episodes`.
fn generator_nll(episodes: &[EpisodeSeq]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for ep in episodes {
        for &y in &ep.z.data()[1..] {
            let y = y as f64;
            let p: f64 = RECOVERY_MIXTURE
                .iter()
                .map(|&(w, m, s)| w * (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
                .sum();
            total -= p.ln();
            count += 1;
        }
    }
    total / count as f64
}

/// 20k training draws (200 episodes) and 5k held-out draws from
/// [`RECOVERY_MIXTURE`], as 1-D latent sequences.
pub fn recovery_data(seed: u64) -> (Vec<EpisodeSeq>, Vec<EpisodeSeq>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = recovery_episodes(200, 101, &mut rng);
    let test = recovery_episodes(50, 101, &mut rng);
    (train, test)
}

/// Fits a K=2 world model and returns its held-out GMM NLL per sample.
pub fn fit_recovery(train: &[EpisodeSeq], test: &[EpisodeSeq], seed: u64) -> Result<f64> {
    let config = MdnConfig {
        latent_dim: 1,
        action_dim: NUM_ACTIONS,
        concept_dim: 0,
        lstm_hidden: 8,
        n_mixtures: 2,
    };
    let train_config = MdnTrainConfig {
        lr: 1e-2,
        max_epochs: 60,
        patience: 10,
        seed,
        ..MdnTrainConfig::default()
    };
    let (model, _) = worldmodel::train_mdn(Mdn::<f32>::new(config, seed)?, train, test, &train_config)?;
    Ok(worldmodel::evaluate(&model, test, 50)?.gmm)
}

/// Fits a K=2 world model on 20k draws from a known mixture; returns the
/// held-out `(model NLL, generator NLL)` per sample.
pub fn mdn_recovery(seed: u64) -> Result<(f64, f64)> {
    let (train, test) = recovery_data(seed);
    Ok((fit_recovery(&train, &test, seed)?, generator_nll(&test)))
}

/// One line of the self-test report.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SelfCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

fn self_check(name: &str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Gradient checks for every differentiable component, closed-form loss
/// oracles, early-stopping patience and concept-vector range. Deterministic.
pub fn selftest() -> Result<Vec<SelfCheck>> {
    let mut out = Vec::new();
    for (name, check) in GRADCHECKS {
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for seed in 0..20 {
            let r = check(seed)?;
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped;
        }
        out.push(self_check(
            &format!("gradcheck {name}"),
            worst < 1e-4,
            format!("max rel error {worst:.3e} over 20 instances, {skipped} kink-skipped coordinates"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut kl_err = 0.0f64;
    for _ in 0..100 {
        let mu: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lv: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let direct: f64 = mu.iter().zip(&lv).map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l)).sum();
        kl_err = kl_err.max((vae::kl_divergence(&mu, &lv) - direct).abs());
    }
    out.push(self_check("vae kl closed form", kl_err < 1e-9, format!("max abs error {kl_err:.3e}")));

    let mut gmm_err = 0.0f64;
    for _ in 0..100 {
        let (l, k) = (4, 3);
        let row: Vec<f64> = (0..3 * l * k + 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mix = worldmodel::MixtureOutput::from_head(&row, l, k);
        let y: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let density: f64 = (0..l)
            .map(|d| {
                (0..k)
                    .map(|j| {
                        let i = d * k + j;
                        let u = (y[d] - mix.mu[i]) / mix.sigma[i];
                        mix.pi[i] * (-0.5 * u * u).exp() / (mix.sigma[i] * (2.0 * std::f64::consts::PI).sqrt())
                    })
                    .sum::<f64>()
            })
            .product();
        let direct = -density.ln();
        gmm_err = gmm_err.max(((worldmodel::gmm_nll(&mix, &y) - direct) / direct.abs()).abs());
    }
    out.push(self_check("gmm nll density", gmm_err < 1e-6, format!("max rel error {gmm_err:.3e}")));

    let y: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut row = vec![0.0; 3 * 64 + 2];
    row[64..128].copy_from_slice(&y);
    let nll = worldmodel::gmm_nll(&worldmodel::MixtureOutput::from_head(&row, 64, 1), &y);
    let expected = 64.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
    out.push(self_check(
        "gmm nll unit gaussian",
        (nll - expected).abs() < 1e-4,
        format!("{nll:.6} vs {expected:.6}"),
    ));

    for (name, patience) in [("vae", VaeTrainConfig::default().patience), ("mdn", MdnTrainConfig::default().patience)] {
        let mut stopper = EarlyStopping::new(patience, 1e-4);
        let mut observed = 1;
        while !stopper.observe(1.0).stop {
            observed += 1;
        }
        let stagnant = observed - 1;
        out.push(self_check(
            &format!("early stop {name}"),
            stagnant == patience && stopper.best_epoch() == 1,
            format!("stopped after {stagnant} stagnant epochs (patience {patience})"),
        ));
    }

    let mut range_ok = true;
    for _ in 0..1000 {
        let centers = random_tensor(&[10, 8], -2.0, 2.0, &mut rng);
        let model = ConceptModel::new(centers)?;
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = model.concept_vector(&z)?;
        let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        range_ok &= lo == 0.0 && hi == 1.0;
    }
    out.push(self_check("concept vector range", range_ok, "min 0 and max 1 on 1000 inputs".into()));
    Ok(out)
}
