//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion.
//!
//! Select criteria by number: `cargo test --test acceptance -- 1 2 5`.
//! `CMWM_ACCEPTANCE_STRICT=1` turns any FAIL into a nonzero exit status.
//! `CMWM_ACCEPTANCE_DIR` sets where the toy pipeline artifacts are written
//! (default `target/acceptance`); `CMWM_ACCEPTANCE_REUSE=1` reuses completed
//! toy runs found there instead of retraining.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cmwm::concepts::{
    connected_components, kmeans, min_component_pixels, saliency_map, threshold_mask, ActionProbabilities,
    ConceptModel, KMeansConfig, Mask, SaliencyConfig,
};
use cmwm::controller::{Controller, ControllerConfig};
use cmwm::dream::{DreamSession, DreamWorld, SeedData, SeedEpisode, MAX_DREAM_LEN, SEED_LEN};
use cmwm::env::{Action, Observation, Split, CHANNELS, HEIGHT, NUM_ACTIONS, WIDTH};
use cmwm::harness::{self, AgentKind, AgentUnderTest, EvalConfig, EvalRecord};
use cmwm::nn::EarlyStopping;
use cmwm::pipeline::{Experiment, MdnVariant, Pipeline, RunConfig};
use cmwm::vae::{self, Vae, VaeConfig, VaeTrainConfig};
use cmwm::verify::{self, GRADCHECKS, RECOVERY_MIXTURE};
use cmwm::worldmodel::{self, Mdn, MdnConfig, MdnTrainConfig, MixtureOutput};
use cmwm::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- criterion 1

fn gradient_correctness() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, check) in GRADCHECKS {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 0..20 {
            let r = check(1_000 + seed)?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
        }
        ok &= worst < 1e-4 && checked > 0;
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(ok, format!("max rel error over 20 instances: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn closed_form_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut kl_err = 0.0f64;
    for _ in 0..1_000 {
        let mu: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        let lv: Vec<f64> = (0..64).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut direct = 0.0;
        for j in 0..64 {
            direct += 0.5 * (lv[j].exp() + mu[j] * mu[j] - 1.0 - lv[j]);
        }
        kl_err = kl_err.max((vae::kl_divergence(&mu, &lv) - direct).abs());
    }

    let mut gmm_err = 0.0f64;
    for _ in 0..1_000 {
        let (l, k) = (rng.random_range(1..6), rng.random_range(1..5));
        let row: Vec<f64> = (0..3 * l * k + 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mix = MixtureOutput::from_head(&row, l, k);
        let y: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
        // Direct density from the raw head: softmax weights, exp log-sigma.
        let mut density = 1.0;
        for d in 0..l {
            let logits = &row[d * k..(d + 1) * k];
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let mut p = 0.0;
            for j in 0..k {
                let mu = row[l * k + d * k + j];
                let sigma = row[2 * l * k + d * k + j].exp();
                let u = (y[d] - mu) / sigma;
                p += logits[j].exp() / z * (-0.5 * u * u).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            }
            density *= p;
        }
        let direct = -density.ln();
        let rel = (worldmodel::gmm_nll(&mix, &y) - direct).abs() / direct.abs().max(1e-12);
        gmm_err = gmm_err.max(rel);
    }

    let y: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut row = vec![0.0; 3 * 64 + 2];
    row[64..128].copy_from_slice(&y);
    let unit = worldmodel::gmm_nll(&MixtureOutput::from_head(&row, 64, 1), &y);
    let unit_err = (unit - 58.812_066_12).abs();

    outcome(
        kl_err < 1e-9 && gmm_err < 1e-6 && unit_err < 1e-4,
        format!("KL abs err {kl_err:.1e}, gmm rel err {gmm_err:.1e}, K=1 NLL {unit:.6} (err {unit_err:.1e})"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn mdn_recovery() -> Result<Outcome> {
    let (train, test) = verify::recovery_data(3);
    let fitted = verify::fit_recovery(&train, &test, 3)?;
    // Generator oracle: exact mixture density on every predicted target.
    let mut total = 0.0;
    let mut n = 0;
    for ep in &test {
        for &y in &ep.z.data()[1..] {
            let y = y as f64;
            let p: f64 = RECOVERY_MIXTURE
                .iter()
                .map(|&(w, m, s)| w * (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
                .sum();
            total -= p.ln();
            n += 1;
        }
    }
    let truth = total / n as f64;
    let gap = (fitted - truth) / truth.abs();
    let samples: usize = train.iter().map(|e| e.len()).sum();
    outcome(
        gap < 0.02,
        format!("{samples} training samples: model NLL {fitted:.4} vs generator {truth:.4} ({:+.2}%)", gap * 100.0),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Action distribution driven only by the mean brightness of one 8×8 box.
struct BoxPolicy {
    row: usize,
    col: usize,
}

impl ActionProbabilities for BoxPolicy {
    fn action_probabilities(&self, images: &Tensor<f32>) -> Result<Vec<[f64; NUM_ACTIONS]>> {
        Ok((0..images.rows())
            .map(|n| {
                let img = images.row(n);
                let mut s = 0.0;
                for r in self.row..self.row + 8 {
                    for c in self.col..self.col + 8 {
                        for ch in 0..CHANNELS {
                            s += img[(r * WIDTH + c) * CHANNELS + ch] as f64;
                        }
                    }
                }
                let p = 1.0 / (1.0 + (-(s / 192.0 - 0.5) * 20.0).exp());
                let mut out = [0.0; NUM_ACTIONS];
                out[2] = p;
                out[6] = 1.0 - p;
                out
            })
            .collect())
    }
}

fn noise_image(rng: &mut ChaCha8Rng) -> Observation {
    Observation::from_pixels((0..Observation::LEN).map(|_| rng.random_range(0..=255u8)).collect()).unwrap()
}

fn saliency_attention() -> Result<(bool, String)> {
    let mut worst = 1.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (row, col) in [(12, 28), (36, 6), (26, 36)] {
        let policy = BoxPolicy { row, col };
        for _ in 0..2 {
            let sal = saliency_map(&policy, &noise_image(&mut rng), &SaliencyConfig::default())?;
            let mask = threshold_mask(&sal);
            // Attended region: the box plus a 4-pixel margin for the perturbation grid.
            let inside = |r: usize, c: usize| r + 4 >= row && r < row + 12 && c + 4 >= col && c < col + 12;
            let (mut total, mut within) = (0.0, 0.0);
            for r in 0..HEIGHT {
                for c in 0..WIDTH {
                    if mask.get(r, c) {
                        total += sal.get(r, c);
                        if inside(r, c) {
                            within += sal.get(r, c);
                        }
                    }
                }
            }
            let frac = if total > 0.0 { within / total } else { 0.0 };
            worst = worst.min(frac);
        }
    }
    Ok((worst >= 0.8, format!("saliency mass in region >= {:.1}%", worst * 100.0)))
}

fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let pairs = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sa: f64 = ra.values().map(|&n| pairs(n)).sum();
    let sb: f64 = rb.values().map(|&n| pairs(n)).sum();
    let expected = sa * sb / pairs(a.len() as u64);
    (index - expected) / (0.5 * (sa + sb) - expected)
}

/// Masked patches of three families (a red square, a green bar, a blue
/// diagonal band), encoded by a VAE and clustered.
fn patch_family_clustering() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut patches = Vec::new();
    let mut truth = Vec::new();
    for family in 0..3 {
        for _ in 0..40 {
            let mut px = vec![96u8; Observation::LEN];
            let (dr, dc) = (rng.random_range(0..6), rng.random_range(0..6));
            for r in 0..HEIGHT {
                for c in 0..WIDTH {
                    let on = match family {
                        0 => (10 + dr..26 + dr).contains(&r) && (10 + dc..26 + dc).contains(&c),
                        1 => (32 + dr..38 + dr).contains(&r) && (6..42).contains(&c),
                        _ => (r + c + dr).abs_diff(44 + dc) < 4,
                    };
                    if on {
                        let i = (r * WIDTH + c) * CHANNELS;
                        let shade = rng.random_range(200..=255u8);
                        px[i + family] = shade;
                    }
                }
            }
            patches.push(Observation::from_pixels(px).unwrap());
            truth.push(family);
        }
    }
    let encoder = Vae::<f32>::new(VaeConfig::default(), 7)?;
    let z = encoder.encode_means(&patches)?;
    let points: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).iter().map(|&v| v as f64).collect()).collect();
    let fit = kmeans(
        &points,
        &KMeansConfig {
            n_clusters: 3,
            ..KMeansConfig::default()
        },
    )?;
    let ari = adjusted_rand_index(&fit.labels, &truth);
    Ok((ari >= 0.9, format!("ARI {ari:.3}")))
}

fn concept_vector_range() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut ok = 0;
    for _ in 0..1_000 {
        let centers = Tensor::from_vec(&[10, 64], (0..640).map(|_| rng.random_range(-3.0f32..3.0)).collect())?;
        let model = ConceptModel::new(centers)?;
        let z: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c = model.concept_vector(&z)?;
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        if max == 1.0 && min == 0.0 && c.iter().all(|v| (0.0..=1.0).contains(v)) {
            ok += 1;
        }
    }
    Ok((ok == 1_000, format!("concept max=1/min=0 on {ok}/1000")))
}

/// Breadth-first flood fill with 8-connectivity; components smaller than 1% of
/// the pixels are dropped.
fn oracle_components(mask: &Mask) -> BTreeSet<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = BTreeSet::new();
    let min = (0.01 * (h * w) as f64).ceil() as usize;
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.bits[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if comp.len() >= min {
            comp.sort_unstable();
            out.insert(comp);
        }
    }
    out
}

fn component_labeling() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut matched = 0;
    for i in 0..50 {
        let density = [0.15, 0.3, 0.45][i % 3];
        let mask = Mask {
            height: 16,
            width: 16,
            bits: (0..256).map(|_| rng.random_bool(density)).collect(),
        };
        let got: BTreeSet<Vec<usize>> = connected_components(&mask)
            .iter()
            .map(|c| (0..256).filter(|&p| c.mask.bits[p]).collect())
            .collect();
        if got == oracle_components(&mask) {
            matched += 1;
        }
    }
    Ok((
        matched == 50 && min_component_pixels(16, 16) == 3,
        format!("components match on {matched}/50 masks"),
    ))
}

fn concept_pipeline() -> Result<Outcome> {
    let parts = [saliency_attention()?, patch_family_clustering()?, concept_vector_range()?, component_labeling()?];
    outcome(
        parts.iter().all(|p| p.0),
        parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "),
    )
}

// ---------------------------------------------------------------- criterion 5

fn fix_done_probability(mdn: &mut Mdn<f64>, p: f64) {
    let row = mdn.config.head_dim() - 1;
    let hidden = mdn.config.lstm_hidden;
    let names: Vec<String> = mdn.params.iter().map(|(n, _)| n.to_string()).collect();
    let w = names.iter().position(|n| n == "mdn.head.weight").unwrap();
    let b = names.iter().position(|n| n == "mdn.head.bias").unwrap();
    mdn.params.tensors_mut()[w].data_mut()[row * hidden..(row + 1) * hidden].fill(0.0);
    mdn.params.tensors_mut()[b].data_mut()[row] = (p / (1.0 - p)).ln();
}

fn protocol_fidelity() -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut ok = true;

    // Seeding: the warmed state equals exactly 10 teacher-forced steps.
    let config = MdnConfig {
        latent_dim: 4,
        action_dim: NUM_ACTIONS,
        concept_dim: 0,
        lstm_hidden: 8,
        n_mixtures: 2,
    };
    let mut model = Mdn::<f64>::new(config, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let episodes = (0..4)
        .map(|i| {
            let len = 12 + 7 * i;
            SeedEpisode {
                z: Tensor::from_vec(&[len, 4], (0..len * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                actions: (0..len).map(|_| Action::new(rng.random_range(0..NUM_ACTIONS)).unwrap()).collect(),
            }
        })
        .collect();
    let seeds = SeedData { episodes };
    let mut seeding_ok = true;
    {
        let world = DreamWorld::new(&model, None)?;
        for _ in 0..20 {
            let s = DreamSession::seed(&world, &seeds, MAX_DREAM_LEN, &mut rng)?;
            let (e, start) = s.origin;
            let ep = &seeds.episodes[e];
            let forced = |n: usize| -> Result<_> {
                let mut st = model.initial_state(1);
                for t in start..start + n {
                    st = model.step(ep.z.row(t), ep.actions[t], None, &st)?.1;
                }
                Ok(st)
            };
            seeding_ok &= s.state == forced(10)? && s.state != forced(9)? && s.z == ep.z.row(start + 9);
        }
    }
    ok &= seeding_ok && SEED_LEN == 10;
    notes.push(format!("seed length {SEED_LEN} ({})", if seeding_ok { "state matches" } else { "state differs" }));

    // Termination: p(done) = 0.51 ends the dream, 0.49 does not.
    let mut ends = Vec::new();
    for p in [0.51, 0.49] {
        fix_done_probability(&mut model, p);
        let world = DreamWorld::new(&model, None)?;
        let mut s = DreamSession::seed(&world, &seeds, MAX_DREAM_LEN, &mut rng)?;
        ends.push(s.step(&world, Action::COAST, &mut rng)?.done);
    }
    ok &= ends == [true, false];
    notes.push(format!("done at p=0.51: {}, at p=0.49: {}", ends[0], ends[1]));

    // Early stopping on flat synthetic loss streams, after an initial descent.
    for (name, patience) in [("VAE", VaeTrainConfig::default().patience), ("MDN", MdnTrainConfig::default().patience)] {
        let mut stopper = EarlyStopping::new(patience, 1e-4);
        let stream = (0..5).map(|i| 1.0 - 0.1 * i as f64).chain(std::iter::repeat(0.6 - 5e-5));
        let mut stagnant = 0;
        let mut stopped = false;
        for (epoch, loss) in stream.enumerate() {
            let d = stopper.observe(loss);
            if epoch >= 5 {
                stagnant += 1;
            }
            if d.stop {
                stopped = true;
                break;
            }
            if epoch > 1_000 {
                break;
            }
        }
        let expected = if name == "VAE" { 30 } else { 10 };
        ok &= stopped && stagnant == expected;
        notes.push(format!("{name} stops after {stagnant} stagnant epochs"));
    }

    // 75 specified-evaluation episodes per (agent, distance, split) cell.
    let encoder = Vae::<f32>::new(
        VaeConfig {
            latent_dim: 4,
            conv_channels: [2, 2, 2],
            ..VaeConfig::default()
        },
        0,
    )?;
    let controllers: Vec<Controller<f32>> = (0..9)
        .map(|i| Controller::new(ControllerConfig { latent_dim: 4, hidden: 8 }, i))
        .collect::<Result<_>>()?;
    let agents: Vec<AgentUnderTest<'_>> = controllers
        .iter()
        .enumerate()
        .map(|(i, c)| AgentUnderTest {
            kind: AgentKind::ALL[i / 3],
            run_index: i % 3,
            controller: c,
        })
        .collect();
    let records = harness::run_specified(&encoder, &agents, &[10.0, 5.0], &EvalConfig::default())?;
    let mut cells: BTreeMap<(AgentKind, u64, Split), usize> = BTreeMap::new();
    for r in &records {
        *cells.entry((r.agent, r.distance.unwrap().to_bits(), r.split)).or_default() += 1;
    }
    let counts_ok = cells.len() == 12 && cells.values().all(|&n| n == 75);
    ok &= counts_ok;
    notes.push(format!(
        "{} specified cells with {:?} episodes each",
        cells.len(),
        cells.values().collect::<BTreeSet<_>>()
    ));
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 6

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Result<Outcome> {
    let tests: Vec<String> = verify::selftest()?.iter().map(|c| c.to_string()).collect();
    let again: Vec<String> = verify::selftest()?.iter().map(|c| c.to_string()).collect();
    let selftest_same = tests == again;
    let selftest_pass = tests.iter().all(|l| l.starts_with("PASS"));

    let base = tempfile::tempdir().expect("temp dir");
    let mut trees = Vec::new();
    for (i, jobs) in [1, 2].into_iter().enumerate() {
        let dir = base.path().join(format!("run{i}"));
        Pipeline::new(RunConfig::mini(), &dir, jobs)?.run_all()?;
        trees.push(files_under(&dir));
    }
    let differing: Vec<String> = trees[0]
        .iter()
        .filter(|(p, bytes)| trees[1].get(*p) != Some(bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    let csvs = trees[0].keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    outcome(
        selftest_same && selftest_pass && same_set && differing.is_empty(),
        format!(
            "selftest {} lines identical={selftest_same} all-pass={selftest_pass}; mini pipeline: {} files ({csvs} CSV) byte-identical={}{}",
            tests.len(),
            trees[0].len(),
            same_set && differing.is_empty(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {})", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------- criteria 7 and 8

fn acceptance_dir() -> PathBuf {
    std::env::var_os("CMWM_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn reuse() -> bool {
    std::env::var("CMWM_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1")
}

/// Attempt `k` of the toy pipeline: the toy configuration with every seed
/// shifted by `k`.
fn toy_pipeline(attempt: u64, fresh: bool) -> Result<Pipeline> {
    let dir = acceptance_dir().join(format!("toy-attempt{attempt}"));
    let config = RunConfig::toy().reseeded(attempt);
    if fresh && dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| cmwm::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    Pipeline::new(config, dir, 1)
}

fn log(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn timed<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let r = f();
    log(&format!("{name}: {:.0}s", t.elapsed().as_secs_f64()));
    r
}

/// Stages up to both world models, skipping those whose outputs exist when
/// `keep` is set.
fn run_world_model_stages(p: &Pipeline, keep: bool) -> Result<()> {
    let a = &p.artifacts;
    let have = |path: PathBuf| keep && path.exists();
    if !have(a.dataset().join("manifest.json")) {
        timed("collect", || p.collect())?;
    }
    if !have(a.vae()) {
        timed("train-vae", || p.train_vae())?;
    }
    if !have(a.mf_agent(p.config.n_runs - 1)) {
        timed("train-agent mf", || p.train_mf())?;
    }
    if !have(a.concepts()) {
        timed("extract-concepts", || p.extract_concepts())?;
    }
    for v in [MdnVariant::Mb, MdnVariant::Cm] {
        if !have(a.mdn(v)) {
            timed(&format!("train-mdn {}", v.as_str()), || p.train_mdn(v))?;
        }
    }
    Ok(())
}

/// Stages up to the specified evaluation, skipping those whose outputs exist
/// when reuse is enabled.
fn run_headline_stages(p: &Pipeline) -> Result<Vec<EvalRecord>> {
    run_world_model_stages(p, reuse())?;
    let a = &p.artifacts;
    let have = |path: PathBuf| reuse() && path.exists();
    let distance = p.config.failure.distance;
    if !have(a.failure_seeds(distance).join("manifest.json")) {
        timed("make-failure-seeds", || p.make_failure_seeds(distance))?;
    }
    let seeds = a.failure_seeds(distance);
    for v in [MdnVariant::Mb, MdnVariant::Cm] {
        if !have(a.dream_agent(v, true, p.config.n_runs - 1)) {
            timed(&format!("dream-train {} failure", v.as_str()), || p.dream_train(v, Some(&seeds)))?;
        }
    }
    timed("eval specified", || p.eval(Experiment::Specified))
}

fn success_rate(records: &[EvalRecord], agent: AgentKind, split: Split, distance: f64) -> f64 {
    let cell: Vec<f64> = records
        .iter()
        .filter(|r| r.agent == agent && r.split == split && r.distance == Some(distance))
        .map(|r| r.avoided_obstacle.map_or(0.0, |b| b as u8 as f64))
        .collect();
    cell.iter().sum::<f64>() / cell.len().max(1) as f64
}

struct Headline {
    passed: bool,
    detail: String,
}

fn headline_gate(records: &[EvalRecord]) -> Headline {
    let rate = |a, s, d| success_rate(records, a, s, d);
    let (cm10, mf10, mb10) = (
        rate(AgentKind::Cm, Split::Train, 10.0),
        rate(AgentKind::Mf, Split::Train, 10.0),
        rate(AgentKind::Mb, Split::Train, 10.0),
    );
    let (cm5, mf5, mb5) = (
        rate(AgentKind::Cm, Split::Train, 5.0),
        rate(AgentKind::Mf, Split::Train, 5.0),
        rate(AgentKind::Mb, Split::Train, 5.0),
    );
    let passed = cm10 - mf10 >= 0.15 && cm10 - mb10 >= 0.15 && cm5 - mf5 >= 0.15;
    Headline {
        passed,
        detail: format!(
            "train d=10: CM {cm10:.3} MF {mf10:.3} MB {mb10:.3}; train d=5: CM {cm5:.3} MF {mf5:.3} MB {mb5:.3}"
        ),
    }
}

const HEADLINE_ATTEMPTS: u64 = 3;

fn headline() -> Result<Outcome> {
    let start = Instant::now();
    let mut attempts = Vec::new();
    for attempt in 0..HEADLINE_ATTEMPTS {
        let p = toy_pipeline(attempt, !reuse())?;
        let t = Instant::now();
        let records = run_headline_stages(&p)?;
        let gate = headline_gate(&records);
        let minutes = t.elapsed().as_secs_f64() / 60.0;
        log(&format!("attempt {attempt}: {} ({minutes:.1} min) {}", gate.passed, gate.detail));
        attempts.push(format!("attempt {attempt} [{minutes:.1} min] {}", gate.detail));
        if gate.passed {
            return outcome(minutes < 60.0, attempts.join(" | "));
        }
    }
    let total = start.elapsed().as_secs_f64() / 60.0;
    outcome(false, format!("{} (total {total:.1} min)", attempts.join(" | ")))
}

fn unspecified_report() -> Result<Outcome> {
    // Builds on the first toy run of the headline criterion, training only what is missing.
    let p = toy_pipeline(0, false)?;
    run_world_model_stages(&p, true)?;
    let a = &p.artifacts;
    for v in [MdnVariant::Mb, MdnVariant::Cm] {
        if !(reuse() && a.dream_agent(v, false, p.config.n_runs - 1).exists()) {
            timed(&format!("dream-train {}", v.as_str()), || p.dream_train(v, None))?;
        }
    }
    let t = Instant::now();
    timed("eval unspecified", || p.eval(Experiment::Unspecified))?;
    let reports = p.report()?;
    let eval_minutes = t.elapsed().as_secs_f64() / 60.0;
    let rows = &reports
        .iter()
        .find(|(e, _)| *e == Experiment::Unspecified)
        .expect("unspecified records were just written")
        .1;
    let valid = rows.iter().all(|r| {
        (0.0..=1.0).contains(&r.mean)
            && (0.0..=1.0).contains(&r.ci_low)
            && (0.0..=1.0).contains(&r.ci_high)
            && r.ci_low <= r.mean + 1e-12
            && r.mean <= r.ci_high + 1e-12
    });
    let csv = std::fs::read_to_string(a.reports(Experiment::Unspecified).join("report.csv")).unwrap_or_default();
    let mf = |split: Split| {
        rows.iter()
            .find(|r| r.agent == AgentKind::Mf && r.split == split && r.metric == "norm_d")
            .map_or(f64::NAN, |r| r.mean)
    };
    outcome(
        rows.len() == 12 && valid && csv.lines().count() == 13 && eval_minutes < 10.0,
        format!(
            "{} cells, all in [0,1] with low <= mean <= high: {valid}; eval+report {eval_minutes:.1} min; MF norm_d train {:.3} / test {:.3} (reported only)",
            rows.len(),
            mf(Split::Train),
            mf(Split::Test)
        ),
    )
}

// ---------------------------------------------------------------- driver

type Criterion = (u32, &'static str, fn() -> Result<Outcome>, Duration);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", gradient_correctness, Duration::from_secs(120)),
        (2, "closed-form oracles", closed_form_oracles, Duration::from_secs(30)),
        (3, "MDN recovery", mdn_recovery, Duration::from_secs(300)),
        (4, "concept pipeline", concept_pipeline, Duration::from_secs(180)),
        (5, "protocol fidelity", protocol_fidelity, Duration::from_secs(60)),
        (6, "determinism", determinism, Duration::from_secs(600)),
        (7, "headline directional reproduction", headline, Duration::from_secs(3 * 3600)),
        (8, "unspecified-generalization report", unspecified_report, Duration::from_secs(3600)),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("CMWM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failures = 0;
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = run();
        let secs = t.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_budget = t.elapsed() <= budget;
        let verdict = if passed && in_budget { "PASS" } else { "FAIL" };
        if verdict == "FAIL" {
            failures += 1;
        }
        let over = if in_budget { String::new() } else { format!(", over the {}s budget", budget.as_secs()) };
        println!("{verdict} criterion {n} ({name}): {detail} [{secs:.1}s{over}]");
    }
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
