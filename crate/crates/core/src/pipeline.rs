//! Run configuration, artifact layout and the pipeline stages shared by the
//! command-line tool and the end-to-end tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{self, ConceptModel, EncodedPolicy, KMeansConfig, PatchConfig, PatchDataset};
use crate::controller::{self, Controller, ControllerConfig, GreedyPolicy, OnlineConfig, PpoConfig, PpoLearner, PpoTrainer};
use crate::dream::{self, DreamConfig, DreamWorld, SeedData};
use crate::env::{make_track, Observation, Split, TrackSpec, NUM_ROUTES};
use crate::episodes::{self, split_train_test, CollectConfig, Dataset, Episode};
use crate::error::{Error, Result};
use crate::harness::{self, AgentKind, AgentUnderTest, EvalConfig, EvalRecord, Metric};
use crate::io::{read_string, write_string};
use crate::nn::checkpoint;
use crate::vae::{self, Vae, VaeConfig, VaeTrainConfig};
use crate::worldmodel::{self, EpisodeSeq, Mdn, MdnConfig, MdnTrainConfig};

/// Collection policy: PPO learning on top of a frozen, randomly initialised
/// encoder, since no trained VAE exists yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectStage {
    #[serde(flatten)]
    pub collect: CollectConfig,
    pub ppo: PpoConfig,
    pub policy_seed: u64,
}

impl Default for CollectStage {
    fn default() -> Self {
        Self {
            collect: CollectConfig::default(),
            ppo: PpoConfig::online(),
            policy_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeStage {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
    /// Transitions held out at the end of the dataset for early stopping.
    pub test_tail: usize,
    /// Evenly spaced subsample of the train/test frames; `None` keeps all.
    pub max_train_frames: Option<usize>,
    pub max_test_frames: Option<usize>,
    pub init_seed: u64,
}

impl Default for VaeStage {
    fn default() -> Self {
        Self {
            model: VaeConfig::default(),
            train: VaeTrainConfig::default(),
            test_tail: 9_000,
            max_train_frames: None,
            max_test_frames: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdnStage {
    /// `concept_dim` is ignored: it is 0 for MB and the cluster count for CM.
    pub model: MdnConfig,
    pub train: MdnTrainConfig,
    pub test_tail: usize,
    pub init_seed: u64,
}

impl Default for MdnStage {
    fn default() -> Self {
        Self {
            model: MdnConfig::default(),
            train: MdnTrainConfig::default(),
            test_tail: 9_000,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ConceptStage {
    pub patches: PatchConfig,
    pub kmeans: KMeansConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentStage {
    pub controller: ControllerConfig,
    pub online: OnlineConfig,
    pub init_seed: u64,
}

impl Default for AgentStage {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            online: OnlineConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureStage {
    /// Obstacle distance of the logged failure episodes.
    pub distance: f64,
    pub seed: u64,
}

impl Default for FailureStage {
    fn default() -> Self {
        Self { distance: 10.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    #[serde(flatten)]
    pub eval: EvalConfig,
    pub distances: Vec<f64>,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            distances: vec![10.0, 5.0],
        }
    }
}

/// Everything a pipeline run depends on. Serialised to TOML; every field has
/// a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Independent training runs of every agent.
    pub n_runs: usize,
    pub collect: CollectStage,
    pub vae: VaeStage,
    pub agent: AgentStage,
    pub concepts: ConceptStage,
    pub mdn: MdnStage,
    pub failure: FailureStage,
    pub dream: DreamConfig,
    pub eval: EvalStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_runs: 3,
            collect: CollectStage::default(),
            vae: VaeStage::default(),
            agent: AgentStage::default(),
            concepts: ConceptStage::default(),
            mdn: MdnStage::default(),
            failure: FailureStage::default(),
            dream: DreamConfig::default(),
            eval: EvalStage::default(),
        }
    }
}

impl RunConfig {
    /// Full budgets with reduced VAE/MDN epochs and subsampled frames so the
    /// whole pipeline fits a single desktop CPU hour.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.vae.max_train_frames = Some(3_000);
        c.vae.max_test_frames = Some(500);
        c.vae.train.max_epochs = 12;
        c.mdn.train.max_epochs = 30;
        c.concepts.patches.frame_stride = 40;
        c
    }

    /// Miniature end-to-end run for determinism checks.
    pub fn mini() -> Self {
        let mut c = Self::default();
        c.n_runs = 1;
        c.collect.collect.budget_steps = 500;
        c.collect.ppo.rollout_horizon = 128;
        c.collect.ppo.minibatch = 64;
        c.vae.model.conv_channels = [4, 8, 8];
        c.vae.model.latent_dim = 8;
        c.vae.test_tail = 100;
        c.vae.train.max_epochs = 5;
        c.agent.controller = ControllerConfig { latent_dim: 8, hidden: 32 };
        c.agent.online.budget_steps = 500;
        c.agent.online.ppo.rollout_horizon = 128;
        c.agent.online.ppo.minibatch = 64;
        c.concepts.patches.frame_stride = 25;
        c.concepts.kmeans.n_clusters = 3;
        c.concepts.kmeans.restarts = 2;
        c.mdn.model.latent_dim = 8;
        c.mdn.model.lstm_hidden = 16;
        c.mdn.model.n_mixtures = 2;
        c.mdn.test_tail = 100;
        c.mdn.train.max_epochs = 5;
        c.mdn.train.batch_episodes = 2;
        c.dream.budget_steps = 1_000;
        c.dream.parallel_sessions = 4;
        c.dream.ppo.rollout_horizon = 128;
        c.dream.ppo.minibatch = 64;
        c.eval.eval.episodes_per_route = 1;
        c.eval.eval.n_resamples = 1_000;
        c.eval.distances = vec![10.0];
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_runs == 0 {
            return fail("n_runs must be at least 1".into());
        }
        if self.vae.model.latent_dim != self.agent.controller.latent_dim
            || self.vae.model.latent_dim != self.mdn.model.latent_dim
        {
            return fail(format!(
                "latent sizes disagree: vae {}, controller {}, mdn {}",
                self.vae.model.latent_dim, self.agent.controller.latent_dim, self.mdn.model.latent_dim
            ));
        }
        if self.collect.collect.budget_steps == 0 {
            return fail("collect budget must be positive".into());
        }
        for t in [self.vae.test_tail, self.mdn.test_tail] {
            if t == 0 || t >= self.collect.collect.budget_steps {
                return fail(format!(
                    "test tail {t} must be positive and below the collect budget {}",
                    self.collect.collect.budget_steps
                ));
            }
        }
        if self.eval.distances.is_empty() || self.eval.distances.iter().any(|d| !(*d > 0.0)) {
            return fail(format!("obstacle distances {:?} must be positive", self.eval.distances));
        }
        self.collect.ppo.validate()?;
        self.agent.online.ppo.validate()?;
        self.dream.ppo.validate()?;
        Ok(())
    }

    /// Every seed in the configuration, by name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let c = self;
        BTreeMap::from([
            ("collect".to_string(), c.collect.collect.rng_seed),
            ("collect_policy".to_string(), c.collect.policy_seed),
            ("vae_init".to_string(), c.vae.init_seed),
            ("vae_train".to_string(), c.vae.train.seed),
            ("agent_init".to_string(), c.agent.init_seed),
            ("online".to_string(), c.agent.online.seed),
            ("kmeans".to_string(), c.concepts.kmeans.seed),
            ("mdn_init".to_string(), c.mdn.init_seed),
            ("mdn_train".to_string(), c.mdn.train.seed),
            ("failure".to_string(), c.failure.seed),
            ("dream".to_string(), c.dream.seed),
            ("eval".to_string(), c.eval.eval.seed),
        ])
    }

    /// The same configuration with every seed shifted by `offset`.
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut c = self.clone();
        for seed in [
            &mut c.collect.collect.rng_seed,
            &mut c.collect.policy_seed,
            &mut c.vae.init_seed,
            &mut c.vae.train.seed,
            &mut c.agent.init_seed,
            &mut c.agent.online.seed,
            &mut c.concepts.kmeans.seed,
            &mut c.mdn.init_seed,
            &mut c.mdn.train.seed,
            &mut c.failure.seed,
            &mut c.dream.seed,
            &mut c.eval.eval.seed,
        ] {
            *seed = seed.wrapping_add(offset);
        }
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MdnVariant {
    Mb,
    Cm,
}

impl MdnVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            MdnVariant::Mb => "mb",
            MdnVariant::Cm => "cm",
        }
    }

    pub fn agent(self) -> AgentKind {
        match self {
            MdnVariant::Mb => AgentKind::Mb,
            MdnVariant::Cm => AgentKind::Cm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    Unspecified,
    Specified,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Unspecified => "unspecified",
            Experiment::Specified => "specified",
        }
    }
}

/// Where every artifact lives under the artifact root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn vae(&self) -> PathBuf {
        self.root.join("vae.ckpt")
    }

    pub fn mf_agent(&self, run: usize) -> PathBuf {
        self.root.join("agents").join(format!("mf_run{run}.ckpt"))
    }

    pub fn patches(&self) -> PathBuf {
        self.root.join("patches")
    }

    pub fn concepts(&self) -> PathBuf {
        self.root.join("concepts.ckpt")
    }

    pub fn mdn(&self, variant: MdnVariant) -> PathBuf {
        self.root.join(format!("mdn_{}.ckpt", variant.as_str()))
    }

    pub fn failure_seeds(&self, distance: f64) -> PathBuf {
        self.root.join(format!("failure_seeds_d{distance}"))
    }

    /// Dream-trained agent; `failure` selects the agents seeded from failure
    /// episodes.
    pub fn dream_agent(&self, variant: MdnVariant, failure: bool, run: usize) -> PathBuf {
        let tag = if failure { "_failure" } else { "" };
        self.root.join("agents").join(format!("{}{tag}_run{run}.ckpt", variant.as_str()))
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn records(&self, experiment: Experiment) -> PathBuf {
        self.reports(experiment).join("records.json")
    }

    pub fn reports(&self, experiment: Experiment) -> PathBuf {
        self.root.join("reports").join(experiment.as_str())
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Provenance written next to the artifacts after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifact_versions: BTreeMap<String, u16>,
    /// Stage name → artifacts it wrote, relative to the root.
    pub stages: BTreeMap<String, Vec<String>>,
}

/// A pipeline bound to one configuration and one artifact directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub artifacts: Artifacts,
    /// Worker threads for saliency and evaluation; outputs do not depend on it.
    pub jobs: usize,
}

impl Pipeline {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>, jobs: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            artifacts: Artifacts::new(root),
            jobs: jobs.max(1),
        })
    }

    fn record(&self, stage: &str, outputs: &[PathBuf]) -> Result<()> {
        let path = self.artifacts.run_json();
        let hash = self.config.hash();
        let mut record = if path.exists() {
            let r: RunRecord = serde_json::from_str(&read_string(&path)?).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            r
        } else {
            RunRecord {
                config_hash: hash.clone(),
                seeds: self.config.seeds(),
                artifact_versions: BTreeMap::from([
                    ("checkpoint".to_string(), checkpoint::VERSION),
                    ("episode".to_string(), episodes::format::FORMAT_VERSION),
                ]),
                stages: BTreeMap::new(),
            }
        };
        let rel = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.artifacts.root).unwrap_or(p).display().to_string())
            .collect();
        record.stages.insert(stage.to_string(), rel);
        write_string(&path, &(serde_json::to_string_pretty(&record).expect("record serializes") + "\n"))
    }

    /// Refuses to mix artifacts produced under different configurations.
    fn check_config(&self) -> Result<()> {
        let path = self.artifacts.run_json();
        if !path.exists() {
            return Ok(());
        }
        let r: RunRecord = serde_json::from_str(&read_string(&path)?).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if r.config_hash != self.config.hash() {
            return Err(Error::Config(format!(
                "{} was produced with config {}, current config is {}; use a fresh artifact directory",
                self.artifacts.root.display(),
                r.config_hash,
                self.config.hash()
            )));
        }
        Ok(())
    }

    fn begin(&self) -> Result<()> {
        self.check_config()?;
        mkdirs(&self.artifacts.root)?;
        mkdirs(&self.artifacts.logs())
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let p = self.artifacts.dataset();
        require(&p.join("manifest.json"), "collect")?;
        Dataset::load(&p)
    }

    fn load_vae(&self) -> Result<Vae<f32>> {
        let p = self.artifacts.vae();
        require(&p, "train-vae")?;
        Vae::load(&p)
    }

    fn load_mf(&self, run: usize) -> Result<Controller<f32>> {
        let p = self.artifacts.mf_agent(run);
        require(&p, "train-agent --mode mf")?;
        Controller::load(&p)
    }

    fn load_concepts(&self) -> Result<ConceptModel<f32>> {
        let p = self.artifacts.concepts();
        require(&p, "extract-concepts")?;
        ConceptModel::load(&p)
    }

    fn load_mdn(&self, variant: MdnVariant) -> Result<Mdn<f32>> {
        let p = self.artifacts.mdn(variant);
        require(
            &p,
            match variant {
                MdnVariant::Mb => "train-mdn --variant mb",
                MdnVariant::Cm => "train-mdn --variant cm",
            },
        )?;
        Mdn::load(&p)
    }

    fn train_tracks() -> Result<Vec<TrackSpec>> {
        (0..NUM_ROUTES).map(|r| make_track(r, Split::Train)).collect()
    }

    /// Collects the initial dataset with a learning PPO policy.
    pub fn collect(&self) -> Result<Dataset> {
        self.begin()?;
        let c = &self.config;
        let encoder = Vae::<f32>::new(c.vae.model.clone(), c.collect.policy_seed)?;
        let controller = Controller::new(c.agent.controller, c.collect.policy_seed)?;
        let trainer = PpoTrainer::new(controller, c.collect.ppo, c.collect.policy_seed)?;
        let mut learner = PpoLearner::new(&encoder, trainer)?;
        let dataset = episodes::collect(&mut learner, &c.collect.collect)?;
        dataset.save(&self.artifacts.dataset())?;
        self.record("collect", &[self.artifacts.dataset()])?;
        Ok(dataset)
    }

    /// Trains the VAE on the head of the dataset, early-stopping on the tail.
    pub fn train_vae(&self) -> Result<Vec<vae::VaeEpochLog>> {
        self.begin()?;
        let c = &self.config.vae;
        let dataset = self.load_dataset()?;
        let (train, test) = split_train_test(&dataset, c.test_tail)?;
        let train_frames = evenly_spaced(train.frames().collect(), c.max_train_frames);
        let test_frames = evenly_spaced(test.frames().collect(), c.max_test_frames);
        let model = Vae::<f32>::new(c.model.clone(), c.init_seed)?;
        let (model, log) = vae::train_vae(model, &train_frames, &test_frames, &c.train)?;
        model.save(&self.artifacts.vae())?;
        let log_path = self.artifacts.logs().join("vae.csv");
        write_string(&log_path, &vae::log_csv(&log))?;
        self.record("train-vae", &[self.artifacts.vae(), log_path])?;
        Ok(log)
    }

    /// Online PPO for each run, on the train routes without obstacles.
    pub fn train_mf(&self) -> Result<()> {
        self.begin()?;
        let c = &self.config.agent;
        let encoder = self.load_vae()?;
        let tracks = Self::train_tracks()?;
        let mut outputs = Vec::new();
        mkdirs(&self.artifacts.root.join("agents"))?;
        for run in 0..self.config.n_runs {
            let controller = Controller::new(c.controller, c.init_seed + run as u64)?;
            let online = OnlineConfig {
                seed: c.online.seed + run as u64,
                ..c.online.clone()
            };
            let out = controller::train_online(controller, &encoder, &tracks, &online)?;
            let path = self.artifacts.mf_agent(run);
            out.controller.save(&path)?;
            let curve = self.artifacts.logs().join(format!("mf_run{run}_curve.csv"));
            write_string(&curve, &controller::curve_csv(&out.curve))?;
            outputs.extend([path, curve]);
        }
        self.record("train-agent", &outputs)
    }

    /// Saliency patches from the dataset under the first MF agent, clustered
    /// into the concept model.
    pub fn extract_concepts(&self) -> Result<concepts::KMeansFit> {
        self.begin()?;
        let c = &self.config.concepts;
        let dataset = self.load_dataset()?;
        let encoder = self.load_vae()?;
        let mf = self.load_mf(0)?;
        let policy = EncodedPolicy {
            vae: &encoder,
            controller: &mf,
        };
        let patch_config = PatchConfig {
            jobs: self.jobs,
            ..c.patches
        };
        let patches = concepts::build_patch_dataset(&dataset, &policy, &patch_config)?;
        patches.save(&self.artifacts.patches())?;
        let (model, fit) = concepts::fit_concepts(&patches, &encoder, &c.kmeans)?;
        model.save(&self.artifacts.concepts())?;
        let sheet = self.artifacts.root.join("concepts.png");
        write_concept_sheet(&sheet, &patches, &fit, 8)?;
        self.record(
            "extract-concepts",
            &[self.artifacts.patches(), self.artifacts.concepts(), sheet],
        )?;
        Ok(fit)
    }

    /// Teacher-forcing sequences for every episode: mean latents and, for the
    /// CM variant, concept vectors.
    fn sequences(&self, dataset: &Dataset, encoder: &Vae<f32>, concepts: Option<&ConceptModel<f32>>) -> Result<Vec<EpisodeSeq>> {
        dataset
            .episodes
            .iter()
            .map(|ep| episode_sequence(ep, encoder, concepts))
            .collect()
    }

    pub fn train_mdn(&self, variant: MdnVariant) -> Result<Vec<worldmodel::MdnEpochLog>> {
        self.begin()?;
        let c = &self.config.mdn;
        let concept_model = match variant {
            MdnVariant::Cm => Some(self.load_concepts()?),
            MdnVariant::Mb => None,
        };
        let dataset = self.load_dataset()?;
        let encoder = self.load_vae()?;
        let (train, test) = split_train_test(&dataset, c.test_tail)?;
        let train = self.sequences(&train, &encoder, concept_model.as_ref())?;
        let test = self.sequences(&test, &encoder, concept_model.as_ref())?;
        let config = MdnConfig {
            concept_dim: concept_model.as_ref().map_or(0, ConceptModel::n_clusters),
            ..c.model.clone()
        };
        let mdn = Mdn::<f32>::new(config, c.init_seed)?;
        let (mdn, log) = worldmodel::train_mdn(mdn, &train, &test, &c.train)?;
        let path = self.artifacts.mdn(variant);
        mdn.save(&path)?;
        let log_path = self.artifacts.logs().join(format!("mdn_{}.csv", variant.as_str()));
        write_string(&log_path, &worldmodel::log_csv(&log))?;
        self.record(&format!("train-mdn-{}", variant.as_str()), &[path, log_path])?;
        Ok(log)
    }

    /// One greedy episode per train route under the first MF agent, with an
    /// obstacle `distance` ahead.
    pub fn make_failure_seeds(&self, distance: f64) -> Result<Dataset> {
        self.begin()?;
        let encoder = self.load_vae()?;
        let mf = self.load_mf(0)?;
        let mut policy = GreedyPolicy {
            encoder: &encoder,
            controller: &mf,
        };
        let weights = self.config.collect.collect.weights;
        let d = dream::make_failure_seed_dataset(&Self::train_tracks()?, &mut policy, distance, &weights, self.config.failure.seed)?;
        let path = self.artifacts.failure_seeds(distance);
        d.save(&path)?;
        self.record(&format!("make-failure-seeds-d{distance}"), &[path])?;
        Ok(d)
    }

    /// Dream-trains one agent kind for every run, starting from that run's MF
    /// agent. Seeds come from `failure_seeds` when given, else from the
    /// collected dataset.
    pub fn dream_train(&self, variant: MdnVariant, failure_seeds: Option<&Path>) -> Result<Vec<dream::DreamCounts>> {
        self.begin()?;
        let mdn = self.load_mdn(variant)?;
        let concept_model = match variant {
            MdnVariant::Cm => Some(self.load_concepts()?),
            MdnVariant::Mb => None,
        };
        let encoder = self.load_vae()?;
        let seed_dataset = match failure_seeds {
            Some(p) => {
                require(&p.join("manifest.json"), "make-failure-seeds")?;
                Dataset::load(p)?
            }
            None => self.load_dataset()?,
        };
        let seeds = SeedData::encode(&seed_dataset, &encoder)?;
        let mut outputs = Vec::new();
        let mut all_counts = Vec::new();
        for run in 0..self.config.n_runs {
            let mf = self.load_mf(run)?;
            let world = DreamWorld::new(&mdn, concept_model.as_ref())?;
            let config = DreamConfig {
                seed: self.config.dream.seed + run as u64,
                ..self.config.dream
            };
            let out = dream::dream_train(mf, world, &seeds, &config)?;
            let path = self.artifacts.dream_agent(variant, failure_seeds.is_some(), run);
            out.controller.save(&path)?;
            outputs.push(path);
            all_counts.push(out.counts);
        }
        let tag = if failure_seeds.is_some() { "_failure" } else { "" };
        let log = self.artifacts.logs().join(format!("dream_{}{tag}.json", variant.as_str()));
        write_string(&log, &(serde_json::to_string_pretty(&all_counts).expect("counts serialize") + "\n"))?;
        outputs.push(log);
        self.record(&format!("dream-train-{}{tag}", variant.as_str()), &outputs)?;
        Ok(all_counts)
    }

    fn load_agents(&self, experiment: Experiment) -> Result<Vec<(AgentKind, usize, Controller<f32>)>> {
        let failure = experiment == Experiment::Specified;
        let mut agents = Vec::new();
        for run in 0..self.config.n_runs {
            agents.push((AgentKind::Mf, run, self.load_mf(run)?));
        }
        for variant in [MdnVariant::Mb, MdnVariant::Cm] {
            for run in 0..self.config.n_runs {
                let p = self.artifacts.dream_agent(variant, failure, run);
                let stage = match (variant, failure) {
                    (MdnVariant::Mb, false) => "dream-train --agent mb",
                    (MdnVariant::Cm, false) => "dream-train --agent cm",
                    (MdnVariant::Mb, true) => "dream-train --agent mb --failure-seeds",
                    (MdnVariant::Cm, true) => "dream-train --agent cm --failure-seeds",
                };
                require(&p, stage)?;
                agents.push((variant.agent(), run, Controller::load(&p)?));
            }
        }
        Ok(agents)
    }

    /// Greedy evaluation of every agent and run; records are written as JSON
    /// and CSV.
    pub fn eval(&self, experiment: Experiment) -> Result<Vec<EvalRecord>> {
        self.begin()?;
        let encoder = self.load_vae()?;
        let loaded = self.load_agents(experiment)?;
        let agents: Vec<AgentUnderTest<'_>> = loaded
            .iter()
            .map(|(kind, run, c)| AgentUnderTest {
                kind: *kind,
                run_index: *run,
                controller: c,
            })
            .collect();
        let config = EvalConfig {
            jobs: self.jobs,
            ..self.config.eval.eval
        };
        let records = match experiment {
            Experiment::Unspecified => harness::run_unspecified(&encoder, &agents, &config)?,
            Experiment::Specified => harness::run_specified(&encoder, &agents, &self.config.eval.distances, &config)?,
        };
        let dir = self.artifacts.reports(experiment);
        mkdirs(&dir)?;
        let json = self.artifacts.records(experiment);
        write_string(&json, &(serde_json::to_string_pretty(&records).expect("records serialize") + "\n"))?;
        let csv = dir.join("records.csv");
        write_string(&csv, &harness::records_csv(&records))?;
        self.record(&format!("eval-{}", experiment.as_str()), &[json, csv])?;
        Ok(records)
    }

    /// Summary tables and charts for every experiment that has records.
    pub fn report(&self) -> Result<Vec<(Experiment, Vec<harness::ReportRow>)>> {
        self.begin()?;
        let mut out = Vec::new();
        for experiment in [Experiment::Unspecified, Experiment::Specified] {
            let path = self.artifacts.records(experiment);
            if !path.exists() {
                continue;
            }
            let records: Vec<EvalRecord> = serde_json::from_str(&read_string(&path)?).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let (metrics, title): (&[Metric], _) = match experiment {
                Experiment::Unspecified => (&[Metric::NormD, Metric::NormR], "Unspecified generalization"),
                Experiment::Specified => (&[Metric::Success], "Specified generalization: obstacle avoidance"),
            };
            let rows = harness::summarize(&records, metrics, &self.config.eval.eval)?;
            let dir = self.artifacts.reports(experiment);
            let mut written = vec![dir.join("report.csv"), dir.join("report.md")];
            write_string(&written[0], &harness::report_csv(&rows))?;
            write_string(&written[1], &harness::report_md(title, &rows))?;
            for m in metrics {
                let svg = dir.join(format!("{}.svg", m.name()));
                write_string(&svg, &harness::bar_chart_svg(title, &rows, m.name()))?;
                written.push(svg);
            }
            self.record(&format!("report-{}", experiment.as_str()), &written)?;
            out.push((experiment, rows));
        }
        if out.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.artifacts.root.join("reports"),
                stage: "eval",
            });
        }
        Ok(out)
    }

    /// Every stage in order: both dream-trained agent sets, both experiments
    /// and the reports.
    pub fn run_all(&self) -> Result<()> {
        self.collect()?;
        self.train_vae()?;
        self.train_mf()?;
        self.extract_concepts()?;
        self.train_mdn(MdnVariant::Mb)?;
        self.train_mdn(MdnVariant::Cm)?;
        let distance = self.config.failure.distance;
        self.make_failure_seeds(distance)?;
        let seeds = self.artifacts.failure_seeds(distance);
        for variant in [MdnVariant::Mb, MdnVariant::Cm] {
            self.dream_train(variant, None)?;
            self.dream_train(variant, Some(&seeds))?;
        }
        self.eval(Experiment::Unspecified)?;
        self.eval(Experiment::Specified)?;
        self.report()?;
        Ok(())
    }
}

/// Mean latents (and concept vectors) for one stored episode.
pub fn episode_sequence(ep: &Episode, encoder: &Vae<f32>, concepts: Option<&ConceptModel<f32>>) -> Result<EpisodeSeq> {
    let z = encoder.encode_means(ep.observations())?;
    let concepts = concepts.map(|m| m.concept_matrix(&z)).transpose()?;
    Ok(EpisodeSeq {
        z,
        actions: ep.transitions.iter().map(|t| t.a).collect(),
        rewards: ep.transitions.iter().map(|t| t.r).collect(),
        dones: ep.transitions.iter().map(|t| t.d).collect(),
        concepts,
    })
}

/// At most `max` items, evenly spaced and in order.
pub fn evenly_spaced<T: Copy>(items: Vec<T>, max: Option<usize>) -> Vec<T> {
    match max {
        Some(m) if m < items.len() => (0..m).map(|i| items[i * items.len() / m]).collect(),
        _ => items,
    }
}

fn write_concept_sheet(path: &Path, patches: &PatchDataset, fit: &concepts::KMeansFit, per_row: usize) -> Result<()> {
    let frames: Vec<&Observation> = patches.frames().collect();
    let rows: Vec<Vec<&Observation>> = (0..fit.centers.len())
        .map(|k| {
            fit.labels
                .iter()
                .zip(&frames)
                .filter(|(l, _)| **l == k)
                .map(|(_, f)| *f)
                .take(per_row)
                .collect()
        })
        .collect();
    concepts::write_contact_sheet(path, &rows, per_row)
}
