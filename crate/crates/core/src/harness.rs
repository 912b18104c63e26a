//! Evaluation protocols, metrics with bootstrap confidence intervals, and
//! report rendering (CSV, Markdown, SVG bar charts).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, GreedyPolicy};
use crate::env::{self, make_track, ObstacleScenario, RewardWeights, Split, TrackSpec, NUM_ROUTES};
use crate::episodes::Policy;
use crate::error::{Error, Result};
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "MB")]
    Mb,
    #[serde(rename = "CM")]
    Cm,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Mf, AgentKind::Mb, AgentKind::Cm];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Mf => "MF",
            AgentKind::Mb => "MB",
            AgentKind::Cm => "CM",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `clamp(final / initial, 0, 1)`: 1 means no progress, 0 means at the goal.
pub fn norm_d(initial_d: f64, final_d: f64) -> Result<f64> {
    if !(initial_d > 0.0) {
        return Err(Error::InvalidArgument(format!("initial distance {initial_d} must be positive")));
    }
    Ok(env::normalized_distance(final_d, initial_d))
}

/// `clamp(R / (w_d · initial), 0, 1)`: the distance term bounds the reward an
/// episode can collect.
pub fn norm_r(cumulative_reward: f64, initial_d: f64, distance_weight: f64) -> Result<f64> {
    if !(initial_d > 0.0) {
        return Err(Error::InvalidArgument(format!("initial distance {initial_d} must be positive")));
    }
    Ok((cumulative_reward / (distance_weight * initial_d)).clamp(0.0, 1.0))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(samples: &[f64], n_resamples: usize, level: f64, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one sample".into()));
    }
    if n_resamples == 0 || !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "bootstrap with {n_resamples} resamples at level {level}"
        )));
    }
    let n = samples.len();
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (n_resamples - 1) as f64).round() as usize;
        means[idx.min(n_resamples - 1)]
    };
    Ok((pick(tail), pick(1.0 - tail)))
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent: AgentKind,
    pub route_id: usize,
    pub split: Split,
    pub run_index: usize,
    pub episode: usize,
    /// Obstacle distance for the specified experiment.
    pub distance: Option<f64>,
    pub norm_d: f64,
    pub norm_r: f64,
    pub collided: bool,
    /// No obstacle collision; only defined when an obstacle was present.
    pub avoided_obstacle: Option<bool>,
}

/// A trained controller under evaluation, sharing the common encoder.
#[derive(Debug, Clone, Copy)]
pub struct AgentUnderTest<'a> {
    pub kind: AgentKind,
    pub run_index: usize,
    pub controller: &'a Controller<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_route: usize,
    pub seed: u64,
    pub n_resamples: usize,
    pub level: f64,
    pub weights: RewardWeights,
    /// Worker threads; results do not depend on it.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_route: 5,
            seed: 0,
            n_resamples: 10_000,
            level: 0.95,
            weights: RewardWeights::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub norm_d: f64,
    pub norm_r: f64,
    pub collisions: u32,
    pub steps: u32,
    pub episode_return: f64,
}

/// Runs one episode to completion and measures it.
pub fn evaluate_episode<P: Policy + ?Sized>(
    policy: &mut P,
    track: &TrackSpec,
    seed: u64,
    scenario: Option<ObstacleScenario>,
    weights: &RewardWeights,
) -> Result<EpisodeOutcome> {
    let (mut state, mut obs) = env::reset(track, seed, scenario)?;
    let initial = state.distance_to_goal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ret = 0.0;
    loop {
        let a = policy.act(&obs, &mut rng)?;
        let res = env::step_with(track, &state, a, weights)?;
        ret += res.reward;
        state = res.state;
        obs = res.observation;
        if res.done {
            break;
        }
    }
    Ok(EpisodeOutcome {
        norm_d: norm_d(initial, state.distance_to_goal)?,
        norm_r: norm_r(ret, initial, weights.distance)?,
        collisions: state.cum_collision,
        steps: state.step_index,
        episode_return: ret,
    })
}

/// Per-episode environment seed; identical for every agent so comparisons
/// are paired.
pub fn episode_seed(base: u64, split: Split, route: usize, episode: usize, distance: Option<f64>) -> u64 {
    let split_bit = matches!(split, Split::Test) as u64;
    let d = distance.map_or(0, |d| (d * 16.0) as u64 + 1);
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split_bit << 60) ^ ((route as u64) << 48) ^ ((episode as u64) << 32) ^ d
}

#[derive(Debug, Clone, Copy)]
struct Job<'a> {
    agent: AgentUnderTest<'a>,
    split: Split,
    route: usize,
    episode: usize,
    distance: Option<f64>,
}

fn run_jobs(vae: &Vae<f32>, tracks: &[(Split, Vec<TrackSpec>)], jobs: &[Job<'_>], config: &EvalConfig) -> Result<Vec<EvalRecord>> {
    let track_of = |split: Split, route: usize| {
        &tracks.iter().find(|(s, _)| *s == split).expect("both splits built").1[route]
    };
    let run = |chunk: &[Job<'_>]| -> Result<Vec<EvalRecord>> {
        chunk
            .iter()
            .map(|job| {
                let mut policy = GreedyPolicy {
                    encoder: vae,
                    controller: job.agent.controller,
                };
                let scenario = job.distance.map(ObstacleScenario::failure_case);
                let seed = episode_seed(config.seed, job.split, job.route, job.episode, job.distance);
                let out = evaluate_episode(&mut policy, track_of(job.split, job.route), seed, scenario, &config.weights)?;
                Ok(EvalRecord {
                    agent: job.agent.kind,
                    route_id: job.route,
                    split: job.split,
                    run_index: job.agent.run_index,
                    episode: job.episode,
                    distance: job.distance,
                    norm_d: out.norm_d,
                    norm_r: out.norm_r,
                    collided: out.collisions > 0,
                    avoided_obstacle: job.distance.map(|_| out.collisions == 0),
                })
            })
            .collect()
    };
    let workers = config.jobs.max(1);
    if workers == 1 || jobs.len() < 2 {
        return run(jobs);
    }
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.chunks(chunk).map(|c| s.spawn(move || run(c))).collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn all_tracks() -> Result<Vec<(Split, Vec<TrackSpec>)>> {
    [Split::Train, Split::Test]
        .into_iter()
        .map(|split| Ok((split, (0..NUM_ROUTES).map(|r| make_track(r, split)).collect::<Result<Vec<_>>>()?)))
        .collect()
}

fn build_jobs<'a>(agents: &[AgentUnderTest<'a>], distances: &[Option<f64>], episodes: usize) -> Vec<Job<'a>> {
    let mut jobs = Vec::new();
    for &agent in agents {
        for &distance in distances {
            for split in [Split::Train, Split::Test] {
                for route in 0..NUM_ROUTES {
                    for episode in 0..episodes {
                        jobs.push(Job {
                            agent,
                            split,
                            route,
                            episode,
                            distance,
                        });
                    }
                }
            }
        }
    }
    jobs
}

/// Greedy evaluation without obstacles on the 5 train and 5 test routes.
pub fn run_unspecified(vae: &Vae<f32>, agents: &[AgentUnderTest<'_>], config: &EvalConfig) -> Result<Vec<EvalRecord>> {
    if agents.is_empty() {
        return Err(Error::Config("no agents to evaluate".into()));
    }
    let jobs = build_jobs(agents, &[None], config.episodes_per_route);
    run_jobs(vae, &all_tracks()?, &jobs, config)
}

/// Greedy evaluation with a stationary obstacle at each distance, on train
/// and test routes.
pub fn run_specified(
    vae: &Vae<f32>,
    agents: &[AgentUnderTest<'_>],
    distances: &[f64],
    config: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    if agents.is_empty() || distances.is_empty() {
        return Err(Error::Config("specified evaluation needs agents and obstacle distances".into()));
    }
    let d: Vec<Option<f64>> = distances.iter().copied().map(Some).collect();
    let jobs = build_jobs(agents, &d, config.episodes_per_route);
    run_jobs(vae, &all_tracks()?, &jobs, config)
}

/// One cell of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub agent: AgentKind,
    pub split: Split,
    pub distance: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    NormD,
    NormR,
    Success,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::NormD => "norm_d",
            Metric::NormR => "norm_r",
            Metric::Success => "success",
        }
    }

    fn value(self, r: &EvalRecord) -> Option<f64> {
        match self {
            Metric::NormD => Some(r.norm_d),
            Metric::NormR => Some(r.norm_r),
            Metric::Success => r.avoided_obstacle.map(|b| b as u8 as f64),
        }
    }
}

/// Mean and bootstrap CI per (agent, split, distance, metric), in a fixed order.
pub fn summarize(records: &[EvalRecord], metrics: &[Metric], config: &EvalConfig) -> Result<Vec<ReportRow>> {
    let mut distances: Vec<Option<f64>> = Vec::new();
    for r in records {
        if !distances.contains(&r.distance) {
            distances.push(r.distance);
        }
    }
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for agent in AgentKind::ALL {
        for &distance in &distances {
            for split in [Split::Train, Split::Test] {
                for &metric in metrics {
                    let samples: Vec<f64> = records
                        .iter()
                        .filter(|r| r.agent == agent && r.split == split && r.distance == distance)
                        .filter_map(|r| metric.value(r))
                        .collect();
                    cell += 1;
                    if samples.is_empty() {
                        continue;
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (cell << 20));
                    let (lo, hi) = bootstrap_ci(&samples, config.n_resamples, config.level, &mut rng)?;
                    rows.push(ReportRow {
                        agent,
                        split,
                        distance,
                        metric: metric.name().into(),
                        mean: samples.iter().sum::<f64>() / samples.len() as f64,
                        ci_low: lo,
                        ci_high: hi,
                        n: samples.len(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn fmt_distance(d: Option<f64>) -> String {
    d.map_or(String::new(), |d| format!("{d}"))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("agent,split,distance,metric,mean,ci_low,ci_high,n\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.agent,
            r.split.as_str(),
            fmt_distance(r.distance),
            r.metric,
            r.mean,
            r.ci_low,
            r.ci_high,
            r.n
        );
    }
    s
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("agent,route_id,split,run_index,episode,distance,norm_d,norm_r,collided,avoided_obstacle\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{},{}",
            r.agent,
            r.route_id,
            r.split.as_str(),
            r.run_index,
            r.episode,
            fmt_distance(r.distance),
            r.norm_d,
            r.norm_r,
            r.collided,
            r.avoided_obstacle.map_or(String::new(), |b| b.to_string())
        );
    }
    s
}

pub fn report_md(title: &str, rows: &[ReportRow]) -> String {
    let mut s = format!("# {title}\n\n| agent | split | distance | metric | mean | 95% CI | n |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} | [{:.3}, {:.3}] | {} |",
            r.agent,
            r.split.as_str(),
            r.distance.map_or("-".to_string(), |d| d.to_string()),
            r.metric,
            r.mean,
            r.ci_low,
            r.ci_high,
            r.n
        );
    }
    s
}

/// Grouped bar chart of one metric: a group per (distance, split), one bar
/// per agent, with CI whiskers. Values are on a fixed [0, 1] axis.
pub fn bar_chart_svg(title: &str, rows: &[ReportRow], metric: &str) -> String {
    let rows: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == metric).collect();
    let mut groups: Vec<(Option<f64>, Split)> = Vec::new();
    for r in &rows {
        if !groups.contains(&(r.distance, r.split)) {
            groups.push((r.distance, r.split));
        }
    }
    let (bar, gap, left, top, plot_h) = (28.0, 24.0, 50.0, 40.0, 200.0);
    let group_w = bar * AgentKind::ALL.len() as f64 + gap;
    let width = left + group_w * groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 60.0;
    let colors = ["#8c8c8c", "#4a7bd0", "#d0644a"];
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"{left}\" y=\"20\" font-size=\"14\">{title} ({metric})</text>");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/><text x=\"10\" y=\"{:.1}\">{v:.2}</text>",
            width - 20.0,
            y(v),
            y(v),
            y(v) + 4.0
        );
    }
    for (gi, &(distance, split)) in groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + gap / 2.0;
        for (ai, agent) in AgentKind::ALL.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.agent == *agent && r.split == split && r.distance == distance) else {
                continue;
            };
            let x = gx + ai as f64 * bar;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                y(r.mean),
                bar - 4.0,
                top + plot_h - y(r.mean),
                colors[ai]
            );
            let cx = x + (bar - 4.0) / 2.0;
            let _ = writeln!(
                s,
                "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
                y(r.ci_low),
                y(r.ci_high)
            );
        }
        let label = match distance {
            Some(d) => format!("{} d={d}", split.as_str()),
            None => split.as_str().to_string(),
        };
        let _ = writeln!(s, "<text x=\"{gx:.1}\" y=\"{:.1}\">{label}</text>", top + plot_h + 16.0);
    }
    for (ai, agent) in AgentKind::ALL.iter().enumerate() {
        let lx = left + ai as f64 * 60.0;
        let ly = top + plot_h + 36.0;
        let _ = writeln!(
            s,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{agent}</text>",
            ly - 9.0,
            colors[ai],
            lx + 14.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests;
