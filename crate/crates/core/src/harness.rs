//! Experiment runner: generate a world, train a clean victim, poison, retrain,
//! evaluate both models, and report. Sweeps reuse the clean model whenever the
//! swept value leaves the benign data untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack_cip::{CipConfig, Termination};
use crate::baselines::{apply_baseline, AttackSettings, BaselineMode};
use crate::catalog::{
    generate_catalog, generate_interactions, CatalogConfig, Dataset, ItemId, Setting,
};
use crate::fusion::FusionConfig;
use crate::metrics::{stealth_report, ContentPair, MetricsReport, RankedUsers, REPORT_KS};
use crate::numkit::SeededRng;
use crate::victim::{train, TrainConfig, VictimModel};
use crate::{Error, Proxy, Result};

/// Report schema tag; bumped on incompatible layout changes.
pub const REPORT_SCHEMA: &str = "fpl-report/1";
pub const CSV_HEADER: &str =
    "seed,mode,rho,kappa,K,er,hr,ndcg,rouge1,rouge2,rougeL,frechet,semantic_dev,direction";

/// Flat experiment description; every field has a default so a config file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // World.
    pub item_count: usize,
    pub user_count: usize,
    pub category_count: usize,
    pub text_len: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub popularity_skew: f64,
    pub few_shot_count: usize,
    pub setting: Setting,

    // Victim.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub negative_samples: usize,
    pub head_scale: f64,
    /// Continue from the clean model instead of a fresh initialisation.
    pub finetune: bool,

    // Attack.
    pub mode: BaselineMode,
    pub rho: f64,
    pub kappa: usize,
    /// Explicit targets; empty selects the `kappa` least popular items of
    /// `target_category`.
    pub targets: Vec<u32>,
    pub target_category: u32,
    pub anchor_count: usize,
    pub sessions_per_user: usize,
    pub history_len: usize,

    // Content perturbation. `epsilon` is absolute when set, otherwise
    // `epsilon_scale` times the catalog's patch-feature standard deviation.
    pub epsilon: Option<f64>,
    pub epsilon_scale: f64,
    /// Visual step size as a fraction of epsilon.
    pub eta_ratio: f64,
    pub rounds: usize,
    pub k_txt: usize,
    pub k_vis: usize,
    pub probe_count: usize,
    pub candidate_count: usize,
    pub coherence_tolerance: f64,
    pub stop_threshold: f64,
    pub max_token_edits: usize,

    // Evaluation.
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Directory for per-seed poisoned checkpoints.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cat = CatalogConfig::default();
        let cip = CipConfig::default();
        Self {
            item_count: cat.item_count,
            user_count: cat.user_count,
            category_count: cat.category_count,
            text_len: cat.text_len,
            patch_count: cat.patch_count,
            patch_dim: cat.patch_dim,
            vocab_size: cat.vocab_size,
            history_min: cat.history_min,
            history_max: cat.history_max,
            popularity_skew: cat.popularity_skew,
            few_shot_count: cat.few_shot_count,
            setting: Setting::ZeroShot,
            epochs: 20,
            learning_rate: 0.9,
            batch_size: 512,
            weight_decay: 0.001,
            negative_samples: 0,
            head_scale: 5.0,
            finetune: false,
            mode: BaselineMode::FullCip,
            rho: 0.02,
            kappa: 1,
            targets: Vec::new(),
            target_category: 0,
            anchor_count: 10,
            sessions_per_user: 2,
            history_len: 6,
            epsilon: None,
            epsilon_scale: 0.5,
            eta_ratio: 0.25,
            rounds: cip.rounds,
            k_txt: cip.k_txt,
            k_vis: cip.k_vis,
            probe_count: cip.probe_count,
            candidate_count: cip.candidate_count,
            coherence_tolerance: cip.coherence_tolerance,
            stop_threshold: cip.stop_threshold,
            max_token_edits: cip.max_token_edits,
            ks: REPORT_KS.to_vec(),
            seeds: vec![0],
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog(0).validate()?;
        self.train_config(0).validate()?;
        if !(self.rho > 0.0 && self.rho < 1.0) && self.mode != BaselineMode::NoAttack {
            return Err(Error::Config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if self.targets.is_empty() && self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if self.target_category as usize >= self.category_count {
            return Err(Error::Config(format!(
                "target_category {} out of range",
                self.target_category
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be nonempty and positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if !(self.epsilon_scale > 0.0 && self.eta_ratio > 0.0) {
            return Err(Error::Config(
                "epsilon_scale and eta_ratio must be positive".into(),
            ));
        }
        if !(self.head_scale > 0.0) {
            return Err(Error::Config("head_scale must be positive".into()));
        }
        self.cip_config(1.0, 0).validate()
    }

    pub fn catalog(&self, seed: u64) -> CatalogConfig {
        CatalogConfig {
            item_count: self.item_count,
            user_count: self.user_count,
            category_count: self.category_count,
            text_len: self.text_len,
            patch_count: self.patch_count,
            patch_dim: self.patch_dim,
            vocab_size: self.vocab_size,
            history_min: self.history_min,
            history_max: self.history_max,
            popularity_skew: self.popularity_skew,
            few_shot_count: self.few_shot_count,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
            negative_samples: self.negative_samples,
        }
    }

    pub fn cip_config(&self, epsilon: f64, seed: u64) -> CipConfig {
        CipConfig {
            epsilon,
            eta: self.eta_ratio * epsilon,
            rounds: self.rounds,
            k_txt: self.k_txt,
            k_vis: self.k_vis,
            probe_count: self.probe_count,
            candidate_count: self.candidate_count,
            coherence_tolerance: self.coherence_tolerance,
            stop_threshold: self.stop_threshold,
            max_token_edits: self.max_token_edits,
            seed,
            ..CipConfig::default()
        }
    }

    /// Short hash of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Alignment trace of one poisoned target, without the per-round detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub target: u32,
    pub initial: f64,
    pub last: f64,
    pub rounds: usize,
    pub token_edits: usize,
    pub termination: Termination,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub targets: Vec<u32>,
    pub epsilon: f64,
    pub compromised_users: usize,
    pub malicious_sessions: usize,
    pub sampled_with_replacement: bool,
    pub clean: MetricsReport,
    pub poisoned: MetricsReport,
    pub traces: Vec<TraceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub mode_description: String,
    pub seeds: Vec<SeedResult>,
    /// Wall-clock time per seed; kept out of reports so they stay
    /// byte-identical across invocations.
    #[serde(skip)]
    pub timings: Vec<Duration>,
}

impl RunResult {
    /// Mean poisoned ER@k over seeds.
    pub fn mean_er(&self, k: usize) -> Result<f64> {
        self.mean_over_seeds(|s| s.poisoned.er.get(&k).copied(), k)
    }

    pub fn mean_hr(&self, k: usize, clean: bool) -> Result<f64> {
        self.mean_over_seeds(
            |s| {
                if clean { &s.clean } else { &s.poisoned }
                    .hr
                    .get(&k)
                    .copied()
            },
            k,
        )
    }

    pub fn mean_ndcg(&self, k: usize, clean: bool) -> Result<f64> {
        self.mean_over_seeds(
            |s| {
                if clean { &s.clean } else { &s.poisoned }
                    .ndcg
                    .get(&k)
                    .copied()
            },
            k,
        )
    }

    fn mean_over_seeds(&self, pick: impl Fn(&SeedResult) -> Option<f64>, k: usize) -> Result<f64> {
        let values = self
            .seeds
            .iter()
            .map(|s| {
                pick(s).ok_or_else(|| Error::InvalidArgument(format!("K = {k} was not evaluated")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
    }
}

/// Everything about one seed that does not depend on the attack.
struct World {
    seed: u64,
    dataset: Dataset,
    targets: Vec<ItemId>,
    epsilon: f64,
    init: VictimModel,
    clean: VictimModel,
    ranked: RankedUsers,
    proxy: Proxy,
}

fn patch_std(d: &Dataset) -> f64 {
    let values: Vec<f64> = d
        .items
        .iter()
        .flat_map(|it| it.patches.as_slice().iter().copied())
        .collect();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    let stage = |name: &'static str| move |e: Error| e.at_stage(seed, name);
    let catalog_cfg = cfg.catalog(seed);
    let catalog = generate_catalog(&catalog_cfg).map_err(stage("catalog"))?;
    let targets: Vec<ItemId> = if cfg.targets.is_empty() {
        catalog.least_popular(cfg.target_category, cfg.kappa)
    } else {
        cfg.targets.iter().map(|&t| ItemId(t)).collect()
    };
    if targets.is_empty() {
        return Err(Error::Config("no targets selected".into()).at_stage(seed, "targets"));
    }
    let dataset = generate_interactions(
        &catalog_cfg,
        &catalog,
        cfg.setting,
        &targets.iter().copied().collect(),
    )
    .map_err(stage("interactions"))?;
    let epsilon = cfg
        .epsilon
        .unwrap_or(cfg.epsilon_scale * patch_std(&dataset));
    let lexicon = catalog.lexicon();
    let fusion = FusionConfig::default();
    let init = VictimModel::init(
        &fusion,
        &lexicon,
        cfg.patch_dim,
        cfg.head_scale,
        &SeededRng::new(seed).child("backbone"),
    )
    .map_err(stage("victim-init"))?;
    let (clean, _) =
        train(&init, &dataset, &cfg.train_config(seed)).map_err(stage("train-clean"))?;
    let ranked =
        RankedUsers::compute(&clean, &dataset, &[], max_k(cfg)).map_err(stage("evaluate-clean"))?;
    // The attacker encodes with the public backbone the victim is fine-tuned
    // from, never with the trained victim itself.
    let proxy = Proxy::from_weights(fusion, init.fusion.clone(), seed);
    Ok(World {
        ranked,
        seed,
        dataset,
        targets,
        epsilon,
        init,
        clean,
        proxy,
    })
}

fn max_k(cfg: &ExperimentConfig) -> usize {
    cfg.ks
        .iter()
        .chain(REPORT_KS.iter())
        .copied()
        .max()
        .unwrap_or(1)
}

fn metrics_for(
    ranked: &RankedUsers,
    cfg: &ExperimentConfig,
    targets: &[ItemId],
    stealth: (Vec<crate::metrics::TargetStealth>, f64),
) -> Result<MetricsReport> {
    let mut report = MetricsReport::assemble(ranked, targets, stealth.0, stealth.1)?;
    for &k in &cfg.ks {
        report.er.insert(k, ranked.exposure_rate(targets, k)?);
        let (hr, ndcg) = ranked.ranking(k)?;
        report.hr.insert(k, hr);
        report.ndcg.insert(k, ndcg);
    }
    Ok(report)
}

fn attack_world(world: &World, cfg: &ExperimentConfig) -> Result<SeedResult> {
    let seed = world.seed;
    let stage = |name: &'static str| move |e: Error| e.at_stage(seed, name);
    let settings = AttackSettings {
        cip: cfg.cip_config(world.epsilon, seed),
        anchor_count: cfg.anchor_count,
        sessions_per_user: cfg.sessions_per_user,
        history_len: cfg.history_len,
    };
    let outcome = apply_baseline(
        cfg.mode,
        &world.dataset,
        &world.targets,
        cfg.rho,
        &world.proxy,
        &settings,
        &SeededRng::new(seed).child("attack"),
    )
    .map_err(stage("attack"))?;

    let poisoned = if cfg.mode == BaselineMode::NoAttack {
        world.clean.clone()
    } else {
        let start = if cfg.finetune {
            &world.clean
        } else {
            &world.init
        };
        train(start, &outcome.dataset, &cfg.train_config(seed))
            .map_err(stage("train-poisoned"))?
            .0
    };
    if let Some(dir) = &cfg.checkpoint {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).at_stage(seed, "checkpoint"))?;
        poisoned
            .write_checkpoint(dir.join(format!("victim-seed{seed}.ckpt")))
            .map_err(stage("checkpoint"))?;
    }

    let k = max_k(cfg);
    // The clean world has no compromised users, so the clean model is scored
    // on everyone; this keeps its metrics identical across modes and budgets.
    let clean_ranked = world.ranked.clone();
    let poisoned_ranked =
        RankedUsers::compute(&poisoned, &outcome.dataset, &outcome.compromised, k)
            .map_err(stage("evaluate-poisoned"))?;

    let clean_pairs: Vec<ContentPair<'_, f64>> = world
        .targets
        .iter()
        .map(|&t| {
            let item = &world.dataset.items[t.index()];
            ContentPair {
                target: t,
                clean_text: &item.text,
                clean_patches: &item.patches,
                text: &item.text,
                patches: &item.patches,
            }
        })
        .collect();
    let poisoned_pairs: Vec<ContentPair<'_, f64>> = world
        .targets
        .iter()
        .map(|&t| {
            let item = &world.dataset.items[t.index()];
            let (text, patches) = match outcome.overrides.get(&t) {
                Some(c) => (&c.text, &c.patches),
                None => (&item.text, &item.patches),
            };
            ContentPair {
                target: t,
                clean_text: &item.text,
                clean_patches: &item.patches,
                text,
                patches,
            }
        })
        .collect();
    let clean_stealth = stealth_report(&world.proxy, &clean_pairs).map_err(stage("stealth"))?;
    let poisoned_stealth =
        stealth_report(&world.proxy, &poisoned_pairs).map_err(stage("stealth"))?;

    let traces = outcome
        .traces
        .iter()
        .map(|(t, trace)| TraceSummary {
            target: t.0,
            initial: trace.initial(),
            last: trace.last(),
            rounds: trace.scores.len() - 1,
            token_edits: outcome
                .overrides
                .get(t)
                .map_or(0, |c| c.edited_token_positions.len()),
            termination: trace.termination,
            scores: trace.scores.clone(),
        })
        .collect();

    Ok(SeedResult {
        seed,
        targets: world.targets.iter().map(|t| t.0).collect(),
        epsilon: world.epsilon,
        compromised_users: outcome.compromised.len(),
        malicious_sessions: outcome.session_count,
        sampled_with_replacement: outcome.sampled_with_replacement,
        clean: metrics_for(&clean_ranked, cfg, &world.targets, clean_stealth)?,
        poisoned: metrics_for(&poisoned_ranked, cfg, &world.targets, poisoned_stealth)?,
        traces,
    })
}

fn empty_run(cfg: &ExperimentConfig) -> RunResult {
    RunResult {
        config_digest: cfg.digest(),
        config: cfg.clone(),
        mode_description: cfg.mode.description().to_string(),
        seeds: Vec::new(),
        timings: Vec::new(),
    }
}

/// Runs every seed of `cfg` end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mut run = empty_run(cfg);
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let world = prepare(cfg, seed)?;
        run.seeds.push(attack_world(&world, cfg)?);
        run.timings.push(start.elapsed());
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Rho(Vec<f64>),
    Kappa(Vec<usize>),
    Mode(Vec<BaselineMode>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Rho(_) => "rho",
            Self::Kappa(_) => "kappa",
            Self::Mode(_) => "mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Rho(v) => v.len(),
            Self::Kappa(v) => v.len(),
            Self::Mode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `name` plus a comma-separated value list.
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let bad = |v: &str| Error::InvalidArgument(format!("bad {name} value {v:?}"));
        match name {
            "rho" => items
                .iter()
                .map(|v| v.parse().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Self::Rho),
            "kappa" => items
                .iter()
                .map(|v| v.parse().map_err(|_| bad(v)))
                .collect::<Result<_>>()
                .map(Self::Kappa),
            "mode" => items
                .iter()
                .map(|v| BaselineMode::from_str(v))
                .collect::<Result<_>>()
                .map(Self::Mode),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis {other:?}"
            ))),
        }
    }

    fn apply(&self, base: &ExperimentConfig, index: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Self::Rho(v) => cfg.rho = v[index],
            Self::Kappa(v) => cfg.kappa = v[index],
            Self::Mode(v) => cfg.mode = v[index],
        }
        cfg
    }
}

/// One run per axis value with shared seeds. The clean model of a seed is
/// trained once unless the axis changes the target set.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis) -> Result<Vec<RunResult>> {
    if axis.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one value".into(),
        ));
    }
    let configs: Vec<ExperimentConfig> = (0..axis.len()).map(|i| axis.apply(base, i)).collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let mut runs: Vec<RunResult> = configs.iter().map(empty_run).collect();
    let shared_world = !matches!(axis, SweepAxis::Kappa(_)) || !base.targets.is_empty();
    for &seed in &base.seeds {
        let mut world = None;
        for (cfg, run) in configs.iter().zip(runs.iter_mut()) {
            let start = Instant::now();
            if world.is_none() || !shared_world {
                world = Some(prepare(cfg, seed)?);
            }
            let w = world.as_ref().expect("prepared above");
            run.seeds.push(attack_world(w, cfg)?);
            run.timings.push(start.elapsed());
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub passed: bool,
    /// `(lower, upper, upper − lower)` for each adjacent pair.
    pub gaps: Vec<(String, String, f64)>,
    pub margin: f64,
}

impl fmt::Display for OrderingCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b, gap) in &self.gaps {
            let mark = if *gap >= self.margin { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{a} < {b}: gap {gap:+.4} (margin {:.4}) {mark}",
                self.margin
            )?;
        }
        write!(
            f,
            "ordering {}",
            if self.passed { "holds" } else { "violated" }
        )
    }
}

/// Verifies that consecutive names in `chain` increase by at least `margin`.
pub fn check_ordering(
    values: &BTreeMap<String, f64>,
    chain: &[String],
    margin: f64,
) -> Result<OrderingCheck> {
    if chain.len() < 2 {
        return Err(Error::InvalidArgument(
            "a chain needs at least two names".into(),
        ));
    }
    let lookup = |name: &String| {
        values
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingName(name.clone()))
    };
    let mut gaps = Vec::with_capacity(chain.len() - 1);
    for pair in chain.windows(2) {
        let gap = lookup(&pair[1])? - lookup(&pair[0])?;
        gaps.push((pair[0].clone(), pair[1].clone(), gap));
    }
    Ok(OrderingCheck {
        passed: gaps.iter().all(|g| g.2 >= margin),
        gaps,
        margin,
    })
}

/// Splits `a<b<c`.
pub fn parse_chain(s: &str) -> Vec<String> {
    s.split('<')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format {other:?}"
            ))),
        }
    }
}

/// Serialised form of one run or one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    /// Swept parameter, absent for a single run.
    pub axis: Option<String>,
    pub runs: Vec<RunResult>,
}

impl Report {
    pub fn single(run: RunResult) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            axis: None,
            runs: vec![run],
        }
    }

    pub fn sweep(axis: &SweepAxis, runs: Vec<RunResult>) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            axis: Some(axis.name().to_string()),
            runs,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::SchemaVersion {
                found: report.schema,
                expected: REPORT_SCHEMA.to_string(),
            });
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Mean poisoned ER@k per mode name, for ordering checks. Without an
    /// explicit `no_attack` run, the clean model's ER stands in for it.
    pub fn mean_er_by_mode(&self, k: usize) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for run in &self.runs {
            out.insert(run.config.mode.to_string(), run.mean_er(k)?);
        }
        if let Some(run) = self.runs.first() {
            out.entry(BaselineMode::NoAttack.to_string())
                .or_insert_with(|| {
                    run.seeds
                        .iter()
                        .map(|s| s.clean.er.get(&k).copied().unwrap_or(f64::NAN))
                        .sum::<f64>()
                        / run.seeds.len().max(1) as f64
                });
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for run in &self.runs {
            let cfg = &run.config;
            for s in &run.seeds {
                let m = &s.poisoned;
                let n = m.targets.len().max(1) as f64;
                let mean = |f: fn(&crate::metrics::TargetStealth) -> f64| {
                    m.targets.iter().map(f).sum::<f64>() / n
                };
                let (r1, r2, rl) = (
                    mean(|t| t.rouge.rouge1),
                    mean(|t| t.rouge.rouge2),
                    mean(|t| t.rouge.rouge_l),
                );
                for (&k, er) in &m.er {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                        s.seed,
                        cfg.mode,
                        cfg.rho,
                        s.targets.len(),
                        k,
                        er,
                        m.hr[&k],
                        m.ndcg[&k],
                        r1,
                        r2,
                        rl,
                        m.frechet,
                        m.semantic_dev,
                        m.direction_alignment
                    ));
                }
            }
        }
        out
    }
}

pub fn emit_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            item_count: 40,
            user_count: 150,
            epochs: 2,
            rounds: 2,
            rho: 0.04,
            ..ExperimentConfig::default()
        }
    }

    fn names(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
        values.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ordering_checks() {
        let chain: Vec<String> = ["a", "b", "c", "d", "e"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let reference = names(&[
            ("a", 0.0),
            ("b", 0.2669),
            ("c", 0.4173),
            ("d", 0.5617),
            ("e", 0.7170),
        ]);
        assert!(check_ordering(&reference, &chain, 0.03).unwrap().passed);

        let down = check_ordering(&names(&[("a", 0.5), ("b", 0.4)]), &chain[..2], 0.0).unwrap();
        assert!(!down.passed);
        assert!((down.gaps[0].2 + 0.1).abs() < 1e-12);

        assert!(
            check_ordering(&names(&[("a", 0.3), ("b", 0.3)]), &chain[..2], 0.0)
                .unwrap()
                .passed
        );
        assert!(matches!(
            check_ordering(&names(&[("a", 0.3)]), &chain[..2], 0.0),
            Err(Error::MissingName(n)) if n == "b"
        ));
    }

    #[test]
    fn chain_parsing() {
        assert_eq!(
            parse_chain("no_attack<tab_only < full_cip"),
            ["no_attack", "tab_only", "full_cip"]
        );
    }

    #[test]
    fn config_rejects_unknown_keys_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("rho = 0.04\nmode = \"tab_only\"\nseeds = [1, 2]\n")
            .unwrap();
        assert_eq!(cfg.rho, 0.04);
        assert_eq!(cfg.mode, BaselineMode::TabOnly);
        assert_eq!(cfg.seeds, [1, 2]);
        assert_eq!(cfg.item_count, ExperimentConfig::default().item_count);
        assert!(matches!(
            ExperimentConfig::from_toml("rhoo = 0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("rho = 1.5\n").is_err());
    }

    #[test]
    fn no_attack_matches_clean_exactly() {
        let cfg = ExperimentConfig {
            mode: BaselineMode::NoAttack,
            ..tiny()
        };
        let run = run_experiment(&cfg).unwrap();
        let s = &run.seeds[0];
        assert_eq!(s.clean.er, s.poisoned.er);
        assert_eq!(s.clean.hr, s.poisoned.hr);
        assert_eq!(s.clean.ndcg, s.poisoned.ndcg);
        assert_eq!(s.poisoned.frechet, 0.0);
    }

    #[test]
    fn rho_sweep_shares_clean_metrics() {
        let runs = sweep(&tiny(), &SweepAxis::Rho(vec![0.02, 0.04])).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].seeds[0].clean.hr, runs[1].seeds[0].clean.hr);
        assert!(runs[0].seeds[0].compromised_users < runs[1].seeds[0].compromised_users);
    }

    #[test]
    fn reports_round_trip_and_csv_has_fixed_header() {
        let run = run_experiment(&ExperimentConfig {
            mode: BaselineMode::TabImg,
            ..tiny()
        })
        .unwrap();
        let report = Report::single(run);
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        emit_report(&report, ReportFormat::Json, &json).unwrap();
        let back = Report::from_json(&fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back.to_json(), report.to_json());

        let csv = dir.path().join("r.csv");
        emit_report(&report, ReportFormat::Csv, &csv).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), REPORT_KS.len());

        let missing = dir.path().join("nope").join("r.json");
        let err = emit_report(&report, ReportFormat::Json, &missing).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn stage_errors_name_seed_and_stage() {
        let cfg = ExperimentConfig {
            targets: vec![999],
            seeds: vec![7],
            ..tiny()
        };
        let err = run_experiment(&cfg).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Stage {
                    seed: 7,
                    stage: "interactions",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn sweep_axis_parsing() {
        assert_eq!(
            SweepAxis::parse("rho", "0.01, 0.02").unwrap(),
            SweepAxis::Rho(vec![0.01, 0.02])
        );
        assert_eq!(
            SweepAxis::parse("mode", "tab_only,full_cip").unwrap(),
            SweepAxis::Mode(vec![BaselineMode::TabOnly, BaselineMode::FullCip])
        );
        assert!(SweepAxis::parse("depth", "1").is_err());
        assert!(SweepAxis::parse("kappa", "x").is_err());
    }
}
