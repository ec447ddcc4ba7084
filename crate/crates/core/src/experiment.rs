//! Config-driven end-to-end runs: template, victim, attack, profile, substitute
//! training and evaluation, with every output written to one directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitprofile::LeakProfile;
use crate::dram_sim::{generate_template, DramGeometry, TemplateMap};
use crate::error::{ConfigIssue, Error, Result};
use crate::hammerleak::{AttackConfig, AttackSim, CostModel, LeakLedger, RecoveryCurve, Strategy};
use crate::seeds;
use crate::subtrain::{
    evaluate, train_plain, train_substitute, Dataset, Metrics, PgdConfig, RangeTensors,
    SyntheticTask, TinyNet, TrainConfig,
};
use crate::victim_runtime::{ChunkShape, PackedModel, QuantizedLayer, QuantizedModel, TraceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateParams {
    pub frac_vuln_pages: f64,
    pub mean_cells_per_vuln_page: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        TemplateParams {
            frac_vuln_pages: 0.71,
            mean_cells_per_vuln_page: 7.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    /// Round budgets at which the ledger is snapshotted and a substitute
    /// trained. Normalized to sorted, unique values.
    pub rounds: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub pageset_capacity: usize,
    pub miss_prob: f64,
    pub non_secret_between: usize,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            rounds: vec![0, 100, 300],
            strategies: vec![Strategy::AllBits, Strategy::MsbPriority],
            pageset_capacity: 512,
            miss_prob: 0.0,
            non_secret_between: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSpec {
    /// Layer widths, input first. The task's input dimension and class count
    /// follow from the first and last entries.
    pub dims: Vec<usize>,
    pub chunk_rows: usize,
    pub chunk_cols: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for VictimSpec {
    fn default() -> Self {
        VictimSpec {
            dims: Vec::new(),
            chunk_rows: 512,
            chunk_cols: 8,
            train_samples: 5000,
            test_samples: 2000,
            epochs: 40,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub clusters_per_class: usize,
    pub center_spread: f64,
    pub noise: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        let t = SyntheticTask::default();
        TaskParams {
            clusters_per_class: t.clusters_per_class,
            center_spread: t.center_spread,
            noise: t.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubstituteParams {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Share of the victim's training set available to the attacker.
    pub data_fraction: f64,
}

impl Default for SubstituteParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        SubstituteParams {
            lambda: t.lambda,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            finetune_epochs: t.finetune_epochs,
            batch_size: t.batch_size,
            data_fraction: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdParams {
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for PgdParams {
    fn default() -> Self {
        let p = PgdConfig::default();
        PgdParams {
            epsilon: p.epsilon,
            steps: p.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub geometry: DramGeometry,
    pub template: TemplateParams,
    pub attack: AttackParams,
    pub victim: VictimSpec,
    pub task: TaskParams,
    pub train: SubstituteParams,
    pub pgd: PgdParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("out"),
            geometry: DramGeometry::default(),
            template: TemplateParams::default(),
            attack: AttackParams::default(),
            victim: VictimSpec::default(),
            task: TaskParams::default(),
            train: SubstituteParams::default(),
            pgd: PgdParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale setup used by the examples and tests.
    pub fn desk_scale() -> Self {
        ExperimentConfig {
            victim: VictimSpec {
                dims: vec![32, 56, 4],
                ..VictimSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            lr: t.lr,
            momentum: t.momentum,
            epochs: t.epochs,
            finetune_epochs: t.finetune_epochs,
            batch_size: t.batch_size,
            seed,
        }
    }

    pub fn pgd_config(&self) -> PgdConfig {
        PgdConfig::with_epsilon(self.pgd.epsilon, self.pgd.steps)
    }

    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            dim: self.victim.dims.first().copied().unwrap_or(0),
            classes: self.victim.dims.last().copied().unwrap_or(0),
            clusters_per_class: self.task.clusters_per_class,
            center_spread: self.task.center_spread,
            noise: self.task.noise,
            seed: seeds::derive(self.seed, "task"),
        }
    }

    /// Sorts and dedups list fields.
    pub fn normalize(&mut self) {
        self.attack.rounds.sort_unstable();
        self.attack.rounds.dedup();
        self.attack.strategies.sort_unstable();
        self.attack.strategies.dedup();
    }

    /// Every cross-field problem, keyed by dotted field name.
    pub fn check(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut bad = |field: &str, msg: String| e.push((field.to_string(), msg));

        if let Err(err) = self.geometry.validate() {
            bad("geometry", err.to_string());
        }
        let t = &self.template;
        if !(0.0..=1.0).contains(&t.frac_vuln_pages) {
            bad("template.frac_vuln_pages", "must lie in [0, 1]".into());
        }
        if !(t.mean_cells_per_vuln_page > 0.0 && t.mean_cells_per_vuln_page.is_finite()) {
            bad("template.mean_cells_per_vuln_page", "must be positive".into());
        }

        let a = &self.attack;
        if a.rounds.is_empty() {
            bad("attack.rounds", "at least one round budget is required".into());
        }
        if a.strategies.is_empty() {
            bad("attack.strategies", "at least one strategy is required".into());
        }
        if a.pageset_capacity == 0 {
            bad("attack.pageset_capacity", "must be positive".into());
        }
        if !(0.0..1.0).contains(&a.miss_prob) {
            bad("attack.miss_prob", "must lie in [0, 1)".into());
        }

        let v = &self.victim;
        if v.dims.is_empty() {
            bad("victim.dims", "is required".into());
        } else if v.dims.len() < 2 {
            bad("victim.dims", "needs an input and an output width".into());
        } else if v.dims.contains(&0) {
            bad("victim.dims", "widths must be positive".into());
        } else if v.dims.last() == Some(&1) {
            bad("victim.dims", "need at least two classes".into());
        }
        if v.chunk_rows == 0 {
            bad("victim.chunk_rows", "must be positive".into());
        }
        if v.chunk_cols == 0 {
            bad("victim.chunk_cols", "must be positive".into());
        }
        if v.train_samples == 0 {
            bad("victim.train_samples", "must be positive".into());
        }
        if v.test_samples == 0 {
            bad("victim.test_samples", "must be positive".into());
        }
        if !(v.lr > 0.0) {
            bad("victim.lr", "must be positive".into());
        }
        if v.batch_size == 0 {
            bad("victim.batch_size", "must be positive".into());
        }

        let k = &self.task;
        if k.clusters_per_class == 0 {
            bad("task.clusters_per_class", "must be positive".into());
        }
        if !(k.center_spread >= 0.0) {
            bad("task.center_spread", "must be non-negative".into());
        }
        if !(k.noise >= 0.0) {
            bad("task.noise", "must be non-negative".into());
        }

        let s = &self.train;
        if !(s.lambda >= 0.0) {
            bad("train.lambda", "must be non-negative".into());
        }
        if !(s.lr > 0.0) {
            bad("train.lr", "must be positive".into());
        }
        if !(0.0..1.0).contains(&s.momentum) {
            bad("train.momentum", "must lie in [0, 1)".into());
        }
        if s.finetune_epochs > s.epochs {
            bad("train.finetune_epochs", "must not exceed train.epochs".into());
        }
        if s.batch_size == 0 {
            bad("train.batch_size", "must be positive".into());
        }
        if !(s.data_fraction > 0.0 && s.data_fraction <= 0.1) {
            bad("train.data_fraction", "must lie in (0, 0.1]".into());
        }

        let p = &self.pgd;
        if !(p.epsilon >= 0.0) {
            bad("pgd.epsilon", "must be non-negative".into());
        }
        if p.steps == 0 {
            bad("pgd.steps", "must be positive".into());
        }
        e
    }

    /// SHA-256 over the canonical JSON form of the normalized config, output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        seeds::digest_hex(json.as_bytes())
    }
}

/// Parses and validates TOML config text. Syntax and type errors stop at the
/// first problem; semantic problems are all collected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let lines = KeyLines::scan(text);
    let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        Error::Config(vec![ConfigIssue {
            line,
            field: "config".into(),
            message: e.message().trim().to_string(),
        }])
    })?;
    config.normalize();
    let issues: Vec<ConfigIssue> = config
        .check()
        .into_iter()
        .map(|(field, message)| ConfigIssue {
            line: lines.find(&field),
            field,
            message,
        })
        .collect();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(issues))
    }
}

pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Line of each `section.key` assignment, for error messages.
struct KeyLines(BTreeMap<String, usize>);

impl KeyLines {
    fn scan(text: &str) -> Self {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                map.entry(section.clone()).or_insert(i + 1);
            } else if let Some((key, _)) = line.split_once('=') {
                let key = key.trim();
                if key.is_empty() || key.starts_with('#') {
                    continue;
                }
                let full = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                map.entry(full).or_insert(i + 1);
            }
        }
        KeyLines(map)
    }

    fn find(&self, field: &str) -> Option<usize> {
        self.0
            .get(field)
            .or_else(|| field.split_once('.').and_then(|(s, _)| self.0.get(s)))
            .copied()
    }
}

/// One substitute-training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    /// No leaked bits: architecture-only training.
    Baseline,
    /// Ranges from the ledger after `rounds` rounds of `strategy`.
    Leaked { strategy: Strategy, rounds: usize },
    /// Every weight and bias known.
    WhiteBox,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Leaked { .. } => "leaked",
            Arm::WhiteBox => "whitebox",
        }
    }

    pub fn file_stem(&self) -> String {
        match self {
            Arm::Leaked { strategy, rounds } => format!("leaked_{strategy}_r{rounds}"),
            other => other.name().to_string(),
        }
    }

    fn rounds_field(&self) -> String {
        match self {
            Arm::Baseline => "0".into(),
            Arm::Leaked { rounds, .. } => rounds.to_string(),
            Arm::WhiteBox => "-".into(),
        }
    }

    fn strategy_field(&self) -> String {
        match self {
            Arm::Leaked { strategy, .. } => strategy.to_string(),
            _ => "-".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub arm: String,
    pub rounds: String,
    pub strategy: String,
    pub accuracy: f64,
    pub fidelity: f64,
    pub acc_under_attack: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("arm,rounds,strategy,accuracy,fidelity,acc_under_attack,seed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{}",
            r.arm, r.rounds, r.strategy, r.accuracy, r.fidelity, r.acc_under_attack, r.seed
        );
    }
    s
}

/// Attack outcome for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub curve: RecoveryCurve,
    /// Ledger at each configured round budget.
    pub snapshots: BTreeMap<usize, LeakLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummary {
    pub strategy: Strategy,
    pub rounds_run: usize,
    pub rounds_to_msb90: Option<usize>,
    pub final_msb: f64,
    pub final_full: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub victim_accuracy: f64,
    pub curves: Vec<CurveSummary>,
    /// Whether the MSB-priority curve is at least the all-bits curve at every
    /// simulated time both reach; absent unless both strategies ran.
    pub msb_dominates: Option<bool>,
    pub metrics: Vec<MetricsRow>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", self.provenance.config_hash);
        let _ = writeln!(s, "victim accuracy {:.2}", self.victim_accuracy);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<9} {:>7} {:>11} {:>9} {:>9} {:>12}",
            "strategy", "rounds", "msb90_round", "msb", "full", "seconds"
        );
        for c in &self.curves {
            let r90 = c.rounds_to_msb90.map_or("-".to_string(), |r| r.to_string());
            let _ = writeln!(
                s,
                "{:<9} {:>7} {:>11} {:>9.4} {:>9.4} {:>12.1}",
                c.strategy.to_string(),
                c.rounds_run,
                r90,
                c.final_msb,
                c.final_full,
                c.seconds
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<9} {:>7} {:>9} {:>9} {:>9} {:>10}",
            "arm", "rounds", "strategy", "accuracy", "fidelity", "acc_attack"
        );
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{:<9} {:>7} {:>9} {:>9.2} {:>9.2} {:>10.2}",
                m.arm, m.rounds, m.strategy, m.accuracy, m.fidelity, m.acc_under_attack
            );
        }
        s
    }
}

/// A validated config plus the derived identity of the run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl Experiment {
    pub fn new(mut config: ExperimentConfig) -> Result<Self> {
        config.normalize();
        let issues: Vec<ConfigIssue> = config
            .check()
            .into_iter()
            .map(|(field, message)| ConfigIssue {
                line: None,
                field,
                message,
            })
            .collect();
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let hash = config.hash();
        Ok(Experiment { config, hash })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out
    }

    pub fn seed(&self, label: &str) -> u64 {
        seeds::derive(self.config.seed, label)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut labels = vec![
            "template".to_string(),
            "task".to_string(),
            "victim".to_string(),
            "subset".to_string(),
            "substitute".to_string(),
        ];
        labels.extend(self.config.attack.strategies.iter().map(|s| format!("attack/{s}")));
        let mut m: BTreeMap<String, u64> = labels.into_iter().map(|l| {
            let v = self.seed(&l);
            (l, v)
        }).collect();
        m.insert("master".into(), self.config.seed);
        m
    }

    /// Runs `f`, tagging any failure with the stage name and config hash.
    pub fn stage<T>(&self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        f().map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                config_hash: self.hash.clone(),
                source: Box::new(other),
            },
        })
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut arms = vec![Arm::Baseline];
        for &strategy in &self.config.attack.strategies {
            for &rounds in &self.config.attack.rounds {
                arms.push(Arm::Leaked { strategy, rounds });
            }
        }
        arms.push(Arm::WhiteBox);
        arms
    }

    pub fn build_template(&self) -> Result<TemplateMap> {
        let t = &self.config.template;
        generate_template(
            self.config.geometry,
            t.frac_vuln_pages,
            t.mean_cells_per_vuln_page,
            self.seed("template"),
        )
    }

    /// Training and test splits of the synthetic task.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let task = self.config.task();
        Ok((
            task.sample(self.config.victim.train_samples, "train")?,
            task.sample(self.config.victim.test_samples, "test")?,
        ))
    }

    /// Trains the float victim on the full training split and quantizes its
    /// weights to int8.
    pub fn build_victim(&self, train: &Dataset) -> Result<QuantizedModel> {
        let v = &self.config.victim;
        let seed = self.seed("victim");
        let cfg = TrainConfig {
            lambda: 0.0,
            lr: v.lr,
            momentum: self.config.train.momentum,
            epochs: v.epochs,
            finetune_epochs: 0,
            batch_size: v.batch_size,
            seed,
        };
        let net = train_plain(&v.dims, train, &cfg)?;
        let mut layers = Vec::with_capacity(net.layers.len());
        let mut biases = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            layers.push(QuantizedLayer::quantize(l.inputs, l.outputs, &l.weights)?);
            biases.push(l.bias.clone());
        }
        Ok(QuantizedModel {
            layers,
            biases,
            seed,
        })
    }

    fn check_victim(&self, victim: &QuantizedModel) -> Result<()> {
        let mut dims: Vec<usize> = victim.layers.iter().map(|l| l.rows).collect();
        dims.extend(victim.layers.last().map(|l| l.cols));
        if dims != self.config.victim.dims {
            return Err(Error::Shape(format!(
                "victim model has dims {dims:?}, config says {:?}",
                self.config.victim.dims
            )));
        }
        Ok(())
    }

    /// Attacks the victim with one strategy up to the largest round budget,
    /// keeping a ledger snapshot at each budget. Budgets past convergence get
    /// the final ledger.
    pub fn attack(&self, template: &TemplateMap, victim: &QuantizedModel, strategy: Strategy) -> Result<StrategyRun> {
        self.check_victim(victim)?;
        let c = &self.config;
        let chunk = ChunkShape {
            rows: c.victim.chunk_rows,
            cols: c.victim.chunk_cols,
        };
        let packed = PackedModel::build(victim, chunk, c.geometry.page_size_bytes)?;
        let mut sim = AttackSim::new(
            template.clone(),
            packed,
            c.attack.pageset_capacity,
            TraceConfig {
                non_secret_between: c.attack.non_secret_between,
            },
            c.attack.miss_prob,
        )?;
        let budgets: BTreeSet<usize> = c.attack.rounds.iter().copied().collect();
        let config = AttackConfig {
            rounds: budgets.last().copied().unwrap_or(0),
            strategy,
            cost_model: CostModel::for_strategy(strategy),
            seed: self.seed(&format!("attack/{strategy}")),
        };
        let mut ledger = LeakLedger::for_map(sim.map());
        let mut snapshots = BTreeMap::new();
        if budgets.contains(&0) {
            snapshots.insert(0, ledger.clone());
        }
        let curve = sim.run_attack_with(&config, &mut ledger, |point, l| {
            if budgets.contains(&point.round) {
                snapshots.insert(point.round, l.clone());
            }
        })?;
        ledger.verify_against(victim)?;
        for &b in &budgets {
            snapshots.entry(b).or_insert_with(|| ledger.clone());
        }
        Ok(StrategyRun {
            strategy,
            curve,
            snapshots,
        })
    }

    fn scales(victim: &QuantizedModel) -> Vec<f64> {
        victim.layers.iter().map(|l| l.scale).collect()
    }

    pub fn profile(victim: &QuantizedModel, ledger: &LeakLedger) -> LeakProfile {
        LeakProfile::from_ledger(ledger, &Self::scales(victim))
    }

    /// Trains the substitute for `arm`. `ledger` is required for leaked arms.
    pub fn train_arm(
        &self,
        arm: Arm,
        victim: &QuantizedModel,
        ledger: Option<&LeakLedger>,
        subset: &Dataset,
    ) -> Result<TinyNet> {
        let dims = &self.config.victim.dims;
        let cfg = self.config.train_config(self.seed("substitute"));
        match arm {
            Arm::Baseline => train_substitute(dims, &RangeTensors::unknown(dims), subset, &cfg, None),
            Arm::Leaked { .. } => {
                let ledger = ledger.ok_or_else(|| Error::Parameter(format!("no ledger for arm {}", arm.file_stem())))?;
                let ranges = RangeTensors::from_profile(&Self::profile(victim, ledger));
                train_substitute(dims, &ranges, subset, &cfg, None)
            }
            Arm::WhiteBox => {
                let full = LeakLedger::fully_known(victim);
                let ranges = RangeTensors::from_profile(&Self::profile(victim, &full));
                train_substitute(dims, &ranges, subset, &cfg, Some(&victim.biases))
            }
        }
    }

    pub fn attacker_subset(&self, train: &Dataset) -> Dataset {
        train.subset(self.config.train.data_fraction, self.seed("subset"))
    }

    pub fn metrics_row(&self, arm: Arm, m: &Metrics) -> MetricsRow {
        MetricsRow {
            arm: arm.name().into(),
            rounds: arm.rounds_field(),
            strategy: arm.strategy_field(),
            accuracy: m.accuracy,
            fidelity: m.fidelity,
            acc_under_attack: m.accuracy_under_attack,
            seed: self.config.seed,
            config_hash: self.hash.clone(),
        }
    }
}

/// Whether `a` is at least `b` at every time either curve changes.
pub fn curve_dominates(a: &RecoveryCurve, b: &RecoveryCurve) -> bool {
    let horizon = match (a.last(), b.last()) {
        (Some(x), Some(y)) => x.seconds.min(y.seconds),
        _ => return true,
    };
    a.points
        .iter()
        .chain(&b.points)
        .map(|p| p.seconds)
        .filter(|&t| t <= horizon)
        .all(|t| a.msb_at_seconds(t) >= b.msb_at_seconds(t))
}

fn summarize(run: &StrategyRun) -> CurveSummary {
    let last = run.curve.last();
    CurveSummary {
        strategy: run.strategy,
        rounds_run: last.map_or(0, |p| p.round),
        rounds_to_msb90: run.curve.rounds_to_msb(0.9),
        final_msb: last.map_or(0.0, |p| p.msb),
        final_full: last.map_or(0.0, |p| p.full),
        seconds: last.map_or(0.0, |p| p.seconds),
    }
}

// File names inside the output directory.
pub const TEMPLATE_FILE: &str = "template.txt";
pub const VICTIM_FILE: &str = "victim.rlqm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

pub fn curve_file(strategy: Strategy) -> String {
    format!("curve_{strategy}.csv")
}

pub fn ledger_file(strategy: Strategy, rounds: usize) -> String {
    format!("ledger_{strategy}_r{rounds}.txt")
}

pub fn profile_file(strategy: Strategy, rounds: usize) -> String {
    format!("profile_{strategy}_r{rounds}.csv")
}

pub fn substitute_file(arm: Arm) -> String {
    format!("substitute_{}.json", arm.file_stem())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Stage entry points that read their inputs from, and write their outputs
/// to, the experiment's output directory.
impl Experiment {
    pub fn template_stage(&self) -> Result<TemplateMap> {
        self.stage("template", || {
            let t = self.build_template()?;
            write(self.out_dir(), TEMPLATE_FILE, t.to_text())?;
            Ok(t)
        })
    }

    fn load_or_template(&self) -> Result<TemplateMap> {
        let path = self.out_dir().join(TEMPLATE_FILE);
        if path.exists() {
            self.stage("template", || TemplateMap::from_text(&fs::read_to_string(&path)?))
        } else {
            self.template_stage()
        }
    }

    pub fn victim_stage(&self) -> Result<QuantizedModel> {
        self.stage("victim", || {
            let (train, _) = self.datasets()?;
            let v = self.build_victim(&train)?;
            write(self.out_dir(), VICTIM_FILE, v.to_bytes())?;
            Ok(v)
        })
    }

    fn load_or_victim(&self) -> Result<QuantizedModel> {
        let path = self.out_dir().join(VICTIM_FILE);
        if path.exists() {
            self.stage("victim", || {
                let v = QuantizedModel::from_bytes(&fs::read(&path)?)?;
                self.check_victim(&v)?;
                Ok(v)
            })
        } else {
            self.victim_stage()
        }
    }

    fn write_attack(&self, run: &StrategyRun) -> Result<()> {
        write(self.out_dir(), &curve_file(run.strategy), run.curve.to_csv())?;
        for (r, l) in &run.snapshots {
            write(self.out_dir(), &ledger_file(run.strategy, *r), l.to_text())?;
        }
        Ok(())
    }

    /// Reuses `template.txt` and `victim.rlqm` when present.
    pub fn attack_stage(&self) -> Result<Vec<StrategyRun>> {
        let template = self.load_or_template()?;
        let victim = self.load_or_victim()?;
        self.stage("attack", || {
            let mut runs = Vec::new();
            for &s in &self.config.attack.strategies {
                let run = self.attack(&template, &victim, s)?;
                self.write_attack(&run)?;
                runs.push(run);
            }
            Ok(runs)
        })
    }

    fn ledger_dims(victim: &QuantizedModel) -> Vec<(usize, usize)> {
        victim.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    fn load_ledger(&self, victim: &QuantizedModel, strategy: Strategy, rounds: usize) -> Result<LeakLedger> {
        let path = self.out_dir().join(ledger_file(strategy, rounds));
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        LeakLedger::from_text(&text, &Self::ledger_dims(victim))
    }

    /// Writes one profile CSV per stored ledger.
    pub fn profile_stage(&self) -> Result<()> {
        let victim = self.load_or_victim()?;
        self.stage("profile", || {
            for &s in &self.config.attack.strategies {
                for &r in &self.config.attack.rounds {
                    let ledger = self.load_ledger(&victim, s, r)?;
                    write(self.out_dir(), &profile_file(s, r), Self::profile(&victim, &ledger).to_csv())?;
                }
            }
            Ok(())
        })
    }

    /// Trains every arm's substitute from the stored ledgers.
    pub fn train_stage(&self) -> Result<Vec<(Arm, TinyNet)>> {
        let victim = self.load_or_victim()?;
        self.stage("train", || {
            let (train, _) = self.datasets()?;
            let subset = self.attacker_subset(&train);
            let mut out = Vec::new();
            for arm in self.arms() {
                let ledger = match arm {
                    Arm::Leaked { strategy, rounds } => Some(self.load_ledger(&victim, strategy, rounds)?),
                    _ => None,
                };
                let net = self.train_arm(arm, &victim, ledger.as_ref(), &subset)?;
                let json = serde_json::to_string(&net).map_err(|e| Error::Parameter(e.to_string()))?;
                write(self.out_dir(), &substitute_file(arm), json)?;
                out.push((arm, net));
            }
            Ok(out)
        })
    }

    /// Evaluates stored substitutes against the victim.
    pub fn eval_stage(&self) -> Result<Vec<MetricsRow>> {
        let victim = self.load_or_victim()?;
        self.stage("eval", || {
            let mut nets = Vec::new();
            for arm in self.arms() {
                let path = self.out_dir().join(substitute_file(arm));
                let net: TinyNet = serde_json::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| Error::format(e.line(), e.to_string()))?;
                nets.push((arm, net));
            }
            let rows = self.evaluate_arms(&victim, &nets)?;
            write(self.out_dir(), METRICS_FILE, metrics_csv(&rows))?;
            Ok(rows)
        })
    }

    fn evaluate_arms(&self, victim: &QuantizedModel, nets: &[(Arm, TinyNet)]) -> Result<Vec<MetricsRow>> {
        let (_, test) = self.datasets()?;
        let victim_net = TinyNet::from_quantized(victim);
        let pgd = self.config.pgd_config();
        nets.iter()
            .map(|(arm, net)| Ok(self.metrics_row(*arm, &evaluate(&victim_net, net, &test, &pgd)?)))
            .collect()
    }
}

/// Runs every stage in memory and writes all outputs plus `report.json` and
/// `summary.txt` to the configured output directory.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentReport> {
    let exp = Experiment::new(config)?;
    let dir = exp.out_dir().to_path_buf();

    let template = exp.template_stage()?;
    let victim = exp.victim_stage()?;
    let runs = exp.stage("attack", || {
        exp.config
            .attack
            .strategies
            .iter()
            .map(|&s| {
                let run = exp.attack(&template, &victim, s)?;
                exp.write_attack(&run)?;
                Ok(run)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    exp.stage("profile", || {
        for run in &runs {
            for (r, l) in &run.snapshots {
                write(&dir, &profile_file(run.strategy, *r), Experiment::profile(&victim, l).to_csv())?;
            }
        }
        Ok(())
    })?;
    let (train, test) = exp.stage("train", || exp.datasets())?;
    let nets = exp.stage("train", || {
        let subset = exp.attacker_subset(&train);
        exp.arms()
            .into_iter()
            .map(|arm| {
                let ledger = match arm {
                    Arm::Leaked { strategy, rounds } => runs
                        .iter()
                        .find(|r| r.strategy == strategy)
                        .and_then(|r| r.snapshots.get(&rounds)),
                    _ => None,
                };
                let net = exp.train_arm(arm, &victim, ledger, &subset)?;
                let json = serde_json::to_string(&net).map_err(|e| Error::Parameter(e.to_string()))?;
                write(&dir, &substitute_file(arm), json)?;
                Ok((arm, net))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let metrics = exp.stage("eval", || {
        let rows = exp.evaluate_arms(&victim, &nets)?;
        write(&dir, METRICS_FILE, metrics_csv(&rows))?;
        Ok(rows)
    })?;

    exp.stage("report", || {
        let victim_accuracy = crate::subtrain::accuracy(&TinyNet::from_quantized(&victim), &test);
        let find = |s| runs.iter().find(|r| r.strategy == s);
        let msb_dominates = match (find(Strategy::MsbPriority), find(Strategy::AllBits)) {
            (Some(m), Some(a)) => Some(curve_dominates(&m.curve, &a.curve)),
            _ => None,
        };
        let report = ExperimentReport {
            provenance: Provenance {
                config_hash: exp.hash.clone(),
                seeds: exp.seeds(),
            },
            victim_accuracy,
            curves: runs.iter().map(summarize).collect(),
            msb_dominates,
            metrics,
        };
        write(&dir, REPORT_FILE, report.to_json())?;
        write(&dir, SUMMARY_FILE, report.summary_table())?;
        Ok(report)
    })
}
