//! Pipeline configuration, read from TOML. Every field has a default, so an
//! empty file (or no file) is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reasonroute_core::features::{KMeansConfig, DELTA_COST_FEATURE};
use reasonroute_core::policy::{Anchor, DEFAULT_GRID_SIZE};
use reasonroute_core::probe::{default_checklist, parse_checklist, ChecklistQuestion};
use reasonroute_core::ranking::UtilityMetric;
use reasonroute_core::router::TrainConfig;
use reasonroute_core::select::SelectConfig;
use reasonroute_core::Execution;
use reasonroute_gateway::GatewayConfig;
use serde::{Deserialize, Serialize};

use crate::synth::SynthConfig;

/// Artifact file names, resolved against `work_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub instances: PathBuf,
    pub embeddings: PathBuf,
    pub dual_mode: PathBuf,
    pub probes: PathBuf,
    pub synth_truth: PathBuf,
    pub labels: PathBuf,
    pub features: PathBuf,
    pub selection: PathBuf,
    pub model: PathBuf,
    pub train_log: PathBuf,
    pub frontier: PathBuf,
    pub policy: PathBuf,
    pub decisions: PathBuf,
    pub eval: PathBuf,
    pub report_md: PathBuf,
    pub report_json: PathBuf,
    pub frontier_csv: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = PathBuf::from;
        Paths {
            instances: p("instances.jsonl"),
            embeddings: p("embeddings.jsonl"),
            dual_mode: p("dual_mode.jsonl"),
            probes: p("probes.jsonl"),
            synth_truth: p("synth_truth.jsonl"),
            labels: p("labels.jsonl"),
            features: p("features.jsonl"),
            selection: p("selection.jsonl"),
            model: p("model.json"),
            train_log: p("train_log.jsonl"),
            frontier: p("frontier.jsonl"),
            policy: p("policy.json"),
            decisions: p("decisions.jsonl"),
            eval: p("eval.jsonl"),
            report_md: p("report.md"),
            report_json: p("report.json"),
            frontier_csv: p("frontier.csv"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub anchor: Anchor,
    /// Fixed threshold for the manual anchor.
    pub eta: Option<f64>,
    /// Mean-token budget for the manual anchor; eta is calibrated to it.
    pub token_budget: Option<f64>,
    pub grid_size: usize,
    pub w_tokens: f64,
    pub w_utility: f64,
    /// Reference utility for the epsilon anchor; defaults to the
    /// always-Think utility on the sweep split.
    pub u_base: Option<f64>,
    pub epsilon: f64,
    /// Split used to trace the frontier.
    pub sweep_split: SplitName,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            anchor: Anchor::Umax,
            eta: None,
            token_budget: None,
            grid_size: DEFAULT_GRID_SIZE,
            w_tokens: 1.0,
            w_utility: 1.0,
            u_base: None,
            epsilon: 0.01,
            sweep_split: SplitName::Val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probability that the Random arm picks Think.
    pub random_p: f64,
    pub split: SplitName,
    pub baseline: crate::eval::Arm,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            random_p: 0.5,
            split: SplitName::Test,
            baseline: crate::eval::Arm::Think,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Stub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    /// Token price in the advantage label.
    pub lambda: f64,
    pub metric: UtilityMetric,
    /// JSONL checklist; the bundled five-pair list when unset.
    pub checklist: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    pub sequential: bool,
    /// Number of train-split folds used as selection settings.
    pub select_folds: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub kmeans: KMeansConfig,
    pub select: SelectConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub backend: BackendKind,
    pub gateway: GatewayConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            work_dir: PathBuf::from("run"),
            lambda: 1e-4,
            metric: UtilityMetric::Ndcg(10),
            checklist: None,
            sequential: false,
            select_folds: 3,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            kmeans: KMeansConfig::default(),
            select: SelectConfig {
                always_keep: vec![DELTA_COST_FEATURE.to_string()],
                ..SelectConfig::default()
            },
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
            backend: BackendKind::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!("lambda must be finite and >= 0, got {}", self.lambda);
        }
        if self.select_folds < 1 {
            bail!("select_folds must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.eval.random_p) {
            bail!("eval.random_p must lie in [0, 1], got {}", self.eval.random_p);
        }
        if self.policy.grid_size < 1 {
            bail!("policy.grid_size must be >= 1");
        }
        self.synth.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn path(&self, pick: impl Fn(&Paths) -> &PathBuf) -> PathBuf {
        self.work_dir.join(pick(&self.paths))
    }

    pub fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    pub fn checklist(&self) -> Result<Vec<ChecklistQuestion>> {
        match &self.checklist {
            None => Ok(default_checklist()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading checklist {}", p.display()))?;
                Ok(parse_checklist(&text)?)
            }
        }
    }
}
