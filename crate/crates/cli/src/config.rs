//! Experiment configuration: one TOML file drives the whole pipeline.
//!
//! Every field has a default; `config-init` writes a fully commented
//! template so the defaults are documented where they are edited.

use ecalab_core::complexity::ComplexityConfig;
use ecalab_core::datagen::{EasyConfig, HardConfig, PretrainConfig, SplitSpec};
use ecalab_core::eca::{symmetry_classes, RuleId};
use ecalab_core::model::{AccuracyKind, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rules: RulesSpec,
    /// one pretrained model per rule x horizon x seed
    pub seeds: Vec<u64>,
    /// pretraining prediction horizons; 1 and/or 5
    pub horizons: Vec<usize>,
    pub simulate: SimulateCfg,
    pub complexity: ComplexityConfig,
    pub pretrain: PretrainCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub finetune: FinetuneCfg,
    pub tasks: TasksCfg,
    pub chess: ChessCfg,
    pub analysis: AnalysisCfg,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rules: RulesSpec::default(),
            seeds: vec![0],
            horizons: vec![1],
            simulate: SimulateCfg::default(),
            complexity: ComplexityConfig::default(),
            pretrain: PretrainCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            finetune: FinetuneCfg::default(),
            tasks: TasksCfg::default(),
            chess: ChessCfg::default(),
            analysis: AnalysisCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesSpec {
    /// "list" (use `list`), "all" (0-255), or "canonical" (the 88
    /// symmetry-class representatives)
    pub set: String,
    pub list: Vec<u8>,
}

impl Default for RulesSpec {
    fn default() -> Self {
        RulesSpec {
            set: "list".into(),
            // the representative rules: two per Wolfram class
            list: vec![0, 168, 4, 179, 30, 105, 150, 110],
        }
    }
}

impl RulesSpec {
    pub fn resolve(&self) -> Result<Vec<RuleId>, CliError> {
        match self.set.as_str() {
            "list" => {
                if self.list.is_empty() {
                    return Err(CliError::Config("rules.list is empty".into()));
                }
                let mut rules: Vec<RuleId> = self.list.iter().map(|&r| RuleId(r)).collect();
                rules.sort_unstable();
                rules.dedup();
                Ok(rules)
            }
            "all" => Ok((0..=255).map(RuleId).collect()),
            "canonical" => Ok(symmetry_classes()
                .into_iter()
                .map(|c| c.canonical)
                .collect()),
            other => Err(CliError::Config(format!(
                "rules.set must be list|all|canonical, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateCfg {
    pub width: usize,
    pub steps: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg {
            width: 256,
            steps: 400,
            density: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCfg {
    pub samples: usize,
    #[serde(flatten)]
    pub window: PretrainConfig,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        PretrainCfg {
            samples: 512,
            window: PretrainConfig {
                t_len: 20,
                x_len: 40,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        // small enough to sweep many rules on a single core; raise toward
        // 4 x 4 x 128 on a workstation
        ModelCfg {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            dropout: 0.0,
        }
    }
}

impl ModelCfg {
    pub fn to_model_config(&self, context_len: usize, input_width: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            context_len,
            input_width,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub val_frac: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.01,
            warmup_frac: 0.10,
            batch_size: 64,
            grad_accum_steps: 1,
            clip_norm: 1.0,
            max_epochs: 30,
            patience: 20,
            min_delta: 1e-4,
            val_frac: 0.1,
        }
    }
}

impl TrainCfg {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            clip_norm: self.clip_norm,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            val_frac: self.val_frac,
            stop_at_accuracy: None,
            accuracy_kind: AccuracyKind::PerCell,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneCfg {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_frac: f64,
    /// efficiency threshold: 1 / first epoch reaching this accuracy
    pub threshold: f64,
    /// accuracy driving the threshold: "per_cell" | "exact" | "token"
    pub accuracy: String,
}

impl Default for FinetuneCfg {
    fn default() -> Self {
        FinetuneCfg {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            val_frac: 0.25,
            threshold: 0.8,
            accuracy: "per_cell".into(),
        }
    }
}

impl FinetuneCfg {
    pub fn accuracy_kind(&self) -> Result<AccuracyKind, CliError> {
        match self.accuracy.as_str() {
            "per_cell" => Ok(AccuracyKind::PerCell),
            "exact" => Ok(AccuracyKind::ExactState),
            "token" => Ok(AccuracyKind::Token),
            other => Err(CliError::Config(format!(
                "finetune.accuracy must be per_cell|exact|token, got {other:?}"
            ))),
        }
    }

    pub fn to_train_config(&self, base: &TrainCfg, seed: u64) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            val_frac: self.val_frac,
            patience: self.max_epochs, // threshold stopping governs
            stop_at_accuracy: Some(self.threshold),
            accuracy_kind: self.accuracy_kind()?,
            seed,
            ..base.to_train_config(seed)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksCfg {
    pub easy: TaskGenCfg,
    pub hard: TaskGenCfg,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub easy_grid: Option<EasyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_grid: Option<HardConfig>,
}

impl Default for TasksCfg {
    fn default() -> Self {
        TasksCfg {
            easy: TaskGenCfg {
                sequences: 96,
                seq_len: 6,
                seed: 101,
            },
            hard: TaskGenCfg {
                sequences: 96,
                seq_len: 6,
                seed: 202,
            },
            easy_grid: None,
            hard_grid: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenCfg {
    pub sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TaskGenCfg {
    fn default() -> Self {
        TaskGenCfg {
            sequences: 96,
            seq_len: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChessCfg {
    /// PGN files to ingest; empty disables the chess stage
    pub pgn: Vec<String>,
    pub min_rating: u32,
    pub split_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for ChessCfg {
    fn default() -> Self {
        ChessCfg {
            pgn: vec![],
            min_rating: 2200,
            split_seed: 13,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl ChessCfg {
    pub fn enabled(&self) -> bool {
        !self.pgn.is_empty()
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            fractions: (self.train_frac, self.val_frac, self.test_frac),
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisCfg {
    /// attention summarized over the k most recent states
    pub attention_k: usize,
    /// probe samples for attention capture and activation CKA
    pub probe_samples: usize,
    /// "activation" | "weight"
    pub cka_mode: String,
}

impl Default for AnalysisCfg {
    fn default() -> Self {
        AnalysisCfg {
            attention_k: 10,
            probe_samples: 256,
            cka_mode: "activation".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.rules.resolve()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds is empty".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| *h != 1 && *h != 5) {
            return Err(CliError::Config(
                "horizons must be a nonempty subset of {1, 5}".into(),
            ));
        }
        if self.pretrain.window.t_len < 2 {
            return Err(CliError::Config("pretrain.t_len must be >= 2".into()));
        }
        if self.analysis.attention_k + 1 > self.pretrain.window.t_len {
            return Err(CliError::Config(
                "analysis.attention_k must be < pretrain.t_len".into(),
            ));
        }
        match self.analysis.cka_mode.as_str() {
            "activation" | "weight" => {}
            other => {
                return Err(CliError::Config(format!(
                    "analysis.cka_mode must be activation|weight, got {other:?}"
                )))
            }
        }
        self.finetune.accuracy_kind()?;
        if self.tasks.easy.seq_len < 2 || self.tasks.hard.seq_len < 2 {
            return Err(CliError::Config("task seq_len must be >= 2".into()));
        }
        let probe = self
            .model
            .to_model_config(self.context_len(), self.pretrain.window.x_len, 0);
        probe
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Context length covering every stage the config enables.
    pub fn context_len(&self) -> usize {
        let mut ctx = self.pretrain.window.t_len;
        ctx = ctx.max(self.tasks.easy.seq_len - 1);
        ctx = ctx.max(self.tasks.hard.seq_len - 1);
        if self.chess.enabled() {
            ctx = ctx.max(ecalab_core::datagen::CHESS_SEQ_LEN);
        }
        ctx
    }
}

/// The commented template written by `config-init`.
pub const CONFIG_TEMPLATE: &str = r#"# Experiment configuration. Every value below is the default; delete any
# line to keep it. Paths are relative to the working directory.

# one pretrained model per rule x horizon x seed
seeds = [0]
# prediction horizons for pretraining; allowed values: 1, 5
horizons = [1]

[rules]
# "list" uses the rules below; "all" = 0-255; "canonical" = the 88
# symmetry-class representatives.
set = "list"
# default: two representative rules per Wolfram class (I: 0,168; II: 4,179;
# III: 30,105,150; IV: 110)
list = [0, 168, 4, 179, 30, 105, 150, 110]

[simulate]
width = 256       # lattice cells, periodic boundary
steps = 400       # rows simulated per rule
density = 0.5     # initial occupancy
seed = 7

[complexity]
grid_width = 256
grid_steps = 1000
lyapunov_width = 256
lyapunov_trials = 32
lyapunov_steps = 200
krylov_width = 10      # exact operator construction: keep <= 14
krylov_horizon = 32
seed = 0

[pretrain]
samples = 512     # windows per rule x horizon
sim_width = 256   # simulation the windows are cut from
sim_steps = 1000
t_len = 20        # window rows = model sequence length
x_len = 40        # window columns = model input width
density = 0.5

[model]
# backbone size; the training mechanism is scale-free. 2x2x32 sweeps many
# rules on one core; 4x4x128 is the workstation setting.
n_layers = 2
n_heads = 2
d_model = 32
d_ff = 128
dropout = 0.0

[train]
# pretraining schedule: AdamW, linear warmup then cosine decay, global
# gradient-norm clipping, early stopping on validation loss
lr = 0.001
lr_min = 0.0
weight_decay = 0.01
warmup_frac = 0.1
batch_size = 64
grad_accum_steps = 1
clip_norm = 1.0
max_epochs = 30
patience = 20
min_delta = 0.0001
val_frac = 0.1

[finetune]
# frozen-backbone transfer: only the input/output projections train
lr = 0.001
batch_size = 32
max_epochs = 50
val_frac = 0.25
threshold = 0.8       # efficiency = 1 / first epoch reaching this accuracy
accuracy = "per_cell" # per_cell | exact | token

[tasks.easy]
sequences = 96
seq_len = 6
seed = 101

[tasks.hard]
sequences = 96
seq_len = 6
seed = 202

[chess]
pgn = []              # PGN files to ingest; empty disables the chess stage
min_rating = 2200     # both players must meet this Elo
split_seed = 13
train_frac = 0.8
val_frac = 0.1
test_frac = 0.1

[analysis]
attention_k = 10      # attention mass over the k most recent states
probe_samples = 256   # probe windows for attention and activation CKA
cka_mode = "activation" # activation | weight
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_to_defaults() {
        let parsed: ExperimentConfig = toml::from_str(CONFIG_TEMPLATE).unwrap();
        parsed.validate().unwrap();
        let defaults = ExperimentConfig::default();
        assert_eq!(
            toml::to_string(&parsed).unwrap(),
            toml::to_string(&defaults).unwrap()
        );
    }

    #[test]
    fn rule_sets_resolve() {
        let spec = RulesSpec::default();
        assert_eq!(spec.resolve().unwrap().len(), 8);
        let all = RulesSpec {
            set: "all".into(),
            list: vec![],
        };
        assert_eq!(all.resolve().unwrap().len(), 256);
        let canonical = RulesSpec {
            set: "canonical".into(),
            list: vec![],
        };
        assert_eq!(canonical.resolve().unwrap().len(), 88);
        let bad = RulesSpec {
            set: "nope".into(),
            list: vec![],
        };
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.horizons = vec![3];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.analysis.cka_mode = "umap".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.finetune.accuracy = "per_sample".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.d_model = 31; // not divisible by heads
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn context_len_covers_enabled_stages() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.context_len(), 20);
        cfg.chess.pgn = vec!["games.pgn".into()];
        assert_eq!(cfg.context_len(), 60);
    }
}
