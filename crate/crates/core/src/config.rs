//! Experiment configuration: a flat, sectioned `key = value` text format.
//!
//! Files have four optional sections — `[model]`, `[federation]`,
//! `[lock]`, `[data]` — plus top-level `seed` and `output_dir`. Unknown
//! sections and keys are rejected with line numbers, as are duplicate
//! keys and unparsable values. Values may come from three layers, later
//! layers winning: built-in defaults, an optional named preset, then the
//! file itself. Every field the file did not set explicitly is reported
//! in the load notes with its effective value and provenance.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataDescriptor, DatasetKind};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Method, PartitionScheme};
use crate::inr_lock::Activation;
use crate::model::{LockConfig, ModelSpec, OptimizerKind, Task};

/// Data-generation settings. Classification uses the gaussian-mixture
/// generator (`n_classes`), regression the linear generator
/// (`n_targets`); the irrelevant count is simply unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: Task,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub n_targets: usize,
    pub center_scale: f64,
    pub noise_std: f64,
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            task: Task::Classification,
            n_samples: 2000,
            n_features: 64,
            n_classes: 4,
            n_targets: 1,
            center_scale: 3.0,
            noise_std: 1.0,
            eval_fraction: 0.2,
        }
    }
}

impl DataConfig {
    pub fn descriptor(&self) -> DataDescriptor {
        let kind = match self.task {
            Task::Classification => DatasetKind::GaussianMixture {
                n_classes: self.n_classes,
                center_scale: self.center_scale,
                noise_std: self.noise_std,
            },
            Task::Regression => DatasetKind::LinearRegression {
                n_targets: self.n_targets,
                noise_std: self.noise_std,
            },
        };
        DataDescriptor {
            kind,
            n_samples: self.n_samples,
            n_features: self.n_features,
            eval_fraction: self.eval_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelSpec,
    pub lock: LockConfig,
    pub federation: FederationConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 0,
            output_dir: "runs/experiment".into(),
            model: ModelSpec {
                input_dim: 64,
                hidden_dim: 64,
                n_residual_blocks: 2,
                decoder_hidden: 32,
                output_dim: 4,
                locked_layers: vec!["dec0".into(), "dec1".into()],
                dropout_rate: 0.0,
                task: Task::Classification,
            },
            lock: LockConfig::default(),
            federation: FederationConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full validation: each part validates itself, then the cross-part
    /// rules (the lock method needs locked layers; label-skewed
    /// partitioning needs class labels).
    pub fn validate(&self) -> Result<()> {
        self.data.descriptor().validate()?;
        self.lock.validate()?;
        self.federation.validate()?;
        self.model.validate()?;
        if self.federation.method.uses_lock() && self.model.locked_layers.is_empty() {
            return Err(Error::invalid(
                "locked_layers",
                "method infl needs at least one locked layer; set model.locked_layers",
            ));
        }
        if matches!(self.federation.partition, PartitionScheme::Dirichlet { .. })
            && self.data.task == Task::Regression
        {
            return Err(Error::invalid(
                "partition",
                "label-skewed (dirichlet) splits need a classification task",
            ));
        }
        Ok(())
    }
}

/// Model input/output/task follow the data section; the derived fields
/// are not directly configurable so the two can never disagree.
fn finalize(cfg: &mut ExperimentConfig) {
    cfg.model.input_dim = cfg.data.n_features;
    cfg.model.task = cfg.data.task;
    cfg.model.output_dim = match cfg.data.task {
        Task::Classification => cfg.data.n_classes,
        Task::Regression => cfg.data.n_targets,
    };
    cfg.federation.seed = cfg.seed;
}

type SetFn = fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>;
type GetFn = fn(&ExperimentConfig) -> String;

struct FieldDef {
    section: &'static str,
    key: &'static str,
    set: SetFn,
    get: GetFn,
}

fn int(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn uint64(v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 =
        v.parse().map_err(|_| format!("expected a number, got {v:?}"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{v:?} is not finite"))
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse_layer_list(v: &str) -> std::result::Result<Vec<String>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    Ok(v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
}

fn format_layer_list(layers: &[String]) -> String {
    if layers.is_empty() {
        "none".into()
    } else {
        layers.join(",")
    }
}

fn parse_partition(v: &str) -> std::result::Result<PartitionScheme, String> {
    if v == "iid" {
        return Ok(PartitionScheme::Iid);
    }
    if let Some(alpha) = v.strip_prefix("dirichlet:") {
        return Ok(PartitionScheme::Dirichlet { alpha: float(alpha.trim())? });
    }
    Err(format!("expected iid or dirichlet:<alpha>, got {v:?}"))
}

fn format_partition(p: PartitionScheme) -> String {
    match p {
        PartitionScheme::Iid => "iid".into(),
        PartitionScheme::Dirichlet { alpha } => format!("dirichlet:{alpha}"),
    }
}

fn field_defs() -> Vec<FieldDef> {
    let mut defs: Vec<FieldDef> = Vec::new();
    let mut add = |section, key, set: SetFn, get: GetFn| {
        defs.push(FieldDef { section, key, set, get });
    };

    add("", "seed", |c, v| Ok(c.seed = uint64(v)?), |c| c.seed.to_string());
    add("", "output_dir", |c, v| Ok(c.output_dir = v.to_string()), |c| c.output_dir.clone());

    add("model", "hidden_dim", |c, v| Ok(c.model.hidden_dim = int(v)?), |c| {
        c.model.hidden_dim.to_string()
    });
    add("model", "n_residual_blocks", |c, v| Ok(c.model.n_residual_blocks = int(v)?), |c| {
        c.model.n_residual_blocks.to_string()
    });
    add("model", "decoder_hidden", |c, v| Ok(c.model.decoder_hidden = int(v)?), |c| {
        c.model.decoder_hidden.to_string()
    });
    add("model", "dropout_rate", |c, v| Ok(c.model.dropout_rate = float(v)?), |c| {
        c.model.dropout_rate.to_string()
    });
    add("model", "locked_layers", |c, v| Ok(c.model.locked_layers = parse_layer_list(v)?), |c| {
        format_layer_list(&c.model.locked_layers)
    });

    add("lock", "alpha", |c, v| Ok(c.lock.alpha = float(v)?), |c| c.lock.alpha.to_string());
    add("lock", "levels", |c, v| Ok(c.lock.levels = int(v)?), |c| c.lock.levels.to_string());
    add("lock", "inr_hidden", |c, v| Ok(c.lock.inr_hidden = int(v)?), |c| {
        c.lock.inr_hidden.to_string()
    });
    add("lock", "inr_layers", |c, v| Ok(c.lock.inr_layers = int(v)?), |c| {
        c.lock.inr_layers.to_string()
    });
    add(
        "lock",
        "activation",
        |c, v| {
            c.lock.activation = match v {
                "relu" => Activation::Relu,
                "tanh" => Activation::Tanh,
                other => return Err(format!("expected relu or tanh, got {other:?}")),
            };
            Ok(())
        },
        |c| match c.lock.activation {
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
        },
    );

    add(
        "federation",
        "method",
        |c, v| {
            c.federation.method = match v {
                "fl" => Method::Fl,
                "fl_dp" => Method::FlDp,
                "fl_lora_dp" => Method::FlLoraDp,
                "infl" => Method::Infl,
                other => {
                    return Err(format!(
                        "expected fl, fl_dp, fl_lora_dp, or infl, got {other:?}"
                    ))
                }
            };
            Ok(())
        },
        |c| c.federation.method.name().into(),
    );
    add("federation", "n_clients", |c, v| Ok(c.federation.n_clients = int(v)?), |c| {
        c.federation.n_clients.to_string()
    });
    add("federation", "participation", |c, v| Ok(c.federation.participation = float(v)?), |c| {
        c.federation.participation.to_string()
    });
    add("federation", "rounds", |c, v| Ok(c.federation.rounds = int(v)?), |c| {
        c.federation.rounds.to_string()
    });
    add("federation", "local_epochs", |c, v| Ok(c.federation.local_epochs = int(v)?), |c| {
        c.federation.local_epochs.to_string()
    });
    add("federation", "batch_size", |c, v| Ok(c.federation.batch_size = int(v)?), |c| {
        c.federation.batch_size.to_string()
    });
    add("federation", "lr", |c, v| Ok(c.federation.lr = float(v)?), |c| {
        c.federation.lr.to_string()
    });
    add(
        "federation",
        "optimizer",
        |c, v| {
            c.federation.optimizer = match v {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                other => return Err(format!("expected sgd or adam, got {other:?}")),
            };
            Ok(())
        },
        |c| c.federation.optimizer.to_string(),
    );
    add("federation", "clip_norm", |c, v| Ok(c.federation.dp.clip_norm = float(v)?), |c| {
        c.federation.dp.clip_norm.to_string()
    });
    add(
        "federation",
        "noise_multiplier",
        |c, v| Ok(c.federation.dp.noise_multiplier = float(v)?),
        |c| c.federation.dp.noise_multiplier.to_string(),
    );
    add("federation", "dp_delta", |c, v| Ok(c.federation.dp.delta = float(v)?), |c| {
        c.federation.dp.delta.to_string()
    });
    add("federation", "lora_rank", |c, v| Ok(c.federation.lora_rank = int(v)?), |c| {
        c.federation.lora_rank.to_string()
    });
    add("federation", "lora_scaling", |c, v| Ok(c.federation.lora_scaling = float(v)?), |c| {
        c.federation.lora_scaling.to_string()
    });
    add("federation", "parallel", |c, v| Ok(c.federation.parallel = boolean(v)?), |c| {
        c.federation.parallel.to_string()
    });

    add(
        "data",
        "task",
        |c, v| {
            c.data.task = match v {
                "classification" => Task::Classification,
                "regression" => Task::Regression,
                other => return Err(format!("expected classification or regression, got {other:?}")),
            };
            Ok(())
        },
        |c| match c.data.task {
            Task::Classification => "classification".into(),
            Task::Regression => "regression".into(),
        },
    );
    add("data", "n_samples", |c, v| Ok(c.data.n_samples = int(v)?), |c| {
        c.data.n_samples.to_string()
    });
    add("data", "n_features", |c, v| Ok(c.data.n_features = int(v)?), |c| {
        c.data.n_features.to_string()
    });
    add("data", "n_classes", |c, v| Ok(c.data.n_classes = int(v)?), |c| {
        c.data.n_classes.to_string()
    });
    add("data", "n_targets", |c, v| Ok(c.data.n_targets = int(v)?), |c| {
        c.data.n_targets.to_string()
    });
    add("data", "center_scale", |c, v| Ok(c.data.center_scale = float(v)?), |c| {
        c.data.center_scale.to_string()
    });
    add("data", "noise_std", |c, v| Ok(c.data.noise_std = float(v)?), |c| {
        c.data.noise_std.to_string()
    });
    add("data", "eval_fraction", |c, v| Ok(c.data.eval_fraction = float(v)?), |c| {
        c.data.eval_fraction.to_string()
    });
    add("data", "partition", |c, v| Ok(c.federation.partition = parse_partition(v)?), |c| {
        format_partition(c.federation.partition)
    });

    defs
}

const SECTIONS: [&str; 4] = ["model", "federation", "lock", "data"];

fn apply_text(
    cfg: &mut ExperimentConfig,
    text: &str,
    seen: &mut BTreeSet<String>,
    defs: &[FieldDef],
) -> Result<()> {
    let mut section: &'static str = "";
    let mut local_seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(body) = t.strip_prefix('[') {
            let name = body
                .strip_suffix(']')
                .ok_or_else(|| Error::Config {
                    line,
                    detail: format!("unterminated section header {t:?}"),
                })?
                .trim();
            section = SECTIONS.iter().find(|s| **s == name).copied().ok_or_else(|| {
                Error::Config {
                    line,
                    detail: format!(
                        "unknown section [{name}]; sections are [model], [federation], [lock], [data]"
                    ),
                }
            })?;
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| Error::Config {
            line,
            detail: format!("expected key = value, got {t:?}"),
        })?;
        let key = k.trim();
        let value = v.trim();
        let id =
            if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        let def =
            defs.iter().find(|d| d.section == section && d.key == key).ok_or_else(|| {
                let place = if section.is_empty() {
                    "the top level".to_string()
                } else {
                    format!("[{section}]")
                };
                Error::Config { line, detail: format!("unknown key {key:?} in {place}") }
            })?;
        if !local_seen.insert(id.clone()) {
            return Err(Error::Config { line, detail: format!("{id} is set twice") });
        }
        (def.set)(cfg, value)
            .map_err(|msg| Error::Config { line, detail: format!("{id}: {msg}") })?;
        seen.insert(id);
    }
    Ok(())
}

pub fn preset_names() -> [&'static str; 4] {
    ["demo", "perturbation", "proteomic", "spatial"]
}

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        // Five institutions train jointly for 200 rounds of 50 local
        // epochs at a conservative learning rate.
        "proteomic" => Ok("\
output_dir = runs/proteomic
[federation]
method = infl
n_clients = 5
participation = 1.0
rounds = 200
local_epochs = 50
lr = 1e-4
"),
        // Ten sites with half participating per round, short local work.
        "perturbation" => Ok("\
output_dir = runs/perturbation
[federation]
method = infl
n_clients = 10
participation = 0.5
rounds = 200
local_epochs = 2
lr = 5e-3
"),
        // Three sites, full participation, fifty rounds.
        "spatial" => Ok("\
output_dir = runs/spatial
[federation]
method = infl
n_clients = 3
participation = 1.0
rounds = 50
local_epochs = 2
lr = 1e-3
"),
        // Small everything: a complete run in seconds, for smoke tests.
        "demo" => Ok("\
output_dir = runs/demo
[model]
hidden_dim = 24
n_residual_blocks = 1
decoder_hidden = 12
locked_layers = dec0,dec1
[federation]
method = infl
n_clients = 3
participation = 1.0
rounds = 3
local_epochs = 1
batch_size = 32
lr = 5e-3
[data]
n_samples = 300
n_features = 16
n_classes = 3
"),
        other => Err(Error::invalid(
            "preset",
            format!("unknown preset {other:?}; available: demo, perturbation, proteomic, spatial"),
        )),
    }
}

/// A parsed, validated configuration plus provenance notes: one line per
/// field the file did not set, stating the effective value and whether it
/// came from the preset or the built-in default.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
}

pub fn parse_config_text(text: &str, preset: Option<&str>) -> Result<LoadedConfig> {
    let defs = field_defs();
    let mut cfg = ExperimentConfig::default();
    let mut from_preset = BTreeSet::new();
    if let Some(name) = preset {
        apply_text(&mut cfg, preset_text(name)?, &mut from_preset, &defs)?;
    }
    let mut from_file = BTreeSet::new();
    apply_text(&mut cfg, text, &mut from_file, &defs)?;
    finalize(&mut cfg);
    cfg.validate()?;
    let mut notes = Vec::new();
    for def in &defs {
        let id = if def.section.is_empty() {
            def.key.to_string()
        } else {
            format!("{}.{}", def.section, def.key)
        };
        if from_file.contains(&id) {
            continue;
        }
        let source = if from_preset.contains(&id) {
            format!("preset {}", preset.unwrap_or_default())
        } else {
            "default".to_string()
        };
        notes.push(format!("{id} = {} ({source})", (def.get)(&cfg)));
    }
    Ok(LoadedConfig { config: cfg, notes })
}

pub fn parse_config_file(path: &Path, preset: Option<&str>) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text, preset)
}
