//! Run configuration file: schema, strict parsing, and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use s2h_core::data::{gen_synthetic, load_csv, load_idx, Splits, SyntheticKind};
use s2h_core::pruner::PruneRunConfig;
use s2h_core::{validate_model, ModelSpec};

use crate::error::CliError;

/// Environment variable that replaces `output_dir`.
pub const OUT_ENV: &str = "S2HPRUNE_OUT";

/// Keys people reach for when they mean the FLOPs target.
const TARGET_ALIASES: [&str; 7] = ["flop_target", "flops_target", "target", "flops", "budget", "target_flops", "t"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        num_classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Spirals {
        n: usize,
        num_classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// MNIST-style image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
    /// Header row with a `label` column; every other column is a feature.
    Csv { path: PathBuf },
}

fn default_noise() -> f64 {
    0.6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomBaselineConfig {
    /// Accepted distance between the sampled hard FLOPs ratio and `T`.
    pub tolerance: f64,
    pub max_attempts: usize,
}

impl Default for RandomBaselineConfig {
    fn default() -> Self {
        RandomBaselineConfig {
            tolerance: 0.01,
            max_attempts: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub prune: PruneRunConfig,
    /// Seeds initialization, data generation and split, and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Soft-only checkpoint that a `finetune` run starts from.
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
    /// Epochs between periodic checkpoints.
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub random_baseline: RandomBaselineConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_every() -> usize {
    10
}

fn json_path(p: &str) -> String {
    if p.is_empty() || p == "." {
        "$".to_string()
    } else {
        format!("$.{p}")
    }
}

/// Best replacement for an unknown key among `expected`.
pub fn suggest_key(unknown: &str, expected: &[&str]) -> Option<String> {
    if expected.contains(&"T") && TARGET_ALIASES.contains(&unknown.to_ascii_lowercase().as_str()) {
        return Some("T".to_string());
    }
    expected
        .iter()
        .map(|e| (strsim::levenshtein(&unknown.to_ascii_lowercase(), &e.to_ascii_lowercase()), *e))
        .filter(|&(d, e)| d <= 2.max(e.len() / 3))
        .min()
        .map(|(_, e)| e.to_string())
}

/// Pulls the key and candidates out of serde's "unknown field" message.
fn parse_unknown(msg: &str) -> Option<(String, Vec<String>)> {
    let rest = msg.strip_prefix("unknown field `")?;
    let (key, rest) = rest.split_once('`')?;
    let expected = rest
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect::<Vec<_>>();
    Some((key.to_string(), expected))
}

fn parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let msg = inner.to_string();
    let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
    if let Some((key, expected)) = parse_unknown(&msg) {
        let refs: Vec<&str> = expected.iter().map(String::as_str).collect();
        let parent = path.strip_suffix(&format!(".{key}")).unwrap_or(&path);
        let at = if parent == key { "$".into() } else { json_path(parent) };
        let hint = match suggest_key(&key, &refs) {
            Some(s) => format!("; did you mean `{s}`?"),
            None => format!("; expected one of {}", expected.join(", ")),
        };
        return CliError::Config {
            path: at,
            message: format!("unknown key `{key}`{hint}"),
        };
    }
    CliError::Config {
        path: json_path(&path),
        message: msg,
    }
}

/// Parses and validates a configuration document. Relative paths are left
/// as written; see [`RunConfigFile::resolve_paths`].
pub fn parse_config_str(text: &str) -> Result<RunConfigFile, CliError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config {
        path: "$".into(),
        message: format!("malformed JSON: {e}"),
    })?;
    if raw.pointer("/prune/seed").is_some() {
        return Err(CliError::Config {
            path: "$.prune.seed".into(),
            message: "the run seed is set by the top-level `seed` key".into(),
        });
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: RunConfigFile = serde_path_to_error::deserialize(&mut de).map_err(parse_error)?;
    let mut cfg = cfg;
    cfg.prune.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut cfg = parse_config_str(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

impl RunConfigFile {
    /// Cross-field checks. FLOPs feasibility is left to the trainer.
    pub fn validate(&self) -> Result<(), CliError> {
        self.prune.validate().map_err(|e| match e {
            s2h_core::Error::Config { path, message } => CliError::Config {
                path: json_path(&format!("prune.{path}")),
                message,
            },
            other => other.into(),
        })?;
        if let Err(diags) = validate_model(&self.model) {
            let first = &diags[0];
            return Err(CliError::Config {
                path: format!("$.model.layers[{}]", first.node),
                message: diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
            });
        }
        if self.checkpoint_every == 0 {
            return Err(CliError::Config {
                path: "$.checkpoint_every".into(),
                message: "must be at least 1".into(),
            });
        }
        let rb = self.random_baseline;
        if !(rb.tolerance > 0.0 && rb.tolerance < 1.0) || rb.max_attempts == 0 {
            return Err(CliError::Config {
                path: "$.random_baseline".into(),
                message: "tolerance must lie in (0, 1) and max_attempts be positive".into(),
            });
        }
        match self.dataset {
            DatasetSpec::Blobs { n, num_classes, noise } | DatasetSpec::Spirals { n, num_classes, noise } => {
                if num_classes != self.model.num_classes {
                    return Err(CliError::Config {
                        path: "$.dataset.num_classes".into(),
                        message: format!("{num_classes} classes, model has {}", self.model.num_classes),
                    });
                }
                if self.model.input.shape != [2] {
                    return Err(CliError::Config {
                        path: "$.model.input.shape".into(),
                        message: "synthetic datasets are two-dimensional; input shape must be [2]".into(),
                    });
                }
                if n < 2 * num_classes || !(noise >= 0.0 && noise.is_finite()) {
                    return Err(CliError::Config {
                        path: "$.dataset".into(),
                        message: format!("need n >= 2 * num_classes and finite noise >= 0, got n={n}, noise={noise}"),
                    });
                }
            }
            DatasetSpec::Idx { .. } | DatasetSpec::Csv { .. } => {}
        }
        Ok(())
    }

    /// Makes relative file paths relative to `base` (the config's folder).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSpec::Csv { path } => fix(path),
            _ => {}
        }
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.source_checkpoint {
            fix(p);
        }
    }

    /// Applies the `--seed` flag and the output override.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
            self.prune.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
    }

    /// Train/validation splits for this run.
    pub fn load_data(&self) -> Result<Splits, CliError> {
        let splits = match &self.dataset {
            DatasetSpec::Blobs { n, num_classes, noise } => {
                gen_synthetic(SyntheticKind::Blobs, *n, *num_classes, *noise, self.seed)?
            }
            DatasetSpec::Spirals { n, num_classes, noise } => {
                gen_synthetic(SyntheticKind::Spirals, *n, *num_classes, *noise, self.seed)?
            }
            DatasetSpec::Idx { images, labels } => load_idx(images, labels)?.split(self.seed)?,
            DatasetSpec::Csv { path } => load_csv(path)?.split(self.seed)?,
        };
        if splits.train.feature_shape() != self.model.input.shape.as_slice() {
            return Err(CliError::Config {
                path: "$.model.input.shape".into(),
                message: format!(
                    "dataset features have shape {:?}, model expects {:?}",
                    splits.train.feature_shape(),
                    self.model.input.shape
                ),
            });
        }
        if splits.train.num_classes > self.model.num_classes {
            return Err(CliError::Config {
                path: "$.model.num_classes".into(),
                message: format!("dataset has {} classes, model {}", splits.train.num_classes, self.model.num_classes),
            });
        }
        Ok(splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {
            "input": {"shape": [2], "group": "in"},
            "num_classes": 3,
            "groups": [
                {"id": "in", "channels": 2, "fixed": true},
                {"id": "h1", "channels": 8},
                {"id": "out", "channels": 3, "fixed": true}
            ],
            "layers": [
                {"id": "fc1", "kind": "linear", "inputs": ["input"], "group": "h1"},
                {"id": "relu1", "kind": "relu", "inputs": ["fc1"]},
                {"id": "fc2", "kind": "linear", "inputs": ["relu1"], "group": "out"}
            ]
        },
        "dataset": {"kind": "blobs", "n": 300, "num_classes": 3},
        "prune": {"T": 0.5}
    }"#;

    fn with_prune(prune: &str) -> String {
        MINIMAL.replace(r#""prune": {"T": 0.5}"#, &format!(r#""prune": {prune}"#))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.prune.beta, 0.5);
        assert_eq!(cfg.prune.gamma, 5.0);
        assert_eq!(cfg.prune.rho, 5.0);
        assert_eq!(cfg.prune.target, 0.5);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.checkpoint_every, 10);
        assert!(matches!(cfg.dataset, DatasetSpec::Blobs { noise, .. } if noise == 0.6));
    }

    #[test]
    fn target_out_of_range_names_the_path() {
        let err = parse_config_str(&with_prune(r#"{"T": 1.5}"#)).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "$.prune.T"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_suggests_target() {
        let err = parse_config_str(&with_prune(r#"{"T": 0.5, "flop_target": 0.3}"#)).unwrap_err();
        let line = err.to_string();
        assert!(line.contains("$.prune"), "{line}");
        assert!(line.contains("unknown key `flop_target`") && line.contains("did you mean `T`"), "{line}");

        let err = parse_config_str(&with_prune(r#"{"T": 0.5, "gama": 1}"#)).unwrap_err();
        assert!(err.to_string().contains("did you mean `gamma`"), "{err}");

        let err = parse_config_str(&MINIMAL.replacen('{', r#"{"sede": 1, "#, 1)).unwrap_err();
        assert!(err.to_string().contains("did you mean `seed`"), "{err}");
    }

    #[test]
    fn type_mismatch_and_missing_target() {
        let err = parse_config_str(&with_prune(r#"{"T": "half"}"#)).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "$.prune.T"), "{err}");
        let err = parse_config_str(&with_prune(r#"{"beta": 1}"#)).unwrap_err();
        assert!(err.to_string().contains("`T`"), "{err}");
        let err = parse_config_str(&with_prune(r#"{"T": 0.5, "seed": 3}"#)).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "$.prune.seed"));
    }

    #[test]
    fn dataset_must_fit_the_model() {
        let text = MINIMAL.replace(r#""n": 300, "num_classes": 3"#, r#""n": 300, "num_classes": 4"#);
        let err = parse_config_str(&text).unwrap_err();
        assert!(matches!(&err, CliError::Config { path, .. } if path == "$.dataset.num_classes"), "{err}");
    }

    #[test]
    fn suggestions() {
        assert_eq!(suggest_key("flop_target", &["mode", "T", "beta"]).as_deref(), Some("T"));
        assert_eq!(suggest_key("epoch", &["epochs", "seed"]).as_deref(), Some("epochs"));
        assert_eq!(suggest_key("zzzzzzzz", &["epochs", "seed"]), None);
    }
}
