//! Experiment configuration: a TOML file, `--set section.key=value`
//! overrides, and validation that names the offending field.

use std::path::{Path, PathBuf};

use ossa_core::eval::{default_tau_grid, geometric_grid};
use ossa_core::metric::{DistanceKind, FinetuneConfig, MetricOptions};
use ossa_core::pretrain::PretrainConfig;
use ossa_core::rng::derive_seed;
use ossa_core::synthdata::{DatasetSpec, SplitCounts};
use ossa_core::LrSchedule;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    7
}

/// Exactly one of `features` (an `OSSA-FEAT` file) or `synth`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub features: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            features: None,
            synth: Some(SynthConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unseen_test: usize,
    pub patch_size: usize,
    pub crop_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = DatasetSpec::desk_scale();
        Self {
            train: spec.counts.train,
            val: spec.counts.val,
            test: spec.counts.test,
            unseen_test: spec.counts.unseen_test,
            patch_size: spec.patch_size,
            crop_size: spec.crop_size,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            counts: SplitCounts {
                train: self.train,
                val: self.val,
                test: self.test,
                unseen_test: self.unseen_test,
            },
            patch_size: self.patch_size,
            crop_size: self.crop_size,
            ..DatasetSpec::desk_scale()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            embedding_dim: 64,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub enabled: bool,
    pub classes: usize,
    pub per_class: usize,
    pub patch_size: usize,
    pub crop_size: usize,
    pub epochs: u32,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_interval: u32,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::protocol(0);
        Self {
            enabled: true,
            classes: 20,
            per_class: 100,
            patch_size: 80,
            crop_size: 64,
            epochs: p.epochs,
            lr: p.schedule.base_lr(),
            lr_factor: p.schedule.decay_factor(),
            lr_interval: p.schedule.decay_interval_epochs(),
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: u32,
    /// Defaults to the protocol's base rate (pretrained or scratch).
    pub lr: Option<f64>,
    pub lr_factor: f64,
    pub lr_interval: u32,
    pub batch_size: usize,
    /// `"l2"` or `"squared-l2"`.
    pub distance: String,
    pub temperature: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let p = FinetuneConfig::pretrained(0);
        Self {
            epochs: p.epochs,
            lr: None,
            lr_factor: p.schedule.decay_factor(),
            lr_interval: p.schedule.decay_interval_epochs(),
            batch_size: p.batch_size,
            distance: "l2".into(),
            temperature: p.metric.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Operating threshold; when absent the report uses the best grid point.
    pub tau: Option<f64>,
    /// Explicit grid; overrides `grid_min`/`grid_max`/`grid_points`.
    pub grid: Option<Vec<f64>>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub hist_width: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let g = default_tau_grid();
        Self {
            tau: None,
            grid: None,
            grid_min: g[0],
            grid_max: g[g.len() - 1],
            grid_points: g.len(),
            hist_width: 0.25,
        }
    }
}

fn config_err(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Applies one `section.key=value` override. The value is parsed as a TOML
/// value, falling back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| config_err(item, "override must look like section.key=value"))?;
    let path = path.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(path, "empty key in override"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(path, format!("`{k}` is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_table(toml::Table::new()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| config_err("--config", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err("<config>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.dataset.features, &self.dataset.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(config_err("dataset", "exactly one of `features` or `synth` is required"))
            }
            (Some(p), None) if !p.is_file() => {
                return Err(config_err("dataset.features", format!("no such file: {}", p.display())))
            }
            (None, Some(s)) => {
                if s.train < 2 {
                    return Err(config_err("dataset.synth.train", "need at least 2 train samples per class"));
                }
                if s.unseen_test == 0 && s.test == 0 {
                    return Err(config_err("dataset.synth.test", "no test samples"));
                }
            }
            _ => {}
        }
        if self.model.embedding_dim == 0 {
            return Err(config_err("model.embedding_dim", "must be positive"));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden", "layer widths must be positive"));
        }
        let p = &self.pretrain;
        if p.classes < 2 {
            return Err(config_err("pretrain.classes", "need at least 2 pretext classes"));
        }
        if p.per_class == 0 {
            return Err(config_err("pretrain.per_class", "must be positive"));
        }
        check_schedule("pretrain", p.lr, p.lr_factor, p.lr_interval)?;
        if p.batch_size == 0 {
            return Err(config_err("pretrain.batch_size", "must be positive"));
        }
        let f = &self.finetune;
        check_schedule("finetune", f.lr.unwrap_or(1.0), f.lr_factor, f.lr_interval)?;
        if f.batch_size == 0 {
            return Err(config_err("finetune.batch_size", "must be positive"));
        }
        self.distance()?;
        if !(f.temperature > 0.0 && f.temperature.is_finite()) {
            return Err(config_err("finetune.temperature", "must be positive"));
        }
        let e = &self.eval;
        if let Some(t) = e.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err("eval.tau", "must be positive"));
            }
        }
        self.tau_grid()?;
        if !(e.hist_width > 0.0 && e.hist_width.is_finite()) {
            return Err(config_err("eval.hist_width", "must be positive"));
        }
        Ok(())
    }

    fn distance(&self) -> Result<DistanceKind, CliError> {
        match self.finetune.distance.as_str() {
            "l2" => Ok(DistanceKind::L2),
            "squared-l2" => Ok(DistanceKind::SquaredL2),
            other => Err(config_err(
                "finetune.distance",
                format!("unknown distance `{other}` (expected l2 or squared-l2)"),
            )),
        }
    }

    pub fn tau_grid(&self) -> Result<Vec<f64>, CliError> {
        let e = &self.eval;
        match &e.grid {
            Some(g) => {
                if g.is_empty() || g.iter().any(|t| !(*t > 0.0 && t.is_finite())) || g.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(config_err("eval.grid", "must be non-empty, positive and strictly increasing"));
                }
                Ok(g.clone())
            }
            None => geometric_grid(e.grid_min, e.grid_max, e.grid_points)
                .map_err(|err| config_err("eval.grid_points", err.to_string())),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            schedule: LrSchedule::new(p.lr, p.lr_factor, p.lr_interval).expect("validated"),
            epochs: p.epochs,
            batch_size: p.batch_size,
            ..PretrainConfig::protocol(derive_seed(self.seed, &[STREAM_PRETRAIN]))
        }
    }

    /// Protocol defaults for the chosen initialization, then file overrides.
    pub fn finetune_config(&self, pretrained: bool) -> FinetuneConfig {
        let seed = derive_seed(self.seed, &[STREAM_FINETUNE]);
        let base = if pretrained {
            FinetuneConfig::pretrained(seed)
        } else {
            FinetuneConfig::scratch(seed)
        };
        let f = &self.finetune;
        FinetuneConfig {
            schedule: LrSchedule::new(f.lr.unwrap_or(base.schedule.base_lr()), f.lr_factor, f.lr_interval)
                .expect("validated"),
            epochs: f.epochs,
            batch_size: f.batch_size,
            metric: MetricOptions {
                distance: self.distance().expect("validated"),
                temperature: f.temperature,
            },
            ..base
        }
    }
}

fn check_schedule(section: &str, lr: f64, factor: f64, interval: u32) -> Result<(), CliError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err(&format!("{section}.lr"), "must be positive"));
    }
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(config_err(&format!("{section}.lr_factor"), "must be in (0, 1]"));
    }
    if interval == 0 {
        return Err(config_err(&format!("{section}.lr_interval"), "must be positive"));
    }
    Ok(())
}

pub(crate) const STREAM_DATASET: u64 = 1;
pub(crate) const STREAM_PRETRAIN: u64 = 2;
pub(crate) const STREAM_FINETUNE: u64 = 3;
pub(crate) const STREAM_MODEL: u64 = 4;
pub(crate) const STREAM_PROXIES: u64 = 5;
pub(crate) const STREAM_PRETEXT: u64 = 6;
pub(crate) const STREAM_PATCHES: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.dataset.synth.as_ref().unwrap().train, 500);
        assert_eq!(c.finetune_config(true).schedule.base_lr(), 1e-4);
        assert_eq!(c.finetune_config(false).schedule.base_lr(), 7e-4);
        assert_eq!(c.pretrain_config().schedule.base_lr(), 0.001);
        assert_eq!(c.tau_grid().unwrap().len(), 200);
    }

    #[test]
    fn overrides_create_and_replace_keys() {
        let c = ExperimentConfig::from_toml_str(
            "[finetune]\nepochs = 3\n",
            &["finetune.epochs=5".into(), "finetune.lr=0.01".into(), "finetune.distance=squared-l2".into()],
        )
        .unwrap();
        assert_eq!(c.finetune.epochs, 5);
        assert_eq!(c.finetune_config(false).schedule.base_lr(), 0.01);
        assert_eq!(c.finetune.distance, "squared-l2");
        assert!(ExperimentConfig::from_toml_str("", &["seed".into()]).is_err());
    }

    fn field_of(r: Result<ExperimentConfig, CliError>) -> String {
        match r {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("[dataset]\nfeatures = \"/nonexistent/x.feat\"\n", "dataset.features"),
            ("[dataset]\n", "dataset"),
            ("[pretrain]\nlr = -1.0\n", "pretrain.lr"),
            ("[finetune]\nlr_interval = 0\n", "finetune.lr_interval"),
            ("[finetune]\ndistance = \"cosine\"\n", "finetune.distance"),
            ("[eval]\ngrid = [1.0, 0.5]\n", "eval.grid"),
            ("[eval]\ntau = 0.0\n", "eval.tau"),
        ];
        for (text, field) in cases {
            assert_eq!(field_of(ExperimentConfig::from_toml_str(text, &[])), field, "{text}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("[model]\nwidth = 3\n", &[]).is_err());
    }
}
