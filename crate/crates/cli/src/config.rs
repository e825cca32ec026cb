//! Pipeline configuration: a TOML document with one table per stage.
//!
//! Every key can be overridden from the command line with
//! `--set section.key=value`; the value is parsed as TOML and falls back to a
//! plain string.

use std::path::{Path, PathBuf};

use bvae_ood::bvae::BetaVaeConfig;
use bvae_ood::hpo::{SearchConfig, SearchMode, SearchSpace};
use bvae_ood::monitor::{Cusum, DEFAULT_WINDOW};
use bvae_ood::MigParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub search: SearchSection,
    pub mig: MigSection,
    pub mapping: MappingSection,
    pub monitor: MonitorSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Scene description for the training set; relative to the config file.
    pub train_spec: PathBuf,
    pub test_spec: PathBuf,
    /// Share of training frames used to fit the model; the rest calibrate.
    pub split_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub beta: f64,
    pub epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase1_fraction: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub mode: SearchMode,
    pub n: Vec<usize>,
    pub beta: Vec<f64>,
    pub budget: usize,
    pub init: usize,
    pub early_stop: usize,
    /// Training epochs per search trial; the final model uses `model.epochs`.
    pub epochs: usize,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MigSection {
    pub iterations: usize,
    pub samples_per_latent: usize,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub m: usize,
    pub reasoner_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSection {
    pub window: usize,
    pub detector_omega: f64,
    pub detector_tau: f64,
    pub reasoner_omega: f64,
    pub reasoner_tau: f64,
    /// Derived from the calibration scores when absent.
    pub change_point_omega: Option<f64>,
    pub change_point_tau: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_spec: PathBuf::from("train.sdl"),
            test_spec: PathBuf::from("test.sdl"),
            split_ratio: 2.0 / 3.0,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = BetaVaeConfig::default();
        Self {
            n: c.n,
            beta: c.beta,
            epochs: c.epochs,
            lr_phase1: c.lr_phase1,
            lr_phase2: c.lr_phase2,
            phase1_fraction: c.phase1_fraction,
            batch_size: c.batch_size,
            early_stop_patience: c.early_stop_patience,
            hidden: c.hidden,
        }
    }
}

impl Default for SearchSection {
    fn default() -> Self {
        let c = SearchConfig::default();
        Self {
            mode: c.mode,
            n: vec![5, 10, 20, 30, 40, 50],
            beta: vec![0.5, 1.0, 1.4, 2.0, 3.0, 4.0],
            budget: c.budget,
            init: c.init,
            early_stop: c.early_stop,
            epochs: BetaVaeConfig::default().epochs,
            record_wall_time: c.record_wall_time,
        }
    }
}

impl Default for MigSection {
    fn default() -> Self {
        let p = MigParams::default();
        Self {
            iterations: p.iterations,
            samples_per_latent: p.samples_per_latent,
            histogram_bins: p.histogram_bins,
        }
    }
}

impl Default for MappingSection {
    fn default() -> Self {
        Self { m: 4, reasoner_size: 1 }
    }
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            detector_omega: 14.0,
            detector_tau: 100.0,
            reasoner_omega: 18.0,
            reasoner_tau: 130.0,
            change_point_omega: None,
            change_point_tau: None,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies overrides and resolves
    /// relative spec paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: PipelineConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            for spec in [&mut config.data.train_spec, &mut config.data.test_spec] {
                if spec.is_relative() {
                    *spec = dir.join(&*spec);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(CliError::Config(format!(
                "data.split_ratio = {} must lie in (0, 1)",
                self.data.split_ratio
            )));
        }
        self.vae_config(self.model.n, self.model.beta, self.model.epochs)
            .validate()?;
        self.search_space()?;
        self.search_config().validate()?;
        if self.search.epochs == 0 {
            return Err(CliError::Config("search.epochs must be positive".into()));
        }
        self.mig_params().validate()?;
        if self.mapping.m == 0 || self.mapping.reasoner_size == 0 || self.mapping.reasoner_size > self.mapping.m {
            return Err(CliError::Config(format!(
                "mapping needs 1 <= reasoner_size <= m (got m = {}, reasoner_size = {})",
                self.mapping.m, self.mapping.reasoner_size
            )));
        }
        let smallest_n = self.search.n.iter().copied().chain([self.model.n]).min().unwrap_or(0);
        if smallest_n < self.mapping.m {
            return Err(CliError::Config(format!(
                "every latent count must be at least mapping.m = {} (smallest is {smallest_n})",
                self.mapping.m
            )));
        }
        if self.monitor.window == 0 {
            return Err(CliError::Config("monitor.window must be positive".into()));
        }
        Ok(())
    }

    /// Training configuration for a given point of the search space.
    pub fn vae_config(&self, n: usize, beta: f64, epochs: usize) -> BetaVaeConfig {
        let m = &self.model;
        BetaVaeConfig {
            n,
            beta,
            epochs,
            lr_phase1: m.lr_phase1,
            lr_phase2: m.lr_phase2,
            phase1_fraction: m.phase1_fraction,
            batch_size: m.batch_size,
            early_stop_patience: m.early_stop_patience,
            seed: self.seed,
            hidden: m.hidden.clone(),
        }
    }

    pub fn search_space(&self) -> CliResult<SearchSpace> {
        Ok(SearchSpace::new(self.search.n.clone(), self.search.beta.clone())?)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            mode: self.search.mode,
            budget: self.search.budget,
            init: self.search.init,
            early_stop: self.search.early_stop,
            seed: self.seed,
            record_wall_time: self.search.record_wall_time,
        }
    }

    pub fn mig_params(&self) -> MigParams {
        MigParams {
            iterations: self.mig.iterations,
            samples_per_latent: self.mig.samples_per_latent,
            histogram_bins: self.mig.histogram_bins,
            seed: self.seed,
        }
    }

    pub fn detector_cusum(&self) -> Cusum {
        Cusum {
            omega: self.monitor.detector_omega,
            tau: self.monitor.detector_tau,
        }
    }

    pub fn reasoner_cusum(&self) -> Cusum {
        Cusum {
            omega: self.monitor.reasoner_omega,
            tau: self.monitor.reasoner_tau,
        }
    }
}

/// Applies one `section.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty key in `{assignment}`")))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let c = PipelineConfig::load(
            None,
            &[
                "model.beta=2.5".into(),
                "search.mode=grid".into(),
                "search.n=[5, 10]".into(),
                "seed=11".into(),
                "monitor.change_point_omega=0.75".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.beta, 2.5);
        assert_eq!(c.search.mode, SearchMode::Grid);
        assert_eq!(c.search.n, vec![5, 10]);
        assert_eq!(c.seed, 11);
        assert_eq!(c.monitor.change_point_omega, Some(0.75));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(PipelineConfig::load(None, &["model.beta".into()]).is_err());
        assert!(PipelineConfig::load(None, &["model.nope=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["seed.x=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["data.split_ratio=1.5".into()]).is_err());
        assert!(PipelineConfig::load(None, &["search.n=[3, 10]".into()]).is_err());
    }

    #[test]
    fn relative_specs_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\ntrain_spec = \"a.sdl\"\n").unwrap();
        let c = PipelineConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(c.data.train_spec, dir.path().join("a.sdl"));
        assert_eq!(c.data.test_spec, dir.path().join("test.sdl"));
    }
}
