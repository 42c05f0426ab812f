//! Run configuration: one TOML file with per-subcommand sections. Every key
//! has a pinned default, unknown keys are rejected, and command-line flags
//! override file values. The effective configuration is echoed into each
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use graphrom::coarsen::RetentionProfile;
use graphrom::dataset::{Doe, SplitSpec, SyntheticCase};
use graphrom::gcn::AdamConfig;
use graphrom::hpo::{OptimizeConfig, SearchSpace};
use graphrom::mwls::MwlsParams;
use graphrom::training::{MomentPenalty, TrainConfig};

use crate::CliError;

/// Top-level configuration; sections map one-to-one onto subcommands plus
/// shared geometry/numerics settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    /// Worker threads; 0 picks the number of logical cores.
    pub threads: usize,
    pub paths: PathsSection,
    pub case: CaseSection,
    pub doe: DoeSection,
    pub coarsening: CoarseningSection,
    pub mwls: MwlsSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub hpo: HpoSection,
    pub aero: AeroSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            paths: PathsSection::default(),
            case: CaseSection::default(),
            doe: DoeSection::default(),
            coarsening: CoarseningSection::default(),
            mwls: MwlsSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            hpo: HpoSection::default(),
            aero: AeroSection::default(),
        }
    }
}

/// Offsets added to the root seed, one per random stream, so reruns of any
/// subcommand reproduce bit-identically and streams never collide.
pub mod seed_offsets {
    pub const DOE: u64 = 0;
    pub const SPLIT: u64 = 1;
    /// First pooling level; the second level uses this plus one.
    pub const LEVELS: u64 = 2;
    pub const MODEL_INIT: u64 = 4;
    pub const TRAIN_SHUFFLE: u64 = 5;
    pub const HPO: u64 = 6;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// Serialize the effective configuration into `dir/config_<command>.toml`.
    pub fn echo(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Usage(format!("config echo: {e}")))?;
        let path = dir.join(format!("config_{command}.toml"));
        std::fs::write(&path, text)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Directory the dataset is generated into and read from.
    pub data_dir: PathBuf,
    /// Directory for checkpoints, logs, and metric reports.
    pub out_dir: PathBuf,
    /// Levels checkpoint; defaults to `<out_dir>/levels.grom`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out_dir>/model.grom`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            levels: None,
            model: None,
        }
    }
}

impl PathsSection {
    pub fn levels_file(&self) -> PathBuf {
        self.levels.clone().unwrap_or_else(|| self.out_dir.join("levels.grom"))
    }

    pub fn model_file(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out_dir.join("model.grom"))
    }
}

/// Geometry and field-shape parameters of the synthetic transonic-wing case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseSection {
    pub nx: usize,
    pub ny: usize,
    pub chord: f64,
    pub span: f64,
    pub sweep_deg: f64,
    pub taper: f64,
    pub shock_delta: f64,
    pub load_scale: f64,
    pub shock_x0: f64,
    pub shock_per_mach: f64,
    pub shock_per_aoa: f64,
}

impl Default for CaseSection {
    fn default() -> Self {
        let c = SyntheticCase::default();
        CaseSection {
            nx: c.nx,
            ny: c.ny,
            chord: c.chord,
            span: c.span,
            sweep_deg: c.sweep_deg,
            taper: c.taper,
            shock_delta: c.shock_delta,
            load_scale: c.load_scale,
            shock_x0: c.shock_x0,
            shock_per_mach: c.shock_per_mach,
            shock_per_aoa: c.shock_per_aoa,
        }
    }
}

impl CaseSection {
    pub fn to_case(&self) -> Result<SyntheticCase, CliError> {
        let case = SyntheticCase {
            nx: self.nx,
            ny: self.ny,
            chord: self.chord,
            span: self.span,
            sweep_deg: self.sweep_deg,
            taper: self.taper,
            shock_delta: self.shock_delta,
            load_scale: self.load_scale,
            shock_x0: self.shock_x0,
            shock_per_mach: self.shock_per_mach,
            shock_per_aoa: self.shock_per_aoa,
        };
        case.validate().map_err(|e| CliError::Usage(format!("[case] {e}")))?;
        Ok(case)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeSection {
    pub n_samples: usize,
    pub aoa_range: [f64; 2],
    pub mach_range: [f64; 2],
    /// Exact train/val/test sizes; must sum to `n_samples`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_counts: Option<[usize; 3]>,
    /// Train/val/test fractions summing to one; exclusive with counts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_fractions: Option<[f64; 3]>,
}

impl Default for DoeSection {
    fn default() -> Self {
        let d = Doe::default();
        DoeSection {
            n_samples: d.n_samples,
            aoa_range: d.aoa_range,
            mach_range: d.mach_range,
            split_counts: None,
            split_fractions: None,
        }
    }
}

impl DoeSection {
    pub fn to_doe(&self, seed: u64) -> Result<Doe, CliError> {
        let doe = Doe {
            aoa_range: self.aoa_range,
            mach_range: self.mach_range,
            n_samples: self.n_samples,
            seed,
        };
        doe.validate().map_err(|e| CliError::Usage(format!("[doe] {e}")))?;
        Ok(doe)
    }

    pub fn split_spec(&self) -> Result<SplitSpec, CliError> {
        match (self.split_counts, self.split_fractions) {
            (Some(_), Some(_)) => Err(CliError::Usage(
                "[doe] split_counts and split_fractions are mutually exclusive".into(),
            )),
            (Some(counts), None) => Ok(SplitSpec::Counts(counts)),
            (None, Some(fractions)) => Ok(SplitSpec::Fractions(fractions)),
            (None, None) => Ok(SplitSpec::Counts([40, 15, 15])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseningSection {
    /// Pooling ratio of each of the two levels.
    pub ratios: [f64; 2],
    /// Retention-weight offset at the highest-gradient rank.
    pub p1: f64,
    /// Retention weight at the lowest-gradient rank.
    pub pn: f64,
}

impl Default for CoarseningSection {
    fn default() -> Self {
        let p = RetentionProfile::default();
        CoarseningSection { ratios: [1.0 / 3.0, 1.0 / 3.0], p1: p.p1, pn: p.pn }
    }
}

impl CoarseningSection {
    pub fn profile(&self) -> RetentionProfile {
        RetentionProfile { p1: self.p1, pn: self.pn }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwlsSection {
    pub k_n: usize,
    pub ridge_scale: f64,
    pub fallback_tol: f64,
}

impl Default for MwlsSection {
    fn default() -> Self {
        let m = MwlsParams::default();
        MwlsSection { k_n: m.k_n, ridge_scale: m.ridge_scale, fallback_tol: m.fallback_tol }
    }
}

impl MwlsSection {
    pub fn params(&self) -> MwlsParams {
        MwlsParams {
            k_n: self.k_n,
            ridge_scale: self.ridge_scale,
            fallback_tol: self.fallback_tol,
        }
    }
}

/// Network widths; the pooling ratios joining them come from the levels
/// checkpoint at train time, so they are not repeated here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_blocks: Vec<Vec<usize>>,
    pub reduced_block: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder_blocks: vec![vec![64], vec![64, 64], vec![64]],
            reduced_block: vec![64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    /// Weight of the pitching-moment loss term.
    pub lambda: f64,
    pub penalty: MomentPenalty,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainingSection {
            epochs: 300,
            lr0: adam.lr0,
            decay_factor: adam.decay_factor,
            decay_interval: adam.decay_interval,
            lambda: 0.01,
            penalty: MomentPenalty::AbsoluteError,
        }
    }
}

impl TrainingSection {
    /// Training configuration with the given epoch budget and shuffle seed.
    pub fn to_train_config(&self, epochs: usize, seed: u64) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            epochs,
            adam: AdamConfig {
                lr0: self.lr0,
                decay_factor: self.decay_factor,
                decay_interval: self.decay_interval,
                ..AdamConfig::default()
            },
            batch_size: 1,
            lambda: self.lambda,
            penalty: self.penalty,
            seed,
        };
        config.validate().map_err(|e| CliError::Usage(format!("[training] {e}")))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSection {
    pub n_trials: usize,
    pub n_init: usize,
    pub n_candidates: usize,
    /// Per-trial training budget; kept well below a final fit's.
    pub epochs: usize,
    pub ratios: Vec<f64>,
    pub min_layers: usize,
    pub max_layers: usize,
    pub width_min: usize,
    pub width_max: usize,
    pub width_step: usize,
}

impl Default for HpoSection {
    fn default() -> Self {
        let o = OptimizeConfig::default();
        let s = SearchSpace::default();
        HpoSection {
            n_trials: o.n_trials,
            n_init: o.n_init,
            n_candidates: o.n_candidates,
            epochs: 100,
            ratios: s.ratios,
            min_layers: s.min_layers,
            max_layers: s.max_layers,
            width_min: s.width_min,
            width_max: s.width_max,
            width_step: s.width_step,
        }
    }
}

impl HpoSection {
    pub fn space(&self) -> Result<SearchSpace, CliError> {
        let space = SearchSpace {
            ratios: self.ratios.clone(),
            min_layers: self.min_layers,
            max_layers: self.max_layers,
            width_min: self.width_min,
            width_max: self.width_max,
            width_step: self.width_step,
        };
        space.validate().map_err(|e| CliError::Usage(format!("[hpo] {e}")))?;
        Ok(space)
    }

    pub fn optimize_config(&self, seed: u64) -> Result<OptimizeConfig, CliError> {
        let config = OptimizeConfig {
            n_trials: self.n_trials,
            n_init: self.n_init,
            n_candidates: self.n_candidates,
            seed,
        };
        config.validate().map_err(|e| CliError::Usage(format!("[hpo] {e}")))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeroSection {
    /// Moment reference point as a chord fraction behind the leading edge.
    pub moment_fraction: f64,
    /// Span station of the moment reference point.
    pub span_y: f64,
}

impl Default for AeroSection {
    fn default() -> Self {
        AeroSection { moment_fraction: 0.25, span_y: 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_and_reload_unchanged() {
        let config = RunConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let reloaded: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(reloaded, config);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let config: RunConfig = toml::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.doe.n_samples, 70);
        assert_eq!(config.training.epochs, 300);
        assert_eq!(config.hpo.n_trials, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let top = toml::from_str::<RunConfig>("learning_rate = 0.1");
        assert!(top.is_err());
        let nested = toml::from_str::<RunConfig>("[training]\nlr = 0.1");
        assert!(nested.unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn penalty_parses_from_snake_case() {
        let config: RunConfig =
            toml::from_str("[training]\npenalty = \"squared_error\"").unwrap();
        assert_eq!(config.training.penalty, MomentPenalty::SquaredError);
        assert!(toml::from_str::<RunConfig>("[training]\npenalty = \"l2\"").is_err());
    }

    #[test]
    fn split_spec_resolution() {
        let mut section = DoeSection::default();
        assert_eq!(section.split_spec().unwrap(), SplitSpec::Counts([40, 15, 15]));
        section.split_counts = Some([5, 2, 1]);
        assert_eq!(section.split_spec().unwrap(), SplitSpec::Counts([5, 2, 1]));
        section.split_fractions = Some([0.6, 0.2, 0.2]);
        assert!(section.split_spec().is_err());
    }

    #[test]
    fn path_defaults_derive_from_out_dir() {
        let paths = PathsSection::default();
        assert_eq!(paths.levels_file(), PathBuf::from("runs/levels.grom"));
        let custom = PathsSection { model: Some(PathBuf::from("m.grom")), ..paths };
        assert_eq!(custom.model_file(), PathBuf::from("m.grom"));
    }

    #[test]
    fn invalid_section_values_surface_as_usage_errors() {
        let case = CaseSection { taper: -1.0, ..CaseSection::default() };
        let err = case.to_case().unwrap_err();
        assert!(err.to_string().contains("[case]"));
        let doe: DoeSection =
            toml::from_str("n_samples = 0\naoa_range = [0.0, 5.0]\nmach_range = [0.7, 0.84]")
                .unwrap();
        assert!(doe.to_doe(0).is_err());
    }
}
