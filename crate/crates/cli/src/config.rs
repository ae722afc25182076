use std::path::{Path, PathBuf};

use dupire_core::{CalibrationConfig, Estimator};
use serde::Deserialize;

use crate::error::CliError;

/// Contents of a run configuration file. Relative paths are resolved
/// against the directory holding the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    pub model: PathBuf,
    pub market: MarketSection,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default)]
    pub slv: SlvSection,
    #[serde(default)]
    pub price: Option<PriceSection>,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub spot: f64,
    pub domestic: PathBuf,
    pub foreign: PathBuf,
    /// Implied-vol quotes `maturity,strike,implied_vol`.
    #[serde(default)]
    pub quotes: Option<PathBuf>,
    /// A node grid `maturity,log_moneyness,total_variance`.
    #[serde(default)]
    pub surface: Option<PathBuf>,
    #[serde(default = "default_y_nodes")]
    pub y_nodes: usize,
}

fn default_y_nodes() -> usize {
    41
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlvSection {
    /// Local-vol surface to mimic; built from the market when absent.
    #[serde(default)]
    pub local_vol: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub maturities: Vec<f64>,
    pub strikes: Vec<f64>,
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt_max: f64,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default)]
    pub local_vol: Option<PathBuf>,
    /// Leverage surface; needs a variance process in the model.
    #[serde(default)]
    pub leverage: Option<PathBuf>,
}

fn default_dt() -> f64 {
    0.01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Times at which densities, prices and martingale checks are compared.
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub dt_max: f64,
    /// Strike and maturity spacing of the local-vol grid fed to both solvers.
    pub lv_strikes: usize,
    pub lv_time_step: f64,
    /// Log-moneyness range of the round-trip and price comparisons.
    pub max_abs_log_moneyness: f64,
    pub estimator: Estimator,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            times: vec![0.5, 1.0],
            n_paths: 100_000,
            dt_max: 0.01,
            lv_strikes: 271,
            lv_time_step: 0.01,
            max_abs_log_moneyness: 0.3,
            estimator: Estimator::default(),
        }
    }
}

impl RunConfig {
    pub fn from_str(text: &str, origin: &Path) -> Result<Self, CliError> {
        let config_error =
            |field: String, msg: String| CliError::Config { path: origin.display().to_string(), field, msg };
        let de =
            toml::Deserializer::parse(text).map_err(|e| config_error("<document>".into(), e.message().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = match e.path().to_string() {
                p if p == "." => "<root>".to_string(),
                p => p,
            };
            config_error(field, e.inner().message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text, path)
    }
}

/// Resolves `p` against the config directory unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
model = "model.toml"
[market]
spot = 1.0
domestic = "d.csv"
foreign = "f.csv"
quotes = "q.csv"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_str(MINIMAL, Path::new("run.toml")).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.market.y_nodes, 41);
        assert!(c.calibration.is_none());
        assert_eq!(c.verify.times, vec![0.5, 1.0]);
    }

    #[test]
    fn type_errors_carry_the_field_path() {
        let text = MINIMAL.replace("spot = 1.0", "spot = \"one\"");
        let err = RunConfig::from_str(&text, Path::new("run.toml")).unwrap_err();
        match err {
            CliError::Config { field, .. } => assert_eq!(field, "market.spot"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_nested_keys_are_refused() {
        let text = format!("{MINIMAL}[calibration]\nstrikes = [1.0]\nmaturities = [1.0]\nn_paths = 10\nsweeps = 3\n");
        let err = RunConfig::from_str(&text, Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().contains("calibration"), "{err}");
    }
}
