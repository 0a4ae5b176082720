//! Experiment configuration: one flat TOML file per experiment, with the
//! grid, profile, replica count, seed, and kind-specific parameters.
//! CLI flags override the file.

use crate::fields::VarianceProfile;
use crate::lattice::GridSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Values a caller (CLI flags, environment) supplies on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub output: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct RawConfig {
    kind: String,
    side: u32,
    replicas: Option<usize>,
    seed: Option<u64>,
    output: Option<String>,
    #[serde(default)]
    relaxed_profile: bool,
    profile: Option<RawProfile>,
    #[serde(default)]
    params: toml::Table,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

macro_rules! params_struct {
    ($name:ident { $($(#[$doc:meta])* $field:ident : $ty:ty = $default:expr),+ $(,)? }) => {
        #[derive(Clone, Debug, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
        pub struct $name {
            $($(#[$doc])* pub $field: $ty),+
        }
        impl Default for $name {
            fn default() -> $name {
                $name { $($field: $default),+ }
            }
        }
    };
}

params_struct!(CovarianceParams {
    /// per-entry deviation allowance, in standard-error units
    se_bound: f64 = 5.0,
});

params_struct!(TailParams {
    window: [f64; 2] = [0.0, 2.0],
    /// "survival" or "density"
    mode: String = "survival".into(),
    rate_range: [f64; 2] = [1.2, 2.8],
});

params_struct!(SeparationParams {
    radii: Vec<i64> = vec![2, 8],
    c: f64 = 1.0,
});

params_struct!(LocalizationParams {
    m_window: i64 = 2,
    gamma: f64 = 0.25,
    t: f64 = 2.0,
});

params_struct!(ClusterParams {
    r: i64 = 6,
    t: f64 = 0.0,
    /// relative tolerance of the profile slope against 2σ(1)
    slope_tolerance: f64 = 0.35,
});

params_struct!(InvarianceParams {
    /// smoothing time
    t: f64 = 1.25,
    /// local-maximum radius for the extremal process
    r: i64 = 2,
    laplace_slack: f64 = 0.05,
});

params_struct!(ThreeFieldParams {
    big_k: u32 = 2,
    big_l: u32 = 2,
    big_kp: u32 = 4,
    big_lp: u32 = 4,
    kolmogorov_bound: f64 = 0.2,
    /// boundary shrink fraction defining the comparison region
    delta: f64 = 0.25,
});

params_struct!(CouplingRunParams {
    big_k: u32 = 4,
    big_l: u32 = 4,
    big_kp: u32 = 4,
    big_lp: u32 = 4,
    gamma: f64 = 0.25,
    beta_star: f64 = 0.35,
    z_grid: Vec<f64> = vec![0.5, 1.0, 1.5],
    doubled_exponent: bool = false,
    laplace_bound: f64 = 0.1,
});

params_struct!(SlepianParams {
    /// QMC points per instance
    budget: usize = 8192,
    max_dim: usize = 3,
});

#[derive(Clone, Debug)]
pub enum ExperimentKind {
    CovarianceCheck(CovarianceParams),
    Tail(TailParams),
    Separation(SeparationParams),
    Localization(LocalizationParams),
    Cluster(ClusterParams),
    Invariance(InvarianceParams),
    ThreeField(ThreeFieldParams),
    Coupling(CouplingRunParams),
    SlepianSweep(SlepianParams),
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::CovarianceCheck(_) => "covariance-check",
            ExperimentKind::Tail(_) => "tail",
            ExperimentKind::Separation(_) => "separation",
            ExperimentKind::Localization(_) => "localization",
            ExperimentKind::Cluster(_) => "cluster",
            ExperimentKind::Invariance(_) => "invariance",
            ExperimentKind::ThreeField(_) => "three-field",
            ExperimentKind::Coupling(_) => "coupling",
            ExperimentKind::SlepianSweep(_) => "slepian-sweep",
        }
    }

    /// The normalized parameter table (defaults filled in), used for
    /// hashing and the manifest echo.
    fn params_table(&self) -> Result<toml::Table> {
        let value = match self {
            ExperimentKind::CovarianceCheck(p) => toml::Value::try_from(p),
            ExperimentKind::Tail(p) => toml::Value::try_from(p),
            ExperimentKind::Separation(p) => toml::Value::try_from(p),
            ExperimentKind::Localization(p) => toml::Value::try_from(p),
            ExperimentKind::Cluster(p) => toml::Value::try_from(p),
            ExperimentKind::Invariance(p) => toml::Value::try_from(p),
            ExperimentKind::ThreeField(p) => toml::Value::try_from(p),
            ExperimentKind::Coupling(p) => toml::Value::try_from(p),
            ExperimentKind::SlepianSweep(p) => toml::Value::try_from(p),
        }
        .map_err(|e| Error::Config(format!("cannot normalize parameters: {e}")))?;
        match value {
            toml::Value::Table(t) => Ok(t),
            _ => Err(Error::Config("parameters are not a table".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub spec: GridSpec,
    pub profile: VarianceProfile,
    pub replicas: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub relaxed_profile: bool,
}

fn parse_params<T: serde::de::DeserializeOwned>(table: toml::Table, kind: &str) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("bad parameters for kind '{kind}': {e}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        let kind = match raw.kind.as_str() {
            "covariance-check" => {
                ExperimentKind::CovarianceCheck(parse_params(raw.params, &raw.kind)?)
            }
            "tail" => ExperimentKind::Tail(parse_params(raw.params, &raw.kind)?),
            "separation" => ExperimentKind::Separation(parse_params(raw.params, &raw.kind)?),
            "localization" => ExperimentKind::Localization(parse_params(raw.params, &raw.kind)?),
            "cluster" => ExperimentKind::Cluster(parse_params(raw.params, &raw.kind)?),
            "invariance" => ExperimentKind::Invariance(parse_params(raw.params, &raw.kind)?),
            "three-field" => ExperimentKind::ThreeField(parse_params(raw.params, &raw.kind)?),
            "coupling" => ExperimentKind::Coupling(parse_params(raw.params, &raw.kind)?),
            "slepian-sweep" => ExperimentKind::SlepianSweep(parse_params(raw.params, &raw.kind)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment kind '{other}'; expected one of covariance-check, \
                     tail, separation, localization, cluster, invariance, three-field, \
                     coupling, slepian-sweep"
                )))
            }
        };
        let spec = GridSpec::new(raw.side)?;
        let profile = match raw.profile {
            None => VarianceProfile::standard_two_scale(),
            Some(p) if raw.relaxed_profile => VarianceProfile::new_relaxed(p.breakpoints, p.values)?,
            Some(p) => VarianceProfile::new(p.breakpoints, p.values)?,
        };
        let replicas = overrides
            .replicas
            .or(raw.replicas)
            .ok_or_else(|| Error::Config("replica count missing".into()))?;
        if replicas == 0 {
            return Err(Error::Config("replicas must be ≥ 1".into()));
        }
        let seed = overrides
            .seed
            .or(raw.seed)
            .ok_or_else(|| Error::Config("no seed: set `seed` in the config, --seed, or SIGF_SEED".into()))?;
        let output = overrides
            .output
            .clone()
            .or_else(|| raw.output.map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(format!("out/{}", kind.name())));
        Ok(ExperimentConfig {
            kind,
            spec,
            profile,
            replicas,
            seed,
            output,
            relaxed_profile: raw.relaxed_profile,
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading {}: {e}", path.display()),
            ))
        })?;
        Self::from_toml_str(&text, overrides)
    }

    /// SHA-256 over the canonical serialization of every result-affecting
    /// parameter (the output directory is location, not substance).
    pub fn config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Canonical<'a> {
            kind: &'a str,
            side: u32,
            replicas: usize,
            seed: u64,
            relaxed_profile: bool,
            profile_breakpoints: &'a [f64],
            profile_values: &'a [f64],
            params: toml::Table,
        }
        let canon = Canonical {
            kind: self.kind.name(),
            side: self.spec.side(),
            replicas: self.replicas,
            seed: self.seed,
            relaxed_profile: self.relaxed_profile,
            profile_breakpoints: self.profile.breakpoints(),
            profile_values: self.profile.values_sq(),
            params: self.kind.params_table()?,
        };
        let text = toml::to_string(&canon)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}
