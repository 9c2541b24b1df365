//! Experiment configuration files.
//!
//! One experiment per file, flat `key = value` lines with dotted section
//! keys. `#` starts a comment. Example:
//!
//! ```text
//! model = logistic
//! sampler = rmhmc
//! seed = 42
//! burn_in = 5000
//! n_samples = 5000
//! output = runs/pima
//!
//! data.path = ../data/pima.csv
//! logistic.alpha = 100
//! sampler.epsilon = 0.5
//! sampler.n1 = 6
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geomc_core::{IntegratorConfig, KernelConfig, Scheme};
use geomc_models::gpode::GpOdePriors;
use geomc_models::lgcp::LgcpParams;
use geomc_models::logistic::Expansion;
use geomc_models::stochvol::{SvParams, SvPriors};

use crate::error::ConfigError;

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed but untyped key/value pairs.
#[derive(Debug)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("invalid key `{key}`"),
                });
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line,
                    first: prev.line,
                });
            }
        }
        Ok(Self {
            entries,
            used: RefCell::new(BTreeSet::new()),
            base_dir: base_dir.into(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(e)
    }

    fn invalid(&self, key: &str, line: usize, message: impl Display) -> ConfigError {
        ConfigError::Invalid {
            key: key.to_string(),
            line,
            message: message.to_string(),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| self.invalid(key, e.line, err)),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated reals.
    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|err| self.invalid(key, e.line, err)))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// An existing file, resolved against the config directory and made
    /// absolute.
    pub fn get_existing_path(&self, key: &str) -> Result<Option<PathBuf>, ConfigError> {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        let path = self.base_dir.join(&e.value);
        match std::fs::canonicalize(&path) {
            Ok(p) => Ok(Some(p)),
            Err(_) => Err(self.invalid(key, e.line, format!("file `{}` does not exist", path.display()))),
        }
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|e| self.base_dir.join(&e.value))
    }

    fn check_positive(&self, key: &str, value: f64) -> Result<f64, ConfigError> {
        if value > 0.0 && value.is_finite() {
            Ok(value)
        } else {
            let line = self.entries.get(key).map_or(0, |e| e.line);
            Err(self.invalid(key, line, format!("must be positive, got {value}")))
        }
    }

    /// Every key must have been read by the typed layer.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, e)) => Err(ConfigError::Unknown {
                key: k.clone(),
                line: e.line,
            }),
            None => Ok(()),
        }
    }
}

/// Where the observations come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    /// Simulated from the model's generator with this seed.
    Simulate { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// Standard normal of the given dimension; a smoke-test target.
    Normal { dim: usize },
    Logistic {
        data: PathBuf,
        expansion: Expansion,
        alpha: f64,
    },
    StochVol {
        data: DataSource,
        truth: SvParams,
        t: usize,
        priors: SvPriors,
        init: SvParams,
        latent: KernelConfig,
    },
    Lgcp {
        data: DataSource,
        params: LgcpParams,
    },
    GpOde {
        data: DataSource,
        truth: Vec<f64>,
        count: usize,
        t_end: f64,
        noise: f64,
        init: Vec<f64>,
        priors: GpOdePriors,
        hyper: KernelConfig,
        gamma: KernelConfig,
    },
}

impl ModelSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ModelSpec::Normal { .. } => "normal",
            ModelSpec::Logistic { .. } => "logistic",
            ModelSpec::StochVol { .. } => "stochvol",
            ModelSpec::Lgcp { .. } => "lgcp",
            ModelSpec::GpOde { .. } => "gpode",
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub sampler: KernelConfig,
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub initial: Option<Vec<f64>>,
    pub output: PathBuf,
}

/// A secondary Gibbs block: `default` unless `<prefix> = <sampler>` is set.
fn block(raw: &RawConfig, prefix: &str, default: KernelConfig) -> Result<KernelConfig, ConfigError> {
    if raw.entries.contains_key(prefix) {
        kernel_from(raw, prefix)
    } else {
        Ok(default)
    }
}

fn kernel_from(raw: &RawConfig, prefix: &str) -> Result<KernelConfig, ConfigError> {
    let id: String = raw.require(prefix)?;
    let key = |k: &str| format!("{prefix}.{k}");
    let integrator = || -> Result<IntegratorConfig, ConfigError> {
        let epsilon: f64 = raw.require(&key("epsilon"))?;
        let n1 = raw.require(&key("n1"))?;
        let n2 = raw.get_or(&key("n2"), 1)?;
        let scheme = raw.get_or(&key("scheme"), Scheme::Scheme1)?;
        let mut ic = IntegratorConfig::new(epsilon, n1, n2, scheme);
        if let Some(limit) = raw.get(&key("energy_limit"))? {
            ic.energy_limit = limit;
        }
        ic.validate().map_err(|m| ConfigError::Invalid {
            key: key("epsilon"),
            line: raw.entries.get(&key("epsilon")).map_or(0, |e| e.line),
            message: m,
        })?;
        Ok(ic)
    };
    let line = raw.entries.get(prefix).map_or(0, |e| e.line);
    match id.as_str() {
        "metropolis" => {
            let scale = raw.check_positive(&key("scale"), raw.get_or(&key("scale"), 1.0)?)?;
            Ok(KernelConfig::metropolis(scale))
        }
        "mala" => {
            let h = raw.check_positive(&key("h"), raw.require(&key("h"))?)?;
            let h_stationary = match raw.get::<f64>(&key("h_stationary"))? {
                Some(v) => Some(raw.check_positive(&key("h_stationary"), v)?),
                None => None,
            };
            let autotune = raw.get_or(&key("autotune"), true)?;
            Ok(KernelConfig::Mala {
                h,
                h_stationary,
                autotune,
                target: (0.4, 0.6),
            })
        }
        "hmc" => Ok(KernelConfig::hmc(integrator()?)),
        "rmhmc" => Ok(KernelConfig::rmhmc(integrator()?)),
        other => Err(raw.invalid(
            prefix,
            line,
            format!("unknown sampler `{other}` (expected metropolis, mala, hmc or rmhmc)"),
        )),
    }
}

fn data_source(raw: &RawConfig, seed: u64) -> Result<DataSource, ConfigError> {
    match raw.get_existing_path("data.path")? {
        Some(p) => Ok(DataSource::File(p)),
        None => Ok(DataSource::Simulate {
            seed: raw.get_or("data.seed", seed)?,
        }),
    }
}

fn triple(raw: &RawConfig, key: &str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
    match raw.get_list(key)? {
        None => Ok(default),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(v) => Err(raw.invalid(key, raw.entries[key].line, format!("expected 3 values, got {}", v.len()))),
    }
}

fn sv_params(raw: &RawConfig, key: &str, default: [f64; 3]) -> Result<SvParams, ConfigError> {
    let [beta, sigma, phi] = triple(raw, key, default)?;
    if !(beta > 0.0 && sigma > 0.0 && phi.abs() < 1.0) {
        return Err(raw.invalid(key, raw.entries[key].line, "need β > 0, σ > 0 and |φ| < 1"));
    }
    Ok(SvParams { beta, sigma, phi })
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let seed: u64 = raw.require("seed")?;
        let burn_in = raw.require("burn_in")?;
        let n_samples = raw.require("n_samples")?;
        let output = raw.get_path("output").ok_or_else(|| ConfigError::Missing("output".into()))?;
        let sampler = kernel_from(raw, "sampler")?;
        let initial = raw.get_list("initial")?;
        let model_id: String = raw.require("model")?;
        let model = match model_id.as_str() {
            "normal" => ModelSpec::Normal {
                dim: raw.get_or("normal.dim", 1)?,
            },
            "logistic" => ModelSpec::Logistic {
                data: raw
                    .get_existing_path("data.path")?
                    .ok_or_else(|| ConfigError::Missing("data.path".into()))?,
                expansion: match raw.get_or("logistic.expansion", String::from("linear"))?.as_str() {
                    "linear" => Expansion::Linear,
                    "cubic" => Expansion::Cubic,
                    other => {
                        return Err(raw.invalid(
                            "logistic.expansion",
                            raw.entries["logistic.expansion"].line,
                            format!("unknown expansion `{other}` (expected linear or cubic)"),
                        ))
                    }
                },
                alpha: raw.check_positive("logistic.alpha", raw.get_or("logistic.alpha", 100.0)?)?,
            },
            "stochvol" => {
                let d = SvPriors::default();
                ModelSpec::StochVol {
                    data: data_source(raw, seed)?,
                    truth: sv_params(raw, "stochvol.truth", [0.65, 0.15, 0.98])?,
                    t: raw.get_or("stochvol.t", 500)?,
                    priors: SvPriors {
                        nu: raw.get_or("stochvol.prior_nu", d.nu)?,
                        s2: raw.get_or("stochvol.prior_s2", d.s2)?,
                        a: raw.get_or("stochvol.prior_a", d.a)?,
                        b: raw.get_or("stochvol.prior_b", d.b)?,
                    },
                    init: sv_params(raw, "stochvol.init", [1.0, 0.3, 0.8])?,
                    latent: block(
                        raw,
                        "latent",
                        KernelConfig::rmhmc(IntegratorConfig::new(0.1, 50, 1, Scheme::Scheme1)),
                    )?,
                }
            }
            "lgcp" => {
                let n = raw.get_or("lgcp.n", 16)?;
                let std = LgcpParams::standard(n);
                let sigma2 = raw.get_or("lgcp.sigma2", std.sigma2)?;
                ModelSpec::Lgcp {
                    data: data_source(raw, seed)?,
                    params: LgcpParams {
                        n,
                        beta: raw.check_positive("lgcp.beta", raw.get_or("lgcp.beta", std.beta)?)?,
                        sigma2,
                        mu: raw.get_or("lgcp.mu", 126f64.ln() - sigma2 / 2.0)?,
                    },
                }
            }
            "gpode" => {
                let d = GpOdePriors::default();
                let default_gp = KernelConfig::rmhmc(IntegratorConfig::new(0.5, 5, 3, Scheme::Scheme1));
                ModelSpec::GpOde {
                    data: data_source(raw, seed)?,
                    truth: raw.get_list("gpode.truth")?.unwrap_or_else(|| vec![0.2, 0.2, 3.0]),
                    count: raw.get_or("gpode.count", 40)?,
                    t_end: raw.check_positive("gpode.t_end", raw.get_or("gpode.t_end", 20.0)?)?,
                    noise: raw.get_or("gpode.noise", 0.1)?,
                    init: raw.get_list("gpode.init")?.unwrap_or_else(|| vec![1.0, 1.0, 1.0]),
                    priors: GpOdePriors {
                        hyper_log_sd: raw.get_or("gpode.hyper_log_sd", d.hyper_log_sd)?,
                        gamma_log_sd: raw.get_or("gpode.gamma_log_sd", d.gamma_log_sd)?,
                        theta_sd: raw.get_or("gpode.theta_sd", d.theta_sd)?,
                        gamma_normalizer: raw.get_or("gpode.gamma_normalizer", d.gamma_normalizer)?,
                    },
                    hyper: block(raw, "hyper", default_gp.clone())?,
                    gamma: block(raw, "gamma", default_gp)?,
                }
            }
            other => {
                return Err(raw.invalid(
                    "model",
                    raw.entries["model"].line,
                    format!("unknown model `{other}` (expected normal, logistic, stochvol, lgcp or gpode)"),
                ))
            }
        };
        raw.finish()?;
        Ok(Self {
            model,
            sampler,
            burn_in,
            n_samples,
            seed,
            initial,
            output,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::from_file(path)?)
    }

    /// Every setting, defaults included, as `key = value` pairs that parse
    /// back to an identical config. Paths are absolute when the inputs were.
    pub fn to_entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("model", self.model.id().into());
        put("seed", self.seed.to_string());
        put("burn_in", self.burn_in.to_string());
        put("n_samples", self.n_samples.to_string());
        put("output", self.output.display().to_string());
        if let Some(init) = &self.initial {
            put("initial", list(init));
        }
        kernel_entries(&mut put, "sampler", &self.sampler);
        match &self.model {
            ModelSpec::Normal { dim } => put("normal.dim", dim.to_string()),
            ModelSpec::Logistic { data, expansion, alpha } => {
                put("data.path", data.display().to_string());
                put(
                    "logistic.expansion",
                    match expansion {
                        Expansion::Linear => "linear",
                        Expansion::Cubic => "cubic",
                    }
                    .into(),
                );
                put("logistic.alpha", alpha.to_string());
            }
            ModelSpec::StochVol {
                data,
                truth,
                t,
                priors,
                init,
                latent,
            } => {
                data_entries(&mut put, data);
                put("stochvol.truth", list(&[truth.beta, truth.sigma, truth.phi]));
                put("stochvol.t", t.to_string());
                put("stochvol.prior_nu", priors.nu.to_string());
                put("stochvol.prior_s2", priors.s2.to_string());
                put("stochvol.prior_a", priors.a.to_string());
                put("stochvol.prior_b", priors.b.to_string());
                put("stochvol.init", list(&[init.beta, init.sigma, init.phi]));
                kernel_entries(&mut put, "latent", latent);
            }
            ModelSpec::Lgcp { data, params } => {
                data_entries(&mut put, data);
                put("lgcp.n", params.n.to_string());
                put("lgcp.beta", params.beta.to_string());
                put("lgcp.sigma2", params.sigma2.to_string());
                put("lgcp.mu", params.mu.to_string());
            }
            ModelSpec::GpOde {
                data,
                truth,
                count,
                t_end,
                noise,
                init,
                priors,
                hyper,
                gamma,
            } => {
                data_entries(&mut put, data);
                put("gpode.truth", list(truth));
                put("gpode.count", count.to_string());
                put("gpode.t_end", t_end.to_string());
                put("gpode.noise", noise.to_string());
                put("gpode.init", list(init));
                put("gpode.hyper_log_sd", priors.hyper_log_sd.to_string());
                put("gpode.gamma_log_sd", priors.gamma_log_sd.to_string());
                put("gpode.theta_sd", priors.theta_sd.to_string());
                put("gpode.gamma_normalizer", priors.gamma_normalizer.to_string());
                kernel_entries(&mut put, "hyper", hyper);
                kernel_entries(&mut put, "gamma", gamma);
            }
        }
        out
    }

    /// The resolved config as file text.
    pub fn to_text(&self) -> String {
        self.to_entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Rebuild from resolved entries (e.g. the `config` object of a summary).
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let text: String = entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::from_raw(&RawConfig::parse(&text, "")?)
    }
}

// Rust's float Display is the shortest string that reads back to the same
// bits, so these round-trip exactly.
fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

fn data_entries(put: &mut impl FnMut(&str, String), data: &DataSource) {
    match data {
        DataSource::File(p) => put("data.path", p.display().to_string()),
        DataSource::Simulate { seed } => put("data.seed", seed.to_string()),
    }
}

fn kernel_entries(put: &mut impl FnMut(&str, String), prefix: &str, k: &KernelConfig) {
    let key = |s: &str| format!("{prefix}.{s}");
    put(prefix, k.name().into());
    match k {
        KernelConfig::Metropolis { initial_scale, .. } => put(&key("scale"), initial_scale.to_string()),
        KernelConfig::Mala {
            h,
            h_stationary,
            autotune,
            ..
        } => {
            put(&key("h"), h.to_string());
            if let Some(hs) = h_stationary {
                put(&key("h_stationary"), hs.to_string());
            }
            put(&key("autotune"), autotune.to_string());
        }
        KernelConfig::Hmc { integrator, .. } | KernelConfig::RmHmc { integrator } => {
            put(&key("epsilon"), integrator.epsilon.to_string());
            put(&key("n1"), integrator.n1.to_string());
            put(&key("n2"), integrator.n2.to_string());
            put(
                &key("scheme"),
                match integrator.scheme {
                    Scheme::Leapfrog => "leapfrog",
                    Scheme::Scheme1 => "scheme1",
                    Scheme::Scheme2 => "scheme2",
                }
                .into(),
            );
            put(&key("energy_limit"), integrator.energy_limit.to_string());
        }
    }
}
