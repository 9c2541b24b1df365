//! Running one configured experiment and writing its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geomc_core::samplers::run_chain_with;
use geomc_core::toy::StandardNormal;
use geomc_core::{split_rhat, EssReport, SamplerConfig, TargetModel};
use geomc_models::gpode::{
    fhn_data, run_gpode, FitzhughNagumo, GpOdeConfig, GpOdeSampler, GpOdeState, OdeSystem, SweepError,
};
use geomc_models::lgcp::{generate, LgcpModel};
use geomc_models::logistic::{Dataset, LogisticModel};
use geomc_models::stochvol::{run_gibbs, simulate, SvSampler, SvState};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig, ModelSpec};
use crate::data::{self, fmt_real};
use crate::error::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const DATA_FILE: &str = "data.csv";
pub const RHAT_FILE: &str = "rhat.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub burn_in_seconds: f64,
    pub sampling_seconds: f64,
    pub total_seconds: f64,
}

/// Z-score applied to one raw covariate before basis expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateScaling {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub sampler: String,
    /// Dataset file name, or `simulated` for generated data.
    pub dataset: String,
    pub seed: u64,
    pub dim: usize,
    pub burn_in: usize,
    pub n_samples: usize,
    pub columns: Vec<String>,
    pub ess: EssReport,
    pub acceptance_rate: f64,
    /// Acceptance rates of the individual Gibbs blocks, when there are any.
    pub block_acceptance: BTreeMap<String, f64>,
    /// Proposals abandoned because of numerical failure.
    pub failures: usize,
    pub timings: Timings,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
    /// Covariate standardization (logistic regression only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariate_scaling: Vec<CovariateScaling>,
    /// Resolved configuration; parses back to the config that ran.
    pub config: BTreeMap<String, String>,
    /// Hash of the resolved config (minus file locations) and the data.
    pub content_hash: String,
    /// Hash of the data alone; `compare` requires these to match.
    pub data_hash: String,
}

impl Summary {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Compare(format!("{}: {e}", path.display())))
    }

    /// The config that produced this summary.
    pub fn experiment_config(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig::from_entries(
            self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        )?)
    }
}

/// Samples and bookkeeping from one chain, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub columns: Vec<String>,
    pub samples: DMatrix<f64>,
    pub accepted: Vec<bool>,
    /// Present for the HMC family.
    pub energies: Option<Vec<f64>>,
    pub burn_in_seconds: f64,
    pub sampling_seconds: f64,
    pub acceptance_rate: f64,
    pub block_acceptance: BTreeMap<String, f64>,
    pub failures: usize,
    /// Log density along burn-in (single-block models only).
    pub burn_in_log_densities: Vec<f64>,
    pub covariate_scaling: Vec<CovariateScaling>,
}

/// Observations after loading or simulating.
#[derive(Debug, Clone)]
pub enum LoadedData {
    None,
    Logistic(Dataset),
    StochVol(Vec<f64>),
    Lgcp(Vec<u64>),
    Ode { times: Vec<f64>, y: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct Inputs {
    pub data: LoadedData,
    /// Bytes hashed as the data identity (file contents or generated CSV).
    pub bytes: Vec<u8>,
    /// Generated CSV, written next to the trace.
    pub simulated: Option<String>,
    pub label: String,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn file_inputs(path: &Path, data: LoadedData) -> Result<Inputs, CliError> {
    Ok(Inputs {
        data,
        bytes: read_bytes(path)?,
        simulated: None,
        label: file_label(path),
    })
}

fn simulated_inputs(data: LoadedData, csv: String) -> Inputs {
    Inputs {
        data,
        bytes: csv.clone().into_bytes(),
        simulated: Some(csv),
        label: "simulated".into(),
    }
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs, CliError> {
    match &cfg.model {
        ModelSpec::Normal { .. } => Ok(Inputs {
            data: LoadedData::None,
            bytes: Vec::new(),
            simulated: None,
            label: "none".into(),
        }),
        ModelSpec::Logistic { data, .. } => file_inputs(data, LoadedData::Logistic(Dataset::from_csv(data)?)),
        ModelSpec::StochVol { data, truth, t, .. } => match data {
            DataSource::File(p) => file_inputs(p, LoadedData::StochVol(data::read_sv(p)?)),
            DataSource::Simulate { seed } => {
                let sim = simulate(*truth, *t, &mut ChaCha8Rng::seed_from_u64(*seed));
                Ok(simulated_inputs(LoadedData::StochVol(sim.y.clone()), data::serialize_sv(&sim)))
            }
        },
        ModelSpec::Lgcp { data, params } => match data {
            DataSource::File(p) => file_inputs(p, LoadedData::Lgcp(data::read_lgcp(p, params.n)?)),
            DataSource::Simulate { seed } => {
                let sim = generate(params, &mut ChaCha8Rng::seed_from_u64(*seed))
                    .map_err(|e| CliError::Setup(format!("cannot generate the latent field: {e}")))?;
                Ok(simulated_inputs(LoadedData::Lgcp(sim.y.clone()), data::serialize_lgcp(params.n, &sim)))
            }
        },
        ModelSpec::GpOde {
            data,
            truth,
            count,
            t_end,
            noise,
            ..
        } => match data {
            DataSource::File(p) => {
                let (times, y) = data::read_ode(p, FitzhughNagumo.n_states())?;
                file_inputs(p, LoadedData::Ode { times, y })
            }
            DataSource::Simulate { seed } => {
                if truth.len() != FitzhughNagumo.n_params() {
                    return Err(CliError::Setup(format!(
                        "gpode.truth has {} values, the system has {} parameters",
                        truth.len(),
                        FitzhughNagumo.n_params()
                    )));
                }
                if *count < 2 {
                    return Err(CliError::Setup("gpode.count must be at least 2".into()));
                }
                let sim = fhn_data(truth, *count, *t_end, *noise, &mut ChaCha8Rng::seed_from_u64(*seed));
                let csv = data::serialize_ode(&sim);
                Ok(simulated_inputs(
                    LoadedData::Ode {
                        times: sim.times,
                        y: sim.y,
                    },
                    csv,
                ))
            }
        },
    }
}

fn trace_output(trace: geomc_core::ChainTrace, columns: Vec<String>) -> RunOutput {
    RunOutput {
        columns,
        samples: trace.samples,
        accepted: trace.accepted,
        energies: trace.energies,
        burn_in_seconds: trace.burn_in_seconds,
        sampling_seconds: trace.sampling_seconds,
        acceptance_rate: trace.acceptance_rate,
        block_acceptance: BTreeMap::new(),
        failures: trace.failures,
        burn_in_log_densities: trace.burn_in_log_densities,
        covariate_scaling: Vec::new(),
    }
}

fn sweep_error(e: SweepError) -> CliError {
    match e.source {
        geomc_core::SamplerError::Config(m) => CliError::Setup(format!("{}: {m}", e.stage)),
        _ if e.stage == "setup" => CliError::Setup(e.to_string()),
        _ => CliError::Sampling(e.to_string()),
    }
}

fn rate(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|a| **a).count() as f64 / flags.len() as f64
    }
}

/// Run the sampler for `cfg` with chain seed `seed`.
pub fn sample(cfg: &ExperimentConfig, inputs: &Inputs, seed: u64) -> Result<RunOutput, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = SamplerConfig::new(cfg.sampler.clone(), cfg.burn_in, cfg.n_samples, seed);
    chain.initial = cfg.initial.clone();
    let names = |prefix: &str, d: usize| (1..=d).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>();

    match (&cfg.model, &inputs.data) {
        (ModelSpec::Normal { dim }, _) => {
            let trace = run_chain_with(&StandardNormal { dim: *dim }, &chain, &mut rng)?;
            Ok(trace_output(trace, names("x", *dim)))
        }
        (ModelSpec::Logistic { expansion, alpha, .. }, LoadedData::Logistic(ds)) => {
            let model = LogisticModel::from_dataset(ds, *expansion, *alpha)?;
            let trace = run_chain_with(&model, &chain, &mut rng)?;
            let mut out = trace_output(trace, names("beta_", model.dim()));
            out.covariate_scaling = ds
                .names
                .iter()
                .zip(model.scaling())
                .map(|(name, s)| CovariateScaling {
                    name: name.clone(),
                    mean: s.mean,
                    sd: s.sd,
                })
                .collect();
            Ok(out)
        }
        (ModelSpec::Lgcp { params, .. }, LoadedData::Lgcp(y)) => {
            let model = LgcpModel::new(*params, y).map_err(|e| CliError::Setup(e.to_string()))?;
            let trace = run_chain_with(&model, &chain, &mut rng)?;
            let n = params.n;
            let columns = (0..n * n).map(|k| format!("x_{}_{}", k / n + 1, k % n + 1)).collect();
            Ok(trace_output(trace, columns))
        }
        (
            ModelSpec::StochVol {
                priors, init, latent, ..
            },
            LoadedData::StochVol(y),
        ) => {
            if cfg.initial.is_some() {
                return Err(CliError::Setup("use stochvol.init for the stochastic volatility model".into()));
            }
            let state = SvState {
                theta: init.transformed(),
                x: vec![0.0; y.len()],
            };
            let mut sampler = SvSampler::new(&cfg.sampler, latent, y, &state, *priors)?;
            let run = run_gibbs(y, state, &mut sampler, cfg.burn_in, cfg.n_samples, &mut rng)?;
            let block_acceptance = BTreeMap::from([
                ("params".to_string(), run.param_acceptance),
                ("latent".to_string(), run.latent_acceptance),
            ]);
            Ok(RunOutput {
                columns: vec!["beta".into(), "sigma".into(), "phi".into()],
                samples: run.params,
                acceptance_rate: rate(&run.param_accepted),
                accepted: run.param_accepted,
                energies: run.param_energies.filter(|_| cfg.sampler.records_energy()),
                burn_in_seconds: run.burn_in_seconds,
                sampling_seconds: run.sampling_seconds,
                block_acceptance,
                failures: 0,
                burn_in_log_densities: Vec::new(),
                covariate_scaling: Vec::new(),
            })
        }
        (
            ModelSpec::GpOde {
                init,
                priors,
                hyper,
                gamma,
                ..
            },
            LoadedData::Ode { times, y },
        ) => {
            if cfg.initial.is_some() {
                return Err(CliError::Setup("use gpode.init for the ODE model".into()));
            }
            let system = FitzhughNagumo;
            if init.len() != system.n_params() {
                return Err(CliError::Setup(format!(
                    "gpode.init has {} values, the system has {} parameters",
                    init.len(),
                    system.n_params()
                )));
            }
            let state = GpOdeState::initial(times, y, init.clone())
                .map_err(|e| CliError::Setup(format!("initial state: {e}")))?;
            let config = GpOdeConfig {
                hyper: hyper.clone(),
                gamma: gamma.clone(),
                theta: cfg.sampler.clone(),
                priors: *priors,
            };
            let mut sampler = GpOdeSampler::new(&system, times, y, &config, &state).map_err(sweep_error)?;
            let run = run_gpode(&mut sampler, state, cfg.burn_in, cfg.n_samples, &mut rng).map_err(sweep_error)?;
            let mut block_acceptance = BTreeMap::new();
            for (k, a) in run.hyper_acceptance.iter().enumerate() {
                block_acceptance.insert(format!("hyper_{}", k + 1), *a);
            }
            block_acceptance.insert("gamma".into(), run.gamma_acceptance);
            block_acceptance.insert("theta".into(), run.theta_acceptance);
            Ok(RunOutput {
                columns: vec!["a".into(), "b".into(), "c".into()],
                samples: run.theta,
                acceptance_rate: run.theta_acceptance,
                accepted: run.theta_accepted,
                energies: run.theta_energies.filter(|_| cfg.sampler.records_energy()),
                burn_in_seconds: run.burn_in_seconds,
                sampling_seconds: run.sampling_seconds,
                block_acceptance,
                failures: 0,
                burn_in_log_densities: Vec::new(),
                covariate_scaling: Vec::new(),
            })
        }
        _ => unreachable!("inputs are loaded from the same config"),
    }
}

/// `trace.csv`: one row per sample, coordinates then `accepted` and, for
/// the HMC family, `energy`.
pub fn trace_csv(out: &RunOutput) -> String {
    let mut header = out.columns.clone();
    header.push("accepted".into());
    if out.energies.is_some() {
        header.push("energy".into());
    }
    let mut text = header.join(",") + "\n";
    for i in 0..out.samples.nrows() {
        let mut row: Vec<String> = out.samples.row(i).iter().map(|v| fmt_real(*v)).collect();
        row.push(u8::from(out.accepted[i]).to_string());
        if let Some(e) = &out.energies {
            row.push(fmt_real(e[i]));
        }
        text += &row.join(",");
        text.push('\n');
    }
    text
}

fn git_style_hash(parts: &[&[u8]]) -> String {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    for p in parts {
        h.update(p);
    }
    format!("sha256:{}", hex::encode(h.finalize()))
}

pub fn summarize(cfg: &ExperimentConfig, inputs: &Inputs, out: &RunOutput) -> Summary {
    let n = out.samples.nrows();
    let d = out.samples.ncols();
    let columns: Vec<Vec<f64>> = (0..d).map(|k| out.samples.column(k).iter().copied().collect()).collect();
    let (mean, sd) = if n == 0 {
        (Vec::new(), Vec::new())
    } else {
        let mean: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let sd = columns
            .iter()
            .zip(&mean)
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt())
            .collect();
        (mean, sd)
    };
    let entries = cfg.to_entries();
    let hashed: String = entries
        .iter()
        // Where the files live does not change what ran; the data bytes are
        // hashed separately.
        .filter(|(k, _)| k != "output" && k != "data.path")
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    Summary {
        model: cfg.model.id().into(),
        sampler: cfg.sampler.name().into(),
        dataset: inputs.label.clone(),
        seed: cfg.seed,
        dim: d,
        burn_in: cfg.burn_in,
        n_samples: cfg.n_samples,
        columns: out.columns.clone(),
        ess: EssReport::from_columns(&columns, out.sampling_seconds, out.acceptance_rate),
        acceptance_rate: out.acceptance_rate,
        block_acceptance: out.block_acceptance.clone(),
        failures: out.failures,
        timings: Timings {
            burn_in_seconds: out.burn_in_seconds,
            sampling_seconds: out.sampling_seconds,
            total_seconds: out.burn_in_seconds + out.sampling_seconds,
        },
        posterior_mean: mean,
        posterior_sd: sd,
        covariate_scaling: out.covariate_scaling.clone(),
        config: entries.into_iter().collect(),
        content_hash: git_style_hash(&[hashed.as_bytes(), &inputs.bytes]),
        data_hash: git_style_hash(&[&inputs.bytes]),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn write_artifacts(cfg: &ExperimentConfig, inputs: &Inputs, out: &RunOutput) -> Result<Summary, CliError> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let summary = summarize(cfg, inputs, out);
    write(&dir.join(TRACE_FILE), trace_csv(out))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join(SUMMARY_FILE), json + "\n")?;
    write(&dir.join(RESOLVED_FILE), cfg.to_text())?;
    if let Some(csv) = &inputs.simulated {
        write(&dir.join(DATA_FILE), csv)?;
    }
    Ok(summary)
}

/// Run a single chain and write trace, summary and resolved config into
/// `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let inputs = load_inputs(cfg)?;
    let out = sample(cfg, &inputs, cfg.seed)?;
    write_artifacts(cfg, &inputs, &out)
}

/// Split-chain R̂ per coordinate across replicate chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatReport {
    pub columns: Vec<String>,
    pub split_rhat: Vec<f64>,
}

/// Independent chains with seeds `seed + i`, each written to
/// `output/chain-i`, plus `rhat.json` when there are enough samples.
pub fn run_chains(cfg: &ExperimentConfig, chains: usize, threads: usize) -> Result<Vec<Summary>, CliError> {
    if chains == 0 {
        return Err(CliError::Setup("--chains must be at least 1".into()));
    }
    let inputs = load_inputs(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Setup(format!("thread pool: {e}")))?;
    let configs: Vec<ExperimentConfig> = (0..chains)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            c.output = cfg.output.join(format!("chain-{i}"));
            c
        })
        .collect();
    let results: Vec<Result<(Summary, RunOutput), CliError>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let out = sample(c, &inputs, c.seed)?;
                Ok((write_artifacts(c, &inputs, &out)?, out))
            })
            .collect()
    });
    let mut summaries = Vec::with_capacity(chains);
    let mut outputs = Vec::with_capacity(chains);
    for r in results {
        let (s, o) = r?;
        summaries.push(s);
        outputs.push(o);
    }
    if chains >= 2 && cfg.n_samples >= 4 {
        let d = outputs[0].samples.ncols();
        let split_rhat = (0..d)
            .map(|k| {
                let cols: Vec<Vec<f64>> = outputs.iter().map(|o| o.samples.column(k).iter().copied().collect()).collect();
                let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
                split_rhat(&refs).unwrap_or(f64::NAN)
            })
            .collect();
        let report = RhatReport {
            columns: outputs[0].columns.clone(),
            split_rhat,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write(&cfg.output.join(RHAT_FILE), json + "\n")?;
    }
    Ok(summaries)
}

/// Chain parallelism: `GEODESIC_MC_THREADS` if set, else the core count.
pub fn thread_limit() -> Result<usize, CliError> {
    match std::env::var("GEODESIC_MC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Setup(format!("GEODESIC_MC_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

