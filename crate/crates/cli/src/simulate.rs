//! The `simulate` verb: write a synthetic dataset CSV.
//!
//! Parameters are `key=value` arguments, e.g.
//! `simulate stochvol beta=0.65 sigma=0.15 phi=0.98 t=500 seed=3`.

use geomc_models::gpode::fhn_data;
use geomc_models::lgcp::{generate, LgcpParams};
use geomc_models::stochvol::{simulate as simulate_sv, SvParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RawConfig;
use crate::data;
use crate::error::{CliError, ConfigError};

/// Dataset CSV text for `model` with the given `key=value` parameters.
/// Errors refer to parameters by position (1-based) as the line number.
pub fn simulate(model: &str, params: &[String]) -> Result<String, CliError> {
    let text: String = params
        .iter()
        .map(|p| {
            if p.contains('=') {
                Ok(format!("{p}\n"))
            } else {
                Err(ConfigError::Syntax {
                    line: 0,
                    message: format!("parameter `{p}` is not of the form key=value"),
                })
            }
        })
        .collect::<Result<_, _>>()?;
    let raw = RawConfig::parse(&text, "")?;
    let seed: u64 = raw.get_or("seed", 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let csv = match model {
        "stochvol" => {
            let p = SvParams {
                beta: raw.get_or("beta", 0.65)?,
                sigma: raw.get_or("sigma", 0.15)?,
                phi: raw.get_or("phi", 0.98)?,
            };
            let t: usize = raw.get_or("t", 500)?;
            if !(p.beta > 0.0 && p.sigma > 0.0 && p.phi.abs() < 1.0) || t < 2 {
                return Err(CliError::Setup("need beta > 0, sigma > 0, |phi| < 1 and t ≥ 2".into()));
            }
            raw.finish()?;
            data::serialize_sv(&simulate_sv(p, t, &mut rng))
        }
        "lgcp" => {
            let n: usize = raw.get_or("n", 16)?;
            let std = LgcpParams::standard(n);
            let sigma2 = raw.get_or("sigma2", std.sigma2)?;
            let params = LgcpParams {
                n,
                beta: raw.get_or("beta", std.beta)?,
                sigma2,
                mu: raw.get_or("mu", 126f64.ln() - sigma2 / 2.0)?,
            };
            raw.finish()?;
            let sim = generate(&params, &mut rng).map_err(|e| CliError::Setup(e.to_string()))?;
            data::serialize_lgcp(n, &sim)
        }
        "fhn" | "gpode" => {
            let theta = [
                raw.get_or("a", 0.2)?,
                raw.get_or("b", 0.2)?,
                raw.get_or("c", 3.0)?,
            ];
            let count: usize = raw.get_or("count", 40)?;
            let t_end: f64 = raw.get_or("t_end", 20.0)?;
            let noise: f64 = raw.get_or("noise", 0.1)?;
            if count < 2 || t_end <= 0.0 || noise < 0.0 {
                return Err(CliError::Setup("need count ≥ 2, t_end > 0 and noise ≥ 0".into()));
            }
            raw.finish()?;
            data::serialize_ode(&fhn_data(&theta, count, t_end, noise, &mut rng))
        }
        other => {
            return Err(CliError::Setup(format!(
                "unknown model `{other}` (expected stochvol, lgcp or fhn)"
            )))
        }
    };
    Ok(csv)
}
