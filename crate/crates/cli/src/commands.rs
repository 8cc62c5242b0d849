//! Command implementations: simulate, sigma-solve, oracle-compare, stp.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use qdc_core::control::SigmaSolution;
use qdc_core::discrete::{average_map, build_kraus, KrausMode};
use qdc_core::engine::{
    run_ensemble, stp_discrepancy, write_records, write_summary, Policy, Scenario, ScenarioConfig,
    StpProtocol,
};
use qdc_core::linalg::max_abs;
use qdc_core::model::{exact_propagate, DensityOperator};

use crate::config::load_config;
use crate::CliError;

/// Provenance record written before any results.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub cfg_path: String,
    pub cfg_hash: String,
    pub seed: u64,
    pub out_dir: String,
    pub tool_version: String,
    pub wall_clock: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg_path: &Path,
    cfg_hash: &str,
    seed: u64,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::numeric(format!("cannot create {}: {e}", out_dir.display())))?;
    let manifest = RunManifest {
        command: command.to_string(),
        cfg_path: cfg_path.display().to_string(),
        cfg_hash: cfg_hash.to_string(),
        seed,
        out_dir: out_dir.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock: chrono::Utc::now().to_rfc3339(),
    };
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::numeric(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, body + "\n")
        .map_err(|e| CliError::numeric(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = out_dir.join(name);
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::numeric(format!("serialization of {name}: {e}")))?;
    std::fs::write(&path, body + "\n")
        .map_err(|e| CliError::numeric(format!("cannot write {}: {e}", path.display())))
}

pub fn parse_policy(text: &str) -> Result<Policy, CliError> {
    match text {
        "closed" => Ok(Policy::ClosedLoop),
        "open" => Ok(Policy::OpenLoop),
        other => {
            if let Some(value) = other.strip_prefix("fixed=") {
                let u: f64 = value.parse().map_err(|_| {
                    CliError::config(format!("policy fixed=<u> needs a number, got `{value}`"))
                })?;
                Ok(Policy::Fixed(u))
            } else {
                Err(CliError::config(format!(
                    "unknown policy `{other}` (expected closed, open, or fixed=<u>)"
                )))
            }
        }
    }
}

pub fn load_scenario(cfg_path: &Path) -> Result<(Scenario, ScenarioConfig, String), CliError> {
    let (config, bytes) = load_config(cfg_path)?;
    let scenario = config.build()?;
    Ok((scenario, config, sha256_hex(&bytes)))
}

pub fn simulate(
    cfg_path: &Path,
    policy_text: &str,
    n_override: Option<usize>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let policy = parse_policy(policy_text)?;
    let (mut scenario, _config, cfg_hash) = load_scenario(cfg_path)?;
    if let Some(seed) = seed_override {
        scenario.config.base_seed = seed;
    }
    let n = n_override.unwrap_or(scenario.config.ensemble);

    write_manifest(out_dir, "simulate", cfg_path, &cfg_hash, scenario.config.base_seed)?;

    let solution = scenario.solve_sigma()?;
    write_json(out_dir, "sigma.json", &solution)?;

    let (summary, records) = run_ensemble(&scenario, &solution.spec, n, policy)?;
    write_records(
        &out_dir.join("records.jsonl"),
        &cfg_hash,
        scenario.config.mode,
        &records,
    )?;
    write_summary(&out_dir.join("summary.json"), &summary)?;

    println!(
        "simulate: {} trajectories, policy {}, converged {}/{} (frac {:.4})",
        summary.n, policy, summary.converged, summary.n, summary.conv_frac
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SigmaFile {
    #[serde(flatten)]
    solution: SigmaSolution,
    target_action: usize,
}

pub fn sigma_solve(
    cfg_path: &Path,
    target_override: Option<usize>,
    eps_override: Option<f64>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (mut scenario, _config, cfg_hash) = load_scenario(cfg_path)?;
    if let Some(target) = target_override {
        if target >= scenario.config.actions {
            return Err(CliError::config(format!(
                "target action {target} out of range (actions: {})",
                scenario.config.actions
            )));
        }
        scenario.config.target_action = target;
    }
    if let Some(eps) = eps_override {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(CliError::config(format!(
                "epsilon must be strictly positive, got {eps}"
            )));
        }
        scenario.config.epsilon = eps;
    }

    write_manifest(out_dir, "sigma-solve", cfg_path, &cfg_hash, scenario.config.base_seed)?;

    let solution = scenario.solve_sigma()?;
    let file = SigmaFile {
        target_action: scenario.config.target_action,
        solution,
    };
    write_json(out_dir, "sigma.json", &file)?;
    println!(
        "sigma-solve: target basis {} epsilon {:.6} slack {:.3e}",
        file.solution.spec.target, file.solution.spec.epsilon, file.solution.slack
    );
    for (r, c) in file.solution.curvatures.iter().enumerate() {
        println!("  curvature[{r}] = {c:+.6e}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LadderRow {
    dt: f64,
    one_step_error: f64,
}

#[derive(Debug, Serialize)]
struct ConvergenceTable {
    rows: Vec<LadderRow>,
    slope: f64,
}

pub fn oracle_compare(cfg_path: &Path, ladder_text: &str, out_dir: &Path) -> Result<(), CliError> {
    let (scenario, _config, cfg_hash) = load_scenario(cfg_path)?;
    let ladder: Vec<f64> = ladder_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("bad dt value `{s}` in ladder")))
        })
        .collect::<Result<_, _>>()?;
    if ladder.len() < 3 {
        return Err(CliError::config(format!(
            "dt ladder needs at least 3 values, got {}",
            ladder.len()
        )));
    }
    if ladder.iter().any(|&dt| !(dt > 0.0)) {
        return Err(CliError::config("dt values must be positive".to_string()));
    }

    write_manifest(out_dir, "oracle-compare", cfg_path, &cfg_hash, scenario.config.base_seed)?;

    let gen = scenario.model.generator(&scenario.prior)?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(scenario.config.base_seed);
    let rho = DensityOperator::new(qdc_core::linalg::random_density(
        scenario.dims().dim(),
        &mut rng,
    ))?;

    let mut rows = Vec::with_capacity(ladder.len());
    for &dt in &ladder {
        let ks = build_kraus(&gen, 0.0, 1, dt, KrausMode::PaperFaithful)?;
        let approx = average_map(&rho, &ks);
        let exact = exact_propagate(&gen, &rho, dt)?;
        let err = max_abs(&(approx.matrix() - exact.matrix()));
        rows.push(LadderRow {
            dt,
            one_step_error: err,
        });
    }

    // Least-squares slope of ln(err) against ln(dt).
    let n = rows.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for row in &rows {
        let x = row.dt.ln();
        let y = row.one_step_error.max(1e-300).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);

    let table = ConvergenceTable { rows, slope };
    write_json(out_dir, "convergence.json", &table)?;
    for row in &table.rows {
        println!("dt={:<8} one-step error={:.6e}", row.dt, row.one_step_error);
    }
    println!("fitted log-log slope: {slope:.4}");
    if slope < 1.8 {
        return Err(CliError::suite(format!(
            "convergence order {slope:.4} below 1.8"
        )));
    }
    Ok(())
}

fn parse_action_list(text: &str, actions: usize) -> Result<Vec<usize>, CliError> {
    let list: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(format!("bad action index `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if list.iter().any(|&a| a >= actions) {
        return Err(CliError::config(format!(
            "action index out of range (actions: {actions})"
        )));
    }
    Ok(list)
}

pub fn stp(
    cfg_path: &Path,
    alpha_override: Option<f64>,
    a_text: &str,
    b_text: &str,
    before: u32,
    between: u32,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (_, mut config, cfg_hash) = load_scenario(cfg_path)?;
    if let Some(alpha) = alpha_override {
        config.alpha = alpha;
    }
    let scenario = config.build()?;
    let a_actions = parse_action_list(a_text, scenario.config.actions)?;
    let b_actions = parse_action_list(b_text, scenario.config.actions)?;

    write_manifest(out_dir, "stp", cfg_path, &cfg_hash, scenario.config.base_seed)?;

    let result = stp_discrepancy(
        &scenario,
        &a_actions,
        &b_actions,
        StpProtocol {
            intervals_before_b: before,
            intervals_between: between,
        },
    )?;
    write_json(out_dir, "stp.json", &result)?;
    println!(
        "stp: P(A) = {:.12} total-probability = {:.12} gap = {:+.6e}",
        result.p_direct, result.p_total, result.gap
    );
    Ok(())
}

