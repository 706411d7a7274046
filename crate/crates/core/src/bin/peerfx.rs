//! Batch command-line entry point: simulation, estimation, Monte Carlo
//! replication, counterfactual shocks and identification checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use peerfx::counterfactual::{apply_shock, multiplier_distribution, ShockKind, ShockScenario};
use peerfx::dgp::{generate_dataset, run_all, summarize, DgpConfig, DgpVariant};
use peerfx::diagnostics;
use peerfx::error::{Error, Result};
use peerfx::gmm::{fit_with, recover_fixed_effects, FitOptions, GmmFit, ModelSpec, ModelVariant};
use peerfx::ingest::{export, ingest, IngestOptions, IngestedData};
use peerfx::netform::{
    bootstrap_vcov, build_control_bases, build_dyad_covariates, fit_dyadic_logit,
    fit_second_stage, DyadSpec,
};
use peerfx::netgraph::{
    check_distance3, check_linmaps_independence, check_variance_identification,
};
use peerfx::varcomp::{fit_varcomp, qml_vcov};

#[derive(Parser)]
#[command(name = "peerfx", version, about = "Peer-effects estimation for school networks")]
struct Cli {
    /// Master seed for anything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset from a configured generating process and write
    /// it as nodes/edges CSVs.
    Simulate(ConfigArgs),
    /// Fit a model to ingested data.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo replication harness.
    Mc(ConfigArgs),
    /// Propagate a counterfactual shock.
    Shock(ShockArgs),
    /// Run the graph-based identification checks.
    CheckIdent(DataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// Categorical covariate columns as `column=omitted_category`.
    #[arg(long)]
    categorical: Vec<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model variant 1-4.
    #[arg(long, default_value_t = 4)]
    model: u8,
    #[arg(long, default_value_t = 2)]
    instrument_power: usize,
    /// Two-step efficient GMM with the clustered weight.
    #[arg(long)]
    two_step: bool,
    /// Also estimate error-variance components by concentrated QML.
    #[arg(long)]
    varcomp: bool,
    /// Endogenous-network correction: dyadic-logit first stage plus
    /// control-function bases.
    #[arg(long)]
    endogenous: bool,
    /// Bootstrap replicates for the two-stage pipeline (requires
    /// --endogenous).
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct ShockArgs {
    #[command(flatten)]
    data: DataArgs,
    /// alpha | pref | fe2 | fe3
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1.0)]
    magnitude: f64,
    /// Peer effect used for propagation.
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    bin_width: f64,
}

#[derive(Deserialize)]
struct RunToml {
    #[serde(default = "default_variant")]
    variant: String,
    #[serde(default = "default_schools")]
    schools: usize,
    #[serde(default = "default_school_size")]
    school_size: usize,
    #[serde(default = "default_replications")]
    replications: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default = "default_beta")]
    beta: [f64; 2],
    #[serde(default = "default_gamma")]
    gamma: [f64; 2],
    #[serde(default = "default_sigma_eta2")]
    sigma_eta2: f64,
    #[serde(default = "default_sigma_eps2")]
    sigma_eps2: f64,
    #[serde(default = "default_rho")]
    rho: f64,
    #[serde(default = "default_power")]
    instrument_power: usize,
    #[serde(default = "default_models")]
    models: Vec<u8>,
    #[serde(default = "default_varcomp_models")]
    varcomp_models: Vec<u8>,
}

fn default_variant() -> String {
    "A".into()
}
fn default_schools() -> usize {
    20
}
fn default_school_size() -> usize {
    50
}
fn default_replications() -> usize {
    200
}
fn default_lambda() -> f64 {
    0.7
}
fn default_beta() -> [f64; 2] {
    [1.0, 1.5]
}
fn default_gamma() -> [f64; 2] {
    [5.0, -3.0]
}
fn default_sigma_eta2() -> f64 {
    15.0
}
fn default_sigma_eps2() -> f64 {
    8.0
}
fn default_rho() -> f64 {
    0.4
}
fn default_power() -> usize {
    2
}
fn default_models() -> Vec<u8> {
    vec![1, 2, 3, 4]
}
fn default_varcomp_models() -> Vec<u8> {
    vec![3, 4]
}

fn model_variant(m: u8) -> Result<ModelVariant> {
    match m {
        1 => Ok(ModelVariant::Model1),
        2 => Ok(ModelVariant::Model2),
        3 => Ok(ModelVariant::Model3),
        4 => Ok(ModelVariant::Model4),
        _ => Err(Error::Cli(format!("unknown model variant {m}"))),
    }
}

fn load_dgp_config(path: &Path, seed_override: u64) -> Result<DgpConfig> {
    let text = fs::read_to_string(path)?;
    let t: RunToml = toml::from_str(&text).map_err(|e| Error::Cli(format!("config: {e}")))?;
    let variant = match t.variant.as_str() {
        "A" | "a" => DgpVariant::A,
        "B" | "b" => DgpVariant::B,
        "C" | "c" => DgpVariant::C,
        other => return Err(Error::Cli(format!("unknown variant '{other}'"))),
    };
    let models = t
        .models
        .iter()
        .map(|&m| model_variant(m))
        .collect::<Result<Vec<_>>>()?;
    let varcomp_models = t
        .varcomp_models
        .iter()
        .map(|&m| model_variant(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(DgpConfig {
        s_count: t.schools,
        n_s: t.school_size,
        variant,
        replications: t.replications,
        master_seed: if seed_override != 0 { seed_override } else { t.seed },
        lambda: t.lambda,
        beta: t.beta,
        gamma: t.gamma,
        sigma_eta2: t.sigma_eta2,
        sigma_eps2: t.sigma_eps2,
        rho: t.rho,
        instrument_power: t.instrument_power,
        models,
        varcomp_models,
    })
}

fn ingest_args(args: &DataArgs) -> Result<IngestedData> {
    let mut opts = IngestOptions::default();
    for spec in &args.categorical {
        let (col, omit) = spec
            .split_once('=')
            .ok_or_else(|| Error::Cli(format!("--categorical '{spec}': expected column=omitted")))?;
        opts.categorical.push((col.to_string(), omit.to_string()));
    }
    ingest(&args.nodes, &args.edges, &opts)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    rank_rel_tolerance: f64,
    warnings: Vec<String>,
}

fn write_meta(out: &Path, command: &str, seed: u64, warnings: Vec<String>) -> Result<()> {
    let meta = RunMeta {
        command,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        rank_rel_tolerance: 1e-8,
        warnings,
    };
    fs::write(
        out.join("run_meta.json"),
        serde_json::to_string_pretty(&meta).expect("serializable"),
    )?;
    Ok(())
}

fn cmd_simulate(cli: &Cli, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_dgp_config(&args.config, cli.seed)?;
    cfg.replications = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let ds = generate_dataset(&cfg, &mut rng)?;
    let x_names = vec!["x1".to_string(), "x2".to_string()];
    export(
        &cli.out.join("nodes.csv"),
        &cli.out.join("edges.csv"),
        &ds.nets,
        &ds.data,
        &x_names,
        None,
        true,
    )?;
    let params = json!({
        "variant": cfg.variant.name(),
        "lambda": ds.params.lambda,
        "beta": ds.params.beta.as_slice(),
        "gamma": ds.params.gamma.as_slice(),
        "alpha": ds.params.alpha,
        "c": ds.params.c,
        "sigma_eta2": ds.params.sigma_eta2,
        "sigma_eps2": ds.params.sigma_eps2,
        "rho": ds.params.rho,
    });
    write_json(&cli.out.join("params.json"), &params)?;
    write_meta(&cli.out, "simulate", cfg.master_seed, vec![])?;
    Ok(())
}

fn fit_to_json(fit: &GmmFit, se_qml: Option<&DMatrix<f64>>) -> serde_json::Value {
    let coefficients: Vec<serde_json::Value> = fit
        .design
        .coef_labels
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = json!({
                "name": name,
                "estimate": fit.coef[i],
                "se_white": fit.vcov_white[(i, i)].max(0.0).sqrt(),
            });
            if let Some(v) = se_qml {
                row["se_qml"] = json!(v[(i, i)].max(0.0).sqrt());
            }
            row
        })
        .collect();
    json!({
        "model": fit.design.spec.variant.name(),
        "instrument_power": fit.design.spec.instrument_power,
        "coefficients": coefficients,
        "excluded_instruments": fit.design.excluded_labels,
        "lambda_in_region": fit.lambda_in_region,
        "warnings": fit.warnings,
    })
}

fn cmd_estimate(cli: &Cli, args: &EstimateArgs) -> Result<()> {
    let ing = ingest_args(&args.data)?;
    if !ing.has_gpa {
        return Err(Error::Cli("estimation requires a gpa column".into()));
    }
    let spec = ModelSpec {
        variant: model_variant(args.model)?,
        instrument_power: args.instrument_power,
    };
    let mut warnings = ing.warnings.clone();

    let (fit, endogenous_block) = if args.endogenous {
        let xs: Vec<DMatrix<f64>> = ing.data.iter().map(|d| d.x.clone()).collect();
        let dyad_spec = DyadSpec::all_numeric(ing.x_names.len());
        let covs = build_dyad_covariates(&xs, &dyad_spec, Some(&ing.x_names))?;
        let first = fit_dyadic_logit(&ing.nets, &covs, 500)?;
        warnings.extend(first.warnings.clone());
        let bases = build_control_bases(&first)?;
        warnings.extend(bases.warnings.clone());
        let (fit, basis_test) = fit_second_stage(&spec, &ing.nets, &ing.data, &bases)?;
        let boot = match args.bootstrap {
            Some(b) => {
                let out = bootstrap_vcov(
                    &ing.nets,
                    &ing.data,
                    &dyad_spec,
                    &spec,
                    b,
                    cli.seed,
                    0.95,
                )?;
                Some(json!({
                    "replicates": out.n_total,
                    "successes": out.n_success,
                    "labels": out.labels,
                    "sd": (0..out.labels.len())
                        .map(|i| out.vcov[(i, i)].max(0.0).sqrt())
                        .collect::<Vec<f64>>(),
                    "percentile_lo": out.lo,
                    "percentile_hi": out.hi,
                }))
            }
            None => None,
        };
        let block = json!({
            "first_stage": {
                "coefficients": first.labels.iter().zip(first.beta.iter())
                    .map(|(l, v)| json!({"name": l, "estimate": v}))
                    .collect::<Vec<_>>(),
                "loglik": first.loglik,
                "converged": first.converged,
            },
            "basis_joint_test": {
                "stat": basis_test.stat,
                "df": basis_test.df,
                "p": basis_test.p,
            },
            "bootstrap": boot,
        });
        // First-stage per-node summary CSV.
        let mut w = csv::Writer::from_path(cli.out.join("first_stage_mu.csv"))?;
        w.write_record(["school_id", "node_id", "mu_out", "mu_in"])?;
        for (s, net) in ing.nets.iter().enumerate() {
            for i in 0..net.n {
                let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([
                    net.school_id.as_str(),
                    ing.node_ids[s][i].as_str(),
                    &fmt(&first.mu_out[s][i]),
                    &fmt(&first.mu_in[s][i]),
                ])?;
            }
        }
        w.flush()?;
        (fit, Some(block))
    } else {
        let opts = FitOptions {
            two_step: args.two_step,
            x_names: Some(ing.x_names.clone()),
            ..Default::default()
        };
        (fit_with(&spec, &ing.nets, &ing.data, &opts)?, None)
    };

    let vc = if args.varcomp {
        Some(fit_varcomp(&fit)?)
    } else {
        None
    };
    let vcov_qml = match &vc {
        Some(vc) => Some(qml_vcov(&fit, vc)?),
        None => None,
    };
    let report = diagnostics::report(&fit, vc.as_ref(), None)?;
    let fes = recover_fixed_effects(&fit, &ing.nets)?;

    let mut doc = fit_to_json(&fit, vcov_qml.as_ref());
    doc["diagnostics"] = json!({
        "weak_iv_f": report.weak_iv_f,
        "sargan_stat": report.sargan_stat,
        "sargan_df": report.sargan_df,
        "sargan_p": report.sargan_p,
    });
    if let Some(vc) = &vc {
        doc["variance_components"] = json!({
            "sigma_eps2": vc.sigma_eps2,
            "sigma_eta2": vc.sigma_eta2,
            "rho": vc.rho,
            "tau": vc.tau,
            "llh": vc.llh,
            "converged": vc.converged,
            "boundary": vc.boundary,
        });
    }
    doc["fixed_effects"] = json!({
        "school_ids": ing.school_ids,
        "kappa_iso": fes.kappa_iso,
        "kappa_noniso": fes.kappa_noniso,
        "dummy_coef": fes.dummy_coef,
        "global_const": fes.global_const,
    });
    if let Some(block) = endogenous_block {
        doc["endogenous"] = block;
    }
    warnings.extend(fit.warnings.clone());
    write_json(&cli.out.join("estimate.json"), &doc)?;
    write_meta(&cli.out, "estimate", cli.seed, warnings)?;
    Ok(())
}

fn cmd_mc(cli: &Cli, args: &ConfigArgs) -> Result<()> {
    let cfg = load_dgp_config(&args.config, cli.seed)?;
    let records = run_all(&cfg);
    let rows = summarize(&records)?;

    let mut raw = csv::Writer::from_path(cli.out.join("mc_raw.csv"))?;
    raw.write_record(["rep", "model", "param", "value"])?;
    for rec in &records {
        for m in &rec.models {
            for (label, value) in &m.coefs {
                raw.write_record([
                    rec.rep.to_string(),
                    m.model.clone(),
                    label.clone(),
                    value.to_string(),
                ])?;
            }
            for (label, value) in [
                ("sigma_eps2", m.sigma_eps2),
                ("sigma_eta2", m.sigma_eta2),
                ("rho", m.rho),
            ] {
                if let Some(v) = value {
                    raw.write_record([
                        rec.rep.to_string(),
                        m.model.clone(),
                        label.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    raw.flush()?;

    let mut sw = csv::Writer::from_path(cli.out.join("mc_summary.csv"))?;
    sw.write_record(["model", "param", "mean", "sd", "n"])?;
    for r in &rows {
        sw.write_record([
            r.model.clone(),
            r.param.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.n.to_string(),
        ])?;
    }
    sw.flush()?;

    let failed: Vec<String> = records
        .iter()
        .filter(|r| !r.ok)
        .map(|r| format!("rep {}: {}", r.rep, r.error.clone().unwrap_or_default()))
        .collect();
    // The 90th-percentile estimator: nearest rank. Recorded so the summary
    // is reproducible from metadata alone.
    let mut warnings = vec!["q90 quantiles use the nearest-rank estimator".to_string()];
    warnings.extend(failed);
    write_meta(&cli.out, "mc", cfg.master_seed, warnings)?;
    Ok(())
}

fn cmd_shock(cli: &Cli, args: &ShockArgs) -> Result<()> {
    let ing = ingest_args(&args.data)?;
    let kind = match args.kind.as_str() {
        "alpha" => ShockKind::Alpha,
        "pref" => ShockKind::Preference,
        "fe2" => ShockKind::FixedEffectUniform,
        "fe3" => ShockKind::FixedEffectNonIsolated,
        other => return Err(Error::Cli(format!("unknown shock kind '{other}'"))),
    };
    let scenario = ShockScenario {
        kind,
        magnitude: args.magnitude,
        target_schools: None,
    };
    let result = apply_shock(&scenario, args.lambda, &ing.nets)?;
    let mut w = csv::Writer::from_path(cli.out.join("shock.csv"))?;
    w.write_record(["school_id", "node_id", "delta_y", "multiplier"])?;
    for (s, net) in ing.nets.iter().enumerate() {
        for i in 0..net.n {
            w.write_record([
                net.school_id.as_str(),
                ing.node_ids[s][i].as_str(),
                &result.delta_y[s][i].to_string(),
                &result.multiplier[s][i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let hist = multiplier_distribution(&result, args.bin_width);
    let mut hw = csv::Writer::from_path(cli.out.join("shock_hist.csv"))?;
    hw.write_record(["bin_left", "count"])?;
    for (i, c) in hist.counts.iter().enumerate() {
        hw.write_record([hist.bin_left(i).to_string(), c.to_string()])?;
    }
    hw.flush()?;
    let mut warnings = ing.warnings;
    if kind.confounded() {
        warnings.push(
            "fixed-effect shock confounds the output and preference channels".to_string(),
        );
    }
    write_meta(&cli.out, "shock", cli.seed, warnings)?;
    Ok(())
}

fn cmd_check_ident(cli: &Cli, args: &DataArgs) -> Result<()> {
    let ing = ingest_args(args)?;
    let mut per_school = Vec::new();
    for net in &ing.nets {
        let d3 = check_distance3(net);
        let lm = check_linmaps_independence(net);
        per_school.push(json!({
            "school_id": net.school_id,
            "distance3": d3.holds,
            "distance3_witness": d3.witness,
            "linmaps_independent": lm.holds,
            "linmaps_rank": lm.rank,
        }));
    }
    let refs: Vec<&peerfx::netgraph::SchoolNetwork> = ing.nets.iter().collect();
    let var_ident = check_variance_identification(&refs);
    let doc = json!({
        "schools": per_school,
        "any_distance3": per_school_any(&ing),
        "variance_identification": {
            "holds": var_ident.holds,
            "rank": var_ident.rank,
            "required": var_ident.required,
            "singular_values": var_ident.singular_values,
        },
    });
    write_json(&cli.out.join("ident.json"), &doc)?;
    write_meta(&cli.out, "check-ident", cli.seed, ing.warnings)?;
    Ok(())
}

fn per_school_any(ing: &IngestedData) -> bool {
    ing.nets.iter().any(|n| check_distance3(n).holds)
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Cli(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(cli, args),
        Command::Estimate(args) => cmd_estimate(cli, args),
        Command::Mc(args) => cmd_mc(cli, args),
        Command::Shock(args) => cmd_shock(cli, args),
        Command::CheckIdent(args) => cmd_check_ident(cli, args),
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let mut by_module = BTreeMap::new();
        by_module.insert("error", e.to_string());
        eprintln!("{}", serde_json::to_string(&by_module).expect("serializable"));
        std::process::exit(1);
    }
}
