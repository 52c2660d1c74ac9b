//! Command-line front-end: ingest → features → fit → diagnose →
//! return levels → compare → scenario, driven by one TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use potreg::config::RunConfig;
use potreg::features::{
    build_design_matrix, empirical_quantile_threshold, ingest_csv, pollutant_values, DesignMatrix,
    ObservationRecord,
};
use potreg::inference::{
    below_threshold_pool, bridge_log_marginal, cross_validate, dic, fit_diagnostics,
    harmonic_mean_log_marginal, horizon_probability, kass_raftery_category,
    marginal_return_level, posterior_plug_in, qq_simulation, scenario_rows, EvidenceEstimator,
    MarginalLikelihood, ReturnLevelEstimate, SimulationInput,
};
use potreg::link::ModelKind;
use potreg::outputs::{
    read_posterior, recompute_log_liks, write_coefficient_summaries, write_inclusion_csv,
    write_json, write_pit_csv, write_posterior, write_qq_csv, write_records_csv,
    write_return_level_draws_csv, write_return_levels_csv, FitMeta,
};
use potreg::sampler::{run_chain, PosteriorSampleSet};
use potreg::synth::generate_records;

#[derive(Parser)]
#[command(name = "potreg", version, about = "Bayesian peaks-over-threshold modelling with covariate-dependent GPD parameters")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true, default_value = "potreg.toml")]
    config: PathBuf,
    /// Override the chain/simulation seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset from the configured truth
    Synth,
    /// Fit the configured model and write posterior artifacts
    Fit,
    /// Fit with variable selection on and report inclusion probabilities
    Select,
    /// Goodness of fit (PIT/KS, misclassification, QQ data) for a fit
    Diagnose,
    /// Marginal return levels for the configured horizons
    ReturnLevels,
    /// Bayes factor and DIC between a Model I and a Model II fit
    Compare,
    /// Reduced-traffic-flow scenario return levels
    Scenario,
    /// Per-month 75/25 train/validation diagnostics
    CrossValidate,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single line, machine-parsable
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.chain.seed = seed;
    }
    if let Some(output) = cli.output {
        config.output_dir = output;
    }
    match cli.command {
        Command::Synth => cmd_synth(&config),
        Command::Fit => cmd_fit(&config, false),
        Command::Select => cmd_fit(&config, true),
        Command::Diagnose => cmd_diagnose(&config),
        Command::ReturnLevels => cmd_return_levels(&config),
        Command::Compare => cmd_compare(&config),
        Command::Scenario => cmd_scenario(&config),
        Command::CrossValidate => cmd_cross_validate(&config),
    }
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn cmd_synth(config: &RunConfig) -> CliResult<()> {
    let records = generate_records(&config.synth, config.chain.seed);
    let path = config.output_dir.join("synthetic.csv");
    write_records_csv(&path, &records)?;
    wrote(&path);
    Ok(())
}

/// Ingests the data and builds the standardized design at the configured
/// threshold.
fn prepare_design(config: &RunConfig) -> CliResult<(Vec<ObservationRecord>, DesignMatrix)> {
    let records = ingest_csv(&config.data_path)?;
    let u = match (config.threshold_quantile, config.threshold_value) {
        (Some(q), None) => {
            let values = pollutant_values(&records, config.target_pollutant);
            empirical_quantile_threshold(&values, q)?
        }
        (None, Some(v)) => v,
        _ => unreachable!("config validated"),
    };
    let mut dm = build_design_matrix(&records, config.target_pollutant, u, &config.features)?;
    dm.standardize();
    Ok((records, dm))
}

fn cmd_fit(config: &RunConfig, force_selection: bool) -> CliResult<()> {
    let (_, dm) = prepare_design(config)?;
    let mut chain = config.chain.clone();
    if force_selection {
        chain.variable_selection = true;
    }
    let samples = run_chain(&chain, &dm.rows, dm.threshold)?;
    let meta = FitMeta {
        model_kind: samples.kind,
        m: samples.m,
        threshold: samples.threshold,
        acceptance_rate: samples.acceptance_rate,
        stuck: samples.stuck,
        chain: samples.config.clone(),
        final_scales: samples.final_scales.clone(),
        tuning_log: samples.tuning_log.clone(),
        target_pollutant: config.target_pollutant,
        data_path: config.data_path.clone(),
        feature_spec: config.features.clone(),
        standardizer: dm.standardizer.clone().expect("design standardized"),
        covariate_names: dm.names.clone(),
    };
    write_posterior(&config.output_dir, &samples, &meta)?;
    wrote(&config.output_dir.join(potreg::outputs::POSTERIOR_CSV));
    wrote(&config.output_dir.join(potreg::outputs::POSTERIOR_META));
    let summary_path = config.output_dir.join("coefficient_summary.csv");
    write_coefficient_summaries(&summary_path, &samples.coefficient_summaries())?;
    wrote(&summary_path);
    if chain.variable_selection {
        let incl_path = config.output_dir.join("inclusion_probabilities.csv");
        let names: Vec<String> = dm.names[1..].to_vec();
        write_inclusion_csv(&incl_path, &names, &samples.inclusion_probabilities()?)?;
        wrote(&incl_path);
    }
    println!(
        "fit: {} draws, threshold {}, acceptance {:.3}{}",
        samples.draws.len(),
        samples.threshold,
        samples.acceptance_rate,
        if samples.stuck { ", WARNING: chain stuck" } else { "" }
    );
    Ok(())
}

/// Loads the fit artifacts and rebuilds the design on the stored
/// covariate scale, with draw log-likelihoods recomputed.
fn load_fitted(
    config: &RunConfig,
    dir: &Path,
) -> CliResult<(Vec<ObservationRecord>, DesignMatrix, PosteriorSampleSet, FitMeta)> {
    let (mut samples, meta) = read_posterior(dir)?;
    let records = ingest_csv(&config.data_path)?;
    let mut dm = build_design_matrix(
        &records,
        meta.target_pollutant,
        meta.threshold,
        &meta.feature_spec,
    )?;
    for row in &mut dm.rows {
        meta.standardizer.apply_vec(&mut row.c_tilde);
    }
    dm.standardizer = Some(meta.standardizer.clone());
    recompute_log_liks(&mut samples, &dm.rows, dm.threshold);
    Ok((records, dm, samples, meta))
}

#[derive(Serialize)]
struct DiagnosticsReport {
    threshold: f64,
    n_rows: usize,
    n_exceedances: usize,
    ks_statistic: f64,
    ks_p_value: f64,
    misclassification_rate: f64,
    optimal_class_threshold: f64,
    pit_out_of_support: usize,
    plug_in_median_fallback: bool,
    acceptance_rate: f64,
    chain_stuck: bool,
}

fn cmd_diagnose(config: &RunConfig) -> CliResult<()> {
    let (_, dm, samples, _) = load_fitted(config, &config.output_dir)?;
    let (plug_in, fallback) = posterior_plug_in(&samples, &dm.rows, dm.threshold)?;
    let diag = fit_diagnostics(&dm.rows, &plug_in, dm.threshold)?;

    let pool = below_threshold_pool(&dm.rows, dm.threshold);
    let input = SimulationInput::from_design(&dm, config.target_pollutant, config.features.lag_count, &pool);
    let mut rng = ChaCha8Rng::seed_from_u64(config.chain.seed.wrapping_add(0x9e3779b9));
    // a poorly identified fit can hold posterior draws whose parameters
    // overflow during simulation; the remaining diagnostics still stand
    let qq = match qq_simulation(&input, &samples, 50, &mut rng) {
        Ok(qq) => Some(qq),
        Err(e) => {
            eprintln!("warning: skipping qq simulation: {e}");
            None
        }
    };

    let report = DiagnosticsReport {
        threshold: dm.threshold,
        n_rows: diag.n_rows,
        n_exceedances: diag.n_exceedances,
        ks_statistic: diag.ks_statistic,
        ks_p_value: diag.ks_p_value,
        misclassification_rate: diag.misclassification_rate,
        optimal_class_threshold: diag.optimal_class_threshold,
        pit_out_of_support: diag.pit_out_of_support,
        plug_in_median_fallback: fallback,
        acceptance_rate: samples.acceptance_rate,
        chain_stuck: samples.stuck,
    };
    let json_path = config.output_dir.join("diagnostics.json");
    write_json(&json_path, &report)?;
    wrote(&json_path);
    let pit_path = config.output_dir.join("pit.csv");
    write_pit_csv(&pit_path, &diag.pit_values)?;
    wrote(&pit_path);
    if let Some(qq) = qq {
        let qq_path = config.output_dir.join("qq.csv");
        write_qq_csv(&qq_path, &qq)?;
        wrote(&qq_path);
    }
    println!(
        "diagnose: KS D = {:.4}, p = {:.4}, misclassification {:.2}%",
        report.ks_statistic,
        report.ks_p_value,
        100.0 * report.misclassification_rate
    );
    Ok(())
}

/// The configured return-level targets as (label, p, horizon) triples.
fn level_targets(config: &RunConfig) -> Vec<(String, f64, Option<f64>)> {
    let mut targets: Vec<(String, f64, Option<f64>)> = config
        .return_levels
        .horizon_years
        .iter()
        .map(|&t| (format!("{t}y"), horizon_probability(t), Some(t)))
        .collect();
    targets.extend(config.return_levels.p.iter().map(|&p| (format!("p={p}"), p, None)));
    targets
}

fn estimate_levels(
    config: &RunConfig,
    input: &SimulationInput,
    samples: &PosteriorSampleSet,
    seed_offset: u64,
) -> CliResult<Vec<(String, ReturnLevelEstimate)>> {
    let mut out = Vec::new();
    for (label, p, horizon) in level_targets(config) {
        let mut input = input.clone();
        let required = (20.0 / p).ceil() as usize;
        input.n_sim = Some(required.max(input.rows.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.chain.seed.wrapping_add(seed_offset));
        let est = marginal_return_level(
            &input,
            samples,
            p,
            config.return_levels.n_replicates,
            horizon,
            &mut rng,
        )?;
        out.push((label, est));
    }
    Ok(out)
}

fn cmd_return_levels(config: &RunConfig) -> CliResult<()> {
    let (_, dm, samples, _) = load_fitted(config, &config.output_dir)?;
    let pool = below_threshold_pool(&dm.rows, dm.threshold);
    let input = SimulationInput::from_design(&dm, config.target_pollutant, config.features.lag_count, &pool);
    let estimates = estimate_levels(config, &input, &samples, 0x51ce)?;
    let csv_path = config.output_dir.join("return_levels.csv");
    write_return_levels_csv(&csv_path, &estimates)?;
    wrote(&csv_path);
    let draws_path = config.output_dir.join("return_level_draws.csv");
    write_return_level_draws_csv(&draws_path, &estimates)?;
    wrote(&draws_path);
    let json_path = config.output_dir.join("return_levels.json");
    write_json(&json_path, &estimates)?;
    wrote(&json_path);
    for (label, e) in &estimates {
        println!(
            "return level {label}: {:.3} [{:.3}, {:.3}]",
            e.level, e.credible_interval.0, e.credible_interval.1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareReport {
    beta_21: f64,
    category: String,
    unstable: bool,
    evidence_model1: MarginalLikelihood,
    evidence_model2: MarginalLikelihood,
    dic_model1: f64,
    dic_model2: f64,
    p_d_model1: f64,
    p_d_model2: f64,
}

fn cmd_compare(config: &RunConfig) -> CliResult<()> {
    let (_, dm1, samples1, meta1) = load_fitted(config, &config.compare.model1_dir)?;
    let (_, dm2, samples2, meta2) = load_fitted(config, &config.compare.model2_dir)?;
    if samples1.kind != ModelKind::ModelI || samples2.kind != ModelKind::ModelII {
        return Err(format!(
            "model-kind mismatch: compare expects a Model I fit in {} and a Model II fit in {}",
            config.compare.model1_dir.display(),
            config.compare.model2_dir.display()
        )
        .into());
    }
    if meta1.threshold != meta2.threshold {
        return Err(format!(
            "threshold mismatch: {} vs {}; both fits must share data and threshold",
            meta1.threshold, meta2.threshold
        )
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.chain.seed.wrapping_add(0xc0de));
    let evidence = |s: &PosteriorSampleSet,
                    dm: &DesignMatrix,
                    rng: &mut ChaCha8Rng|
     -> CliResult<MarginalLikelihood> {
        Ok(match config.compare.estimator {
            EvidenceEstimator::HarmonicMean => {
                let lls: Vec<f64> = s.draws.iter().map(|d| d.log_lik).collect();
                harmonic_mean_log_marginal(&lls)?
            }
            EvidenceEstimator::Bridge => bridge_log_marginal(s, &dm.rows, dm.threshold, rng)?,
        })
    };
    let e1 = evidence(&samples1, &dm1, &mut rng)?;
    let e2 = evidence(&samples2, &dm2, &mut rng)?;
    let beta_21 = 2.0 * (e2.log_value - e1.log_value);
    let d1 = dic(&samples1, &dm1.rows, dm1.threshold)?;
    let d2 = dic(&samples2, &dm2.rows, dm2.threshold)?;
    let report = CompareReport {
        beta_21,
        category: kass_raftery_category(beta_21),
        unstable: e1.ess < 10.0 || e2.ess < 10.0,
        evidence_model1: e1,
        evidence_model2: e2,
        dic_model1: d1.dic,
        dic_model2: d2.dic,
        p_d_model1: d1.p_d,
        p_d_model2: d2.p_d,
    };
    let path = config.output_dir.join("compare.json");
    write_json(&path, &report)?;
    wrote(&path);
    println!(
        "compare: beta_21 = {:.3} ({}), DIC I = {:.1}, DIC II = {:.1}",
        report.beta_21, report.category, report.dic_model1, report.dic_model2
    );
    Ok(())
}

fn cmd_scenario(config: &RunConfig) -> CliResult<()> {
    let (records, dm, samples, meta) = load_fitted(config, &config.output_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.chain.seed.wrapping_add(0x5ce0));
    let rows = scenario_rows(
        &records,
        meta.target_pollutant,
        meta.threshold,
        &meta.feature_spec,
        &meta.standardizer,
        &config.scenario,
        &mut rng,
    )?;
    let pool = below_threshold_pool(&dm.rows, dm.threshold);
    let input = SimulationInput {
        rows: &rows,
        lag_cols: vec![],
        standardizer: Some(&meta.standardizer),
        below_pool: &pool,
        u: dm.threshold,
        feed_lags: false,
        n_sim: None,
    };
    let estimates = estimate_levels(config, &input, &samples, 0x5ce1)?;
    let csv_path = config.output_dir.join("scenario_return_levels.csv");
    write_return_levels_csv(&csv_path, &estimates)?;
    wrote(&csv_path);
    let json_path = config.output_dir.join("scenario_return_levels.json");
    write_json(&json_path, &estimates)?;
    wrote(&json_path);
    for (label, e) in &estimates {
        println!(
            "scenario (reduction {}) level {label}: {:.3} [{:.3}, {:.3}]",
            config.scenario.reduction, e.level, e.credible_interval.0, e.credible_interval.1
        );
    }
    Ok(())
}

fn cmd_cross_validate(config: &RunConfig) -> CliResult<()> {
    let (_, dm) = prepare_design(config)?;
    let cv = cross_validate(
        &dm.rows,
        dm.threshold,
        &config.chain,
        config.cross_validate.min_exceedances,
    )?;
    let path = config.output_dir.join("cross_validation.json");
    write_json(&path, &cv)?;
    wrote(&path);
    println!(
        "cross-validate: training misclassification {:.2}%, validation {:.2}%, {} months ({} skipped)",
        100.0 * cv.training.misclassification_rate,
        100.0 * cv.validation.misclassification_rate,
        cv.months.len(),
        cv.months.iter().filter(|m| m.skipped.is_some()).count()
    );
    Ok(())
}
