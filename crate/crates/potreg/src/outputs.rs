//! File outputs and fitted-artifact persistence. Every write goes
//! through a temp-file + rename, so a killed run never leaves a
//! truncated file that parses.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSpec, ObservationRecord, Pollutant, Standardizer};
use crate::inference::{QqData, ReturnLevelEstimate};
use crate::link::{ModelKind, ModelParams};
use crate::sampler::{
    coefficient_names, ChainConfig, CoefficientSummary, PosteriorDraw, PosteriorSampleSet,
    TuningEvent,
};

pub const POSTERIOR_CSV: &str = "posterior.csv";
pub const POSTERIOR_META: &str = "posterior_meta.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("posterior file malformed: {0}")]
    Malformed(String),
    #[error("missing fitted artifact {0}; run `fit` first")]
    MissingArtifact(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes bytes atomically: temp file in the destination directory,
/// then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path)
        .map_err(|e| OutputError::Io {
            path: path.display().to_string(),
            source: e.error,
        })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn write_csv<F>(path: &Path, build: F) -> Result<(), OutputError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut writer = csv::Writer::from_writer(Vec::new());
    build(&mut writer)?;
    let bytes = writer
        .into_inner()
        .map_err(|e| OutputError::Malformed(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Everything besides the draws that a later command needs to resume
/// from a fit: model shape, threshold, covariate pipeline, and the
/// sampler's audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub model_kind: ModelKind,
    pub m: usize,
    pub threshold: f64,
    pub acceptance_rate: f64,
    pub stuck: bool,
    pub chain: ChainConfig,
    pub final_scales: Vec<f64>,
    pub tuning_log: Vec<TuningEvent>,
    pub target_pollutant: Pollutant,
    pub data_path: PathBuf,
    pub feature_spec: FeatureSpec,
    pub standardizer: Standardizer,
    pub covariate_names: Vec<String>,
}

/// Writes `posterior.csv` (iteration, one column per coefficient, and an
/// `I_1..I_m` block when selection is on) and `posterior_meta.json`.
pub fn write_posterior(dir: &Path, samples: &PosteriorSampleSet, meta: &FitMeta) -> Result<(), OutputError> {
    let selection = samples.config.variable_selection;
    write_csv(&dir.join(POSTERIOR_CSV), |w| {
        let mut header = vec!["iteration".to_string()];
        header.extend(coefficient_names(samples.kind, samples.m));
        if selection {
            header.extend((1..=samples.m).map(|j| format!("I_{j}")));
        }
        w.write_record(&header)?;
        for draw in &samples.draws {
            let mut record = vec![draw.iteration.to_string()];
            record.extend(draw.theta.to_flat().iter().map(|v| format!("{v}")));
            if selection {
                record.extend(draw.indicators.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
            }
            w.write_record(&record)?;
        }
        Ok(())
    })?;
    write_json(&dir.join(POSTERIOR_META), meta)
}

/// Reads a fit's artifacts back. Draw log-likelihoods are not stored in
/// the files; they come back as NaN and must be recomputed against the
/// data before model comparison.
pub fn read_posterior(dir: &Path) -> Result<(PosteriorSampleSet, FitMeta), OutputError> {
    let meta_path = dir.join(POSTERIOR_META);
    let csv_path = dir.join(POSTERIOR_CSV);
    for p in [&meta_path, &csv_path] {
        if !p.exists() {
            return Err(OutputError::MissingArtifact(p.display().to_string()));
        }
    }
    let meta: FitMeta = serde_json::from_slice(&std::fs::read(&meta_path).map_err(io_err(&meta_path))?)?;
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let n_coef = meta.model_kind.block_count() * (meta.m + 1);
    let selection = meta.chain.variable_selection;
    let expected_cols = 1 + n_coef + if selection { meta.m } else { 0 };
    let headers = reader.headers()?.len();
    if headers != expected_cols {
        return Err(OutputError::Malformed(format!(
            "expected {expected_cols} columns, found {headers}"
        )));
    }
    let mut draws = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let iteration: usize = field(0)
            .parse()
            .map_err(|_| OutputError::Malformed(format!("bad iteration `{}`", field(0))))?;
        let mut flat = Vec::with_capacity(n_coef);
        for i in 0..n_coef {
            flat.push(field(1 + i).parse::<f64>().map_err(|_| {
                OutputError::Malformed(format!("bad coefficient `{}`", field(1 + i)))
            })?);
        }
        let indicators = if selection {
            (0..meta.m)
                .map(|j| field(1 + n_coef + j) == "1")
                .collect()
        } else {
            vec![true; meta.m]
        };
        let theta = ModelParams::from_flat(meta.model_kind, meta.m, &flat)
            .map_err(|e| OutputError::Malformed(e.to_string()))?;
        draws.push(PosteriorDraw {
            iteration,
            theta,
            indicators,
            log_lik: f64::NAN,
        });
    }
    let samples = PosteriorSampleSet {
        kind: meta.model_kind,
        m: meta.m,
        threshold: meta.threshold,
        draws,
        acceptance_rate: meta.acceptance_rate,
        config: meta.chain.clone(),
        stuck: meta.stuck,
        tuning_log: meta.tuning_log.clone(),
        final_scales: meta.final_scales.clone(),
    };
    Ok((samples, meta))
}

/// Fills in the draw log-likelihoods against the data they were fitted on.
pub fn recompute_log_liks(samples: &mut PosteriorSampleSet, rows: &[crate::features::DesignRow], u: f64) {
    for draw in &mut samples.draws {
        draw.log_lik = crate::link::log_likelihood(&draw.effective_theta(), rows, u);
    }
}

pub fn write_coefficient_summaries(path: &Path, summaries: &[CoefficientSummary]) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record([
            "coefficient",
            "median",
            "lower_95",
            "upper_95",
            "inclusion_probability",
            "conditioning_draws",
        ])?;
        for s in summaries {
            w.write_record([
                s.name.clone(),
                format!("{}", s.median),
                format!("{}", s.lower),
                format!("{}", s.upper),
                format!("{}", s.inclusion_probability),
                s.conditioning_draws.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_pit_csv(path: &Path, pit_values: &[f64]) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(["pit"])?;
        for v in pit_values {
            w.write_record([format!("{v}")])?;
        }
        Ok(())
    })
}

pub fn write_qq_csv(path: &Path, qq: &QqData) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(["observed", "simulated_median", "lower_2_5", "upper_97_5"])?;
        for i in 0..qq.observed.len() {
            w.write_record([
                format!("{}", qq.observed[i]),
                format!("{}", qq.simulated_median[i]),
                format!("{}", qq.lower[i]),
                format!("{}", qq.upper[i]),
            ])?;
        }
        Ok(())
    })
}

pub fn write_return_levels_csv(
    path: &Path,
    estimates: &[(String, ReturnLevelEstimate)],
) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(["label", "kind", "horizon_years", "p", "level", "lower_95", "upper_95"])?;
        for (label, e) in estimates {
            w.write_record([
                label.clone(),
                format!("{:?}", e.kind).to_lowercase(),
                e.horizon_years.map(|h| format!("{h}")).unwrap_or_default(),
                format!("{}", e.p),
                format!("{}", e.level),
                format!("{}", e.credible_interval.0),
                format!("{}", e.credible_interval.1),
            ])?;
        }
        Ok(())
    })
}

pub fn write_return_level_draws_csv(
    path: &Path,
    estimates: &[(String, ReturnLevelEstimate)],
) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(["label", "replicate", "estimate"])?;
        for (label, e) in estimates {
            for (i, v) in e.replicates.iter().enumerate() {
                w.write_record([label.clone(), i.to_string(), format!("{v}")])?;
            }
        }
        Ok(())
    })
}

pub fn write_inclusion_csv(
    path: &Path,
    names: &[String],
    probabilities: &[f64],
) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(["covariate", "inclusion_probability"])?;
        for (n, p) in names.iter().zip(probabilities) {
            w.write_record([n.clone(), format!("{p}")])?;
        }
        Ok(())
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes observation records in the ingestion CSV schema.
pub fn write_records_csv(path: &Path, records: &[ObservationRecord]) -> Result<(), OutputError> {
    write_csv(path, |w| {
        w.write_record(crate::features::CSV_COLUMNS)?;
        for r in records {
            w.write_record([
                r.timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(),
                opt(r.no),
                opt(r.no2),
                opt(r.o3),
                opt(r.tf_ldv),
                opt(r.tf_hgv),
                opt(r.ts_ldv),
                opt(r.ts_hgv),
                opt(r.rh),
                opt(r.sr),
                opt(r.ws),
                opt(r.wd),
                opt(r.temp),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::ModelIParams;
    use crate::sampler::SelectionScheme;

    fn sample_set(selection: bool) -> PosteriorSampleSet {
        let mk = |iter: usize, v: f64, ind: Vec<bool>| PosteriorDraw {
            iteration: iter,
            theta: ModelParams::I(ModelIParams {
                s_u: vec![v, 0.1],
                kappa: vec![0.0, -0.2],
                r_u: vec![-1.0, v * 0.5],
            }),
            indicators: ind,
            log_lik: -10.0 - v,
        };
        PosteriorSampleSet {
            kind: ModelKind::ModelI,
            m: 1,
            threshold: 42.0,
            // with selection off no indicator columns are written, so the
            // fixture must keep every draw at the all-included mask
            draws: vec![mk(100, 0.25, vec![true]), mk(200, -0.125, vec![!selection])],
            acceptance_rate: 0.45,
            config: ChainConfig {
                variable_selection: selection,
                selection_scheme: SelectionScheme::Flip,
                ..ChainConfig::default()
            },
            stuck: false,
            tuning_log: vec![TuningEvent {
                iteration: 500,
                windowed_acceptance: 0.8,
                factor: 1.25,
            }],
            final_scales: vec![0.05; 6],
        }
    }

    fn meta_for(samples: &PosteriorSampleSet) -> FitMeta {
        FitMeta {
            model_kind: samples.kind,
            m: samples.m,
            threshold: samples.threshold,
            acceptance_rate: samples.acceptance_rate,
            stuck: samples.stuck,
            chain: samples.config.clone(),
            final_scales: samples.final_scales.clone(),
            tuning_log: samples.tuning_log.clone(),
            target_pollutant: Pollutant::No,
            data_path: PathBuf::from("data.csv"),
            feature_spec: FeatureSpec::default(),
            standardizer: Standardizer {
                means: vec![0.0, 1.5],
                scales: vec![1.0, 2.0],
            },
            covariate_names: vec!["intercept".into(), "x".into()],
        }
    }

    #[test]
    fn posterior_round_trip() {
        for selection in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let samples = sample_set(selection);
            let meta = meta_for(&samples);
            write_posterior(dir.path(), &samples, &meta).unwrap();
            let (back, back_meta) = read_posterior(dir.path()).unwrap();
            assert_eq!(back_meta, meta);
            assert_eq!(back.draws.len(), samples.draws.len());
            for (a, b) in back.draws.iter().zip(&samples.draws) {
                assert_eq!(a.iteration, b.iteration);
                assert_eq!(a.theta, b.theta);
                assert_eq!(a.indicators, b.indicators);
                assert!(a.log_lik.is_nan());
            }
        }
    }

    #[test]
    fn posterior_csv_is_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let samples = sample_set(true);
        let meta = meta_for(&samples);
        write_posterior(dir.path(), &samples, &meta).unwrap();
        let first = std::fs::read(dir.path().join(POSTERIOR_CSV)).unwrap();
        write_posterior(dir.path(), &samples, &meta).unwrap();
        let second = std::fs::read(dir.path().join(POSTERIOR_CSV)).unwrap();
        assert_eq!(first, second);
        // header shape: iteration + 6 coefficients + I_1
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("iteration,s_0,s_1,k_0,k_1,r_0,r_1,I_1"));
    }

    #[test]
    fn missing_artifact_is_named() {
        let dir = tempfile::tempdir().unwrap();
        match read_posterior(dir.path()) {
            Err(OutputError::MissingArtifact(p)) => {
                assert!(p.contains("posterior_meta.json"), "{p}");
            }
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn records_csv_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let config = crate::synth::SynthConfig {
            n_rows: 50,
            missing_rate: 0.1,
            ..Default::default()
        };
        let records = crate::synth::generate_records(&config, 5);
        write_records_csv(&path, &records).unwrap();
        let back = crate::features::ingest_csv(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn atomic_write_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
    }
}
