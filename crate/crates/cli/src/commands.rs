use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use conformal_drift::assessment::{grid_search, label_mispredictions, Outcomes, ParameterGrid};
use conformal_drift::demo::{run_demo_with, DemoOptions};
use conformal_drift::harness::{generate_benchmark, train_reference_classifier, BenchmarkSpec};
use conformal_drift::jsonl::{
    read_labeled, read_labeled_with_outputs, read_lines, read_outputs_by_id, read_records,
    read_test_inputs, write_lines, Record,
};
use conformal_drift::{
    assess_batch, build_store, coverage_check_store, drift_metrics, triage, CalibrationStore,
    DetectorConfig, DriftAssessment, Error, LabeledSample, ModelOutput, Result, TestInput, Truth,
};
use serde::Serialize;

use crate::{Cli, Command};

pub enum Outcome {
    Ok,
    Alert,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Calibrate { input, outputs } => calibrate(cli, input, outputs.as_deref()),
        Command::Check { repeats } => check(cli, *repeats),
        Command::Detect { input } => detect(cli, input),
        Command::Evaluate {
            assessments,
            truth,
            threshold,
        } => evaluate(cli, assessments, truth, *threshold),
        Command::Triage {
            assessments,
            budget,
        } => triage_cmd(cli, assessments, *budget),
        Command::GridSearch {
            input,
            epsilons,
            taus,
            fractions,
            gaussian_cs,
        } => {
            let grid = ParameterGrid {
                epsilon: epsilons.clone(),
                tau: taus.clone(),
                subset_fraction: fractions.clone(),
                gaussian_c: gaussian_cs.clone(),
            };
            grid_cmd(cli, input, &grid)
        }
        Command::Generate { dir, drift_shift } => generate(cli, dir, *drift_shift),
        Command::Demo { drift_shift } => demo(cli, *drift_shift),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn sink(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(cli: &Cli, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Internal(format!("encode: {e}")))?;
    let mut out = sink(cli)?;
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn apply_overrides(cli: &Cli, mut config: DetectorConfig) -> Result<DetectorConfig> {
    if let Some(e) = cli.epsilon {
        config.epsilon = e;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Config file if given, else `fallback`, then command-line overrides.
fn resolve_config(cli: &Cli, fallback: DetectorConfig) -> Result<DetectorConfig> {
    let base = match &cli.config {
        Some(p) => DetectorConfig::load(p)?,
        None => fallback,
    };
    apply_overrides(cli, base)
}

fn store_path(cli: &Cli) -> Result<&Path> {
    cli.store
        .as_deref()
        .ok_or_else(|| Error::Config("--store is required".into()))
}

fn load_store(cli: &Cli) -> Result<CalibrationStore> {
    CalibrationStore::load(store_path(cli)?)
}

fn calibrate(cli: &Cli, input: &Path, outputs: Option<&Path>) -> Result<Outcome> {
    let config = resolve_config(cli, DetectorConfig::default())?;
    let (samples, outs) = match outputs {
        None => read_labeled_with_outputs(open(input)?)?,
        Some(path) => {
            let samples = read_labeled(open(input)?)?;
            let mut by_id = read_outputs_by_id(open(path)?)?;
            let outs = samples
                .iter()
                .map(|s| {
                    by_id
                        .remove(&s.id)
                        .ok_or_else(|| Error::Input(format!("no model output for id {:?}", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(extra) = by_id.keys().next() {
                return Err(Error::Input(format!(
                    "model output for unknown id {extra:?}"
                )));
            }
            (samples, outs)
        }
    };
    let store = build_store(&samples, &outs, &config)?;
    store.save(store_path(cli)?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        samples: usize,
        task: String,
        labels: usize,
        functions: Vec<String>,
        store: &'a Path,
    }
    write_json(
        cli,
        &Summary {
            samples: store.len(),
            task: store.task().to_string(),
            labels: store.num_labels(),
            functions: store.functions().map(|f| f.to_string()).collect(),
            store: store_path(cli)?,
        },
    )?;
    Ok(Outcome::Ok)
}

fn check(cli: &Cli, repeats: Option<usize>) -> Result<Outcome> {
    let store = load_store(cli)?;
    let config = store.config();
    let epsilon = cli.epsilon.unwrap_or(config.epsilon);
    let repeats = repeats.unwrap_or(config.coverage_repeats);
    let seed = cli.seed.unwrap_or(config.seed);
    let report = coverage_check_store(&store, epsilon, repeats, seed)?;
    write_json(cli, &report)?;
    Ok(if report.alert {
        Outcome::Alert
    } else {
        Outcome::Ok
    })
}

fn detect(cli: &Cli, input: &Path) -> Result<Outcome> {
    let store = load_store(cli)?;
    let config = resolve_config(cli, store.config().clone())?;
    let records = read_test_inputs(open(input)?)?;
    let inputs: Vec<TestInput<'_>> = records
        .iter()
        .map(|(id, features, output)| TestInput {
            id,
            features: features.as_slice(),
            output,
        })
        .collect();
    let assessments = assess_batch(&store, &inputs, &config)?;
    write_lines(sink(cli)?, &assessments)?;
    Ok(Outcome::Ok)
}

fn read_assessments(path: &Path) -> Result<Vec<DriftAssessment>> {
    Ok(read_lines(open(path)?)?
        .into_iter()
        .map(|(_, a)| a)
        .collect())
}

fn evaluate(cli: &Cli, assessments: &Path, truth: &Path, threshold: f64) -> Result<Outcome> {
    let assessments = read_assessments(assessments)?;
    let mut by_id: BTreeMap<String, (Truth, ModelOutput)> = BTreeMap::new();
    for (line, rec) in read_records(open(truth)?)? {
        let at = |e: Error| Error::Record {
            line,
            message: e.to_string(),
        };
        let t = rec
            .truth()
            .map_err(at)?
            .ok_or_else(|| at(Error::Input("record has neither label nor target".into())))?;
        let o = rec.output().map_err(at)?;
        if by_id.insert(rec.id.clone(), (t, o)).is_some() {
            return Err(at(Error::Input(format!("duplicate id {:?}", rec.id))));
        }
    }
    if assessments.len() != by_id.len() {
        return Err(Error::Input(format!(
            "{} assessments but {} ground-truth records",
            assessments.len(),
            by_id.len()
        )));
    }
    let mut decisions = Vec::with_capacity(assessments.len());
    let mut mispredicted = Vec::with_capacity(assessments.len());
    for a in &assessments {
        let (t, o) = by_id
            .get(&a.id)
            .ok_or_else(|| Error::Input(format!("no ground truth for id {:?}", a.id)))?;
        let wrong = match (t, o) {
            (
                Truth::Label(l),
                ModelOutput::Classification {
                    predicted_label, ..
                },
            ) => label_mispredictions(
                Outcomes::Detection {
                    predicted: &[*predicted_label],
                    reference: &[*l],
                },
                threshold,
            )?[0],
            (Truth::Target(t), ModelOutput::Regression { pred }) => label_mispredictions(
                Outcomes::CostModel {
                    predicted: &[*pred],
                    profiled: &[*t],
                },
                threshold,
            )?[0],
            _ => {
                return Err(Error::Input(format!(
                    "id {:?}: ground truth and model output disagree on the task",
                    a.id
                )))
            }
        };
        decisions.push(a.drifting);
        mispredicted.push(wrong);
    }
    write_json(cli, &drift_metrics(&decisions, &mispredicted)?)?;
    Ok(Outcome::Ok)
}

fn triage_cmd(cli: &Cli, assessments: &Path, budget: f64) -> Result<Outcome> {
    let batch = triage(&read_assessments(assessments)?, budget)?;
    write_json(cli, &batch.ids)?;
    Ok(Outcome::Ok)
}

fn grid_cmd(cli: &Cli, input: &Path, grid: &ParameterGrid) -> Result<Outcome> {
    let base = resolve_config(cli, DetectorConfig::default())?;
    let (samples, outs) = read_labeled_with_outputs(open(input)?)?;
    let result = grid_search(&samples, &outs, &base, grid, base.seed)?;
    eprintln!(
        "grid scores (F1, grid order): {}",
        serde_json::to_string(&result.scores).unwrap_or_default()
    );
    let text = result.best.to_toml_string()?;
    let mut out = sink(cli)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(Outcome::Ok)
}

fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    write_lines(BufWriter::new(File::create(path)?), records)
}

fn generate(cli: &Cli, dir: &Path, drift_shift: f64) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    let spec = BenchmarkSpec {
        seed,
        drift_shift,
        ..BenchmarkSpec::default()
    };
    let bench = generate_benchmark(&spec)?;
    let model = train_reference_classifier(&bench.training, seed)?;
    fs::create_dir_all(dir)?;
    let with_outputs = |set: &[LabeledSample]| -> Result<Vec<Record>> {
        set.iter()
            .map(|s| {
                Ok(Record::from_sample(
                    s,
                    Some(&model.predict(s.features.as_slice())?),
                ))
            })
            .collect()
    };
    let training: Vec<Record> = bench
        .training
        .iter()
        .map(|s| Record::from_sample(s, None))
        .collect();
    write_file(&dir.join("training.jsonl"), &training)?;
    write_file(
        &dir.join("calibration.jsonl"),
        &with_outputs(&bench.calibration)?,
    )?;
    write_file(
        &dir.join("test.jsonl"),
        &with_outputs(&bench.in_distribution)?,
    )?;
    write_file(&dir.join("drifted.jsonl"), &with_outputs(&bench.drifted)?)?;
    eprintln!(
        "wrote training ({}), calibration ({}), test ({}) and drifted ({}) to {}",
        bench.training.len(),
        bench.calibration.len(),
        bench.in_distribution.len(),
        bench.drifted.len(),
        dir.display()
    );
    Ok(Outcome::Ok)
}

fn demo(cli: &Cli, drift_shift: f64) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    let mut options = DemoOptions::new(seed, drift_shift);
    options.detector = resolve_config(cli, options.detector)?;
    let report = run_demo_with(&options)?;
    eprintln!(
        "drifted accuracy {:.4} -> {:.4} after relabelling {} samples",
        report.drifted_accuracy_before,
        report.drifted_accuracy_after,
        report.triage.ids.len()
    );
    let m = &report.drifted.metrics;
    eprintln!(
        "drift detection: recall {:.4} precision {:.4} f1 {:.4} ({} of {} flagged)",
        m.recall, m.precision, m.f1, report.drifted.flagged, report.drifted.samples
    );
    write_json(cli, &report)?;
    Ok(Outcome::Ok)
}
