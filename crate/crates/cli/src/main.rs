use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use citecal::dataset::{self, filter_eligible, iqr_exclude, select_one_report, RecordSet};
use citecal::design::{build_design, ModelSpec};
use citecal::diagnostics::diagnose;
use citecal::discretize::BreakSet;
use citecal::pipeline::{
    compute_breaks, compute_weights, exclusion_rounds, fit_stage, flagged_csv, read_json, read_records,
    read_weights, report, run_pipeline, table_csv, write_file, write_json, write_records, write_weights,
    prune_empty_dummies, Classify, FitStage, PipelineConfig, PipelineError, ReportBundle, ReportFormat,
};
use citecal::raking::WeightVector;
use citecal::regress::fit_wls;
use citecal::synth::{generate, SynthSpec};

/// Calibrated regression of citations on review-report length.
#[derive(Parser)]
#[command(name = "citecal", version)]
struct Cli {
    /// Pipeline config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print provenance notes to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a raw CSV through the configured column mapping.
    Ingest,
    /// Keep records inside the eligibility window.
    Filter,
    /// Keep one random report per publication.
    Select,
    /// Drop report lengths outside the IQR fences.
    Fence {
        /// Where to write the fenced-out records.
        #[arg(long)]
        excluded: Option<PathBuf>,
    },
    /// Compute raking weights (pub_id,weight CSV).
    Rake,
    /// Fisher class breaks for report length (JSON).
    Discretize,
    /// Build the design and fit the preliminary model into a directory.
    Fit {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        breaks: PathBuf,
    },
    /// Diagnostics report (JSON) for a fitted model.
    Diagnose {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Drop influential rows; writes the kept records.
    Exclude {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Where to write the flagged rows.
        #[arg(long)]
        excluded: Option<PathBuf>,
        /// Where to write the weights of the kept records.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Fit the final model on kept records into a directory.
    Refit {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
    },
    /// Write report files from a saved bundle.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Generate a synthetic corpus; --config takes a synth spec here.
    Synth {
        /// Number of publications.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, stage: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref()
        .ok_or_else(|| PipelineError::config(stage, format!("--{flag} is required")))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(input) = &cli.input {
        cfg.input = input.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn weights_for(
    path: &Option<PathBuf>,
    rs: &RecordSet,
    stage: &str,
) -> Result<WeightVector, PipelineError> {
    match path {
        Some(p) => read_weights(p, rs, stage),
        None => Ok(WeightVector::unit(rs.len())),
    }
}

fn say(cli: &Cli, lines: &[String]) {
    if cli.verbose {
        for l in lines {
            eprintln!("{l}");
        }
    }
}

/// Writes to stdout; a closed reader (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes());
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Synth { n } = &cli.command {
        return synth(cli, *n);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest => {
            let input = need(&cli.input, "input", "ingest")?;
            let rs = dataset::load_records(input, &cfg.schema, &cfg.load).map_err(|e| e.at("ingest"))?;
            say(cli, &rs.provenance);
            write_records(need(&cli.out, "out", "ingest")?, &rs)
        }
        Command::Filter => {
            let rs = read_records(need(&cli.input, "input", "filter")?, "filter")?;
            cfg.filter.validate().map_err(|e| e.at("filter"))?;
            let out = filter_eligible(&rs, &cfg.filter);
            say(cli, &out.provenance);
            write_records(need(&cli.out, "out", "filter")?, &out)
        }
        Command::Select => {
            let rs = read_records(need(&cli.input, "input", "select")?, "select")?;
            let out = select_one_report(&rs, cfg.seed);
            say(cli, &out.provenance);
            write_records(need(&cli.out, "out", "select")?, &out)
        }
        Command::Fence { excluded } => {
            let rs = read_records(need(&cli.input, "input", "fence")?, "fence")?;
            let split = iqr_exclude(&rs, cfg.iqr_factor).map_err(|e| e.at("fence"))?;
            say(cli, &split.kept.provenance);
            if let Some(path) = excluded {
                write_records(path, &split.excluded)?;
            }
            write_records(need(&cli.out, "out", "fence")?, &split.kept)
        }
        Command::Rake => {
            let rs = read_records(need(&cli.input, "input", "rake")?, "rake")?;
            let w = compute_weights(&cfg, &rs)?;
            say(cli, &w.notes);
            write_weights(need(&cli.out, "out", "rake")?, &rs, &w)
        }
        Command::Discretize => {
            let rs = read_records(need(&cli.input, "input", "discretize")?, "discretize")?;
            let breaks = compute_breaks(&cfg, &rs)?;
            say(cli, &[format!("classes {}", breaks.labels().join(", "))]);
            write_file(need(&cli.out, "out", "discretize")?, (breaks.to_json() + "\n").as_bytes())
        }
        Command::Fit { weights, breaks } => {
            let rs = read_records(need(&cli.input, "input", "fit")?, "fit")?;
            let w = weights_for(weights, &rs, "fit")?;
            let text = std::fs::read_to_string(breaks)
                .map_err(|e| PipelineError::config("fit", format!("{}: {e}", breaks.display())))?;
            let breaks = BreakSet::from_json(&text).map_err(|e| e.at("fit"))?;
            let FitStage {
                design: dm,
                fit: fr,
                table,
                ..
            } = fit_stage(&cfg, &rs, &w, &cfg.model_spec(breaks), "fit")?;
            let dir = need(&cli.out, "out", "fit")?;
            write_json(&dir.join("model.json"), dm.resolved.as_ref().expect("built design"))?;
            let mut design = Vec::new();
            dm.write_csv(&mut design).map_err(|e| e.at("fit"))?;
            write_file(&dir.join("design.csv"), &design)?;
            write_file(&dir.join("coefficients.csv"), &table_csv(&table))?;
            say(cli, &[format!("fit: n = {}, p = {}", fr.n, fr.p)]);
            Ok(())
        }
        Command::Diagnose { weights, model } => {
            let rs = read_records(need(&cli.input, "input", "diagnose")?, "diagnose")?;
            let w = weights_for(weights, &rs, "diagnose")?;
            let spec: ModelSpec = read_json(model, "diagnose")?;
            let (spec, notes) = prune_empty_dummies(&spec, &rs);
            say(cli, &notes);
            let dm = build_design(&rs, &spec, cfg.weighted.then_some(&w)).map_err(|e| e.at("diagnose"))?;
            let fr = fit_wls(&dm).map_err(|e| e.at("diagnose"))?;
            let report = diagnose(&dm, &fr, &cfg.influence).map_err(|e| e.at("diagnose"))?;
            say(cli, &report.notes);
            write_json(need(&cli.out, "out", "diagnose")?, &report)
        }
        Command::Exclude {
            weights,
            model,
            excluded,
            weights_out,
        } => {
            let rs = read_records(need(&cli.input, "input", "exclude")?, "exclude")?;
            let w = weights_for(weights, &rs, "exclude")?;
            let spec: ModelSpec = read_json(model, "exclude")?;
            let outcome = exclusion_rounds(&cfg, &rs, &w, &spec)?;
            say(cli, &outcome.notes);
            if let Some(path) = excluded {
                write_file(path, &flagged_csv(&outcome.flagged))?;
            }
            if let Some(path) = weights_out {
                write_weights(path, &outcome.records, &outcome.weights)?;
            }
            write_records(need(&cli.out, "out", "exclude")?, &outcome.records)
        }
        Command::Refit { weights, model } => {
            let rs = read_records(need(&cli.input, "input", "refit")?, "refit")?;
            let w = weights_for(weights, &rs, "refit")?;
            let spec: ModelSpec = read_json(model, "refit")?;
            let FitStage {
                design: dm,
                fit: fr,
                table,
                notes,
            } = fit_stage(&cfg, &rs, &w, &spec, "refit")?;
            say(cli, &notes);
            let report = diagnose(&dm, &fr, &cfg.influence).map_err(|e| e.at("refit"))?;
            let dir = need(&cli.out, "out", "refit")?;
            write_file(&dir.join("coefficients.csv"), &table_csv(&table))?;
            write_json(&dir.join("diagnostics.json"), &report)?;
            say(cli, &[format!("refit: n = {}, p = {}", fr.n, fr.p)]);
            Ok(())
        }
        Command::Report { bundle, format } => {
            let format: ReportFormat = format.parse()?;
            let bundle: ReportBundle = read_json(bundle, "report")?;
            report(&bundle, need(&cli.out, "out", "report")?, format)
        }
        Command::Pipeline => {
            let bundle = run_pipeline(&cfg)?;
            say(cli, &bundle.provenance);
            emit(&(citecal::pipeline::summary(&bundle) + "\n"));
            Ok(())
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn synth(cli: &Cli, n: Option<usize>) -> Result<(), PipelineError> {
    let mut spec = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::config("synth", format!("{}: {e}", path.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| PipelineError::config("synth", e))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = n {
        spec.n = n;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let rs = generate(&spec).map_err(|e| e.at("synth"))?;
    say(cli, &rs.provenance);
    match &cli.out {
        Some(path) => write_records(path, &rs),
        None => {
            emit(&rs.to_csv_string());
            Ok(())
        }
    }
}
