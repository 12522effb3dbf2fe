//! The full analysis run: ingest, filter, select, fence, rake, discretize,
//! fit, diagnose, exclude, refit and report, driven by one TOML config.
//!
//! Every stage persists its output under the output directory with a
//! numeric prefix, so a run can be audited or resumed stage by stage:
//!
//! | file | content |
//! |---|---|
//! | `01_ingested.csv` .. `04_fenced.csv` | record sets after each cleaning stage |
//! | `04_fence_excluded.csv` | records outside the IQR fences |
//! | `05_weights.csv`, `05_weights.json` | raking weights and their summary |
//! | `06_breaks.json` | report-length classes |
//! | `07_model.json`, `07_design.csv` | pinned model spec and preliminary design |
//! | `08_coefficients_preliminary.csv` | preliminary robust table |
//! | `09_diagnostics_preliminary.json` | diagnostics before exclusion |
//! | `10_kept.csv`, `10_excluded.csv` | records after the exclusion rounds, flagged rows |
//! | `11_coefficients.csv`, `11_diagnostics_final.json` | refit |
//!
//! followed by the report files and `manifest.json`, which lists the SHA-256
//! of every artifact together with the config hash and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    self, filter_eligible, iqr_exclude, load_records, select_one_report, ColumnMapping, DatasetError,
    FilterPolicy, LoadOptions, RecordSet,
};
use crate::design::{build_design, Covariate, DesignError, DesignMatrix, ModelSpec, Response};
use crate::diagnostics::{
    diagnose, exclude_influential, write_plot_csv, DiagnosticsError, DiagnosticsReport, FlaggedRow,
    InfluenceThresholds,
};
use crate::discretize::{fisher_breaks, BreakSet, DiscretizeError};
use crate::raking::{benchmark, rake, CalibrationSpec, RakingError, WeightSummary, WeightVector};
use crate::regress::{coefficient_table, fit_wls, CoefficientTable, FitResult, HcVariant, RegressError};
use crate::synth::SynthError;

/// What went wrong, for exit codes: 2 config, 3 data, 4 numerical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: impl Into<String>, kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self {
            stage: stage.into(),
            kind,
            message: message.to_string(),
        }
    }

    pub fn config(stage: impl Into<String>, message: impl fmt::Display) -> Self {
        Self::new(stage, ErrorKind::Config, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Maps a module error onto an [`ErrorKind`].
pub trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;

    fn at(&self, stage: &str) -> PipelineError {
        PipelineError::new(stage, self.kind(), self)
    }
}

impl Classify for DatasetError {
    fn kind(&self) -> ErrorKind {
        match self {
            DatasetError::Io { .. } | DatasetError::InvalidFactor(_) | DatasetError::InvalidPolicy(_) => {
                ErrorKind::Config
            }
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for RakingError {
    fn kind(&self) -> ErrorKind {
        match self {
            RakingError::UnknownVariable(..)
            | RakingError::NonCategorical(..)
            | RakingError::InvalidTarget { .. }
            | RakingError::InvalidSpec(..)
            | RakingError::Io(..) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for DiscretizeError {
    fn kind(&self) -> ErrorKind {
        match self {
            DiscretizeError::ZeroClasses | DiscretizeError::Invalid(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for DesignError {
    fn kind(&self) -> ErrorKind {
        match self {
            DesignError::ConstantColumn(_) | DesignError::RankDeficient(_) => ErrorKind::Numerical,
            DesignError::UnknownReference { .. } | DesignError::Io(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for RegressError {
    fn kind(&self) -> ErrorKind {
        match self {
            RegressError::NonPositiveWeight { .. } => ErrorKind::Data,
            RegressError::UnknownVariant(_) | RegressError::Io(_) => ErrorKind::Config,
            _ => ErrorKind::Numerical,
        }
    }
}

impl Classify for DiagnosticsError {
    fn kind(&self) -> ErrorKind {
        match self {
            DiagnosticsError::BadThreshold { .. } | DiagnosticsError::Io(_) => ErrorKind::Config,
            _ => ErrorKind::Numerical,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Config
    }
}

/// Where raking targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Calibration {
    /// Unit weights.
    None,
    /// Population counts from the benchmark tables, years restricted to the
    /// filter window.
    Benchmark {
        #[serde(default = "yes")]
        with_disciplines: bool,
    },
    Targets(CalibrationSpec),
}

fn yes() -> bool {
    true
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::Benchmark { with_disciplines: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub response: Response,
    pub covariates: Vec<Covariate>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            response: Response::Log1pCitations,
            covariates: Covariate::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub schema: ColumnMapping,
    pub load: LoadOptions,
    pub filter: FilterPolicy,
    pub iqr_factor: f64,
    pub calibration: Calibration,
    pub k: usize,
    pub model: ModelConfig,
    /// Fit with the raking weights as precision weights.
    pub weighted: bool,
    pub robust_variant: HcVariant,
    pub influence: InfluenceThresholds,
    pub max_exclusion_rounds: usize,
    /// Re-rake the kept records after each exclusion round instead of
    /// reusing the original weights.
    pub rerake_after_exclusion: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            schema: ColumnMapping::default(),
            load: LoadOptions::default(),
            filter: FilterPolicy::default(),
            iqr_factor: 5.0,
            calibration: Calibration::default(),
            k: 5,
            model: ModelConfig::default(),
            weighted: true,
            robust_variant: HcVariant::HC1,
            influence: InfluenceThresholds::default(),
            max_exclusion_rounds: 1,
            rerake_after_exclusion: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::config("config", e))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.output_dir] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::config("config", m));
        if self.input.as_os_str().is_empty() {
            return bad("no input path".into());
        }
        if !(self.iqr_factor > 0.0 && self.iqr_factor.is_finite()) {
            return bad(format!("iqr_factor {} must be positive", self.iqr_factor));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        self.filter.validate().map_err(|e| e.at("config"))?;
        self.influence.validate().map_err(|e| e.at("config"))?;
        if let Some(spec) = self.calibration_spec() {
            spec.validate().map_err(|e| e.at("config"))?;
        }
        Ok(())
    }

    /// SHA-256 of the config as JSON, excluding the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn calibration_spec(&self) -> Option<CalibrationSpec> {
        match &self.calibration {
            Calibration::None => None,
            Calibration::Benchmark { with_disciplines } => Some(benchmark::population_spec(
                Some((self.filter.min_year, self.filter.max_year)),
                *with_disciplines,
            )),
            Calibration::Targets(spec) => Some(spec.clone()),
        }
    }

    pub fn model_spec(&self, breaks: BreakSet) -> ModelSpec {
        ModelSpec {
            response: self.model.response,
            length_breaks: breaks,
            covariates: self.model.covariates.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| PipelineError::config("output", format!("{}: {e}", dir.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| PipelineError::config("output", format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::config(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::new(stage, ErrorKind::Data, format!("{}: {e}", path.display())))
}

pub fn write_records(path: &Path, rs: &RecordSet) -> Result<(), PipelineError> {
    write_file(path, rs.to_csv_string().as_bytes())
}

/// Reads a record set in the canonical column layout.
pub fn read_records(path: &Path, stage: &str) -> Result<RecordSet, PipelineError> {
    load_records(path, &ColumnMapping::default(), &LoadOptions::default()).map_err(|e| e.at(stage))
}

pub fn write_weights(path: &Path, rs: &RecordSet, w: &WeightVector) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    w.write_csv(rs, &mut buf).map_err(|e| e.at("rake"))?;
    write_file(path, &buf)
}

pub fn read_weights(path: &Path, rs: &RecordSet, stage: &str) -> Result<WeightVector, PipelineError> {
    let file = fs::File::open(path).map_err(|e| PipelineError::config(stage, format!("{}: {e}", path.display())))?;
    WeightVector::read_csv(rs, file).map_err(|e| e.at(stage))
}

pub fn table_csv(t: &CoefficientTable) -> Vec<u8> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf).expect("writing to memory");
    buf
}

/// Raking weights for `rs` (unit weights without calibration). A run that
/// stops short of the tolerance is a numerical failure.
pub fn compute_weights(cfg: &PipelineConfig, rs: &RecordSet) -> Result<WeightVector, PipelineError> {
    match cfg.calibration_spec() {
        None => Ok(WeightVector::unit(rs.len())),
        Some(spec) => {
            let w = rake(rs, &spec).map_err(|e| e.at("rake"))?;
            if !w.converged {
                return Err(PipelineError::new(
                    "rake",
                    ErrorKind::Numerical,
                    format!(
                        "no convergence after {} sweeps (max deviation {:e}, tol {:e})",
                        w.iterations_used, w.final_deviation, spec.tol
                    ),
                ));
            }
            Ok(w)
        }
    }
}

pub fn compute_breaks(cfg: &PipelineConfig, rs: &RecordSet) -> Result<BreakSet, PipelineError> {
    let lengths: Vec<f64> = rs.records.iter().map(|r| r.report_length as f64).collect();
    fisher_breaks(&lengths, cfg.k, None).map_err(|e| e.at("discretize"))
}

/// Drops year and discipline labels that no record in `rs` carries, so a
/// refit after exclusions does not fail on an all-zero dummy. A vanished
/// reference is replaced by the first remaining label.
pub fn prune_empty_dummies(spec: &ModelSpec, rs: &RecordSet) -> (ModelSpec, Vec<String>) {
    use crate::design::{DisciplineMode, YearBlock};
    use std::collections::BTreeSet;
    let mut notes = Vec::new();
    let mut out = spec.clone();
    for cov in &mut out.covariates {
        match cov {
            Covariate::Year(YearBlock {
                vocabulary: Some(vocab),
                reference,
            }) => {
                let present: BTreeSet<i32> = rs.records.iter().map(|r| r.pub_year).collect();
                let dropped: Vec<i32> = vocab.iter().copied().filter(|y| !present.contains(y)).collect();
                if dropped.is_empty() {
                    continue;
                }
                vocab.retain(|y| present.contains(y));
                notes.push(format!("refit: year dummies without records dropped: {dropped:?}"));
                if reference.is_some_and(|r| !present.contains(&r)) {
                    *reference = vocab.first().copied();
                    notes.push(format!("refit: year reference moved to {:?}", reference));
                }
            }
            Covariate::Discipline(block) => {
                let Some(vocab) = &mut block.vocabulary else { continue };
                let present: BTreeSet<&str> = match block.mode {
                    DisciplineMode::MultiHot => rs
                        .records
                        .iter()
                        .flat_map(|r| r.disciplines.iter().map(String::as_str))
                        .collect(),
                    DisciplineMode::Primary => rs
                        .records
                        .iter()
                        .filter_map(|r| r.primary_discipline.as_deref())
                        .collect(),
                };
                let dropped: Vec<String> = vocab.iter().filter(|l| !present.contains(l.as_str())).cloned().collect();
                if dropped.is_empty() {
                    continue;
                }
                vocab.retain(|l| present.contains(l.as_str()));
                notes.push(format!("refit: discipline dummies without records dropped: {dropped:?}"));
                if block.reference.as_ref().is_some_and(|r| !present.contains(r.as_str())) {
                    block.reference = vocab.first().cloned();
                    notes.push(format!("refit: discipline reference moved to {:?}", block.reference));
                }
            }
            _ => {}
        }
    }
    (out, notes)
}

pub struct FitStage {
    pub design: DesignMatrix,
    pub fit: FitResult,
    pub table: CoefficientTable,
    pub notes: Vec<String>,
}

/// Design, fit and robust table for one record set, after pruning empty
/// dummies from `spec`.
pub fn fit_stage(
    cfg: &PipelineConfig,
    rs: &RecordSet,
    w: &WeightVector,
    spec: &ModelSpec,
    stage: &str,
) -> Result<FitStage, PipelineError> {
    let (spec, notes) = prune_empty_dummies(spec, rs);
    let weights = cfg.weighted.then_some(w);
    let design = build_design(rs, &spec, weights).map_err(|e| e.at(stage))?;
    let fit = fit_wls(&design).map_err(|e| e.at(stage))?;
    let table = coefficient_table(&fit, cfg.robust_variant).map_err(|e| e.at(stage))?;
    Ok(FitStage {
        design,
        fit,
        table,
        notes,
    })
}

pub struct ExclusionOutcome {
    pub records: RecordSet,
    pub weights: WeightVector,
    pub design: DesignMatrix,
    pub fit: FitResult,
    pub table: CoefficientTable,
    pub flagged: Vec<FlaggedRow>,
    pub rounds: usize,
    pub notes: Vec<String>,
}

/// Up to `max_exclusion_rounds` of flag, drop and refit. Stops early when a
/// round flags nothing. The model spec stays pinned to `spec`.
pub fn exclusion_rounds(
    cfg: &PipelineConfig,
    rs: &RecordSet,
    w: &WeightVector,
    spec: &ModelSpec,
) -> Result<ExclusionOutcome, PipelineError> {
    let mut current = fit_stage(cfg, rs, w, spec, "fit")?;
    let mut records = rs.clone();
    let mut weights = w.clone();
    let mut flagged = Vec::new();
    let mut notes = Vec::new();
    let mut rounds = 0;
    while rounds < cfg.max_exclusion_rounds {
        let (cook, hat) = cfg.influence.resolve(current.fit.n, current.fit.p);
        let (kept, round_flags) =
            exclude_influential(&records, &current.fit, cook, hat).map_err(|e| e.at("exclude"))?;
        rounds += 1;
        if round_flags.is_empty() {
            notes.push(format!("exclude: round {rounds} flagged nothing"));
            break;
        }
        weights = if cfg.rerake_after_exclusion {
            notes.push(format!("exclude: round {rounds} re-raked the kept records"));
            compute_weights(cfg, &kept)?
        } else {
            weights.restrict(&records, &kept).map_err(|e| e.at("exclude"))?
        };
        records = kept;
        flagged.extend(round_flags);
        current = fit_stage(cfg, &records, &weights, spec, "refit")?;
        notes.extend(current.notes.iter().cloned());
    }
    if !cfg.rerake_after_exclusion {
        notes.push("exclude: weights from the pre-fit raking reused after exclusion (no re-rake)".into());
    }
    Ok(ExclusionOutcome {
        records,
        weights,
        design: current.design,
        fit: current.fit,
        table: current.table,
        flagged,
        rounds,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
    pub input_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub stamp: Stamp,
    pub counts: Vec<StageCount>,
    pub breaks: BreakSet,
    pub weights: WeightSummary,
    pub coefficients_preliminary: CoefficientTable,
    pub coefficients: CoefficientTable,
    pub diagnostics_pre: DiagnosticsReport,
    pub diagnostics_post: DiagnosticsReport,
    pub excluded: Vec<FlaggedRow>,
    pub exclusion_rounds: usize,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(PipelineError::config("report", format!("unknown format '{s}' (csv or json)"))),
        }
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    counts: Vec<StageCount>,
    log: Vec<String>,
}

impl Run<'_> {
    fn count(&mut self, stage: &str, records: usize) {
        self.counts.push(StageCount {
            stage: stage.into(),
            records,
        });
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Leaves counts and provenance behind when a stage fails.
    fn persist_on_error(&self, err: &PipelineError) {
        let _ = write_json(&self.path("counts.json"), &self.counts);
        let mut log = self.log.clone();
        log.push(format!("aborted at {}: {}", err.stage, err.message));
        let _ = write_file(&self.path("provenance.txt"), (log.join("\n") + "\n").as_bytes());
    }
}

/// Runs every stage in order, writing intermediates and the report into
/// `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle, PipelineError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| PipelineError::config("output", format!("{}: {e}", dir.display())))?;
    let mut run = Run {
        cfg,
        dir: &dir,
        counts: Vec::new(),
        log: Vec::new(),
    };
    match stages(&mut run) {
        Ok(bundle) => Ok(bundle),
        Err(e) => {
            run.persist_on_error(&e);
            Err(e)
        }
    }
}

fn stages(run: &mut Run) -> Result<ReportBundle, PipelineError> {
    let cfg = run.cfg;
    let input_bytes = fs::read(&cfg.input)
        .map_err(|e| PipelineError::config("ingest", format!("{}: {e}", cfg.input.display())))?;
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        input_sha256: sha256_hex(&input_bytes),
    };
    run.log.push(format!("config {} seed {}", stamp.config_hash, stamp.seed));

    let mut ingested = dataset::read_records(&input_bytes[..], &cfg.schema, &cfg.load).map_err(|e| e.at("ingest"))?;
    let name = cfg.input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    ingested
        .provenance
        .insert(0, format!("ingest: {} records from {name}", ingested.len()));
    run.count("ingest", ingested.len());
    write_records(&run.path("01_ingested.csv"), &ingested)?;

    let filtered = filter_eligible(&ingested, &cfg.filter);
    run.count("filter", filtered.len());
    write_records(&run.path("02_filtered.csv"), &filtered)?;

    let selected = select_one_report(&filtered, cfg.seed);
    run.count("select", selected.len());
    write_records(&run.path("03_selected.csv"), &selected)?;
    if selected.is_empty() {
        return Err(PipelineError::new("select", ErrorKind::Data, "no records left after filtering"));
    }

    let fence = iqr_exclude(&selected, cfg.iqr_factor).map_err(|e| e.at("fence"))?;
    run.count("fence", fence.kept.len());
    write_records(&run.path("04_fenced.csv"), &fence.kept)?;
    write_records(&run.path("04_fence_excluded.csv"), &fence.excluded)?;
    let fenced = fence.kept;
    if fenced.len() + fence.excluded.len() != selected.len() {
        return Err(PipelineError::new("fence", ErrorKind::Data, "fence counts do not add up"));
    }
    run.log.push(format!(
        "check: fence {} kept + {} excluded = {} selected",
        fenced.len(),
        fence.excluded.len(),
        selected.len()
    ));

    let weights = compute_weights(cfg, &fenced)?;
    write_weights(&run.path("05_weights.csv"), &fenced, &weights)?;
    write_json(&run.path("05_weights.json"), &weights.summary())?;
    run.log.extend(weights.notes.iter().map(|n| format!("rake: {n}")));

    let breaks = compute_breaks(cfg, &fenced)?;
    write_file(&run.path("06_breaks.json"), (breaks.to_json() + "\n").as_bytes())?;
    run.log.push(format!("discretize: k = {}, classes {}", breaks.k, breaks.labels().join(", ")));

    let spec = cfg.model_spec(breaks.clone());
    let FitStage {
        design: dm0,
        fit: fr0,
        table: table0,
        ..
    } = fit_stage(cfg, &fenced, &weights, &spec, "fit")?;
    let pinned = dm0.resolved.clone().expect("built designs carry their spec");
    write_json(&run.path("07_model.json"), &pinned)?;
    let mut design_csv = Vec::new();
    dm0.write_csv(&mut design_csv).map_err(|e| e.at("fit"))?;
    write_file(&run.path("07_design.csv"), &design_csv)?;
    write_file(&run.path("08_coefficients_preliminary.csv"), &table_csv(&table0))?;
    run.log.extend(dm0.notes.iter().cloned());
    run.log.push(format!(
        "fit: n = {}, p = {}, {} fit, robust {}",
        fr0.n,
        fr0.p,
        if fr0.weighted { "weighted" } else { "unweighted" },
        cfg.robust_variant
    ));

    let diag_pre = diagnose(&dm0, &fr0, &cfg.influence).map_err(|e| e.at("diagnose"))?;
    write_json(&run.path("09_diagnostics_preliminary.json"), &diag_pre)?;

    let outcome = exclusion_rounds(cfg, &fenced, &weights, &pinned)?;
    run.count("exclude", outcome.records.len());
    write_records(&run.path("10_kept.csv"), &outcome.records)?;
    write_file(&run.path("10_excluded.csv"), &flagged_csv(&outcome.flagged))?;
    if outcome.records.len() + outcome.flagged.len() != fenced.len() {
        return Err(PipelineError::new("exclude", ErrorKind::Data, "exclusion counts do not add up"));
    }
    run.log.push(format!(
        "check: exclude {} kept + {} excluded = {} fenced",
        outcome.records.len(),
        outcome.flagged.len(),
        fenced.len()
    ));
    run.log.extend(outcome.notes.iter().cloned());

    let diag_post = if outcome.flagged.is_empty() {
        diag_pre.clone()
    } else {
        diagnose(&outcome.design, &outcome.fit, &cfg.influence).map_err(|e| e.at("refit"))?
    };
    write_file(&run.path("11_coefficients.csv"), &table_csv(&outcome.table))?;
    write_json(&run.path("11_diagnostics_final.json"), &diag_post)?;

    let mut provenance = outcome.records.provenance.clone();
    provenance.extend(run.log.iter().cloned());
    provenance.extend(diag_post.notes.iter().map(|n| format!("diagnostics: {n}")));
    let bundle = ReportBundle {
        stamp,
        counts: run.counts.clone(),
        breaks,
        weights: weights.summary(),
        coefficients_preliminary: table0,
        coefficients: outcome.table,
        diagnostics_pre: diag_pre,
        diagnostics_post: diag_post,
        excluded: outcome.flagged,
        exclusion_rounds: outcome.rounds,
        provenance,
    };
    report(&bundle, run.dir, ReportFormat::Csv)?;
    report(&bundle, run.dir, ReportFormat::Json)?;
    write_json(&run.path("bundle.json"), &bundle)?;
    write_manifest(run.dir, &bundle.stamp)?;
    Ok(bundle)
}

pub fn flagged_csv(flagged: &[FlaggedRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_id", "reason", "cooks_d", "hat"]).expect("writing to memory");
    for f in flagged {
        let reason = match f.reason {
            crate::diagnostics::FlagReason::Cook => "cook",
            crate::diagnostics::FlagReason::Hat => "hat",
            crate::diagnostics::FlagReason::Both => "both",
        };
        w.write_record([f.row_id.as_str(), reason, &f.cooks_d.to_string(), &f.hat.to_string()])
            .expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// Writes the coefficient table, forest-plot data, residual/influence plot
/// data, stage counts, provenance and a plain-text summary.
pub fn report(bundle: &ReportBundle, dir: &Path, format: ReportFormat) -> Result<(), PipelineError> {
    let io = |e: &dyn fmt::Display| PipelineError::config("report", e);
    match format {
        ReportFormat::Csv => {
            write_file(&dir.join("coefficients.csv"), &table_csv(&bundle.coefficients))?;
            let mut forest = Vec::new();
            bundle.coefficients.write_forest_csv(&mut forest).map_err(|e| io(&e))?;
            write_file(&dir.join("forest.csv"), &forest)?;
            for (name, diag) in [
                ("plot_preliminary.csv", &bundle.diagnostics_pre),
                ("plot_final.csv", &bundle.diagnostics_post),
            ] {
                let mut buf = Vec::new();
                write_plot_csv(diag, &mut buf).map_err(|e| io(&e))?;
                write_file(&dir.join(name), &buf)?;
            }
            let mut counts = csv::Writer::from_writer(Vec::new());
            counts.write_record(["stage", "records"]).map_err(|e| io(&e))?;
            for c in &bundle.counts {
                counts
                    .write_record([c.stage.as_str(), &c.records.to_string()])
                    .map_err(|e| io(&e))?;
            }
            write_file(&dir.join("counts.csv"), &counts.into_inner().map_err(|e| io(&e))?)?;
        }
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Stamped<'a, T> {
                stamp: &'a Stamp,
                #[serde(flatten)]
                data: T,
            }
            write_json(
                &dir.join("coefficients.json"),
                &Stamped {
                    stamp: &bundle.stamp,
                    data: &bundle.coefficients,
                },
            )?;
            #[derive(Serialize)]
            struct Forest<'a> {
                rows: Vec<BTreeMap<&'a str, serde_json::Value>>,
            }
            let rows = bundle
                .coefficients
                .rows
                .iter()
                .map(|r| {
                    BTreeMap::from([
                        ("term", r.term.clone().into()),
                        ("label", r.label.clone().into()),
                        ("estimate", r.estimate.into()),
                        ("ci_low", r.ci_low.into()),
                        ("ci_high", r.ci_high.into()),
                        ("significance", r.significance.clone().into()),
                    ])
                })
                .collect();
            write_json(
                &dir.join("forest.json"),
                &Stamped {
                    stamp: &bundle.stamp,
                    data: Forest { rows },
                },
            )?;
            write_json(&dir.join("counts.json"), &bundle.counts)?;
        }
    }
    write_file(&dir.join("provenance.txt"), (bundle.provenance.join("\n") + "\n").as_bytes())?;
    write_file(&dir.join("summary.txt"), summary(bundle).as_bytes())?;
    Ok(())
}

fn write_manifest(dir: &Path, stamp: &Stamp) -> Result<(), PipelineError> {
    let mut artifacts = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::config("report", e))?;
    for entry in entries {
        let entry = entry.map_err(|e| PipelineError::config("report", e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "manifest.json" || !entry.path().is_file() {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| PipelineError::config("report", e))?;
        artifacts.insert(name, sha256_hex(&bytes));
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        stamp: &'a Stamp,
        artifacts: BTreeMap<String, String>,
    }
    write_json(&dir.join("manifest.json"), &Manifest { stamp, artifacts })
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        None => "n/a".into(),
        Some(p) if p < 1e-4 => format!("{p:.1e}"),
        Some(p) => format!("{p:.4}"),
    }
}

pub fn summary(b: &ReportBundle) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "config {}  seed {}", b.stamp.config_hash, b.stamp.seed);
    let _ = writeln!(s, "input sha256 {}", b.stamp.input_sha256);
    let _ = writeln!(s, "\nrecords by stage");
    for c in &b.counts {
        let _ = writeln!(s, "  {:<10} {:>9}", c.stage, c.records);
    }
    let w = &b.weights;
    let _ = writeln!(
        s,
        "\nweights  min {:.4}  max {:.4}  mean {:.4}  sweeps {}  converged {}",
        w.min, w.max, w.mean, w.iterations_used, w.converged
    );
    let _ = writeln!(s, "\nreport length classes");
    for c in &b.breaks.boundaries {
        let _ = writeln!(s, "  {:<14} {:>8}", c.label(), c.count);
    }
    let t = &b.coefficients;
    let _ = writeln!(
        s,
        "\ncoefficients ({} SE, {}, n = {}, p = {})",
        t.variant,
        if t.weighted { "weighted" } else { "unweighted" },
        t.n,
        t.p
    );
    let _ = writeln!(
        s,
        "  {:<28} {:>10} {:>10} {:>10} {:>10}  {:<23}",
        "term", "estimate", "SE", "t", "p", "95% CI"
    );
    for r in &t.rows {
        let _ = writeln!(
            s,
            "  {:<28} {:>10.4} {:>10.4} {:>10} {:>10}  [{:.4}, {:.4}] {}",
            r.label,
            r.estimate,
            r.std_error,
            r.t_stat.map_or("n/a".into(), |t| format!("{t:.3}")),
            fmt_p(r.p_value),
            r.ci_low,
            r.ci_high,
            r.significance
        );
    }
    let _ = writeln!(s, "  references: {}", t.references.join("; "));
    for (name, d) in [("preliminary", &b.diagnostics_pre), ("final", &b.diagnostics_post)] {
        let _ = writeln!(
            s,
            "\ndiagnostics ({name})  max VIF {:.3}  studentized BP {:.3} (df {}, p {})  flagged {}",
            d.max_vif(),
            d.breusch_pagan.stat,
            d.breusch_pagan.df,
            fmt_p(Some(d.breusch_pagan.p_value)),
            d.flagged.len()
        );
    }
    let _ = writeln!(
        s,
        "\nexcluded {} rows in {} round(s)",
        b.excluded.len(),
        b.exclusion_rounds
    );
    s
}
