//! Raking-ratio (iterative proportional fitting) calibration weights.
//!
//! Each sweep visits the margins in the order given by the
//! [`CalibrationSpec`] and multiplies every record's weight by
//! `target share / current weighted share` of the record's category. Sweeps
//! repeat until the largest absolute marginal deviation is within `tol`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImpactClass, PublicationRecord, RecordSet};

/// Floor applied to weights that a zero target drives toward 0.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RakingError {
    #[error("unknown margin variable '{0}'")]
    UnknownVariable(String),
    #[error("margin variable '{0}' is not categorical")]
    NonCategorical(String),
    #[error("margin '{variable}': category '{category}' has target share {share} but no sample records")]
    EmptySupport {
        variable: String,
        category: String,
        share: f64,
    },
    #[error("margin '{variable}': sample category '{category}' has no target share")]
    UncoveredCategory { variable: String, category: String },
    #[error("margin '{variable}': {message}")]
    InvalidTarget { variable: String, message: String },
    #[error("invalid calibration spec: {0}")]
    InvalidSpec(String),
    #[error("cannot rake an empty record set")]
    EmptySample,
    #[error("weights not aligned: {weights} weights for {records} records")]
    Misaligned { weights: usize, records: usize },
    #[error("weight {value} at row {row} is not a positive finite number")]
    BadWeight { row: usize, value: f64 },
    #[error("weights file: {0}")]
    Io(String),
}

/// A categorical view of a [`PublicationRecord`] that can carry a margin.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MarginVariable {
    Year,
    OpenAccess,
    /// Funder count banded as 0, 1, 2, 3, 4+.
    Funding,
    /// Country count banded as 1, 2, 3, 4+.
    Countries,
    /// Binary membership ("yes"/"no") in one discipline panel.
    Discipline(String),
    ImpactClass,
}

impl MarginVariable {
    pub fn category(&self, r: &PublicationRecord) -> String {
        match self {
            MarginVariable::Year => r.pub_year.to_string(),
            MarginVariable::OpenAccess => yes_no(r.open_access).into(),
            MarginVariable::Funding => match r.n_funders {
                n @ 0..=3 => n.to_string(),
                _ => "4+".into(),
            },
            MarginVariable::Countries => match r.n_countries {
                n @ 0..=3 => n.to_string(),
                _ => "4+".into(),
            },
            MarginVariable::Discipline(label) => yes_no(r.disciplines.contains(label)).into(),
            MarginVariable::ImpactClass => r.impact_class().label().into(),
        }
    }

    /// Every category the variable can take, when that set is closed.
    pub fn closed_categories(&self) -> Option<Vec<String>> {
        let v = |xs: &[&str]| Some(xs.iter().map(|s| s.to_string()).collect());
        match self {
            MarginVariable::Year => None,
            MarginVariable::OpenAccess | MarginVariable::Discipline(_) => v(&["no", "yes"]),
            MarginVariable::Funding => v(&["0", "1", "2", "3", "4+"]),
            MarginVariable::Countries => v(&["1", "2", "3", "4+"]),
            MarginVariable::ImpactClass => {
                Some(ImpactClass::ALL.iter().map(|c| c.label().to_string()).collect())
            }
        }
    }
}

fn yes_no(flag: bool) -> &'static str {
    if flag {
        "yes"
    } else {
        "no"
    }
}

impl FromStr for MarginVariable {
    type Err = RakingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(label) = s.strip_prefix("discipline:") {
            if label.is_empty() {
                return Err(RakingError::UnknownVariable(s.into()));
            }
            return Ok(MarginVariable::Discipline(label.to_string()));
        }
        match s {
            "year" | "pub_year" => Ok(MarginVariable::Year),
            "open_access" => Ok(MarginVariable::OpenAccess),
            "funding" => Ok(MarginVariable::Funding),
            "countries" => Ok(MarginVariable::Countries),
            "impact_class" => Ok(MarginVariable::ImpactClass),
            "pub_id" | "report_length" | "citations" | "journal_impact" | "n_funders"
            | "n_countries" | "disciplines" => Err(RakingError::NonCategorical(s.into())),
            _ => Err(RakingError::UnknownVariable(s.into())),
        }
    }
}

impl fmt::Display for MarginVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarginVariable::Year => f.write_str("year"),
            MarginVariable::OpenAccess => f.write_str("open_access"),
            MarginVariable::Funding => f.write_str("funding"),
            MarginVariable::Countries => f.write_str("countries"),
            MarginVariable::Discipline(label) => write!(f, "discipline:{label}"),
            MarginVariable::ImpactClass => f.write_str("impact_class"),
        }
    }
}

/// Population shares for one categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTarget {
    pub variable: String,
    pub shares: BTreeMap<String, f64>,
}

impl MarginTarget {
    pub fn new(variable: impl Into<String>, shares: BTreeMap<String, f64>) -> Result<Self, RakingError> {
        let t = Self {
            variable: variable.into(),
            shares,
        };
        t.validate()?;
        Ok(t)
    }

    /// Builds a target from population counts, normalizing them to shares.
    pub fn from_counts<S: Into<String>>(
        variable: impl Into<String>,
        counts: impl IntoIterator<Item = (S, f64)>,
    ) -> Result<Self, RakingError> {
        let counts: Vec<(String, f64)> = counts.into_iter().map(|(k, v)| (k.into(), v)).collect();
        let total: f64 = counts.iter().map(|(_, v)| v).sum();
        let variable = variable.into();
        if !(total > 0.0 && total.is_finite()) {
            return Err(RakingError::InvalidTarget {
                variable,
                message: "counts must have a positive finite total".into(),
            });
        }
        Self::new(
            variable,
            counts.into_iter().map(|(k, v)| (k, v / total)).collect(),
        )
    }

    pub fn parsed_variable(&self) -> Result<MarginVariable, RakingError> {
        self.variable.parse()
    }

    pub fn validate(&self) -> Result<(), RakingError> {
        let var = self.parsed_variable()?;
        let invalid = |message: String| RakingError::InvalidTarget {
            variable: self.variable.clone(),
            message,
        };
        if self.shares.is_empty() {
            return Err(invalid("no categories".into()));
        }
        if let Some((k, v)) = self.shares.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("share for '{k}' is {v}")));
        }
        let sum: f64 = self.shares.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("shares sum to {sum}, not 1")));
        }
        if let Some(closed) = var.closed_categories() {
            if let Some(k) = self.shares.keys().find(|k| !closed.contains(k)) {
                return Err(invalid(format!(
                    "category '{k}' is not one of {closed:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSpec {
    pub margins: Vec<MarginTarget>,
    /// Largest tolerated |weighted share - target| over all categories.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            margins: Vec::new(),
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

impl CalibrationSpec {
    pub fn new(margins: Vec<MarginTarget>) -> Self {
        Self {
            margins,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RakingError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(RakingError::InvalidSpec(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(RakingError::InvalidSpec("max_iter must be >= 1".into()));
        }
        self.margins.iter().try_for_each(MarginTarget::validate)
    }
}

/// Raking output, aligned to the record set it was computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_deviation: f64,
    /// Largest |factor - 1| applied to any record over the whole run.
    pub max_step: f64,
    pub notes: Vec<String>,
}

impl WeightVector {
    pub fn unit(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            iterations_used: 0,
            converged: true,
            final_deviation: 0.0,
            max_step: 0.0,
            notes: vec!["unit weights".into()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn summary(&self) -> WeightSummary {
        let n = self.weights.len().max(1) as f64;
        WeightSummary {
            n: self.weights.len(),
            min: self.weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: self.weights.iter().sum::<f64>() / n,
            iterations_used: self.iterations_used,
            converged: self.converged,
            final_deviation: self.final_deviation,
        }
    }

    /// Writes `pub_id,weight` rows in record order.
    pub fn write_csv<W: Write>(&self, rs: &RecordSet, out: W) -> Result<(), RakingError> {
        if rs.len() != self.len() {
            return Err(RakingError::Misaligned {
                weights: self.len(),
                records: rs.len(),
            });
        }
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| RakingError::Io(e.to_string());
        w.write_record(["pub_id", "weight"]).map_err(io)?;
        for (r, wt) in rs.records.iter().zip(&self.weights) {
            w.write_record([r.pub_id.as_str(), &wt.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| RakingError::Io(e.to_string()))
    }

    /// Reads `pub_id,weight` rows and aligns them to `rs` by pub_id.
    pub fn read_csv<R: Read>(rs: &RecordSet, input: R) -> Result<Self, RakingError> {
        let mut reader = csv::Reader::from_reader(input);
        let mut by_id = std::collections::HashMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| RakingError::Io(e.to_string()))?;
            let id = row.get(0).unwrap_or("").to_string();
            let w: f64 = row
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| RakingError::Io(format!("bad weight for '{id}'")))?;
            by_id.insert(id, w);
        }
        let weights = rs
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(&r.pub_id)
                    .copied()
                    .ok_or_else(|| RakingError::Io(format!("no weight for pub_id '{}'", r.pub_id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_weights(&weights)?;
        Ok(Self {
            weights,
            iterations_used: 0,
            converged: true,
            final_deviation: 0.0,
            max_step: 0.0,
            notes: vec!["weights read from file".into()],
        })
    }

    /// Weights for the records of `subset`, looked up by pub_id in `parent`.
    pub fn restrict(&self, parent: &RecordSet, subset: &RecordSet) -> Result<Self, RakingError> {
        if parent.len() != self.len() {
            return Err(RakingError::Misaligned {
                weights: self.len(),
                records: parent.len(),
            });
        }
        let by_id: std::collections::HashMap<&str, f64> = parent
            .records
            .iter()
            .map(|r| r.pub_id.as_str())
            .zip(self.weights.iter().copied())
            .collect();
        let weights = subset
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(r.pub_id.as_str())
                    .copied()
                    .ok_or_else(|| RakingError::Io(format!("no weight for pub_id '{}'", r.pub_id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = self.clone();
        out.weights = weights;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_deviation: f64,
}

fn check_weights(weights: &[f64]) -> Result<(), RakingError> {
    match weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        Some((row, &value)) => Err(RakingError::BadWeight { row, value }),
        None => Ok(()),
    }
}

/// One margin with records mapped to dense category indices.
struct CompiledMargin {
    name: String,
    categories: Vec<String>,
    targets: Vec<f64>,
    member: Vec<usize>,
}

fn compile(rs: &RecordSet, target: &MarginTarget) -> Result<CompiledMargin, RakingError> {
    let var = target.parsed_variable()?;
    let categories: Vec<String> = target.shares.keys().cloned().collect();
    let index: BTreeMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut counts = vec![0usize; categories.len()];
    let member = rs
        .records
        .iter()
        .map(|r| {
            let cat = var.category(r);
            let i = *index
                .get(cat.as_str())
                .ok_or_else(|| RakingError::UncoveredCategory {
                    variable: target.variable.clone(),
                    category: cat.clone(),
                })?;
            counts[i] += 1;
            Ok(i)
        })
        .collect::<Result<Vec<_>, RakingError>>()?;
    let targets: Vec<f64> = categories.iter().map(|c| target.shares[c]).collect();
    for (i, c) in categories.iter().enumerate() {
        if targets[i] > 0.0 && counts[i] == 0 {
            return Err(RakingError::EmptySupport {
                variable: target.variable.clone(),
                category: c.clone(),
                share: targets[i],
            });
        }
    }
    Ok(CompiledMargin {
        name: target.variable.clone(),
        categories,
        targets,
        member,
    })
}

/// Weighted category shares; totals accumulate in record order.
fn shares(member: &[usize], n_categories: usize, weights: &[f64]) -> Vec<f64> {
    let mut totals = vec![0.0; n_categories];
    let mut grand = 0.0;
    for (&c, &w) in member.iter().zip(weights) {
        totals[c] += w;
        grand += w;
    }
    totals.into_iter().map(|t| t / grand).collect()
}

fn max_deviation(margins: &[CompiledMargin], weights: &[f64]) -> f64 {
    margins
        .iter()
        .flat_map(|m| {
            shares(&m.member, m.categories.len(), weights)
                .into_iter()
                .zip(m.targets.iter())
                .map(|(s, t)| (s - t).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn rake(rs: &RecordSet, spec: &CalibrationSpec) -> Result<WeightVector, RakingError> {
    rake_from(rs, spec, &vec![1.0; rs.len()])
}

/// Rakes starting from `initial` weights instead of ones.
pub fn rake_from(
    rs: &RecordSet,
    spec: &CalibrationSpec,
    initial: &[f64],
) -> Result<WeightVector, RakingError> {
    spec.validate()?;
    if rs.is_empty() {
        return Err(RakingError::EmptySample);
    }
    if initial.len() != rs.len() {
        return Err(RakingError::Misaligned {
            weights: initial.len(),
            records: rs.len(),
        });
    }
    check_weights(initial)?;
    let margins = spec
        .margins
        .iter()
        .map(|t| compile(rs, t))
        .collect::<Result<Vec<_>, _>>()?;

    let mut weights = initial.to_vec();
    let mut notes = Vec::new();
    for m in &margins {
        for (c, t) in m.categories.iter().zip(&m.targets) {
            if *t == 0.0 && m.member.iter().any(|&i| m.categories[i] == *c) {
                notes.push(format!(
                    "margin '{}': category '{}' has zero target; its weights are floored at {WEIGHT_FLOOR:e}",
                    m.name, c
                ));
            }
        }
    }

    let mut max_step: f64 = 0.0;
    let mut iterations_used = 0;
    let mut deviation = f64::INFINITY;
    for _ in 0..spec.max_iter {
        iterations_used += 1;
        for m in &margins {
            let current = shares(&m.member, m.categories.len(), &weights);
            let factors: Vec<f64> = current
                .iter()
                .zip(&m.targets)
                .map(|(&s, &t)| if s > 0.0 { t / s } else { 1.0 })
                .collect();
            for (w, &c) in weights.iter_mut().zip(&m.member) {
                let f = factors[c];
                max_step = max_step.max((f - 1.0).abs());
                *w = (*w * f).max(WEIGHT_FLOOR);
            }
        }
        deviation = max_deviation(&margins, &weights);
        if deviation <= spec.tol {
            break;
        }
    }
    let converged = deviation <= spec.tol;
    if margins.is_empty() {
        deviation = 0.0;
    }

    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    for w in &mut weights {
        *w /= mean;
    }
    notes.push(format!(
        "rake: {} margins, {iterations_used} sweeps, converged {converged}, max deviation {deviation:e}, tol {:e}; weights normalized to mean 1",
        margins.len(),
        spec.tol
    ));
    Ok(WeightVector {
        weights,
        iterations_used,
        converged,
        final_deviation: deviation,
        max_step,
        notes,
    })
}

/// Weighted category proportions of one variable. Categories are the ones
/// observed in `rs`.
pub fn weighted_marginals(
    rs: &RecordSet,
    weights: &[f64],
    variable: &str,
) -> Result<BTreeMap<String, f64>, RakingError> {
    let var: MarginVariable = variable.parse()?;
    if weights.len() != rs.len() {
        return Err(RakingError::Misaligned {
            weights: weights.len(),
            records: rs.len(),
        });
    }
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let member: Vec<usize> = rs
        .records
        .iter()
        .map(|r| {
            let next = index.len();
            *index.entry(var.category(r)).or_insert(next)
        })
        .collect();
    let s = shares(&member, index.len(), weights);
    Ok(index.into_iter().map(|(k, i)| (k, s[i])).collect())
}

/// Marginal counts from the benchmark tables: the reviewed-publication sample
/// and the full bibliographic population, for each raking variable.
pub mod benchmark {
    use super::*;

    pub const YEARS: [i32; 13] = [
        2009, 2010, 2011, 2012, 2013, 2014, 2015, 2016, 2017, 2018, 2019, 2020, 2021,
    ];
    pub const YEAR_SAMPLE: [f64; 13] = [
        761.0, 946.0, 1356.0, 1762.0, 2601.0, 3521.0, 4742.0, 5917.0, 14336.0, 18699.0, 3046.0,
        401.0, 5.0,
    ];
    pub const YEAR_POPULATION: [f64; 13] = [
        552_615.0, 546_703.0, 717_698.0, 839_311.0, 1_002_514.0, 1_141_004.0, 1_249_900.0,
        1_348_223.0, 1_591_868.0, 1_679_518.0, 1_140_289.0, 516_787.0, 282.0,
    ];
    /// (yes, no)
    pub const OPEN_ACCESS_SAMPLE: (f64, f64) = (25_177.0, 32_916.0);
    pub const OPEN_ACCESS_POPULATION: (f64, f64) = (3_532_995.0, 8_793_717.0);
    pub const FUNDING_BANDS: [&str; 5] = ["0", "1", "2", "3", "4+"];
    pub const FUNDING_SAMPLE: [f64; 5] = [15_284.0, 13_809.0, 10_758.0, 7_155.0, 11_087.0];
    pub const FUNDING_POPULATION: [f64; 5] =
        [5_681_665.0, 2_613_911.0, 1_762_755.0, 921_952.0, 1_346_429.0];
    pub const COUNTRY_BANDS: [&str; 4] = ["1", "2", "3", "4+"];
    pub const COUNTRY_SAMPLE: [f64; 4] = [41_008.0, 12_778.0, 3_336.0, 971.0];
    pub const COUNTRY_POPULATION: [f64; 4] = [10_640_214.0, 1_485_416.0, 167_730.0, 33_352.0];
    pub const SAMPLE_TOTAL: f64 = 58_093.0;
    pub const POPULATION_TOTAL: f64 = 12_326_712.0;

    /// (panel, sample members, population members)
    pub const DISCIPLINE_PANELS: [(&str, f64, f64); 29] = [
        ("LS09", 53.0, 9_830.0),
        ("LS1", 6_255.0, 695_214.0),
        ("LS2", 6_054.0, 489_234.0),
        ("LS3", 1_855.0, 129_674.0),
        ("LS4", 9_684.0, 1_668_900.0),
        ("LS5", 4_350.0, 555_326.0),
        ("LS6", 3_805.0, 410_871.0),
        ("LS7", 17_372.0, 2_824_978.0),
        ("LS8", 8_051.0, 770_001.0),
        ("LS9", 8_065.0, 1_202_239.0),
        ("PE09", 53.0, 9_830.0),
        ("PE1", 2_029.0, 326_962.0),
        ("PE10", 7_293.0, 1_411_496.0),
        ("PE11", 5_288.0, 1_227_477.0),
        ("PE2", 5_452.0, 1_039_190.0),
        ("PE3", 3_419.0, 659_856.0),
        ("PE4", 6_763.0, 1_441_848.0),
        ("PE5", 5_917.0, 1_294_056.0),
        ("PE6", 2_039.0, 959_256.0),
        ("PE7", 3_302.0, 1_477_664.0),
        ("PE8", 5_946.0, 1_636_128.0),
        ("PE9", 3_221.0, 652_903.0),
        ("SH1", 1_153.0, 330_993.0),
        ("SH2", 516.0, 95_174.0),
        ("SH3", 1_081.0, 361_067.0),
        ("SH4", 2_313.0, 363_528.0),
        ("SH5", 129.0, 53_252.0),
        ("SH6", 97.0, 9_486.0),
        ("SH7", 3_246.0, 359_771.0),
    ];

    /// Population targets for year (restricted to `years` and renormalized
    /// when given), open access, funding, countries and, optionally, the
    /// 29 discipline panels. Order: year, OA, funding, countries, disciplines.
    pub fn population_spec(years: Option<(i32, i32)>, with_disciplines: bool) -> CalibrationSpec {
        let (lo, hi) = years.unwrap_or((i32::MIN, i32::MAX));
        let mut margins = vec![
            MarginTarget::from_counts(
                "year",
                YEARS
                    .iter()
                    .zip(YEAR_POPULATION)
                    .filter(|(y, _)| (lo..=hi).contains(*y))
                    .map(|(y, c)| (y.to_string(), c)),
            )
            .expect("benchmark year counts are valid"),
            MarginTarget::from_counts(
                "open_access",
                [("yes", OPEN_ACCESS_POPULATION.0), ("no", OPEN_ACCESS_POPULATION.1)],
            )
            .expect("benchmark OA counts are valid"),
            MarginTarget::from_counts("funding", FUNDING_BANDS.into_iter().zip(FUNDING_POPULATION))
                .expect("benchmark funding counts are valid"),
            MarginTarget::from_counts("countries", COUNTRY_BANDS.into_iter().zip(COUNTRY_POPULATION))
                .expect("benchmark country counts are valid"),
        ];
        if with_disciplines {
            for (panel, _, pop) in DISCIPLINE_PANELS {
                margins.push(
                    MarginTarget::from_counts(
                        format!("discipline:{panel}"),
                        [("yes", pop), ("no", POPULATION_TOTAL - pop)],
                    )
                    .expect("benchmark discipline counts are valid"),
                );
            }
        }
        CalibrationSpec::new(margins)
    }
}
