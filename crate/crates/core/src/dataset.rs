//! Publication records: CSV ingestion, eligibility filtering, one-report
//! selection and IQR fencing of report lengths.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': cannot parse {value:?} ({reason})")]
    Cell {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("row {row}: invariant violated: {message}")]
    Invariant { row: usize, message: String },
    #[error("row {row}: duplicate pub_id '{pub_id}'")]
    DuplicateId { row: usize, pub_id: String },
    #[error("record set is empty")]
    Empty,
    #[error("fence factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error("invalid filter policy: {0}")]
    InvalidPolicy(String),
}

/// Journal impact bands used as a raking margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImpactClass {
    Below0_8,
    From0_8To1_2,
    From1_2To1_8,
    From1_8To2_2,
    AtLeast2_2,
}

impl ImpactClass {
    pub const ALL: [ImpactClass; 5] = [
        ImpactClass::Below0_8,
        ImpactClass::From0_8To1_2,
        ImpactClass::From1_2To1_8,
        ImpactClass::From1_8To2_2,
        ImpactClass::AtLeast2_2,
    ];

    pub fn from_impact(impact: f64) -> Self {
        if impact < 0.8 {
            ImpactClass::Below0_8
        } else if impact < 1.2 {
            ImpactClass::From0_8To1_2
        } else if impact < 1.8 {
            ImpactClass::From1_2To1_8
        } else if impact < 2.2 {
            ImpactClass::From1_8To2_2
        } else {
            ImpactClass::AtLeast2_2
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ImpactClass::Below0_8 => "<0.8",
            ImpactClass::From0_8To1_2 => "[0.8,1.2)",
            ImpactClass::From1_2To1_8 => "[1.2,1.8)",
            ImpactClass::From1_8To2_2 => "[1.8,2.2)",
            ImpactClass::AtLeast2_2 => ">=2.2",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label.trim())
    }
}

impl fmt::Display for ImpactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One publication (or, before `select_one_report`, one review report of it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicationRecord {
    pub pub_id: String,
    /// Word count of the review report.
    pub report_length: u32,
    pub citations: u64,
    pub pub_year: i32,
    pub open_access: bool,
    pub n_funders: u32,
    pub n_countries: u32,
    pub disciplines: BTreeSet<String>,
    /// Two-year journal impact factor.
    pub journal_impact: f64,
    pub doc_type: Option<String>,
    pub metadata_complete: bool,
    pub primary_discipline: Option<String>,
}

impl PublicationRecord {
    pub fn impact_class(&self) -> ImpactClass {
        ImpactClass::from_impact(self.journal_impact)
    }

    /// Checks the per-record invariants that the type system does not.
    pub fn check(&self) -> Result<(), String> {
        if self.pub_id.trim().is_empty() {
            return Err("pub_id is empty".into());
        }
        if self.n_countries < 1 {
            return Err("n_countries must be >= 1".into());
        }
        if self.disciplines.is_empty() {
            return Err("at least one discipline label is required".into());
        }
        if !(self.journal_impact.is_finite() && self.journal_impact >= 0.0) {
            return Err(format!(
                "journal_impact must be a non-negative real, got {}",
                self.journal_impact
            ));
        }
        if let Some(primary) = &self.primary_discipline {
            if !self.disciplines.contains(primary) {
                return Err(format!(
                    "primary_discipline '{primary}' is not among the record's disciplines"
                ));
            }
        }
        Ok(())
    }
}

/// An ordered collection of records plus the audit trail of what produced it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSet {
    pub records: Vec<PublicationRecord>,
    pub provenance: Vec<String>,
}

impl RecordSet {
    pub fn new(records: Vec<PublicationRecord>) -> Self {
        Self {
            records,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.provenance.push(line.into());
    }

    /// Every discipline label seen in the set, sorted.
    pub fn discipline_vocabulary(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .flat_map(|r| r.disciplines.iter().cloned())
            .collect()
    }

    pub fn has_unique_ids(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.records.len());
        self.records.iter().all(|r| seen.insert(r.pub_id.as_str()))
    }

    fn derived(&self, records: Vec<PublicationRecord>) -> Self {
        Self {
            records,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the canonical CSV schema (the one `load_records` reads with the
    /// default mapping).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CANONICAL_HEADER)?;
        for r in &self.records {
            let disciplines = r.disciplines.iter().cloned().collect::<Vec<_>>().join(";");
            w.write_record([
                r.pub_id.as_str(),
                &r.report_length.to_string(),
                &r.citations.to_string(),
                &r.pub_year.to_string(),
                if r.open_access { "1" } else { "0" },
                &r.n_funders.to_string(),
                &r.n_countries.to_string(),
                &disciplines,
                &r.journal_impact.to_string(),
                r.doc_type.as_deref().unwrap_or(""),
                if r.metadata_complete { "1" } else { "0" },
                r.primary_discipline.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush().map_err(|e| DatasetError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing CSV to memory cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

const CANONICAL_HEADER: [&str; 12] = [
    "pub_id",
    "report_length",
    "citations",
    "pub_year",
    "open_access",
    "n_funders",
    "n_countries",
    "disciplines",
    "journal_impact",
    "doc_type",
    "metadata_complete",
    "primary_discipline",
];

/// Maps logical record fields to CSV header names.
///
/// The nine required columns must be present. `doc_type`, `metadata_complete`,
/// `primary_discipline` and `impact_class` are read when present; an
/// `impact_class` column is only checked for consistency with `journal_impact`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub pub_id: String,
    pub report_length: String,
    pub citations: String,
    pub pub_year: String,
    pub open_access: String,
    pub n_funders: String,
    pub n_countries: String,
    pub disciplines: String,
    pub journal_impact: String,
    pub doc_type: String,
    pub metadata_complete: String,
    pub primary_discipline: String,
    pub impact_class: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            pub_id: "pub_id".into(),
            report_length: "report_length".into(),
            citations: "citations".into(),
            pub_year: "pub_year".into(),
            open_access: "open_access".into(),
            n_funders: "n_funders".into(),
            n_countries: "n_countries".into(),
            disciplines: "disciplines".into(),
            journal_impact: "journal_impact".into(),
            doc_type: "doc_type".into(),
            metadata_complete: "metadata_complete".into(),
            primary_discipline: "primary_discipline".into(),
            impact_class: "impact_class".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Reject a second row carrying an already-seen pub_id.
    pub reject_duplicates: bool,
    /// When set, discipline labels outside this vocabulary are rejected.
    pub discipline_vocabulary: Option<BTreeSet<String>>,
}

pub fn load_records(
    path: &Path,
    schema: &ColumnMapping,
    options: &LoadOptions,
) -> Result<RecordSet, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rs = read_records(file, schema, options)?;
    rs.provenance.insert(
        0,
        format!("ingest: {} records from {}", rs.len(), path.display()),
    );
    Ok(rs)
}

/// Reader-based core of [`load_records`]; row numbers are 1-based data rows.
pub fn read_records<R: Read>(
    input: R,
    schema: &ColumnMapping,
    options: &LoadOptions,
) -> Result<RecordSet, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.into()));

    let c_id = required(&schema.pub_id)?;
    let c_len = required(&schema.report_length)?;
    let c_cit = required(&schema.citations)?;
    let c_year = required(&schema.pub_year)?;
    let c_oa = required(&schema.open_access)?;
    let c_fund = required(&schema.n_funders)?;
    let c_ctry = required(&schema.n_countries)?;
    let c_disc = required(&schema.disciplines)?;
    let c_imp = required(&schema.journal_impact)?;
    let c_doc = find(&schema.doc_type);
    let c_meta = find(&schema.metadata_complete);
    let c_primary = find(&schema.primary_discipline);
    let c_class = find(&schema.impact_class);

    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let cell = |idx: usize| row.get(idx).unwrap_or("");
        let bad = |idx: usize, column: &str, reason: &str| DatasetError::Cell {
            row: row_no,
            column: column.to_string(),
            value: cell(idx).to_string(),
            reason: reason.to_string(),
        };

        let pub_id = cell(c_id).to_string();
        let report_length = parse_count(cell(c_len))
            .map_err(|reason| invariant_or_cell(row_no, &schema.report_length, cell(c_len), reason))?;
        let report_length = u32::try_from(report_length)
            .map_err(|_| bad(c_len, &schema.report_length, "value too large"))?;
        let citations = parse_count(cell(c_cit))
            .map_err(|reason| invariant_or_cell(row_no, &schema.citations, cell(c_cit), reason))?;
        let pub_year: i32 = cell(c_year)
            .parse()
            .map_err(|_| bad(c_year, &schema.pub_year, "expected a calendar year"))?;
        let open_access = parse_flag(cell(c_oa))
            .ok_or_else(|| bad(c_oa, &schema.open_access, "expected 0/1, yes/no or true/false"))?;
        let n_funders = parse_count(cell(c_fund))
            .map_err(|reason| invariant_or_cell(row_no, &schema.n_funders, cell(c_fund), reason))?;
        let n_funders =
            u32::try_from(n_funders).map_err(|_| bad(c_fund, &schema.n_funders, "value too large"))?;
        let n_countries = parse_count(cell(c_ctry))
            .map_err(|reason| invariant_or_cell(row_no, &schema.n_countries, cell(c_ctry), reason))?;
        let n_countries = u32::try_from(n_countries)
            .map_err(|_| bad(c_ctry, &schema.n_countries, "value too large"))?;
        let disciplines: BTreeSet<String> = cell(c_disc)
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if let Some(vocab) = &options.discipline_vocabulary {
            if let Some(unknown) = disciplines.iter().find(|d| !vocab.contains(*d)) {
                return Err(bad(
                    c_disc,
                    &schema.disciplines,
                    &format!("label '{unknown}' is outside the discipline vocabulary"),
                ));
            }
        }
        let journal_impact: f64 = cell(c_imp)
            .parse()
            .map_err(|_| bad(c_imp, &schema.journal_impact, "expected a real number"))?;
        let doc_type = c_doc
            .map(cell)
            .filter(|s| !s.is_empty())
            .map(String::from);
        let metadata_complete = match c_meta.map(cell).filter(|s| !s.is_empty()) {
            Some(v) => parse_flag(v)
                .ok_or_else(|| bad(c_meta.unwrap(), &schema.metadata_complete, "expected a flag"))?,
            None => true,
        };
        let primary_discipline = c_primary
            .map(cell)
            .filter(|s| !s.is_empty())
            .map(String::from);

        let record = PublicationRecord {
            pub_id,
            report_length,
            citations,
            pub_year,
            open_access,
            n_funders,
            n_countries,
            disciplines,
            journal_impact,
            doc_type,
            metadata_complete,
            primary_discipline,
        };
        record.check().map_err(|message| DatasetError::Invariant {
            row: row_no,
            message,
        })?;
        if let Some(idx) = c_class {
            let raw = cell(idx);
            if !raw.is_empty() {
                let declared = ImpactClass::from_label(raw)
                    .ok_or_else(|| bad(idx, &schema.impact_class, "unknown impact class label"))?;
                if declared != record.impact_class() {
                    return Err(DatasetError::Invariant {
                        row: row_no,
                        message: format!(
                            "impact_class {} inconsistent with journal_impact {} (expected {})",
                            declared,
                            record.journal_impact,
                            record.impact_class()
                        ),
                    });
                }
            }
        }
        if options.reject_duplicates && !seen.insert(record.pub_id.clone()) {
            return Err(DatasetError::DuplicateId {
                row: row_no,
                pub_id: record.pub_id,
            });
        }
        records.push(record);
    }
    Ok(RecordSet::new(records))
}

fn invariant_or_cell(
    row: usize,
    column: &str,
    value: &str,
    reason: CountError,
) -> DatasetError {
    match reason {
        CountError::Negative => DatasetError::Invariant {
            row,
            message: format!("{column} must be >= 0, got {value}"),
        },
        CountError::NotInteger => DatasetError::Cell {
            row,
            column: column.to_string(),
            value: value.to_string(),
            reason: "expected a non-negative integer".into(),
        },
    }
}

enum CountError {
    Negative,
    NotInteger,
}

fn parse_count(raw: &str) -> Result<u64, CountError> {
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(v);
    }
    match raw.parse::<i64>() {
        Ok(v) if v < 0 => Err(CountError::Negative),
        _ => Err(CountError::NotInteger),
    }
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "yes" | "y" | "true" => Some(true),
        "0" | "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Eligibility window and document-type restrictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub min_year: i32,
    pub max_year: i32,
    /// Empty means every document type is allowed. Compared case-insensitively.
    pub allowed_doc_types: BTreeSet<String>,
    pub require_complete_metadata: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_year: 2010,
            max_year: 2020,
            allowed_doc_types: BTreeSet::new(),
            require_complete_metadata: false,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.min_year > self.max_year {
            return Err(DatasetError::InvalidPolicy(format!(
                "min_year {} > max_year {}",
                self.min_year, self.max_year
            )));
        }
        Ok(())
    }

    pub fn admits(&self, r: &PublicationRecord) -> bool {
        if r.pub_year < self.min_year || r.pub_year > self.max_year {
            return false;
        }
        if !self.allowed_doc_types.is_empty() {
            let ok = r.doc_type.as_deref().is_some_and(|d| {
                self.allowed_doc_types
                    .iter()
                    .any(|a| a.eq_ignore_ascii_case(d))
            });
            if !ok {
                return false;
            }
        }
        !self.require_complete_metadata || r.metadata_complete
    }
}

pub fn filter_eligible(rs: &RecordSet, policy: &FilterPolicy) -> RecordSet {
    let kept: Vec<_> = rs
        .records
        .iter()
        .filter(|r| policy.admits(r))
        .cloned()
        .collect();
    let mut out = rs.derived(kept);
    out.note(format!(
        "filter: years [{}, {}], doc types {:?}, complete metadata required: {}; {} in, {} out",
        policy.min_year,
        policy.max_year,
        policy.allowed_doc_types,
        policy.require_complete_metadata,
        rs.len(),
        out.len()
    ));
    out
}

/// Keeps one uniformly chosen record per pub_id, in first-occurrence order.
pub fn select_one_report(rs: &RecordSet, seed: u64) -> RecordSet {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, r) in rs.records.iter().enumerate() {
        match slot.get(r.pub_id.as_str()) {
            Some(&g) => groups[g].push(i),
            None => {
                slot.insert(r.pub_id.as_str(), groups.len());
                groups.push(vec![i]);
            }
        }
    }
    let mut rng = seeded(seed);
    let mut multiplicity: BTreeMap<usize, usize> = BTreeMap::new();
    let kept: Vec<_> = groups
        .iter()
        .map(|g| {
            *multiplicity.entry(g.len()).or_default() += 1;
            let pick = if g.len() == 1 {
                g[0]
            } else {
                g[rng.random_range(0..g.len())]
            };
            rs.records[pick].clone()
        })
        .collect();
    let mut out = rs.derived(kept);
    let mult = multiplicity
        .iter()
        .map(|(m, c)| format!("{m}x{c}"))
        .collect::<Vec<_>>()
        .join(" ");
    out.note(format!(
        "select: seed {seed}; reports per publication [{mult}]; {} in, {} out",
        rs.len(),
        out.len()
    ));
    out
}

/// Sample quantile by linear interpolation between order statistics
/// (R's type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FenceSplit {
    pub kept: RecordSet,
    pub excluded: RecordSet,
    /// (lower, upper), inclusive.
    pub fences: (f64, f64),
    pub q1: f64,
    pub q3: f64,
}

/// Splits records by the fences `[Q1 - factor*IQR, Q3 + factor*IQR]` on
/// report length. Values on a fence are kept.
pub fn iqr_exclude(rs: &RecordSet, factor: f64) -> Result<FenceSplit, DatasetError> {
    if rs.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(factor.is_finite() && factor > 0.0) {
        return Err(DatasetError::InvalidFactor(factor));
    }
    let mut lengths: Vec<f64> = rs.records.iter().map(|r| r.report_length as f64).collect();
    lengths.sort_by(f64::total_cmp);
    let q1 = quantile_type7(&lengths, 0.25);
    let q3 = quantile_type7(&lengths, 0.75);
    let iqr = q3 - q1;
    let fences = (q1 - factor * iqr, q3 + factor * iqr);

    let (kept, excluded): (Vec<_>, Vec<_>) = rs.records.iter().cloned().partition(|r| {
        let v = r.report_length as f64;
        v >= fences.0 && v <= fences.1
    });
    let mut kept = rs.derived(kept);
    let mut excluded = rs.derived(excluded);
    let line = format!(
        "fence: quantile rule type 7 (linear interpolation); Q1 {q1}, Q3 {q3}, IQR {iqr}, factor {factor}; \
         fences [{}, {}]; {} in, {} kept, {} excluded",
        fences.0,
        fences.1,
        rs.len(),
        kept.len(),
        excluded.len()
    );
    kept.note(line.clone());
    excluded.note(line);
    Ok(FenceSplit {
        kept,
        excluded,
        fences,
        q1,
        q3,
    })
}
