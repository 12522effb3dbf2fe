//! Seeded synthetic corpora with the marginal structure of the reviewed
//! sample and a planted log-linear citation model.
//!
//! Each publication draws its attributes independently from the configured
//! marginals. Report lengths are uniform within a histogram bin picked by
//! share; publications with several reports repeat their `pub_id` once per
//! report. Citations come from the first report:
//! `round(exp(x·β + ε) − 1)`, floored at 0, with `ε ~ N(0, noise_sd)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PublicationRecord, RecordSet};
use crate::discretize::{assign_class, BreakSet};
use crate::raking::benchmark;
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{what}: shares sum to {sum}, expected 1")]
    BadShares { what: String, sum: f64 },
    #[error("{what}: share {value} for '{category}' is negative or not finite")]
    NegativeShare {
        what: String,
        category: String,
        value: f64,
    },
    #[error("unknown category '{category}' for {variable}")]
    UnknownCategory { variable: String, category: String },
    #[error("missing margin '{0}'")]
    MissingMargin(String),
    #[error("beta names column '{0}', which the corpus cannot induce")]
    UnknownColumn(String),
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    /// Bin edges; bin i covers `[bounds[i], bounds[i+1])`, the last bin is closed.
    pub bounds: Vec<u32>,
    pub shares: Vec<f64>,
}

/// Reviewed-publication counts by report length band.
pub const TABLE_LENGTH_COUNTS: [f64; 14] = [
    21_007.0, 13_946.0, 9_052.0, 5_252.0, 3_114.0, 2_001.0, 1_111.0, 706.0, 418.0, 303.0, 220.0,
    147.0, 104.0, 101.0,
];
pub const TABLE_LENGTH_BOUNDS: [u32; 15] = [
    0, 200, 400, 600, 800, 1000, 1200, 1400, 1600, 1800, 2000, 2200, 2400, 2600, 2883,
];
/// Publications with 1, 2, ... 5 reports.
pub const TABLE_MULTIPLICITY: [f64; 5] = [57_256.0, 3_691.0, 233.0, 16.0, 1.0];
/// The five reference report-length classes.
pub const TABLE_LENGTH_CLASSES: [(f64, f64); 5] = [
    (0.0, 231.0),
    (232.0, 535.0),
    (536.0, 946.0),
    (947.0, 1612.0),
    (1613.0, 2891.0),
];

fn normalize(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

impl Default for LengthHistogram {
    fn default() -> Self {
        Self {
            bounds: TABLE_LENGTH_BOUNDS.to_vec(),
            shares: normalize(&TABLE_LENGTH_COUNTS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CitationModel {
    /// Inverse of the analysis model.
    LogNormal,
    /// Gamma-Poisson counts with mean `exp(x·β)`; the noise SD is ignored.
    NegativeBinomial { dispersion: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Number of publications (distinct `pub_id`s).
    pub n: usize,
    pub length_histogram: LengthHistogram,
    /// Categorical shares for `year`, `open_access`, `funding` and
    /// `countries`, keyed like the raking variables.
    pub margin_shares: BTreeMap<String, BTreeMap<String, f64>>,
    /// Share of publications belonging to each discipline label; a
    /// publication may belong to several.
    pub discipline_membership: BTreeMap<String, f64>,
    /// Log-scale location and scale of the journal impact factor.
    pub impact_lognormal: (f64, f64),
    /// Shares of publications with 1, 2, ... reports.
    pub report_multiplicity: Vec<f64>,
    /// Classes used to evaluate `length_class_*` coefficients.
    pub length_classes: BreakSet,
    /// Planted coefficient per design column name; absent columns are 0.
    pub beta: BTreeMap<String, f64>,
    pub noise_sd: f64,
    pub citation_model: CitationModel,
    /// Citation counts are capped here.
    pub max_citations: u64,
    pub seed: u64,
}

fn shares_from<K: ToString>(pairs: impl IntoIterator<Item = (K, f64)>) -> BTreeMap<String, f64> {
    let pairs: Vec<(String, f64)> = pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(k, v)| (k, v / total)).collect()
}

/// Sample-side shares from the benchmark tables.
pub fn benchmark_margin_shares() -> BTreeMap<String, BTreeMap<String, f64>> {
    use benchmark::*;
    BTreeMap::from([
        ("year".into(), shares_from(YEARS.into_iter().zip(YEAR_SAMPLE))),
        (
            "open_access".into(),
            shares_from([("yes", OPEN_ACCESS_SAMPLE.0), ("no", OPEN_ACCESS_SAMPLE.1)]),
        ),
        ("funding".into(), shares_from(FUNDING_BANDS.into_iter().zip(FUNDING_SAMPLE))),
        ("countries".into(), shares_from(COUNTRY_BANDS.into_iter().zip(COUNTRY_SAMPLE))),
    ])
}

pub fn benchmark_discipline_membership() -> BTreeMap<String, f64> {
    benchmark::DISCIPLINE_PANELS
        .iter()
        .map(|(panel, sample, _)| (panel.to_string(), sample / benchmark::SAMPLE_TOTAL))
        .collect()
}

pub fn default_beta() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("intercept".into(), 1.0),
        ("length_class_4".into(), 0.25),
        ("length_class_5".into(), 0.35),
        ("journal_impact".into(), 0.2),
        ("open_access_yes".into(), 0.1),
        ("ln_funders".into(), 0.15),
        ("ln_countries".into(), 0.1),
    ])
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 57_482,
            length_histogram: LengthHistogram::default(),
            margin_shares: benchmark_margin_shares(),
            discipline_membership: benchmark_discipline_membership(),
            impact_lognormal: (0.3, 0.6),
            report_multiplicity: normalize(&TABLE_MULTIPLICITY),
            length_classes: BreakSet::from_intervals(&TABLE_LENGTH_CLASSES).expect("fixed classes are valid"),
            beta: default_beta(),
            noise_sd: 1.0,
            citation_model: CitationModel::LogNormal,
            max_citations: 1_000_000,
            seed: 0,
        }
    }
}

const MARGINS: [&str; 4] = ["year", "open_access", "funding", "countries"];

fn check_shares<'a>(what: &str, shares: impl IntoIterator<Item = (String, &'a f64)>) -> Result<(), SynthError> {
    let mut sum = 0.0;
    for (category, &value) in shares {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(SynthError::NegativeShare {
                what: what.into(),
                category,
                value,
            });
        }
        sum += value;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadShares { what: what.into(), sum });
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n == 0 {
            return Err(SynthError::Invalid("n must be positive".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SynthError::Invalid(format!("noise_sd {} must be >= 0", self.noise_sd)));
        }
        let h = &self.length_histogram;
        if h.bounds.len() != h.shares.len() + 1 || h.shares.is_empty() {
            return Err(SynthError::Invalid(format!(
                "{} length bounds for {} bins",
                h.bounds.len(),
                h.shares.len()
            )));
        }
        if h.bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SynthError::Invalid("length bounds must increase".into()));
        }
        check_shares(
            "length_histogram",
            h.shares.iter().enumerate().map(|(i, s)| (format!("bin {}", i + 1), s)),
        )?;
        check_shares(
            "report_multiplicity",
            self.report_multiplicity.iter().enumerate().map(|(i, s)| ((i + 1).to_string(), s)),
        )?;
        for name in MARGINS {
            let shares = self
                .margin_shares
                .get(name)
                .ok_or_else(|| SynthError::MissingMargin(name.into()))?;
            check_shares(name, shares.iter().map(|(k, v)| (k.clone(), v)))?;
            for category in shares.keys() {
                if category_value(name, category).is_none() {
                    return Err(SynthError::UnknownCategory {
                        variable: name.into(),
                        category: category.clone(),
                    });
                }
            }
        }
        if let Some(extra) = self.margin_shares.keys().find(|k| !MARGINS.contains(&k.as_str())) {
            return Err(SynthError::Invalid(format!("unsupported margin '{extra}'")));
        }
        if self.discipline_membership.is_empty() {
            return Err(SynthError::Invalid("no discipline labels".into()));
        }
        for (label, &p) in &self.discipline_membership {
            if !(p > 0.0 && p <= 1.0) {
                return Err(SynthError::Invalid(format!("membership share {p} for '{label}'")));
            }
        }
        let (_, sigma) = self.impact_lognormal;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(SynthError::Invalid(format!("impact log-scale {sigma}")));
        }
        if let CitationModel::NegativeBinomial { dispersion } = self.citation_model {
            if !(dispersion > 0.0 && dispersion.is_finite()) {
                return Err(SynthError::Invalid(format!("dispersion {dispersion}")));
            }
        }
        self.length_classes
            .validate()
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        for name in self.beta.keys() {
            if !self.induces(name) {
                return Err(SynthError::UnknownColumn(name.clone()));
            }
        }
        Ok(())
    }

    /// Whether `column` is a design column this corpus can produce.
    fn induces(&self, column: &str) -> bool {
        if ["intercept", "journal_impact", "open_access_yes", "ln_funders", "ln_countries"].contains(&column) {
            return true;
        }
        if let Some(c) = column.strip_prefix("length_class_") {
            return c.parse::<usize>().is_ok_and(|c| (2..=self.length_classes.k).contains(&c));
        }
        if let Some(label) = column.strip_prefix("discipline_") {
            return self.discipline_membership.contains_key(label);
        }
        if let Some(year) = column.strip_prefix("year_") {
            return self.margin_shares.get("year").is_some_and(|m| m.contains_key(year));
        }
        false
    }
}

/// Numeric value drawn for a margin category; `None` for unknown labels.
fn category_value(margin: &str, category: &str) -> Option<(u32, u32)> {
    match margin {
        "year" => category.parse::<i32>().ok().map(|_| (0, 0)),
        "open_access" => match category {
            "yes" => Some((1, 1)),
            "no" => Some((0, 0)),
            _ => None,
        },
        "funding" => match category {
            "4+" => Some((4, 7)),
            c => c.parse::<u32>().ok().filter(|v| *v < 4).map(|v| (v, v)),
        },
        "countries" => match category {
            "4+" => Some((4, 6)),
            c => c.parse::<u32>().ok().filter(|v| (1..4).contains(v)).map(|v| (v, v)),
        },
        _ => None,
    }
}

/// Cumulative-share sampler over a fixed category order.
struct Categorical<T> {
    items: Vec<T>,
    cumulative: Vec<f64>,
}

impl<T: Clone> Categorical<T> {
    fn new(pairs: impl IntoIterator<Item = (T, f64)>) -> Self {
        let mut items = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (item, share) in pairs {
            acc += share;
            items.push(item);
            cumulative.push(acc);
        }
        Self { items, cumulative }
    }

    fn draw(&self, rng: &mut rng::Rng) -> T {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let i = self.cumulative.partition_point(|c| *c <= u).min(self.items.len() - 1);
        self.items[i].clone()
    }
}

/// Inclusion probabilities for independent membership draws such that,
/// conditional on at least one membership, label i has probability `p_i`.
/// `None` when the shares sum to at most 1 (no such scaling exists).
fn conditional_inclusion(p: &[f64]) -> Option<Vec<f64>> {
    if p.iter().sum::<f64>() <= 1.0 {
        return None;
    }
    // c = 1 - Π(1 - p_i c), iterated from c = 1
    let mut c = 1.0;
    for _ in 0..10_000 {
        let next = 1.0 - p.iter().map(|pi| 1.0 - (pi * c).min(1.0)).product::<f64>();
        if (next - c).abs() < 1e-15 {
            c = next;
            break;
        }
        c = next;
    }
    (c > 0.0).then(|| p.iter().map(|pi| (pi * c).min(1.0)).collect())
}

struct Samplers {
    length_bins: Categorical<usize>,
    multiplicity: Categorical<usize>,
    margins: BTreeMap<&'static str, Categorical<String>>,
    labels: Vec<String>,
    /// Independent inclusion probabilities, or `None` for a single categorical label.
    inclusion: Option<Vec<f64>>,
    single_label: Categorical<usize>,
    impact: LogNormal<f64>,
    noise: Normal<f64>,
}

fn draw_length(spec: &SynthSpec, s: &Samplers, rng: &mut rng::Rng) -> u32 {
    let b = s.length_bins.draw(rng);
    let (lo, hi) = (spec.length_histogram.bounds[b], spec.length_histogram.bounds[b + 1]);
    if b + 1 == spec.length_histogram.shares.len() {
        rng.random_range(lo..=hi)
    } else {
        rng.random_range(lo..hi)
    }
}

fn draw_count(margin: &str, category: &str, rng: &mut rng::Rng) -> u32 {
    let (lo, hi) = category_value(margin, category).expect("validated category");
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Linear predictor `x·β` for a record under the spec's column conventions.
pub fn linear_predictor(spec: &SynthSpec, r: &PublicationRecord) -> f64 {
    let mut eta = 0.0;
    for (name, b) in &spec.beta {
        let x = match name.as_str() {
            "intercept" => 1.0,
            "journal_impact" => r.journal_impact,
            "open_access_yes" => f64::from(r.open_access),
            "ln_funders" => (r.n_funders as f64).ln_1p(),
            "ln_countries" => (r.n_countries as f64).ln(),
            other => {
                if let Some(c) = other.strip_prefix("length_class_") {
                    let c: usize = c.parse().expect("validated class");
                    f64::from(assign_class(r.report_length as f64, &spec.length_classes).0 == c)
                } else if let Some(label) = other.strip_prefix("discipline_") {
                    f64::from(r.disciplines.contains(label))
                } else if let Some(year) = other.strip_prefix("year_") {
                    f64::from(r.pub_year.to_string() == year)
                } else {
                    0.0
                }
            }
        };
        eta += b * x;
    }
    eta
}

pub fn generate(spec: &SynthSpec) -> Result<RecordSet, SynthError> {
    spec.validate()?;
    let labels: Vec<String> = spec.discipline_membership.keys().cloned().collect();
    let p: Vec<f64> = spec.discipline_membership.values().copied().collect();
    let (mu, sigma) = spec.impact_lognormal;
    let s = Samplers {
        length_bins: Categorical::new(spec.length_histogram.shares.iter().copied().enumerate()),
        multiplicity: Categorical::new(spec.report_multiplicity.iter().enumerate().map(|(i, s)| (i + 1, *s))),
        margins: MARGINS
            .iter()
            .map(|&m| (m, Categorical::new(spec.margin_shares[m].iter().map(|(k, v)| (k.clone(), *v)))))
            .collect(),
        inclusion: conditional_inclusion(&p),
        single_label: Categorical::new(p.iter().copied().enumerate()),
        labels,
        impact: LogNormal::new(mu, sigma).map_err(|e| SynthError::Invalid(e.to_string()))?,
        noise: Normal::new(0.0, spec.noise_sd).map_err(|e| SynthError::Invalid(e.to_string()))?,
    };
    let mut rng = rng::seeded(spec.seed);
    let width = spec.n.to_string().len().max(6);
    let mut records = Vec::with_capacity(spec.n + spec.n / 10);
    for i in 0..spec.n {
        let reports = s.multiplicity.draw(&mut rng);
        let year: i32 = s.margins["year"].draw(&mut rng).parse().expect("validated year");
        let open_access = s.margins["open_access"].draw(&mut rng) == "yes";
        let funding = s.margins["funding"].draw(&mut rng);
        let n_funders = draw_count("funding", &funding, &mut rng);
        let countries = s.margins["countries"].draw(&mut rng);
        let n_countries = draw_count("countries", &countries, &mut rng);
        let disciplines: BTreeSet<String> = match &s.inclusion {
            Some(q) => loop {
                let set: BTreeSet<String> = q
                    .iter()
                    .zip(&s.labels)
                    .filter(|(qi, _)| rng.random_bool(**qi))
                    .map(|(_, l)| l.clone())
                    .collect();
                if !set.is_empty() {
                    break set;
                }
            },
            None => [s.labels[s.single_label.draw(&mut rng)].clone()].into(),
        };
        let primary = disciplines
            .iter()
            .nth(rng.random_range(0..disciplines.len()))
            .cloned();
        let journal_impact = s.impact.sample(&mut rng);
        let lengths: Vec<u32> = (0..reports).map(|_| draw_length(spec, &s, &mut rng)).collect();
        let mut first = PublicationRecord {
            pub_id: format!("P{:0width$}", i + 1),
            report_length: lengths[0],
            citations: 0,
            pub_year: year,
            open_access,
            n_funders,
            n_countries,
            disciplines,
            journal_impact,
            doc_type: Some("article".into()),
            metadata_complete: true,
            primary_discipline: primary,
        };
        let eta = linear_predictor(spec, &first);
        first.citations = match spec.citation_model {
            CitationModel::LogNormal => {
                let e = if spec.noise_sd > 0.0 { s.noise.sample(&mut rng) } else { 0.0 };
                let c = ((eta + e).exp() - 1.0).round();
                c.clamp(0.0, spec.max_citations as f64) as u64
            }
            CitationModel::NegativeBinomial { dispersion } => {
                let mean = eta.exp().min(spec.max_citations as f64);
                let lambda = Gamma::new(dispersion, mean / dispersion)
                    .map_err(|e| SynthError::Invalid(e.to_string()))?
                    .sample(&mut rng);
                if lambda > 0.0 {
                    let draw: f64 = Poisson::new(lambda)
                        .map_err(|e| SynthError::Invalid(e.to_string()))?
                        .sample(&mut rng);
                    (draw as u64).min(spec.max_citations)
                } else {
                    0
                }
            }
        };
        let extra: Vec<PublicationRecord> = lengths[1..]
            .iter()
            .map(|&len| PublicationRecord {
                report_length: len,
                ..first.clone()
            })
            .collect();
        records.push(first);
        records.extend(extra);
    }
    let mut rs = RecordSet::new(records);
    rs.note(format!(
        "synth: {} publications, {} report records, seed {}",
        spec.n,
        rs.len(),
        spec.seed
    ));
    Ok(rs)
}

/// Planted coefficients aligned to `columns`; 0 where nothing was planted.
pub fn planted_truth(spec: &SynthSpec, columns: &[String]) -> Vec<f64> {
    columns
        .iter()
        .map(|c| spec.beta.get(c).copied().unwrap_or(0.0))
        .collect()
}
