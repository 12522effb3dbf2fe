//! Response vector and predictor matrix for the log-citation model.
//!
//! Columns, in order: intercept, report-length class dummies (class 1 is
//! the reference), then each covariate block in the order of
//! [`ModelSpec::covariates`].
//!
//! | block | columns |
//! |---|---|
//! | `journal_impact` | impact factor, untransformed |
//! | `open_access` | `open_access_yes`, reference "no" |
//! | `funding` | `ln(1 + n_funders)` |
//! | `collaboration` | `ln(n_countries)` (0 for a single country) |
//! | `discipline` | one dummy per label except the reference |
//! | `year` | one dummy per year except the reference |

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PublicationRecord, RecordSet};
use crate::discretize::{assign_class, BreakSet, Placement};
use crate::linalg;
use crate::raking::WeightVector;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("{block}: category '{category}' of record '{pub_id}' is not in the model vocabulary")]
    UnseenCategory {
        block: String,
        category: String,
        pub_id: String,
    },
    #[error("{block}: reference '{reference}' is not in the vocabulary")]
    UnknownReference { block: String, reference: String },
    #[error("record '{0}' has no primary discipline but the model uses primary-discipline dummies")]
    MissingPrimary(String),
    #[error("column '{0}' is constant")]
    ConstantColumn(String),
    #[error("rank deficient: columns {0:?} are linearly dependent")]
    RankDeficient(Vec<String>),
    #[error("{weights} weights for {records} records")]
    Misaligned { weights: usize, records: usize },
    #[error("no records")]
    Empty,
    #[error("design shape mismatch: {0}")]
    Shape(String),
    #[error("design export failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisciplineMode {
    /// One membership column per discipline label.
    #[default]
    MultiHot,
    /// One dummy per value of `primary_discipline`.
    Primary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DisciplineBlock {
    pub mode: DisciplineMode,
    /// Fixed label set; derived from the data when absent.
    pub vocabulary: Option<Vec<String>>,
    /// Defaults to the first label of the vocabulary.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct YearBlock {
    pub vocabulary: Option<Vec<i32>>,
    /// Defaults to the earliest year of the vocabulary.
    pub reference: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariate {
    JournalImpact,
    OpenAccess,
    Funding,
    Collaboration,
    Discipline(DisciplineBlock),
    Year(YearBlock),
}

impl Covariate {
    /// The default covariates, in column order.
    pub fn standard() -> Vec<Covariate> {
        vec![
            Covariate::JournalImpact,
            Covariate::OpenAccess,
            Covariate::Funding,
            Covariate::Collaboration,
            Covariate::Discipline(DisciplineBlock::default()),
            Covariate::Year(YearBlock::default()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// ln(1 + citations)
    #[default]
    Log1pCitations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub response: Response,
    pub length_breaks: BreakSet,
    pub covariates: Vec<Covariate>,
}

impl ModelSpec {
    pub fn standard(length_breaks: BreakSet) -> Self {
        Self {
            response: Response::Log1pCitations,
            length_breaks,
            covariates: Covariate::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// Human-readable term per column.
    pub term_labels: Vec<String>,
    pub row_ids: Vec<String>,
    pub weights: Option<Vec<f64>>,
    /// "block: reference category" for every categorical block.
    pub references: Vec<String>,
    /// The spec with every vocabulary and reference pinned, for reuse on
    /// other record sets (e.g. after exclusions).
    pub resolved: Option<ModelSpec>,
    pub notes: Vec<String>,
}

impl DesignMatrix {
    /// A design from raw parts; checks shapes only.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        column_names: Vec<String>,
        row_ids: Vec<String>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, DesignError> {
        let (n, p) = x.shape();
        if y.len() != n || row_ids.len() != n || column_names.len() != p {
            return Err(DesignError::Shape(format!(
                "x is {n}x{p}, y has {}, {} row ids, {} names",
                y.len(),
                row_ids.len(),
                column_names.len()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(DesignError::Misaligned {
                    weights: w.len(),
                    records: n,
                });
            }
        }
        Ok(Self {
            y,
            x,
            term_labels: column_names.clone(),
            column_names,
            row_ids,
            weights,
            references: Vec::new(),
            resolved: None,
            notes: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// `row_id,weight,y,<columns...>`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DesignError> {
        let io = |e: csv::Error| DesignError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row_id".to_string(), "weight".into(), "y".into()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for i in 0..self.n() {
            let mut row = vec![
                self.row_ids[i].clone(),
                self.weights.as_ref().map_or(1.0, |w| w[i]).to_string(),
                self.y[i].to_string(),
            ];
            row.extend((0..self.p()).map(|j| self.x[(i, j)].to_string()));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| DesignError::Io(e.to_string()))
    }
}

/// One categorical block with pinned vocabulary and reference.
struct Dummies {
    block: &'static str,
    labels: Vec<String>,
    reference: String,
}

impl Dummies {
    fn kept(&self) -> impl Iterator<Item = &String> {
        self.labels.iter().filter(move |l| **l != self.reference)
    }
}

fn resolve_disciplines(rs: &RecordSet, b: &DisciplineBlock) -> Result<(Dummies, DisciplineBlock), DesignError> {
    let labels: Vec<String> = match &b.vocabulary {
        Some(v) => v.clone(),
        None => match b.mode {
            DisciplineMode::MultiHot => rs.discipline_vocabulary().into_iter().collect(),
            DisciplineMode::Primary => rs
                .records
                .iter()
                .map(|r| {
                    r.primary_discipline
                        .clone()
                        .ok_or_else(|| DesignError::MissingPrimary(r.pub_id.clone()))
                })
                .collect::<Result<BTreeSet<_>, _>>()?
                .into_iter()
                .collect(),
        },
    };
    let reference = match &b.reference {
        Some(r) if labels.contains(r) => r.clone(),
        Some(r) => {
            return Err(DesignError::UnknownReference {
                block: "discipline".into(),
                reference: r.clone(),
            })
        }
        None => labels.first().cloned().unwrap_or_default(),
    };
    let pinned = DisciplineBlock {
        mode: b.mode,
        vocabulary: Some(labels.clone()),
        reference: Some(reference.clone()),
    };
    Ok((
        Dummies {
            block: "discipline",
            labels,
            reference,
        },
        pinned,
    ))
}

fn resolve_years(rs: &RecordSet, b: &YearBlock) -> Result<(Dummies, YearBlock), DesignError> {
    let years: Vec<i32> = match &b.vocabulary {
        Some(v) => v.clone(),
        None => rs
            .records
            .iter()
            .map(|r| r.pub_year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let reference = match b.reference {
        Some(r) if years.contains(&r) => r,
        Some(r) => {
            return Err(DesignError::UnknownReference {
                block: "year".into(),
                reference: r.to_string(),
            })
        }
        None => years.first().copied().unwrap_or_default(),
    };
    Ok((
        Dummies {
            block: "year",
            labels: years.iter().map(|y| y.to_string()).collect(),
            reference: reference.to_string(),
        },
        YearBlock {
            vocabulary: Some(years),
            reference: Some(reference),
        },
    ))
}

/// A column generator: name, display label and value per record.
type ColumnFn<'a> = Box<dyn Fn(&PublicationRecord) -> Result<f64, DesignError> + 'a>;

pub fn build_design(
    rs: &RecordSet,
    spec: &ModelSpec,
    w: Option<&WeightVector>,
) -> Result<DesignMatrix, DesignError> {
    if rs.is_empty() {
        return Err(DesignError::Empty);
    }
    if let Some(w) = w {
        if w.len() != rs.len() {
            return Err(DesignError::Misaligned {
                weights: w.len(),
                records: rs.len(),
            });
        }
    }
    let breaks = &spec.length_breaks;
    let length_labels = breaks.labels();
    let mut names: Vec<String> = vec!["intercept".into()];
    let mut labels: Vec<String> = vec!["intercept".into()];
    let mut columns: Vec<ColumnFn> = vec![Box::new(|_| Ok(1.0))];
    let mut references = vec![format!("length: {}", length_labels[0])];
    let mut resolved_covariates = Vec::new();

    for class in 2..=breaks.k {
        names.push(format!("length_class_{class}"));
        labels.push(format!("length {}", length_labels[class - 1]));
        columns.push(Box::new(move |r| {
            Ok(f64::from(assign_class(r.report_length as f64, breaks).0 == class))
        }));
    }

    for cov in &spec.covariates {
        match cov {
            Covariate::JournalImpact => {
                names.push("journal_impact".into());
                labels.push("journal impact factor".into());
                columns.push(Box::new(|r| Ok(r.journal_impact)));
                resolved_covariates.push(cov.clone());
            }
            Covariate::OpenAccess => {
                names.push("open_access_yes".into());
                labels.push("open access: yes".into());
                references.push("open_access: no".into());
                columns.push(Box::new(|r| Ok(f64::from(r.open_access))));
                resolved_covariates.push(cov.clone());
            }
            Covariate::Funding => {
                names.push("ln_funders".into());
                labels.push("ln(1 + funders)".into());
                columns.push(Box::new(|r| Ok((r.n_funders as f64).ln_1p())));
                resolved_covariates.push(cov.clone());
            }
            Covariate::Collaboration => {
                names.push("ln_countries".into());
                labels.push("ln(countries)".into());
                columns.push(Box::new(|r| Ok((r.n_countries as f64).ln())));
                resolved_covariates.push(cov.clone());
            }
            Covariate::Discipline(block) => {
                let (d, pinned) = resolve_disciplines(rs, block)?;
                let vocab: BTreeSet<String> = d.labels.iter().cloned().collect();
                references.push(format!("{}: {}", d.block, d.reference));
                let mode = block.mode;
                for label in d.kept() {
                    names.push(format!("discipline_{label}"));
                    labels.push(format!("discipline {label}"));
                    let label = label.clone();
                    let vocab = vocab.clone();
                    columns.push(Box::new(move |r| {
                        match mode {
                            DisciplineMode::MultiHot => {
                                if let Some(bad) = r.disciplines.iter().find(|l| !vocab.contains(*l)) {
                                    return Err(DesignError::UnseenCategory {
                                        block: "discipline".into(),
                                        category: bad.clone(),
                                        pub_id: r.pub_id.clone(),
                                    });
                                }
                                Ok(f64::from(r.disciplines.contains(&label)))
                            }
                            DisciplineMode::Primary => {
                                let p = r
                                    .primary_discipline
                                    .as_ref()
                                    .ok_or_else(|| DesignError::MissingPrimary(r.pub_id.clone()))?;
                                if !vocab.contains(p) {
                                    return Err(DesignError::UnseenCategory {
                                        block: "discipline".into(),
                                        category: p.clone(),
                                        pub_id: r.pub_id.clone(),
                                    });
                                }
                                Ok(f64::from(*p == label))
                            }
                        }
                    }));
                }
                resolved_covariates.push(Covariate::Discipline(pinned));
            }
            Covariate::Year(block) => {
                let (d, pinned) = resolve_years(rs, block)?;
                references.push(format!("{}: {}", d.block, d.reference));
                let vocab: BTreeSet<i32> = pinned.vocabulary.clone().unwrap_or_default().into_iter().collect();
                for label in d.kept() {
                    names.push(format!("year_{label}"));
                    labels.push(format!("year {label}"));
                    let year: i32 = label.parse().expect("year labels are integers");
                    let vocab = vocab.clone();
                    columns.push(Box::new(move |r| {
                        if !vocab.contains(&r.pub_year) {
                            return Err(DesignError::UnseenCategory {
                                block: "year".into(),
                                category: r.pub_year.to_string(),
                                pub_id: r.pub_id.clone(),
                            });
                        }
                        Ok(f64::from(r.pub_year == year))
                    }));
                }
                resolved_covariates.push(Covariate::Year(pinned));
            }
        }
    }

    let n = rs.len();
    let p = columns.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    for (j, col) in columns.iter().enumerate() {
        for (i, r) in rs.records.iter().enumerate() {
            x[(i, j)] = col(r)?;
        }
    }
    // unseen-category checks live inside the dummy columns; a block whose
    // only label is the reference has no columns, so check it explicitly
    for cov in &resolved_covariates {
        if let Covariate::Year(YearBlock { vocabulary: Some(v), .. }) = cov {
            if let Some(r) = rs.records.iter().find(|r| !v.contains(&r.pub_year)) {
                return Err(DesignError::UnseenCategory {
                    block: "year".into(),
                    category: r.pub_year.to_string(),
                    pub_id: r.pub_id.clone(),
                });
            }
        }
    }

    let y = DVector::from_iterator(n, rs.records.iter().map(|r| (r.citations as f64).ln_1p()));

    let mut notes = Vec::new();
    let off_range = rs
        .records
        .iter()
        .filter(|r| assign_class(r.report_length as f64, breaks).1 != Placement::Inside)
        .count();
    if off_range > 0 {
        notes.push(format!(
            "design: {off_range} report lengths fell outside the fitted class intervals and were mapped to the nearest lower class"
        ));
    }

    for j in 1..p {
        let first = x[(0, j)];
        if x.column(j).iter().all(|&v| v == first) {
            return Err(DesignError::ConstantColumn(names[j].clone()));
        }
    }
    if let Some(dep) = linalg::first_dependency(&x) {
        return Err(DesignError::RankDeficient(
            dep.into_iter().map(|j| names[j].clone()).collect(),
        ));
    }

    Ok(DesignMatrix {
        y,
        x,
        column_names: names,
        term_labels: labels,
        row_ids: rs.records.iter().map(|r| r.pub_id.clone()).collect(),
        weights: w.map(|w| w.weights.clone()),
        references,
        resolved: Some(ModelSpec {
            response: spec.response,
            length_breaks: spec.length_breaks.clone(),
            covariates: resolved_covariates,
        }),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::record;

    fn breaks() -> BreakSet {
        BreakSet::from_intervals(&[(0.0, 99.0), (100.0, 499.0), (500.0, 2000.0)]).unwrap()
    }

    fn toy() -> RecordSet {
        let rows: [(&str, u32, u64, i32, bool, u32, u32, &[&str], f64); 5] = [
            ("a", 50, 0, 2010, false, 0, 1, &["LS1"], 0.5),
            ("b", 150, 4, 2011, true, 2, 3, &["LS2", "LS1"], 1.5),
            ("c", 700, 10, 2012, false, 1, 2, &["PE1"], 3.0),
            ("d", 300, 1, 2010, true, 5, 1, &["LS2"], 0.9),
            ("e", 1200, 99, 2012, true, 0, 4, &["PE1", "LS1"], 2.2),
        ];
        RecordSet::new(
            rows.iter()
                .map(|&(id, len, cit, year, oa, fund, ctry, disc, imp)| PublicationRecord {
                    pub_id: id.into(),
                    report_length: len,
                    citations: cit,
                    pub_year: year,
                    open_access: oa,
                    n_funders: fund,
                    n_countries: ctry,
                    disciplines: disc.iter().map(|s| s.to_string()).collect(),
                    journal_impact: imp,
                    doc_type: None,
                    metadata_complete: true,
                    primary_discipline: None,
                })
                .collect(),
        )
    }

    #[test]
    fn toy_matrix_matches_hand_built() {
        let rs = toy();
        let spec = ModelSpec::standard(breaks());
        // 5 rows cannot carry 11 columns at full rank; check the values before the rank gate
        let err = build_design(&rs, &spec, None).unwrap_err();
        assert!(matches!(err, DesignError::RankDeficient(_)), "{err:?}");

        let small = ModelSpec {
            covariates: vec![Covariate::OpenAccess, Covariate::Funding],
            ..ModelSpec::standard(breaks())
        };
        let dm = build_design(&rs, &small, None).unwrap();
        assert_eq!(
            dm.column_names,
            ["intercept", "length_class_2", "length_class_3", "open_access_yes", "ln_funders"]
        );
        let l = |v: f64| v.ln_1p();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(5, 5, &[
            1.0, 0.0, 0.0, 0.0, l(0.0),
            1.0, 1.0, 0.0, 1.0, l(2.0),
            1.0, 0.0, 1.0, 0.0, l(1.0),
            1.0, 1.0, 0.0, 1.0, l(5.0),
            1.0, 0.0, 1.0, 1.0, l(0.0),
        ]);
        assert_eq!(dm.x, expected);
        let y: Vec<f64> = [0.0, 4.0, 10.0, 1.0, 99.0].iter().map(|c: &f64| c.ln_1p()).collect();
        assert_eq!(dm.y.as_slice(), y.as_slice());
        assert_eq!(dm.y[0], 0.0);
        assert_eq!(dm.row_ids, ["a", "b", "c", "d", "e"]);
        assert!(dm.references.contains(&"open_access: no".to_string()));
    }

    fn larger(n: usize) -> RecordSet {
        use rand::Rng;
        let mut rng = crate::rng::seeded(3);
        let labels = ["LS1", "LS2", "PE1", "SH1"];
        RecordSet::new(
            (0..n)
                .map(|i| {
                    let mut r = record(&format!("r{i}"), rng.random_range(0..1500));
                    r.citations = rng.random_range(0..50);
                    r.pub_year = rng.random_range(2010..=2013);
                    r.open_access = rng.random_bool(0.4);
                    r.n_funders = rng.random_range(0..6);
                    r.n_countries = rng.random_range(1..5);
                    r.journal_impact = rng.random_range(0.1..5.0);
                    let primary = labels[rng.random_range(0..4)].to_string();
                    r.disciplines = [primary.clone()].into();
                    if rng.random_bool(0.3) {
                        r.disciplines.insert(labels[rng.random_range(0..4)].to_string());
                    }
                    r.primary_discipline = Some(primary);
                    r
                })
                .collect(),
        )
    }

    #[test]
    fn column_count_and_transforms() {
        let rs = larger(200);
        let dm = build_design(&rs, &ModelSpec::standard(breaks()), None).unwrap();
        // 1 + (k-1) + OA + funding + collab + impact + (disc-1) + (years-1)
        assert_eq!(dm.p(), 1 + 2 + 1 + 1 + 1 + 1 + 3 + 3);
        let collab = dm.column("ln_countries").unwrap();
        let funders = dm.column("ln_funders").unwrap();
        for (i, r) in rs.records.iter().enumerate() {
            assert_eq!(dm.x[(i, collab)], (r.n_countries as f64).ln());
            assert!((dm.x[(i, funders)] - (r.n_funders as f64 + 1.0).ln()).abs() < 1e-14);
            assert_eq!(dm.y[i].exp_m1().round() as u64, r.citations);
        }
        assert!(dm.references.contains(&"discipline: LS1".to_string()));
        assert!(dm.references.contains(&"year: 2010".to_string()));
    }

    #[test]
    fn reference_record_has_zero_dummies() {
        let rs = larger(200);
        let spec = ModelSpec {
            covariates: vec![
                Covariate::OpenAccess,
                Covariate::Funding,
                Covariate::Discipline(DisciplineBlock {
                    mode: DisciplineMode::Primary,
                    ..Default::default()
                }),
                Covariate::Year(YearBlock::default()),
            ],
            ..ModelSpec::standard(breaks())
        };
        let dm = build_design(&rs, &spec, None).unwrap();
        let funders = dm.column("ln_funders").unwrap();
        for (i, r) in rs.records.iter().enumerate() {
            let at_reference = r.report_length < 100
                && !r.open_access
                && r.primary_discipline.as_deref() == Some("LS1")
                && r.pub_year == 2010;
            if at_reference {
                for j in 0..dm.p() {
                    let expected = match j {
                        0 => 1.0,
                        j if j == funders => (r.n_funders as f64).ln_1p(),
                        _ => 0.0,
                    };
                    assert_eq!(dm.x[(i, j)], expected, "column {}", dm.column_names[j]);
                }
            }
        }
    }

    #[test]
    fn unseen_category_and_bad_reference() {
        let rs = larger(100);
        let spec = ModelSpec {
            covariates: vec![Covariate::Year(YearBlock {
                vocabulary: Some(vec![2010, 2011, 2012]),
                reference: None,
            })],
            ..ModelSpec::standard(breaks())
        };
        let err = build_design(&rs, &spec, None).unwrap_err();
        assert!(matches!(err, DesignError::UnseenCategory { ref category, .. } if category == "2013"), "{err:?}");

        let spec = ModelSpec {
            covariates: vec![Covariate::Discipline(DisciplineBlock {
                reference: Some("XX".into()),
                ..Default::default()
            })],
            ..ModelSpec::standard(breaks())
        };
        assert!(matches!(
            build_design(&rs, &spec, None).unwrap_err(),
            DesignError::UnknownReference { .. }
        ));
    }

    #[test]
    fn constant_column_rejected() {
        let mut rs = larger(50);
        for r in &mut rs.records {
            r.open_access = true;
        }
        let spec = ModelSpec {
            covariates: vec![Covariate::OpenAccess],
            ..ModelSpec::standard(breaks())
        };
        assert!(matches!(
            build_design(&rs, &spec, None).unwrap_err(),
            DesignError::ConstantColumn(c) if c == "open_access_yes"
        ));
    }

    #[test]
    fn dependent_columns_are_named() {
        let mut rs = larger(80);
        // funding count tracks the OA flag exactly: ln(1+1)*OA
        for r in &mut rs.records {
            r.n_funders = u32::from(r.open_access);
        }
        let spec = ModelSpec {
            covariates: vec![Covariate::OpenAccess, Covariate::Funding],
            ..ModelSpec::standard(breaks())
        };
        match build_design(&rs, &spec, None).unwrap_err() {
            DesignError::RankDeficient(cols) => {
                assert_eq!(cols, ["open_access_yes", "ln_funders"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolved_spec_reproduces_design() {
        let rs = larger(150);
        let dm = build_design(&rs, &ModelSpec::standard(breaks()), None).unwrap();
        let again = build_design(&rs, dm.resolved.as_ref().unwrap(), None).unwrap();
        assert_eq!(again.x, dm.x);
        assert_eq!(again.column_names, dm.column_names);
        let weights = WeightVector::unit(rs.len());
        let weighted = build_design(&rs, &ModelSpec::standard(breaks()), Some(&weights)).unwrap();
        assert_eq!(weighted.weights.as_deref(), Some(&weights.weights[..]));
    }
}
