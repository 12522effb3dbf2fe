//! Weighted least squares on the log1p response with heteroscedasticity
//! consistent (sandwich) covariance estimates.
//!
//! All quantities are computed on the transformed problem `√W·X`, `√W·y`.
//! Residuals stored in [`FitResult`] are on the original scale; the
//! weighted residual is `√w_i · r_i`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::design::DesignMatrix;
use crate::linalg::Qr;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("design has {n} rows for {p} columns; need n > p")]
    TooFewRows { n: usize, p: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("weight {value} at row {row} ('{row_id}') is not strictly positive")]
    NonPositiveWeight {
        row: usize,
        row_id: String,
        value: f64,
    },
    #[error("leverage of row {row} ('{row_id}') is numerically 1; {variant} is undefined")]
    UnitLeverage {
        row: usize,
        row_id: String,
        variant: HcVariant,
    },
    #[error("unknown robust variant '{0}' (expected HC0, HC1, HC2 or HC3)")]
    UnknownVariant(String),
    #[error("coefficient export failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HcVariant {
    HC0,
    #[default]
    HC1,
    HC2,
    HC3,
}

impl fmt::Display for HcVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HcVariant::HC0 => "HC0",
            HcVariant::HC1 => "HC1",
            HcVariant::HC2 => "HC2",
            HcVariant::HC3 => "HC3",
        })
    }
}

impl FromStr for HcVariant {
    type Err = RegressError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "HC0" => Ok(HcVariant::HC0),
            "HC1" => Ok(HcVariant::HC1),
            "HC2" => Ok(HcVariant::HC2),
            "HC3" => Ok(HcVariant::HC3),
            _ => Err(RegressError::UnknownVariant(s.into())),
        }
    }
}

/// Leverages closer than this to 1 make HC2/HC3 and Cook's distance undefined.
pub const LEVERAGE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub cov_classical: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    pub hat_diag: Vec<f64>,
    /// Σ w r² / (n − p)
    pub sigma2: f64,
    pub n: usize,
    pub p: usize,
    pub weighted: bool,
    pub weights: Vec<f64>,
    pub column_names: Vec<String>,
    pub term_labels: Vec<String>,
    pub references: Vec<String>,
    pub row_ids: Vec<String>,
    /// Original (unweighted) predictor matrix, kept for auxiliary regressions.
    pub x: DMatrix<f64>,
    /// Thin Q of √W·X.
    q: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl FitResult {
    /// (X'WX)^-1
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        &self.r_inv * self.r_inv.transpose()
    }

    pub fn weighted_residuals(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            self.residuals
                .iter()
                .zip(&self.weights)
                .map(|(r, w)| r * w.sqrt()),
        )
    }

    pub fn rss(&self) -> f64 {
        self.weighted_residuals().norm_squared()
    }

    pub fn robust_covariance(&self, variant: HcVariant) -> Result<DMatrix<f64>, RegressError> {
        robust_covariance(self, variant)
    }
}

pub fn fit_wls(dm: &DesignMatrix) -> Result<FitResult, RegressError> {
    let (n, p) = dm.x.shape();
    if n <= p {
        return Err(RegressError::TooFewRows { n, p });
    }
    let weights = match &dm.weights {
        Some(w) => {
            if let Some((row, &value)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
                return Err(RegressError::NonPositiveWeight {
                    row,
                    row_id: dm.row_ids[row].clone(),
                    value,
                });
            }
            w.clone()
        }
        None => vec![1.0; n],
    };
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut xw = dm.x.clone();
    for (i, s) in sw.iter().enumerate() {
        xw.row_mut(i).scale_mut(*s);
    }
    let yw = DVector::from_iterator(n, dm.y.iter().zip(&sw).map(|(y, s)| y * s));
    let qr = Qr::new(&xw).ok_or(RegressError::RankDeficient)?;
    let coefficients = qr.solve(&yw);
    let fitted = &dm.x * &coefficients;
    let mut residuals = &dm.y - &fitted;
    let rss: f64 = residuals
        .iter()
        .zip(&weights)
        .map(|(r, w)| w * r * r)
        .sum();
    let scale: f64 = yw.norm_squared();
    // exact-fit data leave rounding noise only
    let sigma2 = if rss <= 1e-20 * scale {
        residuals.fill(0.0);
        0.0
    } else {
        rss / (n - p) as f64
    };
    let hat_diag = qr.leverages();
    let cov_classical = qr.gram_inverse() * sigma2;
    Ok(FitResult {
        coefficients,
        cov_classical,
        residuals,
        fitted,
        hat_diag,
        sigma2,
        n,
        p,
        weighted: dm.weights.is_some(),
        weights,
        column_names: dm.column_names.clone(),
        term_labels: dm.term_labels.clone(),
        references: dm.references.clone(),
        row_ids: dm.row_ids.clone(),
        x: dm.x.clone(),
        q: qr.q,
        r_inv: qr.r_inv,
    })
}

/// Sandwich `(X'WX)^-1 X'W Ω W X (X'WX)^-1`, evaluated as
/// `R^-1 (Q' Ω̃ Q) R^-T` with Ω̃ the squared weighted residuals adjusted
/// per variant.
pub fn robust_covariance(fr: &FitResult, variant: HcVariant) -> Result<DMatrix<f64>, RegressError> {
    if variant == HcVariant::HC1 {
        return Ok(robust_covariance(fr, HcVariant::HC0)? * hc1_factor(fr));
    }
    let e = fr.weighted_residuals();
    let omega: Vec<f64> = match variant {
        HcVariant::HC0 | HcVariant::HC1 => e.iter().map(|e| e * e).collect(),
        HcVariant::HC2 | HcVariant::HC3 => {
            let power = if variant == HcVariant::HC2 { 1 } else { 2 };
            e.iter()
                .zip(&fr.hat_diag)
                .enumerate()
                .map(|(i, (e, h))| {
                    let m = 1.0 - h;
                    if m < LEVERAGE_TOL {
                        Err(RegressError::UnitLeverage {
                            row: i,
                            row_id: fr.row_ids[i].clone(),
                            variant,
                        })
                    } else {
                        Ok(e * e / m.powi(power))
                    }
                })
                .collect::<Result<_, _>>()?
        }
    };
    let mut qo = fr.q.clone();
    for (i, o) in omega.iter().enumerate() {
        qo.row_mut(i).scale_mut(o.sqrt());
    }
    let meat = qo.transpose() * &qo;
    let cov = &fr.r_inv * meat * fr.r_inv.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

pub fn hc1_factor(fr: &FitResult) -> f64 {
    fr.n as f64 / (fr.n - fr.p) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub term: String,
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    /// `None` when the standard error is 0 and the statistic is undefined.
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub variant: HcVariant,
    pub weighted: bool,
    pub n: usize,
    pub p: usize,
    pub references: Vec<String>,
    pub rows: Vec<CoefficientRow>,
    pub degenerate: bool,
}

pub const Z_95: f64 = 1.96;

pub fn significance_marker(p: Option<f64>) -> &'static str {
    match p {
        None => "n/a",
        Some(p) if p < 0.001 => "***",
        Some(p) if p < 0.01 => "**",
        Some(p) if p < 0.05 => "*",
        Some(_) => "",
    }
}

pub fn coefficient_table(fr: &FitResult, variant: HcVariant) -> Result<CoefficientTable, RegressError> {
    let cov = robust_covariance(fr, variant)?;
    let normal = Normal::standard();
    let mut degenerate = false;
    let rows = (0..fr.p)
        .map(|j| {
            let estimate = fr.coefficients[j];
            let se = cov[(j, j)].max(0.0).sqrt();
            let (t_stat, p_value) = if se > 0.0 {
                let t = estimate / se;
                (Some(t), Some((2.0 * normal.sf(t.abs())).clamp(0.0, 1.0)))
            } else {
                degenerate = true;
                (None, None)
            };
            CoefficientRow {
                term: fr.column_names[j].clone(),
                label: fr.term_labels[j].clone(),
                estimate,
                std_error: se,
                t_stat,
                p_value,
                ci_low: estimate - Z_95 * se,
                ci_high: estimate + Z_95 * se,
                significance: significance_marker(p_value).into(),
            }
        })
        .collect();
    Ok(CoefficientTable {
        variant,
        weighted: fr.weighted,
        n: fr.n,
        p: fr.p,
        references: fr.references.clone(),
        rows,
        degenerate,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl CoefficientTable {
    pub fn row(&self, term: &str) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.term == term)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), RegressError> {
        let io = |e: csv::Error| RegressError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "term", "label", "estimate", "std_error", "t_stat", "p_value", "ci_low", "ci_high", "significance",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.term.clone(),
                r.label.clone(),
                r.estimate.to_string(),
                r.std_error.to_string(),
                opt(r.t_stat),
                opt(r.p_value),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.significance.clone(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| RegressError::Io(e.to_string()))
    }

    /// Forest-plot rows: term, estimate, CI bounds, marker.
    pub fn write_forest_csv<W: Write>(&self, out: W) -> Result<(), RegressError> {
        let io = |e: csv::Error| RegressError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["term", "label", "estimate", "ci_low", "ci_high", "significance"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.term.clone(),
                r.label.clone(),
                r.estimate.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.significance.clone(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| RegressError::Io(e.to_string()))
    }

    pub fn read_csv_rows<R: std::io::Read>(input: R) -> Result<Vec<CoefficientRow>, RegressError> {
        let io = |e: csv::Error| RegressError::Io(e.to_string());
        let mut rd = csv::Reader::from_reader(input);
        let parse = |s: &str| -> Result<f64, RegressError> {
            s.parse().map_err(|_| RegressError::Io(format!("bad number '{s}'")))
        };
        let parse_opt = |s: &str| -> Result<Option<f64>, RegressError> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse(s).map(Some)
            }
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(io)?;
            rows.push(CoefficientRow {
                term: rec[0].into(),
                label: rec[1].into(),
                estimate: parse(&rec[2])?,
                std_error: parse(&rec[3])?,
                t_stat: parse_opt(&rec[4])?,
                p_value: parse_opt(&rec[5])?,
                ci_low: parse(&rec[6])?,
                ci_high: parse(&rec[7])?,
                significance: rec[8].into(),
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_design(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = crate::rng::seeded(seed);
        let x = DMatrix::from_fn(n, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                StandardNormal.sample(&mut rng)
            }
        });
        let beta = DVector::from_fn(p, |j, _| j as f64 * 0.5 - 1.0);
        let noise = DVector::from_fn(n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * rng.random_range(0.5..1.5)
        });
        let y = &x * beta + noise;
        (x, y)
    }

    pub(crate) fn design(x: DMatrix<f64>, y: DVector<f64>, weights: Option<Vec<f64>>) -> DesignMatrix {
        let n = x.nrows();
        let names = (0..x.ncols())
            .map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") })
            .collect();
        DesignMatrix::new(x, y, names, (0..n).map(|i| format!("r{i}")).collect(), weights).unwrap()
    }

    #[test]
    fn normal_equations_oracle() {
        let (x, y) = random_design(200, 6, 11);
        let fr = fit_wls(&design(x.clone(), y.clone(), None)).unwrap();
        let xtx = x.transpose() * &x;
        let beta = xtx.try_inverse().unwrap() * x.transpose() * &y;
        for j in 0..6 {
            assert!((fr.coefficients[j] - beta[j]).abs() < 1e-8);
        }
        // X'r = 0 and trace of the projection
        let ortho = x.transpose() * &fr.residuals;
        assert!(ortho.amax() < 1e-8 * y.norm());
        let trace: f64 = fr.hat_diag.iter().sum();
        assert!((trace - 6.0).abs() < 1e-8);
        assert!(fr.hat_diag.iter().all(|h| (0.0..=1.0).contains(h)));
    }

    #[test]
    fn weighted_oracle_and_unit_weights() {
        let (x, y) = random_design(150, 4, 12);
        let mut rng = crate::rng::seeded(5);
        let w: Vec<f64> = (0..150).map(|_| rng.random_range(0.2..3.0)).collect();
        let fr = fit_wls(&design(x.clone(), y.clone(), Some(w.clone()))).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let beta = (x.transpose() * &wm * &x).try_inverse().unwrap() * x.transpose() * &wm * &y;
        assert!((&fr.coefficients - beta).amax() < 1e-8);
        let ortho = x.transpose() * &wm * &fr.residuals;
        assert!(ortho.amax() < 1e-8 * y.norm());

        let plain = fit_wls(&design(x.clone(), y.clone(), None)).unwrap();
        let ones = fit_wls(&design(x, y, Some(vec![1.0; 150]))).unwrap();
        assert!((&plain.coefficients - &ones.coefficients).amax() <= 1e-12);
        assert!(!plain.weighted && ones.weighted);
    }

    #[test]
    fn duplicated_rows_with_half_weight() {
        let (x, y) = random_design(80, 3, 13);
        let mut rng = crate::rng::seeded(6);
        let w: Vec<f64> = (0..80).map(|_| rng.random_range(0.5..2.0)).collect();
        let base = fit_wls(&design(x.clone(), y.clone(), Some(w.clone()))).unwrap();
        let x2 = DMatrix::from_fn(160, 3, |i, j| x[(i % 80, j)]);
        let y2 = DVector::from_fn(160, |i, _| y[i % 80]);
        let w2: Vec<f64> = (0..160).map(|i| w[i % 80] / 2.0).collect();
        let dup = fit_wls(&design(x2, y2, Some(w2))).unwrap();
        assert!((&base.coefficients - &dup.coefficients).amax() < 1e-10);
    }

    #[test]
    fn perfect_fit_is_flagged_degenerate() {
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(20, |i, _| 3.0 + 0.25 * i as f64);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        assert_eq!(fr.sigma2, 0.0);
        assert!(fr.residuals.iter().all(|r| *r == 0.0));
        let table = coefficient_table(&fr, HcVariant::HC1).unwrap();
        assert!(table.degenerate);
        for row in &table.rows {
            assert_eq!(row.std_error, 0.0);
            assert_eq!(row.p_value, None);
            assert_eq!(row.significance, "n/a");
            assert!(row.estimate.is_finite());
        }
    }

    #[test]
    fn errors_are_reported() {
        let (x, y) = random_design(30, 3, 14);
        let mut w = vec![1.0; 30];
        w[7] = 0.0;
        assert!(matches!(
            fit_wls(&design(x.clone(), y.clone(), Some(w))),
            Err(RegressError::NonPositiveWeight { row: 7, .. })
        ));
        let mut xd = x.clone();
        let c = xd.column(1).into_owned() * 2.0;
        xd.set_column(2, &c);
        assert!(matches!(fit_wls(&design(xd, y.clone(), None)), Err(RegressError::RankDeficient)));
        let small = x.rows(0, 3).into_owned();
        let ys = y.rows(0, 3).into_owned();
        assert!(matches!(
            fit_wls(&design(small, ys, None)),
            Err(RegressError::TooFewRows { n: 3, p: 3 })
        ));
    }

    #[test]
    fn unit_leverage_named_for_hc3() {
        // row 0 is the only one with a nonzero second column
        let mut x = DMatrix::from_fn(10, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        x[(0, 1)] = 1.0;
        let y = DVector::from_fn(10, |i, _| (i * i) as f64);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        assert!(matches!(
            robust_covariance(&fr, HcVariant::HC3),
            Err(RegressError::UnitLeverage { row: 0, .. })
        ));
        assert!(robust_covariance(&fr, HcVariant::HC0).is_ok());
    }

    #[test]
    fn sandwich_matches_explicit_formula() {
        let (x, y) = random_design(120, 4, 15);
        let mut rng = crate::rng::seeded(8);
        let w: Vec<f64> = (0..120).map(|_| rng.random_range(0.5..2.0)).collect();
        let fr = fit_wls(&design(x.clone(), y, Some(w.clone()))).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let bread = (x.transpose() * &wm * &x).try_inverse().unwrap();
        for variant in [HcVariant::HC0, HcVariant::HC1, HcVariant::HC2, HcVariant::HC3] {
            let hat = &fr.hat_diag;
            let omega = DVector::from_fn(120, |i, _| {
                let r2 = fr.residuals[i].powi(2);
                match variant {
                    HcVariant::HC0 => r2,
                    HcVariant::HC1 => r2 * 120.0 / 116.0,
                    HcVariant::HC2 => r2 / (1.0 - hat[i]),
                    HcVariant::HC3 => r2 / (1.0 - hat[i]).powi(2),
                }
            });
            let meat = x.transpose() * &wm * DMatrix::from_diagonal(&omega) * &wm * &x;
            let expected = &bread * meat * &bread;
            let got = robust_covariance(&fr, variant).unwrap();
            assert!((&got - &expected).amax() < 1e-10 * expected.amax(), "{variant}");
        }
        let hc0 = robust_covariance(&fr, HcVariant::HC0).unwrap();
        let hc1 = robust_covariance(&fr, HcVariant::HC1).unwrap();
        let f = 120.0 / 116.0;
        for (a, b) in hc1.iter().zip(hc0.iter()) {
            assert_eq!(*a, b * f);
        }
    }

    #[test]
    fn homoscedastic_hc1_close_to_classical() {
        let mut rng = crate::rng::seeded(21);
        let n = 2000;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            1.0 + x[(i, 1)] - 0.5 * x[(i, 2)] + e
        });
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let hc1 = robust_covariance(&fr, HcVariant::HC1).unwrap();
        for j in 0..3 {
            let ratio = (hc1[(j, j)] / fr.cov_classical[(j, j)]).sqrt();
            assert!((ratio - 1.0).abs() < 0.10, "column {j}: {ratio}");
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("hc3".parse::<HcVariant>().unwrap(), HcVariant::HC3);
        assert!("HC9".parse::<HcVariant>().is_err());
        assert_eq!(HcVariant::default(), HcVariant::HC1);
    }

    #[test]
    fn table_csv_round_trip() {
        let (x, y) = random_design(60, 3, 16);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let t = coefficient_table(&fr, HcVariant::HC1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let rows = CoefficientTable::read_csv_rows(&buf[..]).unwrap();
        assert_eq!(rows, t.rows);
        let json: CoefficientTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(json, t);
        for r in &t.rows {
            assert_eq!(r.ci_low, r.estimate - 1.96 * r.std_error);
            let p = r.p_value.unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn scale_equivariance(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0]) {
                let (x, y) = random_design(60, 3, seed);
                let a = fit_wls(&design(x.clone(), y.clone(), None)).unwrap();
                let b = fit_wls(&design(x, y * c, None)).unwrap();
                let ta = coefficient_table(&a, HcVariant::HC1).unwrap();
                let tb = coefficient_table(&b, HcVariant::HC1).unwrap();
                for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
                    prop_assert!((rb.estimate - c * ra.estimate).abs() <= 1e-9 * (1.0 + (c * ra.estimate).abs()));
                    prop_assert!((rb.std_error - c.abs() * ra.std_error).abs() <= 1e-9 * (1.0 + rb.std_error));
                    let (t1, t2) = (ra.t_stat.unwrap(), rb.t_stat.unwrap() * c.signum());
                    prop_assert!((t1 - t2).abs() <= 1e-7 * (1.0 + t1.abs()));
                }
            }

            #[test]
            fn sandwich_is_psd(seed in 0u64..1000, v in 0usize..4) {
                let (x, y) = random_design(50, 4, seed);
                let fr = fit_wls(&design(x, y, None)).unwrap();
                let variant = [HcVariant::HC0, HcVariant::HC1, HcVariant::HC2, HcVariant::HC3][v];
                let cov = robust_covariance(&fr, variant).unwrap();
                let eig = cov.clone().symmetric_eigen();
                let floor = -1e-10 * cov.trace();
                prop_assert!(eig.eigenvalues.iter().all(|e| *e >= floor));
            }
        }
    }
}
