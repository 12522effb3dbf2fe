//! Multicollinearity, influence and heteroscedasticity checks for a fitted
//! model, plus threshold-based exclusion of influential rows.
//!
//! Weighted fits use the weighted projection throughout: hat values are the
//! diagonal of `√W X (X'WX)^-1 X' √W` and Cook's distance uses the weighted
//! residuals `√w_i r_i`.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::dataset::RecordSet;
use crate::design::DesignMatrix;
use crate::linalg::{Qr, RANK_TOL};
use crate::regress::{FitResult, LEVERAGE_TOL};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("VIF needs an intercept column")]
    NoIntercept,
    #[error("influence thresholds must be positive (cook {cook}, hat {hat})")]
    BadThreshold { cook: f64, hat: f64 },
    #[error("every one of the {0} rows exceeds the influence thresholds")]
    AllExcluded(usize),
    #[error("diagnostics export failed: {0}")]
    Io(String),
}

/// Non-finite values travel through JSON as `null`.
pub(crate) mod serde_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { Some(*v) } else { None }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter()
                .map(|x| if x.is_finite() { Some(*x) } else { None })
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::INFINITY))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifEntry {
    pub term: String,
    /// `inf` (JSON `null`) when the column is an exact combination of the others.
    #[serde(with = "serde_inf")]
    pub vif: f64,
    pub collinear: bool,
}

fn intercept_column(x: &DMatrix<f64>) -> Option<usize> {
    (0..x.ncols()).find(|&j| x.column(j).iter().all(|v| *v == 1.0))
}

fn weighted_tss(col: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = col.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    col.iter().zip(w).map(|(x, w)| w * (x - mean).powi(2)).sum()
}

/// Variance inflation factors for every non-intercept column, using the
/// design weights when present.
///
/// With an intercept in the model, `VIF_j = TSS_j · [(X'WX)^-1]_jj`, which
/// equals `1 / (1 − R²_j)` of the auxiliary regression. Rank-deficient designs
/// fall back to one least-squares auxiliary regression per column.
pub fn vif(dm: &DesignMatrix) -> Result<Vec<VifEntry>, DiagnosticsError> {
    let icpt = intercept_column(&dm.x).ok_or(DiagnosticsError::NoIntercept)?;
    let n = dm.n();
    let w = dm.weights.clone().unwrap_or_else(|| vec![1.0; n]);
    let mut xw = dm.x.clone();
    for (i, wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(wi.sqrt());
    }
    let gram_inv = Qr::new(&xw).map(|qr| qr.gram_inverse());
    let mut out = Vec::new();
    for j in (0..dm.p()).filter(|&j| j != icpt) {
        let col: Vec<f64> = dm.x.column(j).iter().copied().collect();
        let tss = weighted_tss(&col, &w);
        let value = if tss == 0.0 {
            f64::INFINITY
        } else if let Some(g) = &gram_inv {
            (tss * g[(j, j)]).max(1.0)
        } else {
            let others = xw.clone().remove_column(j);
            let target = xw.column(j).into_owned();
            let svd = others.svd(true, true);
            let coef = svd
                .solve(&target, RANK_TOL * svd.singular_values.max())
                .expect("both factors computed");
            let rss = (target - xw.clone().remove_column(j) * coef).norm_squared();
            if rss <= RANK_TOL * tss {
                f64::INFINITY
            } else {
                (tss / rss).max(1.0)
            }
        };
        out.push(VifEntry {
            term: dm.column_names[j].clone(),
            vif: value,
            collinear: value.is_infinite(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Influence {
    pub row_ids: Vec<String>,
    pub hat: Vec<f64>,
    /// `inf` marks rows whose leverage is numerically 1.
    #[serde(with = "serde_inf::vec")]
    pub cooks_d: Vec<f64>,
    #[serde(with = "serde_inf::vec")]
    pub std_residuals: Vec<f64>,
}

impl Influence {
    pub fn unit_leverage_rows(&self) -> Vec<&str> {
        self.cooks_d
            .iter()
            .zip(&self.row_ids)
            .filter(|(d, _)| d.is_infinite())
            .map(|(_, id)| id.as_str())
            .collect()
    }
}

/// Hat values and Cook's distances:
/// `D_i = e_i² h_i / (p s² (1 − h_i)²)`, `e_i = √w_i r_i`.
pub fn influence(fr: &FitResult) -> Influence {
    let e = fr.weighted_residuals();
    let s2 = fr.sigma2;
    let p = fr.p as f64;
    let mut cooks_d = Vec::with_capacity(fr.n);
    let mut std_residuals = Vec::with_capacity(fr.n);
    for (ei, &h) in e.iter().zip(&fr.hat_diag) {
        let m = 1.0 - h;
        if m < LEVERAGE_TOL {
            cooks_d.push(f64::INFINITY);
            std_residuals.push(f64::INFINITY);
        } else if s2 == 0.0 {
            cooks_d.push(0.0);
            std_residuals.push(0.0);
        } else {
            cooks_d.push(ei * ei * h / (p * s2 * m * m));
            std_residuals.push(ei / (s2 * m).sqrt());
        }
    }
    Influence {
        row_ids: fr.row_ids.clone(),
        hat: fr.hat_diag.clone(),
        cooks_d,
        std_residuals,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InfluenceThresholds {
    Absolute { cook: f64, hat: f64 },
    /// Cook's D above 4/n, leverage above 2p/n.
    SizeScaled,
}

impl Default for InfluenceThresholds {
    fn default() -> Self {
        InfluenceThresholds::Absolute {
            cook: 0.02,
            hat: 0.01,
        }
    }
}

impl InfluenceThresholds {
    /// (cook, hat) cut-offs for a fit with `n` rows and `p` columns.
    pub fn resolve(&self, n: usize, p: usize) -> (f64, f64) {
        match *self {
            InfluenceThresholds::Absolute { cook, hat } => (cook, hat),
            InfluenceThresholds::SizeScaled => (4.0 / n as f64, 2.0 * p as f64 / n as f64),
        }
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if let InfluenceThresholds::Absolute { cook, hat } = *self {
            if !(cook > 0.0 && hat > 0.0) {
                return Err(DiagnosticsError::BadThreshold { cook, hat });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    Cook,
    Hat,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRow {
    pub row_id: String,
    pub reason: FlagReason,
    #[serde(with = "serde_inf")]
    pub cooks_d: f64,
    pub hat: f64,
}

pub fn flag_influential(inf: &Influence, cook_thresh: f64, hat_thresh: f64) -> Vec<FlaggedRow> {
    inf.row_ids
        .iter()
        .zip(inf.cooks_d.iter().zip(&inf.hat))
        .filter_map(|(id, (&d, &h))| {
            let reason = match (d > cook_thresh, h > hat_thresh) {
                (true, true) => FlagReason::Both,
                (true, false) => FlagReason::Cook,
                (false, true) => FlagReason::Hat,
                (false, false) => return None,
            };
            Some(FlaggedRow {
                row_id: id.clone(),
                reason,
                cooks_d: d,
                hat: h,
            })
        })
        .collect()
}

/// Drops rows whose Cook's distance or leverage exceeds its threshold.
/// Rows are matched to records by `pub_id`.
pub fn exclude_influential(
    rs: &RecordSet,
    fr: &FitResult,
    cook_thresh: f64,
    hat_thresh: f64,
) -> Result<(RecordSet, Vec<FlaggedRow>), DiagnosticsError> {
    if !(cook_thresh > 0.0 && hat_thresh > 0.0) {
        return Err(DiagnosticsError::BadThreshold {
            cook: cook_thresh,
            hat: hat_thresh,
        });
    }
    let flagged = flag_influential(&influence(fr), cook_thresh, hat_thresh);
    let drop: BTreeSet<&str> = flagged.iter().map(|f| f.row_id.as_str()).collect();
    let records: Vec<_> = rs
        .records
        .iter()
        .filter(|r| !drop.contains(r.pub_id.as_str()))
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(DiagnosticsError::AllExcluded(rs.len()));
    }
    let mut kept = RecordSet {
        records,
        provenance: rs.provenance.clone(),
    };
    let (mut cook, mut hat, mut both) = (0, 0, 0);
    for f in &flagged {
        match f.reason {
            FlagReason::Cook => cook += 1,
            FlagReason::Hat => hat += 1,
            FlagReason::Both => both += 1,
        }
    }
    kept.note(format!(
        "exclude: {} in, {} kept, {} excluded (cook > {cook_thresh}: {cook}, hat > {hat_thresh}: {hat}, both: {both})",
        rs.len(),
        kept.len(),
        rs.len() - kept.len()
    ));
    Ok((kept, flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreuschPagan {
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub studentized: bool,
}

/// Breusch-Pagan test: squared weighted residuals regressed on the
/// predictor matrix. The studentized (Koenker) statistic is `n R²`; the
/// classical one is `ESS / (2 σ̂⁴)` with `σ̂² = Σ e² / n`. Both are
/// chi-square with `p − 1` degrees of freedom under homoscedasticity.
pub fn breusch_pagan(fr: &FitResult, studentized: bool) -> BreuschPagan {
    let n = fr.n;
    let df = fr.p.saturating_sub(1);
    let degenerate = BreuschPagan {
        stat: 0.0,
        df,
        p_value: 1.0,
        studentized,
    };
    let u: DVector<f64> = fr.weighted_residuals().map(|e| e * e);
    let mean = u.mean();
    let tss: f64 = u.iter().map(|v| (v - mean).powi(2)).sum();
    if df == 0 || tss <= f64::MIN_POSITIVE || mean == 0.0 {
        return degenerate;
    }
    let Some(qr) = Qr::new(&fr.x) else {
        return degenerate;
    };
    let coef = qr.solve(&u);
    let fitted = &fr.x * coef;
    let rss = (&u - &fitted).norm_squared();
    let ess: f64 = fitted.iter().map(|v| (v - mean).powi(2)).sum();
    let stat = if studentized {
        n as f64 * (1.0 - rss / tss).max(0.0)
    } else {
        ess / (2.0 * mean * mean)
    };
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    BreuschPagan {
        stat,
        df,
        p_value: chi.sf(stat).clamp(0.0, 1.0),
        studentized,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub p: usize,
    pub weighted: bool,
    pub vif: Vec<VifEntry>,
    pub influence: Influence,
    pub breusch_pagan: BreuschPagan,
    pub breusch_pagan_classical: BreuschPagan,
    pub thresholds: (f64, f64),
    pub flagged: Vec<FlaggedRow>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub notes: Vec<String>,
}

pub fn diagnose(
    dm: &DesignMatrix,
    fr: &FitResult,
    thresholds: &InfluenceThresholds,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    thresholds.validate()?;
    let (cook, hat) = thresholds.resolve(fr.n, fr.p);
    let inf = influence(fr);
    let flagged = flag_influential(&inf, cook, hat);
    let mut notes = Vec::new();
    if fr.weighted {
        notes.push("influence and leverage computed on the weighted projection".into());
    }
    let unit = inf.unit_leverage_rows();
    if !unit.is_empty() {
        notes.push(format!("rows with leverage numerically 1: {}", unit.join(", ")));
    }
    Ok(DiagnosticsReport {
        n: fr.n,
        p: fr.p,
        weighted: fr.weighted,
        vif: vif(dm)?,
        breusch_pagan: breusch_pagan(fr, true),
        breusch_pagan_classical: breusch_pagan(fr, false),
        thresholds: (cook, hat),
        flagged,
        influence: inf,
        fitted: fr.fitted.iter().copied().collect(),
        residuals: fr.residuals.iter().copied().collect(),
        notes,
    })
}

impl DiagnosticsReport {
    pub fn max_vif(&self) -> f64 {
        self.vif.iter().map(|v| v.vif).fold(1.0, f64::max)
    }
}

/// Residual-vs-fitted, scale-location and influence plot data, one row per
/// observation.
pub fn write_plot_csv<W: Write>(report: &DiagnosticsReport, out: W) -> Result<(), DiagnosticsError> {
    let io = |e: csv::Error| DiagnosticsError::Io(e.to_string());
    let inf = &report.influence;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "row_id",
        "fitted",
        "residual",
        "std_residual",
        "sqrt_abs_std_residual",
        "hat",
        "cooks_d",
    ])
    .map_err(io)?;
    for i in 0..report.n {
        let sr = inf.std_residuals[i];
        w.write_record([
            inf.row_ids[i].clone(),
            report.fitted[i].to_string(),
            report.residuals[i].to_string(),
            sr.to_string(),
            sr.abs().sqrt().to_string(),
            inf.hat[i].to_string(),
            inf.cooks_d[i].to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| DiagnosticsError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::fit_wls;
    use crate::regress::tests::{design, random_design};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Cook's distance from the coefficient shift of an explicit refit
    /// without row i.
    fn loo_cook(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], fr: &FitResult, i: usize) -> f64 {
        let keep: Vec<usize> = (0..x.nrows()).filter(|&k| k != i).collect();
        let xs = x.select_rows(&keep);
        let ys = y.select_rows(&keep);
        let ws: Vec<f64> = keep.iter().map(|&k| w[k]).collect();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(ws));
        let b = (xs.transpose() * &wm * &xs).try_inverse().unwrap() * xs.transpose() * &wm * ys;
        let d = &fr.coefficients - b;
        let full = DMatrix::from_diagonal(&DVector::from_vec(w.to_vec()));
        let xtwx = x.transpose() * full * x;
        (d.transpose() * xtwx * &d)[(0, 0)] / (fr.p as f64 * fr.sigma2)
    }

    #[test]
    fn cook_matches_leave_one_out() {
        for seed in 0..3 {
            let (x, y) = random_design(300, 4, 100 + seed);
            let mut rng = crate::rng::seeded(seed);
            let w: Vec<f64> = (0..300).map(|_| rng.random_range(0.5..2.0)).collect();
            for weights in [None, Some(w.clone())] {
                let ww = weights.clone().unwrap_or_else(|| vec![1.0; 300]);
                let fr = fit_wls(&design(x.clone(), y.clone(), weights)).unwrap();
                let inf = influence(&fr);
                for i in (0..300).step_by(7) {
                    let oracle = loo_cook(&x, &y, &ww, &fr, i);
                    assert!((inf.cooks_d[i] - oracle).abs() < 1e-8, "row {i}: {} vs {oracle}", inf.cooks_d[i]);
                }
                let trace: f64 = inf.hat.iter().sum();
                assert!((trace - 4.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn symmetric_design_has_equal_leverage() {
        // x = ±1 repeated: every row has h = p/n
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else if i % 2 == 0 { 1.0 } else { -1.0 });
        let y = DVector::from_fn(8, |i, _| (i as f64).sin());
        let fr = fit_wls(&design(x, y, None)).unwrap();
        for h in influence(&fr).hat {
            assert!((h - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_outlier_tops_both_measures() {
        let mut rng = crate::rng::seeded(31);
        let n = 200;
        let mut x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let mut y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            2.0 + x[(i, 1)] + 0.3 * e
        });
        x[(57, 1)] = 8.0;
        y[57] = -20.0;
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let inf = influence(&fr);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&inf.cooks_d), 57);
        assert_eq!(argmax(&inf.hat), 57);
    }

    #[test]
    fn cook_invariant_to_rescaling_y() {
        let (x, y) = random_design(100, 3, 40);
        let a = influence(&fit_wls(&design(x.clone(), y.clone(), None)).unwrap());
        let b = influence(&fit_wls(&design(x, y * 37.5, None)).unwrap());
        for (p, q) in a.cooks_d.iter().zip(&b.cooks_d) {
            assert!((p - q).abs() <= 1e-10 * (1.0 + p));
        }
    }

    #[test]
    fn unit_leverage_gets_sentinel() {
        let mut x = DMatrix::from_fn(10, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        x[(3, 1)] = 1.0;
        let y = DVector::from_fn(10, |i, _| (i as f64).cos());
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let inf = influence(&fr);
        assert!(inf.cooks_d[3].is_infinite());
        assert_eq!(inf.unit_leverage_rows(), ["r3"]);
        let json = serde_json::to_string(&inf).unwrap();
        let back: Influence = serde_json::from_str(&json).unwrap();
        assert!(back.cooks_d[3].is_infinite());
    }

    #[test]
    fn orthogonal_predictors_have_unit_vif() {
        // centred, mutually orthogonal ±1 columns
        let rows = [[1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0], [1.0, -1.0, -1.0]];
        let x = DMatrix::from_fn(8, 3, |i, j| rows[i % 4][j]);
        let y = DVector::from_fn(8, |i, _| i as f64);
        let v = vif(&design(x, y, None)).unwrap();
        assert_eq!(v.len(), 2);
        for e in v {
            assert!((e.vif - 1.0).abs() < 1e-10);
        }
    }

    /// Auxiliary regression of column j on the rest, done longhand.
    fn aux_vif(x: &DMatrix<f64>, j: usize) -> f64 {
        let z = x.clone().remove_column(j);
        let t = x.column(j).into_owned();
        let b = (z.transpose() * &z).try_inverse().unwrap() * z.transpose() * &t;
        let rss = (&t - z * b).norm_squared();
        let mean = t.mean();
        let tss: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        1.0 / (1.0 - (1.0 - rss / tss))
    }

    #[test]
    fn correlated_pair_matches_closed_form() {
        // two columns with sample correlation exactly 0.9
        let mut rng = crate::rng::seeded(9);
        let n = 500;
        let mut a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let centre = |v: &mut Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= m);
        };
        centre(&mut a);
        centre(&mut b);
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let proj = dot(&a, &b) / dot(&a, &a);
        b.iter_mut().zip(&a).for_each(|(bi, ai)| *bi -= proj * ai);
        let (na, nb) = (dot(&a, &a).sqrt(), dot(&b, &b).sqrt());
        let rho: f64 = 0.9;
        let c: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(ai, bi)| rho * ai / na + (1.0 - rho * rho).sqrt() * bi / nb)
            .collect();
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => a[i],
            _ => c[i],
        });
        let y = DVector::from_fn(n, |i, _| a[i] + c[i]);
        let v = vif(&design(x.clone(), y, None)).unwrap();
        let expected = 1.0 / (1.0 - 0.81);
        for (k, e) in v.iter().enumerate() {
            assert!((e.vif - expected).abs() < 1e-6, "{}", e.vif);
            assert!((e.vif - aux_vif(&x, k + 1)).abs() < 1e-6);
        }
    }

    #[test]
    fn collinear_columns_flagged_not_crashed() {
        let (mut x, y) = random_design(40, 4, 41);
        let c = x.column(1) * 2.0 - x.column(2);
        x.set_column(3, &c);
        let v = vif(&design(x, y, None)).unwrap();
        assert!(v.iter().all(|e| e.collinear && e.vif.is_infinite()));
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("null"));
    }

    #[test]
    fn vif_requires_intercept() {
        let (x, y) = random_design(40, 3, 42);
        let x = x.remove_column(0);
        assert!(matches!(vif(&design(x, y, None)), Err(DiagnosticsError::NoIntercept)));
    }

    #[test]
    fn bp_degenerate_and_classical() {
        let x = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(20, |i, _| 1.0 + 2.0 * i as f64);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        for s in [true, false] {
            let bp = breusch_pagan(&fr, s);
            assert_eq!((bp.stat, bp.p_value), (0.0, 1.0));
        }

        // classical form equals the Koenker form scaled by n·Var(e²)/(2σ̂⁴)
        let (x, y) = random_design(200, 3, 43);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let k = breusch_pagan(&fr, true);
        let c = breusch_pagan(&fr, false);
        let u: Vec<f64> = fr.residuals.iter().map(|r| r * r).collect();
        let m = u.iter().sum::<f64>() / 200.0;
        let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0;
        assert!((c.stat - k.stat * var / (2.0 * m * m)).abs() < 1e-9 * c.stat);
        assert_eq!(k.df, 2);
    }

    #[test]
    fn exclusion_rules() {
        let (x, y) = random_design(100, 3, 44);
        let fr = fit_wls(&design(x, y, None)).unwrap();
        let rs = RecordSet::new(
            (0..100)
                .map(|i| crate::dataset::tests::record(&format!("r{i}"), 100))
                .collect(),
        );
        let (kept, flagged) = exclude_influential(&rs, &fr, f64::INFINITY, f64::INFINITY).unwrap();
        assert_eq!(kept.len(), 100);
        assert!(flagged.is_empty());
        assert!(matches!(
            exclude_influential(&rs, &fr, 1e-300, 1e-300),
            Err(DiagnosticsError::AllExcluded(100))
        ));
        assert!(exclude_influential(&rs, &fr, 0.0, 0.01).is_err());
        let (kept, flagged) = exclude_influential(&rs, &fr, 0.02, 0.05).unwrap();
        assert_eq!(kept.len() + flagged.len(), 100);
        let inf = influence(&fr);
        for f in &flagged {
            let i: usize = f.row_id[1..].parse().unwrap();
            let expect = match (inf.cooks_d[i] > 0.02, inf.hat[i] > 0.05) {
                (true, true) => FlagReason::Both,
                (true, false) => FlagReason::Cook,
                _ => FlagReason::Hat,
            };
            assert_eq!(f.reason, expect);
        }
    }

    #[test]
    fn size_scaled_thresholds() {
        assert_eq!(InfluenceThresholds::SizeScaled.resolve(400, 5), (0.01, 0.025));
        assert_eq!(InfluenceThresholds::default().resolve(400, 5), (0.02, 0.01));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn vif_affine_invariant(seed in 0u64..500, a in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0], b in -100.0f64..100.0, col in 1usize..4) {
                let (x, y) = random_design(80, 4, seed);
                let base = vif(&design(x.clone(), y.clone(), None)).unwrap();
                let mut x2 = x;
                let c = x2.column(col).map(|v| a * v + b);
                x2.set_column(col, &c);
                let moved = vif(&design(x2, y, None)).unwrap();
                for (p, q) in base.iter().zip(&moved) {
                    prop_assert!(p.vif >= 1.0);
                    prop_assert!((p.vif - q.vif).abs() <= 1e-8 * p.vif);
                }
            }

            #[test]
            fn hat_trace_is_p(seed in 0u64..500, p in 2usize..6) {
                let (x, y) = random_design(60, p, seed);
                let fr = fit_wls(&design(x, y, None)).unwrap();
                let inf = influence(&fr);
                let trace: f64 = inf.hat.iter().sum();
                prop_assert!((trace - p as f64).abs() < 1e-8);
                prop_assert!(inf.cooks_d.iter().all(|d| *d >= 0.0));
                let bp = breusch_pagan(&fr, true);
                prop_assert!((0.0..=1.0).contains(&bp.p_value));
            }
        }
    }
}
