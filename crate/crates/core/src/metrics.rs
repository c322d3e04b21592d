//! Selective generation metrics: accuracy, Calibration-AUC, the selective
//! generation curve and Selective-AUC.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::LabelStore;
use crate::types::{CurvePoint, Method, MetricsReport, ResultRecord};

/// A selected answer's confidence score together with its correctness.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSelection {
    pub question_id: String,
    pub method: Method,
    pub score: f64,
    pub correct: bool,
}

fn check_scores(selections: &[LabeledSelection]) -> Result<()> {
    match selections.iter().find(|s| s.score.is_nan()) {
        Some(s) => Err(Error::NonFinite(format!("NaN score for {}", s.question_id))),
        None => Ok(()),
    }
}

/// Equal scores compare equal (`-0.0 == 0.0`); otherwise numeric order with
/// `-inf` lowest.
fn cmp_scores(a: f64, b: f64) -> Ordering {
    if a == b {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

fn fraction_correct<'a>(items: impl Iterator<Item = &'a LabeledSelection>) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for s in items {
        total += 1;
        hits += usize::from(s.correct);
    }
    hits as f64 / total as f64
}

pub fn accuracy(selections: &[LabeledSelection]) -> Result<f64> {
    if selections.is_empty() {
        return Err(Error::EmptyInput("selections"));
    }
    Ok(fraction_correct(selections.iter()))
}

/// ROC AUC of score against correctness via the Mann-Whitney rank sum, with
/// tied scores sharing their mid-rank (each tied pair counts one half).
pub fn calibration_auc(selections: &[LabeledSelection]) -> Result<f64> {
    check_scores(selections)?;
    let positives = selections.iter().filter(|s| s.correct).count();
    let negatives = selections.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<&LabeledSelection> = selections.iter().collect();
    order.sort_by(|a, b| cmp_scores(a.score, b.score));

    // ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && order[j].score == order[i].score {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let group_positives = order[i..j].iter().filter(|s| s.correct).count();
        positive_rank_sum += mid_rank * group_positives as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let u = positive_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Remaining accuracy after abstaining on the `k` lowest-scored selections,
/// for `k = 0..m`. Equal scores are ordered by question id.
pub fn selective_curve(selections: &[LabeledSelection]) -> Result<Vec<CurvePoint>> {
    if selections.is_empty() {
        return Err(Error::EmptyInput("selections"));
    }
    check_scores(selections)?;
    let mut order: Vec<&LabeledSelection> = selections.iter().collect();
    order.sort_by(|a, b| cmp_scores(a.score, b.score).then_with(|| a.question_id.cmp(&b.question_id)));
    let m = order.len();
    Ok((0..m)
        .map(|k| CurvePoint {
            abstention_rate: k as f64 / m as f64,
            accuracy: fraction_correct(order[k..].iter().copied()),
        })
        .collect())
}

/// Rectangle-rule area under the curve over abstention rates `[0, 1)`.
pub fn selective_auc(curve: &[CurvePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::EmptyInput("curve"));
    }
    Ok(curve.iter().map(|p| p.accuracy).sum::<f64>() / curve.len() as f64)
}

/// Attaches correctness to each result via (id, normalized selected text).
pub fn join_labels(results: &[ResultRecord], labels: &LabelStore) -> Result<Vec<LabeledSelection>> {
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        if !seen.insert((r.id.as_str(), r.method)) {
            return Err(Error::DuplicateResult {
                id: r.id.clone(),
                method: r.method.to_string(),
            });
        }
        match labels.get(&r.id, &r.selected_text) {
            Some(correct) => out.push(LabeledSelection {
                question_id: r.id.clone(),
                method: r.method,
                score: r.score.0,
                correct,
            }),
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::MissingLabels(missing));
    }
    Ok(out)
}

/// One report per method present, in method order. Calibration-AUC is `None`
/// for a method whose selections are all correct or all wrong.
pub fn compute_reports(selections: &[LabeledSelection]) -> Result<Vec<MetricsReport>> {
    if selections.is_empty() {
        return Err(Error::EmptyInput("selections"));
    }
    let mut by_method: BTreeMap<Method, Vec<LabeledSelection>> = BTreeMap::new();
    for s in selections {
        by_method.entry(s.method).or_default().push(s.clone());
    }
    by_method
        .into_iter()
        .map(|(method, items)| {
            let curve = selective_curve(&items)?;
            let calibration_auc = match calibration_auc(&items) {
                Ok(v) => Some(v),
                Err(Error::AucUndefined) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricsReport {
                method,
                accuracy: accuracy(&items)?,
                calibration_auc,
                selective_auc: selective_auc(&curve)?,
                curve,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ReportEntry {
    accuracy: f64,
    calibration_auc: Option<f64>,
    selective_auc: f64,
}

/// `{method: {accuracy, calibration_auc, selective_auc}}` as pretty JSON.
pub fn report_json(reports: &[MetricsReport]) -> String {
    let map: BTreeMap<&str, ReportEntry> = reports
        .iter()
        .map(|r| {
            (
                r.method.as_str(),
                ReportEntry {
                    accuracy: r.accuracy,
                    calibration_auc: r.calibration_auc,
                    selective_auc: r.selective_auc,
                },
            )
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&map).expect("report serializes");
    text.push('\n');
    text
}

fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Summary table in percent, one row per method.
pub fn summary_csv(reports: &[MetricsReport]) -> String {
    summary_csv_with_rows(reports.iter().map(|r| (r.method.display_name().to_string(), r)))
}

pub fn summary_csv_with_rows<'a>(rows: impl Iterator<Item = (String, &'a MetricsReport)>) -> String {
    let mut out = String::from("Method,Accuracy,Calibration-AUC,Selective-AUC\n");
    for (name, r) in rows {
        let name = if name.contains([',', '"']) {
            format!("\"{}\"", name.replace('"', "\"\""))
        } else {
            name
        };
        let auc = r.calibration_auc.map(percent).unwrap_or_else(|| "NA".into());
        writeln!(out, "{name},{},{auc},{}", percent(r.accuracy), percent(r.selective_auc)).unwrap();
    }
    out
}

/// `alpha<TAB>accuracy` lines with a header row.
pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("alpha\taccuracy\n");
    for p in curve {
        writeln!(out, "{}\t{}", p.abstention_rate, p.accuracy).unwrap();
    }
    out
}

/// Writes `metrics.json`, `summary.csv` and `curve_<method>.tsv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), report_json(reports))?;
    std::fs::write(dir.join("summary.csv"), summary_csv(reports))?;
    for r in reports {
        std::fs::write(dir.join(format!("curve_{}.tsv", r.method)), curve_tsv(&r.curve))?;
    }
    Ok(())
}
