//! Metric suite, drop-rate sweeps, retention-mode tables, integrity
//! scatter diagnostics, and case filtering, plus the CSV/SVG builders the
//! command line writes out. All report builders return strings so their
//! bytes are a pure function of the inputs.

use serde::Serialize;

use crate::data::{assemble_batch, features_to_tensor, Dataset};
use crate::error::{IfusionError, Result};
use crate::missingness::{apply_missingness, mode_plan, sample_missing_plan, MissingPlan};
use crate::model::ModelState;
use crate::rng::CounterRng;
use crate::{Modality, PerModality};

/// Clamp to [-3, 3] and round half away from zero: the 7-class bin.
pub fn bin_seven(value: f64) -> i64 {
    value.clamp(-3.0, 3.0).round() as i64
}

/// Clamp to [-2, 2] and round half away from zero: the 5-class bin.
pub fn bin_five(value: f64) -> i64 {
    value.clamp(-2.0, 2.0).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub acc7: f64,
    pub acc5: f64,
    /// Binary accuracy on the label-nonzero subset; absent when the
    /// subset is empty.
    pub acc2_nonzero: Option<f64>,
    /// F1 on the same subset (positive-class by default, weighted-binary
    /// behind the config flag); absent when the subset is empty.
    pub f1_nonzero: Option<f64>,
}

fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn compute_metrics(
    predictions: &[f64],
    labels: &[f64],
    weighted_f1: bool,
) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(IfusionError::Data(format!(
            "{} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(IfusionError::Data("no samples to score".into()));
    }
    if let Some(i) = predictions
        .iter()
        .chain(labels)
        .position(|v| !v.is_finite())
    {
        return Err(IfusionError::Data(format!(
            "non-finite value at flattened position {i} in metric inputs"
        )));
    }
    let n = predictions.len();
    let mut abs_err = 0.0;
    let mut hit7 = 0;
    let mut hit5 = 0;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let mut nonzero = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        abs_err += (p - y).abs();
        if bin_seven(p) == bin_seven(y) {
            hit7 += 1;
        }
        if bin_five(p) == bin_five(y) {
            hit5 += 1;
        }
        if y != 0.0 {
            nonzero += 1;
            match (p > 0.0, y > 0.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let (acc2_nonzero, f1_nonzero) = if nonzero == 0 {
        (None, None)
    } else {
        let acc = (tp + tn) as f64 / nonzero as f64;
        let f1 = if weighted_f1 {
            let pos_support = tp + fn_;
            let neg_support = fp + tn;
            let f1_pos = binary_f1(tp, fp, fn_);
            let f1_neg = binary_f1(tn, fn_, fp);
            (f1_pos * pos_support as f64 + f1_neg * neg_support as f64) / nonzero as f64
        } else {
            binary_f1(tp, fp, fn_)
        };
        (Some(acc), Some(f1))
    };
    Ok(MetricReport {
        mae: abs_err / n as f64,
        acc7: hit7 as f64 / n as f64,
        acc5: hit5 as f64 / n as f64,
        acc2_nonzero,
        f1_nonzero,
    })
}

/// Two-variable ordinary least squares of y on x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    /// Absent when the regressor or the response is constant.
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn ols_fit(x: &[f64], y: &[f64]) -> Option<OlsFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mean_x = x.iter().sum::<f64>() / n as f64;
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mean_x) * (a - mean_x);
        sxy += (a - mean_x) * (b - mean_y);
        syy += (b - mean_y) * (b - mean_y);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 {
        None
    } else {
        let mut ss_res = 0.0;
        for (&a, &b) in x.iter().zip(y) {
            let e = b - (intercept + slope * a);
            ss_res += e * e;
        }
        Some(1.0 - ss_res / syy)
    };
    Some(OlsFit {
        slope,
        intercept,
        r2,
        n,
    })
}

/// Sample positions where our prediction stays within `own_tol` of the
/// label while the baseline misses by more than `base_tol`.
pub fn case_filter(
    ours: &[f64],
    baseline: &[f64],
    labels: &[f64],
    own_tol: f64,
    base_tol: f64,
) -> Vec<usize> {
    ours.iter()
        .zip(baseline)
        .zip(labels)
        .enumerate()
        .filter(|(_, ((o, b), y))| (*o - *y).abs() < own_tol && (*b - *y).abs() > base_tol)
        .map(|(i, _)| i)
        .collect()
}

/// Model outputs over a whole split under one missingness plan.
pub struct SplitEvaluation {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub predictions: Vec<f64>,
    pub integrity_true: PerModality<Vec<f64>>,
    /// Raw estimator outputs, unclamped.
    pub integrity_predicted: PerModality<Vec<f64>>,
}

pub fn predict_dataset(
    model: &ModelState,
    dataset: &Dataset,
    plan: &MissingPlan,
    batch_size: usize,
    unknown_vector: Option<&[f32]>,
    force_full_integrity: bool,
) -> Result<SplitEvaluation> {
    let n = dataset.samples.len();
    if plan.len() != n {
        return Err(IfusionError::Data(format!(
            "plan covers {} samples, dataset has {n}",
            plan.len()
        )));
    }
    let mut out = SplitEvaluation {
        ids: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        predictions: Vec::with_capacity(n),
        integrity_true: PerModality::from_fn(|_| Vec::with_capacity(n)),
        integrity_predicted: PerModality::from_fn(|_| Vec::with_capacity(n)),
    };
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = assemble_batch(dataset, chunk);
        let corrupted = apply_missingness(&batch, plan, unknown_vector)?;
        let features = PerModality::from_fn(|m| {
            features_to_tensor(corrupted.features.get(m), batch.len(), *batch.dims.get(m))
        });
        let inferred = model.infer_batch(&features, force_full_integrity);
        out.ids.extend(batch.ids);
        out.labels.extend(batch.labels);
        out.predictions.extend(inferred.y_hat);
        for m in Modality::ALL {
            out.integrity_true
                .get_mut(m)
                .extend(corrupted.integrity.get(m).iter().copied());
            out.integrity_predicted
                .get_mut(m)
                .extend(inferred.integrity_raw.get(m).iter().copied());
        }
    }
    Ok(out)
}

pub const SWEEP_RATES: usize = 11;

pub struct SweepRow {
    pub drop_rate: f64,
    pub metrics: MetricReport,
}

/// Evaluate at drop rates 0.0 through 1.0 in steps of 0.1, each with a
/// rate-derived plan seed.
#[allow(clippy::too_many_arguments)]
pub fn sweep_drop_rates(
    model: &ModelState,
    dataset: &Dataset,
    intra: crate::missingness::IntraMode,
    seed: u64,
    batch_size: usize,
    unknown_vector: Option<&[f32]>,
    weighted_f1: bool,
    force_full_integrity: bool,
) -> Result<Vec<SweepRow>> {
    let steps = dataset.dims.map(|d| d.steps);
    let mut rows = Vec::with_capacity(SWEEP_RATES);
    for k in 0..SWEEP_RATES {
        let rate = k as f64 / 10.0;
        let plan_seed = CounterRng::new(seed)
            .derive_named("sweep-plan")
            .derive(k as u64)
            .next_u64();
        let plan = sample_missing_plan(dataset.samples.len(), steps, rate, intra, plan_seed)?;
        let eval = predict_dataset(
            model,
            dataset,
            &plan,
            batch_size,
            unknown_vector,
            force_full_integrity,
        )?;
        let metrics = compute_metrics(&eval.predictions, &eval.labels, weighted_f1)?;
        rows.push(SweepRow {
            drop_rate: rate,
            metrics,
        });
    }
    Ok(rows)
}

pub struct ModeRow {
    pub mode: usize,
    pub retained: String,
    pub metrics: MetricReport,
}

/// Evaluate the six fixed modality-retention patterns.
pub fn mode_evaluation(
    model: &ModelState,
    dataset: &Dataset,
    batch_size: usize,
    unknown_vector: Option<&[f32]>,
    weighted_f1: bool,
) -> Result<Vec<ModeRow>> {
    let steps = dataset.dims.map(|d| d.steps);
    let mut rows = Vec::with_capacity(6);
    for mode in 0..6 {
        let plan = mode_plan(mode, dataset.samples.len(), steps)?;
        let retained: Vec<&str> = Modality::ALL
            .iter()
            .filter(|&&m| !plan.samples[0].inter_drop.get(m))
            .map(|m| m.short_name())
            .collect();
        let eval = predict_dataset(model, dataset, &plan, batch_size, unknown_vector, false)?;
        let metrics = compute_metrics(&eval.predictions, &eval.labels, weighted_f1)?;
        rows.push(ModeRow {
            mode,
            retained: retained.join("+"),
            metrics,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("mae,acc7,acc5,acc2_nonzero,f1_nonzero\n");
    out.push_str(&format!(
        "{},{},{},{},{}\n",
        report.mae,
        report.acc7,
        report.acc5,
        fmt_opt(report.acc2_nonzero),
        fmt_opt(report.f1_nonzero),
    ));
    out
}

pub fn predictions_csv(eval: &SplitEvaluation) -> String {
    let mut out = String::from("id,label,prediction\n");
    for ((id, y), p) in eval.ids.iter().zip(&eval.labels).zip(&eval.predictions) {
        out.push_str(&format!("{id},{y},{p}\n"));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("drop_rate,mae,acc7,acc5,acc2_nonzero,f1_nonzero\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.drop_rate,
            row.metrics.mae,
            row.metrics.acc7,
            row.metrics.acc5,
            fmt_opt(row.metrics.acc2_nonzero),
            fmt_opt(row.metrics.f1_nonzero),
        ));
    }
    out
}

pub fn modes_csv(rows: &[ModeRow]) -> String {
    let mut out = String::from("mode,retained,mae,acc7,acc5,acc2_nonzero,f1_nonzero\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.mode,
            row.retained,
            row.metrics.mae,
            row.metrics.acc7,
            row.metrics.acc5,
            fmt_opt(row.metrics.acc2_nonzero),
            fmt_opt(row.metrics.f1_nonzero),
        ));
    }
    out
}

pub fn scatter_csv(eval: &SplitEvaluation, m: Modality) -> String {
    let mut out = String::from("id,true_integrity,predicted_integrity\n");
    let truth = eval.integrity_true.get(m);
    let pred = eval.integrity_predicted.get(m);
    for ((id, t), p) in eval.ids.iter().zip(truth).zip(pred) {
        out.push_str(&format!("{id},{t},{p}\n"));
    }
    out
}

pub fn scatter_stats_csv(fits: &PerModality<Option<OlsFit>>) -> String {
    let mut out = String::from("modality,slope,intercept,r2,n\n");
    for (m, fit) in fits.iter() {
        match fit {
            Some(f) => out.push_str(&format!(
                "{m},{},{},{},{}\n",
                f.slope,
                f.intercept,
                fmt_opt(f.r2),
                f.n
            )),
            None => out.push_str(&format!("{m},NA,NA,NA,0\n")),
        }
    }
    out
}

pub fn cases_csv(
    ids: &[String],
    labels: &[f64],
    ours: &[f64],
    baseline: &[f64],
    selected: &[usize],
) -> String {
    let mut out = String::from("id,label,ours,baseline\n");
    for &i in selected {
        out.push_str(&format!(
            "{},{},{},{}\n",
            ids[i], labels[i], ours[i], baseline[i]
        ));
    }
    out
}

/// Minimal standalone line plot. Points with a non-finite y are skipped;
/// bytes depend only on the inputs.
pub fn line_plot_svg(title: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(_, y)| y.is_finite())
        .collect();
    let (x_min, x_max) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
            (lo.min(*x), hi.max(*x))
        });
    let (y_min, y_max) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| {
            (lo.min(*y), hi.max(*y))
        });
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let px = |x: f64| left + (x - x_min) / x_span * (w - left - right);
    let py = |y: f64| h - bottom - (y - y_min) / y_span * (h - top - bottom);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    for (x, _) in &finite {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{x}</text>\n",
            px(*x),
            h - bottom + 16.0
        ));
    }
    for k in 0..=4 {
        let y = y_min + y_span * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{y:.3}</text>\n",
            left - 6.0,
            py(y) + 3.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{y_label}</text>\n",
        h / 2.0,
        h / 2.0
    ));
    let path: Vec<String> = finite
        .iter()
        .map(|(x, y)| format!("{},{}", px(*x), py(*y)))
        .collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
        path.join(" ")
    ));
    for (x, y) in &finite {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"steelblue\"/>\n",
            px(*x),
            py(*y)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
