//! Canonical CSV reports and human-readable summaries.
//!
//! The CSV emitters are deterministic: fixed column order, fixed six-decimal
//! float formatting, `\n` line endings, absent values as empty fields.
//! Identical run histories therefore serialize to byte-identical files,
//! which is what the reproducibility checks compare.

use super::checkpoint::RunDir;
use super::HarnessError;
use crate::looprunner::MetricsReport;
use crate::registry::CategoryRegistry;

pub const METRICS_HEADER: &str = "stage,eval_set,ap,ap50,images,ground_truth,detections,\
udo_images,moa_images,support_images,pseudo_mean_iou,pseudo_precision,pseudo_recall,\
fine_tune_epochs,config_hash";

pub const PER_CATEGORY_HEADER: &str = "stage,eval_set,category,ap,ap50";

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// The per-stage summary: one row per (stage, evaluation set).
pub fn metrics_csv(history: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in history {
        for (set_name, eval) in [("sparse", &row.sparse), ("dense", &row.dense)] {
            let (ap, ap50) = match &eval.overall {
                Some(s) => (fmt(s.ap), fmt(s.ap50)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.stage,
                set_name,
                ap,
                ap50,
                eval.images,
                eval.ground_truth,
                eval.detections,
                row.udo_images,
                row.moa_images,
                row.support_images,
                fmt_opt(row.pseudo.mean_iou),
                fmt_opt(row.pseudo.precision),
                fmt(row.pseudo.recall),
                row.fine_tune_epochs,
                row.config_hash,
            ));
        }
    }
    out
}

/// Per-category AP rows, named through the registry.
pub fn per_category_csv(history: &[MetricsReport], registry: &CategoryRegistry) -> String {
    let mut out = String::from(PER_CATEGORY_HEADER);
    out.push('\n');
    for row in history {
        for (set_name, eval) in [("sparse", &row.sparse), ("dense", &row.dense)] {
            for (&category, scores) in &eval.per_category {
                let name = registry
                    .def(category)
                    .map(|def| def.name.clone())
                    .unwrap_or_else(|_| category.to_string());
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.stage,
                    set_name,
                    name,
                    fmt(scores.ap),
                    fmt(scores.ap50),
                ));
            }
        }
    }
    out
}

/// Rewrites both canonical CSVs at the run root.
pub fn write_reports(
    dir: &RunDir,
    history: &[MetricsReport],
    registry: &CategoryRegistry,
) -> Result<(), HarnessError> {
    let metrics_path = dir.root().join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(history))
        .map_err(HarnessError::io(metrics_path))?;
    let per_cat_path = dir.root().join("per_category.csv");
    std::fs::write(&per_cat_path, per_category_csv(history, registry))
        .map_err(HarnessError::io(per_cat_path))
}

/// Renders rows as a space-aligned table. The first row is the header.
fn align(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<width$}", width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn short(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

/// Human-readable per-stage summary for `report`.
pub fn summary_table(history: &[MetricsReport]) -> String {
    let mut rows = vec![vec![
        "stage".to_string(),
        "sparse_ap".into(),
        "sparse_ap50".into(),
        "dense_ap".into(),
        "dense_ap50".into(),
        "pseudo_iou".into(),
        "udo".into(),
        "moa".into(),
        "epochs".into(),
    ]];
    for row in history {
        rows.push(vec![
            row.stage.to_string(),
            short(row.sparse.overall.as_ref().map(|s| s.ap)),
            short(row.sparse.overall.as_ref().map(|s| s.ap50)),
            short(row.dense.overall.as_ref().map(|s| s.ap)),
            short(row.dense.overall.as_ref().map(|s| s.ap50)),
            short(row.pseudo.mean_iou),
            row.udo_images.to_string(),
            row.moa_images.to_string(),
            row.fine_tune_epochs.to_string(),
        ]);
    }
    align(&rows)
}

/// One-line statement of how pseudo-label quality moved over the run.
pub fn pseudo_trend_line(history: &[MetricsReport]) -> String {
    let series: Vec<(u32, f64)> = history
        .iter()
        .filter_map(|row| row.pseudo.mean_iou.map(|iou| (row.stage, iou)))
        .collect();
    match (series.first(), series.last()) {
        (Some(&(s0, first)), Some(&(s1, last))) if s0 != s1 => format!(
            "pseudo-label mean IoU: {first:.3} (stage {s0}) -> {last:.3} (stage {s1}), {}",
            if last > first { "improving" } else { "not improving" }
        ),
        (Some(&(s0, first)), _) => {
            format!("pseudo-label mean IoU: {first:.3} (stage {s0} only)")
        }
        _ => "pseudo-label mean IoU: no measurements".into(),
    }
}

/// Side-by-side dense-set AP for several arms of one experiment.
///
/// Every history must carry the same configuration hash; mixing runs from
/// different configurations is refused rather than silently compared.
pub fn ablation_table(arms: &[(String, &[MetricsReport])]) -> Result<String, HarnessError> {
    let mut hash: Option<&str> = None;
    for (name, history) in arms {
        for row in *history {
            match hash {
                None => hash = Some(&row.config_hash),
                Some(h) if h != row.config_hash => {
                    return Err(HarnessError::Artifact(format!(
                        "refusing to compare arm {name:?}: configuration hash {} \
                         does not match {h}",
                        row.config_hash
                    )));
                }
                Some(_) => {}
            }
        }
    }
    let mut stages: Vec<u32> = arms
        .iter()
        .flat_map(|(_, history)| history.iter().map(|row| row.stage))
        .collect();
    stages.sort_unstable();
    stages.dedup();

    let mut rows = Vec::new();
    let mut header = vec!["stage".to_string()];
    header.extend(arms.iter().map(|(name, _)| name.clone()));
    rows.push(header);
    for stage in stages {
        let mut row = vec![stage.to_string()];
        for (_, history) in arms {
            let cell = history
                .iter()
                .find(|r| r.stage == stage)
                .and_then(|r| r.dense.overall.as_ref())
                .map(|s| s.ap);
            row.push(short(cell));
        }
        rows.push(row);
    }
    let mut out = String::from("overall AP on the dense evaluation set\n");
    out.push_str(&align(&rows));
    Ok(out)
}
