use std::fs;
use std::path::Path;

use super::MetricsReport;
use crate::corpus::{EvalSplit, InteractionDataset};
use crate::error::{CocoError, Result};
use crate::trainer::CocoModel;

pub const METRICS_CSV_HEADER: [&str; 6] = ["run_id", "epoch", "split", "metric", "K", "value"];

fn csv_err(e: csv::Error) -> CocoError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CocoError::Io(io),
        other => CocoError::Model(format!("csv: {other:?}")),
    }
}

/// Long-format metrics: per-epoch training and validation rows from each
/// report's history, then the report's own split. Metrics with no cutoff
/// leave `K` empty.
pub fn write_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        let mut row = |epoch: usize, split: &str, metric: &str, k: Option<usize>, v: f64| {
            w.write_record([
                r.run_id.clone(),
                epoch.to_string(),
                split.to_string(),
                metric.to_string(),
                k.map(|k| k.to_string()).unwrap_or_default(),
                v.to_string(),
            ])
        };
        for e in &r.history {
            for (name, v) in [
                ("l_r", e.loss.l_r),
                ("l_aux", e.loss.l_aux),
                ("l_ortho", e.loss.l_ortho),
                ("l_q", e.loss.l_q),
                ("l_total", e.loss.total),
            ] {
                row(e.epoch, "train", name, None, v).map_err(csv_err)?;
            }
            for (name, v) in [("m_fraction", e.m_fraction), ("mean_m", e.mean_m)] {
                if let Some(v) = v {
                    row(e.epoch, "train", name, None, v).map_err(csv_err)?;
                }
            }
            for (&k, &v) in &e.valid_recall {
                row(e.epoch, "valid", "recall", Some(k), v).map_err(csv_err)?;
            }
            for (&k, &v) in &e.valid_ndcg {
                row(e.epoch, "valid", "ndcg", Some(k), v).map_err(csv_err)?;
            }
        }
        let split = r.split.to_string();
        for (&k, &v) in &r.recall {
            row(r.epoch, &split, "recall", Some(k), v).map_err(csv_err)?;
        }
        for (&k, &v) in &r.ndcg {
            row(r.epoch, &split, "ndcg", Some(k), v).map_err(csv_err)?;
        }
        for (name, v) in [("m_fraction", r.m_fraction), ("mean_m", r.mean_m)] {
            if let Some(v) = v {
                row(r.epoch, &split, name, None, v).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(reports: &[MetricsReport], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<Vec<MetricsReport>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `m,count` rows, one per bin `m = 0..=K`.
pub fn export_m_histogram(report: &MetricsReport, path: &Path) -> Result<()> {
    let hist = report
        .m_hist
        .as_ref()
        .ok_or_else(|| CocoError::Model(format!("variant `{}` has no prompt selection", report.variant)))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["m", "count"]).map_err(csv_err)?;
    for (m, c) in hist.iter().enumerate() {
        w.write_record([m.to_string(), c.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `kind,row_id,dim0..` rows: `h_rs` per user (row id = user index) and
/// every `h_pure` row (row id = `user:row`), for the first `max_users`.
pub fn export_embeddings(
    model: &CocoModel,
    d: &InteractionDataset,
    split: EvalSplit,
    max_users: usize,
    path: &Path,
) -> Result<usize> {
    let n = max_users.min(d.n_users());
    let width = model.cfg.d_rs.max(if model.llm.is_some() { model.cfg.d_a } else { 0 });
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["kind".to_string(), "row_id".to_string()];
    header.extend((0..width).map(|i| format!("dim{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut written = 0;
    let users: Vec<usize> = (0..n).collect();
    for chunk in users.chunks(64) {
        let prefixes = chunk
            .iter()
            .map(|&u| d.eval_case(u, split).map(|(p, _)| p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (h_rs, pure) = model.embeddings(chunk, &prefixes)?;
        let mut emit = |kind: &str, id: String, vals: &[f64]| {
            let mut rec = vec![kind.to_string(), id];
            rec.extend(vals.iter().map(f64::to_string));
            rec.resize(width + 2, String::new());
            written += 1;
            w.write_record(&rec)
        };
        for (r, &u) in chunk.iter().enumerate() {
            emit("h_rs", u.to_string(), h_rs.row_slice(r)).map_err(csv_err)?;
        }
        for (r, &u) in chunk.iter().enumerate() {
            if let Some(p) = pure.get(r) {
                for j in 0..p.rows() {
                    emit("h_pure", format!("{u}:{j}"), p.row_slice(j)).map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(written)
}
