use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::InteractionDataset;
use crate::error::{CocoError, Result};
use crate::trainer::{fit, TrainConfig};

/// One swept config key and its values, in the given order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2;key2=w1,w2`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridAxis>> {
    let mut axes: Vec<GridAxis> = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CocoError::Config(format!("grid axis `{part}` is not `key=v1,v2`")))?;
        let key = k.trim().to_string();
        if axes.iter().any(|a| a.key == key) {
            return Err(CocoError::Config(format!("grid key `{key}` repeated")));
        }
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(CocoError::Config(format!("grid key `{key}` has no values")));
        }
        axes.push(GridAxis { key, values });
    }
    if axes.is_empty() {
        return Err(CocoError::Config("empty grid".into()));
    }
    Ok(axes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: usize,
    pub values: Vec<String>,
    /// `ok`, `failed: <reason>` or `skipped`.
    pub status: String,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub keys: Vec<String>,
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.status != "ok")
    }

    /// `point,<keys>,status,R@k..,N@k..` with one row per grid point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CocoError::Model(e.to_string()))?;
        let mut header = vec!["point".to_string()];
        header.extend(self.keys.iter().cloned());
        header.push("status".into());
        header.extend(self.ks.iter().map(|k| format!("R@{k}")));
        header.extend(self.ks.iter().map(|k| format!("N@{k}")));
        w.write_record(&header).map_err(|e| CocoError::Model(e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![r.point.to_string()];
            rec.extend(r.values.iter().cloned());
            rec.push(r.status.clone());
            let cell = |m: &BTreeMap<usize, f64>, k| m.get(k).map(f64::to_string).unwrap_or_default();
            rec.extend(self.ks.iter().map(|k| cell(&r.recall, k)));
            rec.extend(self.ks.iter().map(|k| cell(&r.ndcg, k)));
            w.write_record(&rec).map_err(|e| CocoError::Model(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn points(axes: &[GridAxis]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    out
}

/// Fits and evaluates every grid point (first axis outermost) with the
/// shared seed of `base`. A failing point stops new points from starting;
/// finished rows are kept and the rest are marked `skipped`.
pub fn sweep(d: &InteractionDataset, base: &TrainConfig, axes: &[GridAxis], parallel: usize) -> Result<SweepOutcome> {
    let pts = points(axes);
    let mut cfgs = Vec::with_capacity(pts.len());
    for p in &pts {
        let mut cfg = base.clone();
        for (a, v) in axes.iter().zip(p) {
            cfg.set(&a.key, v)?;
        }
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; pts.len()]);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let worker = || loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= cfgs.len() {
            break;
        }
        let row = match fit(d, &cfgs[i]) {
            Ok(out) => SweepRow {
                point: i,
                values: pts[i].clone(),
                status: "ok".into(),
                recall: out.report.recall,
                ndcg: out.report.ndcg,
            },
            Err(e) => {
                stop.store(true, Ordering::SeqCst);
                SweepRow {
                    point: i,
                    values: pts[i].clone(),
                    status: format!("failed: {e}"),
                    recall: BTreeMap::new(),
                    ndcg: BTreeMap::new(),
                }
            }
        };
        slots.lock().expect("sweep slots")[i] = Some(row);
    };
    let n = parallel.max(1).min(cfgs.len().max(1));
    if n == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..n {
                s.spawn(worker);
            }
        });
    }
    let rows = slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or_else(|| SweepRow {
                point: i,
                values: pts[i].clone(),
                status: "skipped".into(),
                recall: BTreeMap::new(),
                ndcg: BTreeMap::new(),
            })
        })
        .collect();
    Ok(SweepOutcome {
        keys: axes.iter().map(|a| a.key.clone()).collect(),
        ks: base.eval_ks.clone(),
        rows,
    })
}
