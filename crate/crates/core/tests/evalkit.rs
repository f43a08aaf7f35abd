mod common;

use std::collections::BTreeMap;

use coco_core::corpus::{make_batches, EvalSplit};
use coco_core::evalkit::{
    evaluate, evaluate_scores, export_embeddings, export_m_histogram, read_report_json, write_metrics_csv,
    write_report_json, EvalOptions, METRICS_CSV_HEADER,
};
use coco_core::trainer::{fit, train_step, TrainState, Variant};
use coco_core::CocoError;
use common::{tiny_config, tiny_data};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// stable sort by descending score, ties by ascending index
fn oracle_rank(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap() + 1
}

fn oracle_metrics(scores: &[Vec<f64>], targets: &[usize], ks: &[usize]) -> (BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let ranks: Vec<usize> = scores.iter().zip(targets).map(|(s, &t)| oracle_rank(s, t)).collect();
    let n = ranks.len() as f64;
    let mut r = BTreeMap::new();
    let mut nd = BTreeMap::new();
    for &k in ks {
        r.insert(k, ranks.iter().map(|&x| if x <= k { 1.0 } else { 0.0 }).sum::<f64>() / n);
        nd.insert(k, ranks.iter().map(|&x| if x <= k { 1.0 / ((x + 1) as f64).log2() } else { 0.0 }).sum::<f64>() / n);
    }
    (r, nd)
}

#[test]
fn metrics_match_the_sort_oracle_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ks = [1, 5, 10, 20];
    let (mut scores, mut targets) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        // coarse values force plenty of ties
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        targets.push(rng.random_range(0..n));
        scores.push(row);
    }
    assert_eq!(evaluate_scores(&scores, &targets, &ks).unwrap(), oracle_metrics(&scores, &targets, &ks));
}

#[test]
fn spot_values() {
    let s = vec![vec![3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0]];
    let (_, n) = evaluate_scores(&s, &[2], &[5]).unwrap();
    assert_eq!(n[&5], 0.5);
    let (r, _) = evaluate_scores(&s, &[5], &[5]).unwrap();
    assert_eq!(r[&5], 0.0);
}

proptest! {
    #[test]
    fn rank_agrees_with_the_oracle(row in prop::collection::vec(-3i32..3, 1..40), t in any::<prop::sample::Index>()) {
        let scores: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let target = t.index(scores.len());
        let (r, _) = evaluate_scores(&[scores.clone()], &[target], &[scores.len()]).unwrap();
        prop_assert_eq!(r[&scores.len()], 1.0);
        prop_assert_eq!(coco_core::evalkit::rank_of(&scores, target), oracle_rank(&scores, target));
    }

    #[test]
    fn metrics_are_bounded_and_monotone_in_k(ranks in prop::collection::vec(1usize..30, 1..20)) {
        let ks = [1, 5, 10, 30];
        let (r, n) = coco_core::evalkit::mean_metrics(&ranks, &ks);
        for w in ks.windows(2) {
            prop_assert!(r[&w[0]] <= r[&w[1]]);
            prop_assert!(n[&w[0]] <= n[&w[1]]);
        }
        for k in ks {
            prop_assert!((0.0..=1.0).contains(&r[&k]));
            prop_assert!(n[&k] <= r[&k]);
        }
    }
}

fn trained(variant: Variant) -> (TrainState, coco_core::corpus::InteractionDataset) {
    let d = tiny_data(31);
    let mut s = TrainState::new(&tiny_config(variant), &d).unwrap();
    for b in make_batches(&d, 8, 6, 2).unwrap().take(5) {
        train_step(&mut s, &b).unwrap();
    }
    (s, d)
}

#[test]
fn evaluate_matches_a_naive_recomputation() {
    let (s, d) = trained(Variant::Full);
    let m = &s.model;
    let users: Vec<usize> = (0..d.n_users()).collect();
    let cases: Vec<(&[usize], usize)> = users.iter().map(|&u| d.eval_case(u, EvalSplit::Test).unwrap()).collect();
    let prefixes: Vec<&[usize]> = cases.iter().map(|c| c.0).collect();
    let targets: Vec<usize> = cases.iter().map(|c| c.1).collect();
    let rows = m.user_vectors(&users, &prefixes, None, false).unwrap();
    let table = m.registry.value(m.backbone.item_emb);
    let scores: Vec<Vec<f64>> = (0..users.len())
        .map(|r| {
            let u = rows.vectors.row_slice(r);
            (0..table.rows()).map(|i| u.iter().zip(table.row_slice(i)).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    let ks = [5, 10];
    let (r, n) = oracle_metrics(&scores, &targets, &ks);
    let rep = evaluate(m, &d, EvalSplit::Test, &EvalOptions::new(&ks)).unwrap();
    assert_eq!(rep.recall, r);
    assert_eq!(rep.ndcg, n);
    assert_eq!(rep.n_users, d.n_users());
}

#[test]
fn masking_and_thread_count_leave_metrics_bitwise_equal() {
    for v in [Variant::Full, Variant::Con, Variant::BackboneOnly] {
        let (s, d) = trained(v);
        let mut o = EvalOptions::new(&[5, 10]);
        o.threads = 1;
        let base = evaluate(&s.model, &d, EvalSplit::Valid, &o).unwrap();
        o.masking = true;
        assert_eq!(evaluate(&s.model, &d, EvalSplit::Valid, &o).unwrap(), base);
        o.threads = 3;
        assert_eq!(evaluate(&s.model, &d, EvalSplit::Valid, &o).unwrap(), base);
    }
}

#[test]
fn histogram_bins_cover_every_user() {
    let (s, d) = trained(Variant::Full);
    let rep = evaluate(&s.model, &d, EvalSplit::Test, &EvalOptions::new(&[5])).unwrap();
    let hist = rep.m_hist.clone().unwrap();
    assert_eq!(hist.len(), s.model.cfg.k + 1);
    assert_eq!(hist.iter().sum::<usize>(), d.n_users());
    let mean = hist.iter().enumerate().map(|(m, c)| m * c).sum::<usize>() as f64 / d.n_users() as f64;
    assert!((mean - rep.mean_m.unwrap()).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m_hist.csv");
    export_m_histogram(&rep, &p).unwrap();
    let mut r = csv::Reader::from_path(&p).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["m", "count"]);
    let counts: Vec<usize> = r.records().map(|x| x.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(counts, hist);

    let bb = evaluate(&trained(Variant::BackboneOnly).0.model, &d, EvalSplit::Test, &EvalOptions::new(&[5])).unwrap();
    assert!(bb.m_hist.is_none());
    assert!(export_m_histogram(&bb, &p).is_err());
}

#[test]
fn reports_round_trip_through_json_and_csv() {
    let d = tiny_data(32);
    let mut cfg = tiny_config(Variant::Full);
    cfg.epochs = 2;
    let out = fit(&d, &cfg).unwrap();
    let reports = vec![out.report.clone(), out.valid.clone()];
    let dir = tempfile::tempdir().unwrap();
    let j = dir.path().join("r.json");
    write_report_json(&reports, &j).unwrap();
    assert_eq!(read_report_json(&j).unwrap(), reports);

    let c = dir.path().join("metrics.csv");
    write_metrics_csv(&reports[..1], &c).unwrap();
    let mut r = csv::Reader::from_path(&c).unwrap();
    assert_eq!(r.headers().unwrap(), METRICS_CSV_HEADER.to_vec());
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let find = |split: &str, metric: &str, k: &str| {
        rows.iter()
            .filter(|x| &x[2] == split && &x[3] == metric && &x[4] == k)
            .map(|x| x[5].parse::<f64>().unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(find("test", "recall", "5"), vec![out.report.recall[&5]]);
    assert_eq!(find("valid", "ndcg", "10").len(), out.report.history.len());
    assert_eq!(find("train", "l_total", "").len(), out.report.history.len());
}

#[test]
fn embeddings_export_one_row_per_vector() {
    let (s, d) = trained(Variant::Full);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.csv");
    let n = export_embeddings(&s.model, &d, EvalSplit::Test, 5, &p).unwrap();
    let mut r = csv::Reader::from_path(&p).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), n);
    assert_eq!(rows.iter().filter(|x| &x[0] == "h_rs").count(), 5);
    assert!(rows.iter().any(|x| &x[0] == "h_pure"));
    assert!(rows.iter().all(|x| x.len() == 2 + s.model.cfg.d_rs.max(s.model.cfg.d_a)));
}

#[test]
fn a_foreign_catalog_is_refused() {
    let (s, _) = trained(Variant::BackboneOnly);
    let other = coco_core::corpus::synth_generate(&coco_core::corpus::SynthConfig::new(40, 25, 4, 0.9, 1)).unwrap();
    let other = coco_core::corpus::leave_one_out_split(&other).unwrap();
    match evaluate(&s.model, &other, EvalSplit::Test, &EvalOptions::new(&[5])) {
        Err(CocoError::CatalogMismatch(_)) => {}
        r => panic!("expected a catalog mismatch, got {r:?}"),
    }
}
