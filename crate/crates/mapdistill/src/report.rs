//! CSV tables: per-epoch losses, evaluation results, PR curves and the
//! ablation summary. Reals use the shortest round-trip representation.

use std::fmt::Write as _;

use mapdistill_core::eval::EvalReport;
use mapdistill_core::map::ElementClass;
use mapdistill_core::train::{EpochRecord, RunRecord};

pub const METRICS_HEADER: &str = "epoch,l_map,l_relation,l_low,l_high,l_feature,l_cls,l_point,l_head,total,lr";

pub fn metrics_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in epochs {
        let l = &e.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch, l.l_map, l.l_relation, l.l_low, l.l_high, l.l_feature, l.l_cls, l.l_point, l.l_head, l.total, e.lr
        );
    }
    out
}

/// One row per class and threshold, then one mean row per class and the
/// overall mAP.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("class,tau,ap\n");
    for class in ElementClass::ALL {
        for (t, tau) in report.thresholds.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", class.name(), tau, report.per_class_per_tau[class.id()][t]);
        }
    }
    for class in ElementClass::ALL {
        let _ = writeln!(out, "{},mean,{}", class.name(), report.per_class[class.id()]);
    }
    let _ = writeln!(out, "all,mean,{}", report.map);
    out
}

/// Evaluation results for every evaluation point of a run.
pub fn run_eval_csv(run: &RunRecord) -> String {
    let mut out = String::from("epoch,class,tau,ap\n");
    for e in &run.evals {
        for class in ElementClass::ALL {
            for (t, tau) in e.report.thresholds.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", e.epoch, class.name(), tau, e.report.per_class_per_tau[class.id()][t]);
            }
            let _ = writeln!(out, "{},{},mean,{}", e.epoch, class.name(), e.report.per_class[class.id()]);
        }
        let _ = writeln!(out, "{},all,mean,{}", e.epoch, e.report.map);
    }
    out
}

pub fn pr_curves_csv(report: &EvalReport) -> String {
    let mut out = String::from("class,tau,rank,recall,precision\n");
    for class in ElementClass::ALL {
        for (t, tau) in report.thresholds.iter().enumerate() {
            for (rank, (r, p)) in report.curves[class.id()][t].iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", class.name(), tau, rank + 1, r, p);
            }
        }
    }
    out
}

/// One ablation run: row name, seed and its final evaluation.
pub struct AblationEntry {
    pub row: &'static str,
    pub relation: bool,
    pub feature: bool,
    pub head: bool,
    pub seed: u64,
    pub report: EvalReport,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

/// Per-seed rows followed by the mean over seeds for each ablation row.
/// Columns follow the ablation table: AP per class, then mAP.
pub fn ablation_csv(entries: &[AblationEntry]) -> String {
    let mut out = String::from("row,relation,feature,head,seed,ap_ped,ap_div,ap_bou,map\n");
    let ap = |r: &EvalReport, c: ElementClass| r.per_class[c.id()];
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.row,
            mark(e.relation),
            mark(e.feature),
            mark(e.head),
            e.seed,
            ap(&e.report, ElementClass::PedestrianCrossing),
            ap(&e.report, ElementClass::LaneDivider),
            ap(&e.report, ElementClass::RoadBoundary),
            e.report.map
        );
    }
    let mut rows: Vec<&'static str> = Vec::new();
    for e in entries {
        if !rows.contains(&e.row) {
            rows.push(e.row);
        }
    }
    for row in rows {
        let group: Vec<&AblationEntry> = entries.iter().filter(|e| e.row == row).collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| group.iter().map(|e| f(&e.report)).sum::<f64>() / n;
        let first = group[0];
        let _ = writeln!(
            out,
            "{},{},{},{},mean,{},{},{},{}",
            row,
            mark(first.relation),
            mark(first.feature),
            mark(first.head),
            mean(&|r| ap(r, ElementClass::PedestrianCrossing)),
            mean(&|r| ap(r, ElementClass::LaneDivider)),
            mean(&|r| ap(r, ElementClass::RoadBoundary)),
            mean(&|r| r.map)
        );
    }
    out
}
