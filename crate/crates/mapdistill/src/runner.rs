//! Training, evaluation and ablation drivers that read and write files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mapdistill_core::config::{Phase, TrainConfig};
use mapdistill_core::eval::{mean_ap, EvalConfig, EvalReport};
use mapdistill_core::model::Pipeline;
use mapdistill_core::params::ParamSet;
use mapdistill_core::train::{
    distill_student, eval_split, teacher_targets, train_split, train_teacher, Dataset, RunRecord, TeacherTargets,
    ABLATION_ROWS,
};
use mapdistill_core::Error as CoreError;

use crate::checkpoint;
use crate::dataset::{load_dataset, load_predictions, read_text, write_text};
use crate::error::{CliError, Result};
use crate::report::{ablation_csv, eval_csv, metrics_csv, pr_curves_csv, run_eval_csv, AblationEntry};

/// Defaults, then the config file, then each `KEY=VALUE` override, then
/// the seed flag.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = read_text(p)?;
        cfg.apply_kv_text(&text).map_err(|e| match e {
            CoreError::Config(m) => CliError::Core(CoreError::Config(format!("{}: {m}", p.display()))),
            other => other.into(),
        })?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v).map_err(|e| match e {
            CoreError::Config(m) => CliError::Core(CoreError::Config(format!("--set {}: {m}", k.trim()))),
            other => other.into(),
        })?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the metrics, evaluation and PR-curve tables of one run under
/// `dir` with the given file prefix.
pub fn write_run(dir: &Path, prefix: &str, run: &RunRecord) -> Result<()> {
    write_text(&dir.join(format!("{prefix}_metrics.csv")), &metrics_csv(&run.epochs))?;
    write_text(&dir.join(format!("{prefix}_eval.csv")), &run_eval_csv(run))?;
    if let Some(r) = run.final_report() {
        write_text(&dir.join(format!("{prefix}_pr_curves.csv")), &pr_curves_csv(r))?;
    }
    Ok(())
}

/// Records the failure next to the outputs before handing it back.
fn with_diagnostics<T>(out: &Path, cfg: &TrainConfig, r: std::result::Result<T, CoreError>) -> Result<T> {
    r.map_err(|e| {
        if matches!(e, CoreError::Numeric(_)) {
            let text = format!("error = {e}\nconfig_hash = {}\n\n{}", cfg.hash(), cfg.to_kv_text());
            let _ = write_text(&out.join("diagnostics.txt"), &text);
        }
        e.into()
    })
}

pub struct TrainOutcome {
    pub teacher: Option<RunRecord>,
    pub student: Option<RunRecord>,
}

/// Runs the configured phase(s). The student phase loads the teacher from
/// `teacher_dir`, or from `out/teacher` when the teacher is trained here.
pub fn train(cfg: &TrainConfig, out: &Path, teacher_dir: Option<&Path>) -> Result<TrainOutcome> {
    let pl = Pipeline::new(cfg.pipeline.clone())?;
    let train_set = train_split(cfg)?;
    let eval_set = eval_split(cfg)?;
    write_text(&out.join("config.txt"), &cfg.to_kv_text())?;
    let mut outcome = TrainOutcome { teacher: None, student: None };

    let teacher_params: ParamSet = if cfg.phase == Phase::Student {
        let dir: PathBuf = teacher_dir.map_or_else(|| out.join("teacher"), Path::to_path_buf);
        checkpoint::load(&dir, "teacher")?
    } else {
        let start = Instant::now();
        let (params, mut run) = with_diagnostics(out, cfg, train_teacher(cfg, &pl, &train_set, &eval_set))?;
        run.wall_seconds = Some(start.elapsed().as_secs_f64());
        checkpoint::save(&out.join("teacher"), "teacher", &cfg.hash(), &params)?;
        write_run(out, "teacher", &run)?;
        outcome.teacher = Some(run);
        params
    };

    if cfg.phase != Phase::Teacher {
        let start = Instant::now();
        let (params, mut run) =
            with_diagnostics(out, cfg, distill_student(cfg, &pl, &teacher_params, None, &train_set, &eval_set))?;
        run.wall_seconds = Some(start.elapsed().as_secs_f64());
        checkpoint::save(&out.join("student"), "student", &cfg.hash(), &params)?;
        write_run(out, "student", &run)?;
        outcome.student = Some(run);
    }
    Ok(outcome)
}

/// Evaluates a prediction file against a ground-truth file.
pub fn eval_files(preds: &Path, gts: &Path, out: &Path) -> Result<EvalReport> {
    let p = load_predictions(preds)?;
    let g = load_dataset(gts)?;
    let report = mean_ap(&p, &g, &EvalConfig::default())?;
    write_text(&out.join("eval.csv"), &eval_csv(&report))?;
    write_text(&out.join("pr_curves.csv"), &pr_curves_csv(&report))?;
    Ok(report)
}

/// Final evaluation of one ablation row on one seed.
pub struct AblationRun {
    pub row: usize,
    pub seed: u64,
    pub teacher_map: f64,
    pub record: RunRecord,
}

/// Trains one teacher for `seed` and distils every ablation row against it.
/// Rows run on separate threads; each row's result is independent of the
/// others and of scheduling.
pub fn ablate_seed(base: &TrainConfig, seed: u64) -> Result<(RunRecord, Vec<AblationRun>)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let pl = Pipeline::new(cfg.pipeline.clone())?;
    let train_set: Dataset = train_split(&cfg)?;
    let eval_set = eval_split(&cfg)?;
    let (teacher, teacher_run) = train_teacher(&cfg, &pl, &train_set, &eval_set)?;
    let cache: Vec<TeacherTargets> = teacher_targets(&pl, &teacher, &train_set, &cfg)?;
    let teacher_map = teacher_run.final_map();

    let results: Vec<std::result::Result<RunRecord, CoreError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ABLATION_ROWS
            .iter()
            .map(|row| {
                let row_cfg = row.apply(&cfg);
                let (pl, teacher, cache, train_set, eval_set) = (&pl, &teacher, &cache, &train_set, &eval_set);
                s.spawn(move || {
                    distill_student(&row_cfg, pl, teacher, Some(cache), train_set, eval_set).map(|(_, run)| run)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        runs.push(AblationRun { row: i, seed, teacher_map, record: r? });
    }
    Ok((teacher_run, runs))
}

pub struct AblationSummary {
    pub entries: Vec<AblationEntry>,
    pub teacher_maps: Vec<(u64, f64)>,
}

impl AblationSummary {
    /// Mean final mAP of each row over the seeds, in row order.
    pub fn row_means(&self) -> Vec<(&'static str, f64)> {
        ABLATION_ROWS
            .iter()
            .map(|row| {
                let maps: Vec<f64> = self.entries.iter().filter(|e| e.row == row.name).map(|e| e.report.map).collect();
                (row.name, maps.iter().sum::<f64>() / maps.len().max(1) as f64)
            })
            .collect()
    }

    pub fn teacher_mean(&self) -> f64 {
        self.teacher_maps.iter().map(|t| t.1).sum::<f64>() / self.teacher_maps.len().max(1) as f64
    }
}

/// The full ablation over `seeds`. When `out` is given, writes the table
/// and a teacher summary there.
pub fn ablate(base: &TrainConfig, seeds: &[u64], out: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<AblationSummary> {
    let mut summary = AblationSummary { entries: Vec::new(), teacher_maps: Vec::new() };
    for &seed in seeds {
        let (teacher_run, runs) = ablate_seed(base, seed)?;
        progress(&format!("seed {seed}: teacher mAP {:.4}", teacher_run.final_map()));
        summary.teacher_maps.push((seed, teacher_run.final_map()));
        for r in runs {
            let row = ABLATION_ROWS[r.row];
            progress(&format!("seed {seed}: row {} mAP {:.4}", row.name, r.record.final_map()));
            let report = r.record.final_report().cloned().ok_or_else(|| CoreError::Config("run has no evaluation".into()))?;
            summary.entries.push(AblationEntry {
                row: row.name,
                relation: row.relation,
                feature: row.feature,
                head: row.head,
                seed,
                report,
            });
        }
    }
    if let Some(dir) = out {
        write_text(&dir.join("ablation.csv"), &ablation_csv(&summary.entries))?;
        let mut t = String::from("seed,teacher_map\n");
        for (s, m) in &summary.teacher_maps {
            t.push_str(&format!("{s},{m}\n"));
        }
        write_text(&dir.join("teacher.csv"), &t)?;
    }
    Ok(summary)
}
