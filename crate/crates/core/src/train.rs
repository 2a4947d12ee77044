//! Two-phase training: map-loss pre-training of the fusion teacher, then
//! distillation of the camera-only student from the frozen teacher.
//!
//! Everything is single-threaded and seeded, so a configuration fully
//! determines every recorded number.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{DistillWeights, Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, EvalConfig, EvalReport};
use crate::losses::{self, LossBreakdown};
use crate::map::{ElementClass, MapSample, Point, PredictionSet};
use crate::model::Pipeline;
use crate::optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState};
use crate::params::{BoundParams, ParamSet};
use crate::synth::{generate_dataset, targets, SyntheticScene};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scenes plus their ground truth resampled to the head's point count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SyntheticScene>,
    pub targets: Vec<Vec<(ElementClass, Vec<Point>)>>,
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, cfg: &TrainConfig) -> Result<Self> {
        let scenes = generate_dataset(seed, count, &cfg.pipeline, &cfg.scene)?;
        let targets = scenes.iter().map(|s| targets(&s.sample, cfg.pipeline.points)).collect::<Result<_>>()?;
        Ok(Self { scenes, targets })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn samples(&self) -> Vec<MapSample> {
        self.scenes.iter().map(|s| s.sample.clone()).collect()
    }
}

/// Seed of the held-out split, derived from the training data seed.
pub fn eval_data_seed(data_seed: u64) -> u64 {
    data_seed ^ 0x0e7a_1000_5eed_0001
}

pub fn train_split(cfg: &TrainConfig) -> Result<Dataset> {
    Dataset::generate(cfg.data_seed, cfg.train_scenes, cfg)
}

pub fn eval_split(cfg: &TrainConfig) -> Result<Dataset> {
    Dataset::generate(eval_data_seed(cfg.data_seed), cfg.eval_scenes, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's training scenes.
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub phase: Phase,
    pub config_hash: String,
    pub weights: DistillWeights,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
    pub params_digest: String,
    /// Filled in by callers that can read a clock; excluded from [`RunRecord::digest`].
    pub wall_seconds: Option<f64>,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.evals.last().map(|e| &e.report)
    }

    pub fn final_map(&self) -> f64 {
        self.final_report().map_or(0.0, |r| r.map)
    }

    /// Hex SHA-256 over every recorded number except wall time.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.phase.as_str());
        h.update(&self.config_hash);
        for w in [self.weights.relation, self.weights.feature, self.weights.head] {
            h.update(w.to_le_bytes());
        }
        for e in &self.epochs {
            h.update((e.epoch as u64).to_le_bytes());
            h.update(e.lr.to_le_bytes());
            let l = &e.losses;
            for v in [l.l_map, l.l_relation, l.l_low, l.l_high, l.l_feature, l.l_cls, l.l_point, l.l_head, l.total] {
                h.update(v.to_le_bytes());
            }
        }
        for e in &self.evals {
            h.update((e.epoch as u64).to_le_bytes());
            for per_tau in &e.report.per_class_per_tau {
                for v in per_tau {
                    h.update(v.to_le_bytes());
                }
            }
            h.update(e.report.map.to_le_bytes());
        }
        h.update(&self.params_digest);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Frozen teacher quantities for one training scene.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// The two relation attention matrices.
    pub attention: (Tensor, Tensor),
    pub fused: Tensor,
    pub high: Tensor,
    pub cls: Tensor,
    pub points: Tensor,
}

pub fn teacher_targets(pl: &Pipeline, teacher: &ParamSet, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<TeacherTargets>> {
    let d_k = pl.cfg.d_k() as f64;
    data.scenes
        .iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let p = teacher.bind(&mut tape, false);
            let cam = tape.constant(&scene.camera);
            let lid = tape.constant(&scene.lidar);
            let out = pl.teacher_forward(&mut tape, &p, cam, lid)?;
            let pc = pl.patchify(&mut tape, out.c_bev)?;
            let pli = pl.patchify(&mut tape, out.l_bev)?;
            let (a, b) = losses::relation_pair(&mut tape, cfg.loss.relation_mode, pc, pli, d_k)?;
            Ok(TeacherTargets {
                attention: (tape.tensor(a), tape.tensor(b)),
                fused: tape.tensor(out.fused),
                high: tape.tensor(out.high),
                cls: tape.tensor(out.cls),
                points: tape.tensor(out.points),
            })
        })
        .collect()
}

/// Teacher map loss on one scene.
pub fn teacher_step(tape: &mut Tape, pl: &Pipeline, p: &BoundParams, scene: &SyntheticScene, gt: &[(ElementClass, Vec<Point>)], cfg: &TrainConfig) -> Result<(Var, LossBreakdown)> {
    let cam = tape.constant(&scene.camera);
    let lid = tape.constant(&scene.lidar);
    let out = pl.teacher_forward(tape, p, cam, lid)?;
    let (terms, _) = losses::map_loss(tape, out.cls, out.points, gt, &cfg.loss)?;
    let l = tape.value(terms.total)[0];
    Ok((terms.total, LossBreakdown::map_only(l)))
}

/// Full student objective on one scene against cached teacher targets.
pub fn student_step(
    tape: &mut Tape,
    pl: &Pipeline,
    p: &BoundParams,
    scene: &SyntheticScene,
    gt: &[(ElementClass, Vec<Point>)],
    teacher: &TeacherTargets,
    weights: DistillWeights,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let cam = tape.constant(&scene.camera);
    let out = pl.student_forward(tape, p, cam)?;
    let (map_terms, _) = losses::map_loss(tape, out.cls, out.points, gt, &cfg.loss)?;

    let p1 = pl.patchify(tape, out.sub1)?;
    let p2 = pl.patchify(tape, out.sub2)?;
    let (s1, s2) = losses::relation_pair(tape, cfg.loss.relation_mode, p1, p2, pl.cfg.d_k() as f64)?;
    let t1 = tape.constant(&teacher.attention.0);
    let t2 = tape.constant(&teacher.attention.1);
    let l_relation = losses::relation_loss(tape, t1, t2, s1, s2)?;

    let t_fused = tape.constant(&teacher.fused);
    let t_high = tape.constant(&teacher.high);
    let feature = losses::feature_loss(tape, t_fused, out.fused, t_high, out.high)?;

    let m = losses::match_predictions(
        teacher.cls.data(),
        teacher.points.data(),
        tape.value(out.cls),
        tape.value(out.points),
        pl.cfg.queries,
    )?;
    let t_pts = tape.constant(&teacher.points);
    let head = losses::head_loss(tape, &m, t_pts, out.cls, out.points, &cfg.loss)?;

    let terms = losses::total_loss(tape, map_terms.total, l_relation, feature, head, weights)?;
    Ok((terms.total, LossBreakdown::read(tape, &terms)))
}

/// Scored map elements for every scene, from the teacher (`lidar` used) or
/// the student.
pub fn predict(pl: &Pipeline, params: &ParamSet, data: &Dataset, teacher: bool) -> Result<Vec<PredictionSet>> {
    data.scenes
        .iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let cam = tape.constant(&scene.camera);
            let (cls, pts) = if teacher {
                let lid = tape.constant(&scene.lidar);
                let o = pl.teacher_forward(&mut tape, &p, cam, lid)?;
                (o.cls, o.points)
            } else {
                let o = pl.student_forward(&mut tape, &p, cam)?;
                (o.cls, o.points)
            };
            pl.decode(&scene.sample.sample_id, &tape.tensor(cls), &tape.tensor(pts))
        })
        .collect()
}

pub fn evaluate(pl: &Pipeline, params: &ParamSet, data: &Dataset, teacher: bool) -> Result<EvalReport> {
    let preds = predict(pl, params, data, teacher)?;
    mean_ap(&preds, &data.samples(), &EvalConfig::default())
}

struct Schedule<'a> {
    epochs: usize,
    lr0: f64,
    milestones: &'a [usize],
    shuffle_seed: u64,
}

fn optimize<F>(
    cfg: &TrainConfig,
    params: &mut ParamSet,
    sched: Schedule<'_>,
    train: &Dataset,
    mut step: F,
    mut eval: impl FnMut(&ParamSet) -> Result<EvalReport>,
) -> Result<(Vec<EpochRecord>, Vec<EvalRecord>)>
where
    F: FnMut(&mut Tape, &BoundParams, usize) -> Result<(Var, LossBreakdown)>,
{
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let adam = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay };
    let mut state = AdamWState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(sched.epochs);
    let mut evals = Vec::new();

    for epoch in 0..sched.epochs {
        let lr = lr_schedule(epoch, sched.lr0, cfg.decay_factor, sched.milestones);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch) {
            let mut acc: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let (loss, parts) = step(&mut tape, &bound, i)?;
                if !parts.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch} on {}: {parts:?}",
                        train.scenes[i].sample.sample_id
                    )));
                }
                sum.add_assign(&parts);
                let grads = tape.backward(loss)?;
                for (a, &v) in acc.iter_mut().zip(bound.vars()) {
                    for (x, g) in a.data_mut().iter_mut().zip(grads.get(v).data()) {
                        *x += g;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            adamw_step(params, &acc, &mut state, lr, &adam)?;
        }
        epochs.push(EpochRecord { epoch, lr, losses: sum.scaled(1.0 / train.len() as f64) });
        let last = epoch + 1 == sched.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            evals.push(EvalRecord { epoch, report: eval(params)? });
        }
    }
    Ok((epochs, evals))
}

/// Pre-trains the fusion teacher with the map loss alone.
pub fn train_teacher(cfg: &TrainConfig, pl: &Pipeline, train: &Dataset, eval: &Dataset) -> Result<(ParamSet, RunRecord)> {
    cfg.validate()?;
    let mut params = pl.init_teacher(cfg.seed);
    let milestones = cfg.teacher_milestones();
    let sched = Schedule {
        epochs: cfg.teacher_epochs,
        lr0: cfg.teacher_lr0,
        milestones: &milestones,
        shuffle_seed: cfg.seed ^ 0x7eac_4e50_5eed,
    };
    let (epochs, evals) = optimize(
        cfg,
        &mut params,
        sched,
        train,
        |tape, p, i| teacher_step(tape, pl, p, &train.scenes[i], &train.targets[i], cfg),
        |p| evaluate(pl, p, eval, true),
    )?;
    let record = RunRecord {
        phase: Phase::Teacher,
        config_hash: cfg.hash(),
        weights: DistillWeights::NONE,
        epochs,
        evals,
        params_digest: params.digest(),
        wall_seconds: None,
    };
    Ok((params, record))
}

/// Trains the student against the frozen teacher with the configured
/// loss weights and ablation switches. `cache` may hold precomputed
/// [`teacher_targets`] for `train`.
pub fn distill_student(
    cfg: &TrainConfig,
    pl: &Pipeline,
    teacher: &ParamSet,
    cache: Option<&[TeacherTargets]>,
    train: &Dataset,
    eval: &Dataset,
) -> Result<(ParamSet, RunRecord)> {
    cfg.validate()?;
    pl.init_teacher(0).check_layout(teacher)?;
    let before = teacher.digest();
    let owned;
    let cache = match cache {
        Some(c) if c.len() == train.len() => c,
        Some(c) => {
            return Err(Error::Shape(format!("{} cached teacher targets for {} scenes", c.len(), train.len())));
        }
        None => {
            owned = teacher_targets(pl, teacher, train, cfg)?;
            &owned
        }
    };
    let weights = cfg.effective_weights();
    let mut params = pl.init_student(cfg.seed);
    let milestones = cfg.milestones();
    let sched = Schedule { epochs: cfg.epochs, lr0: cfg.lr0, milestones: &milestones, shuffle_seed: cfg.seed ^ 0x57d0_5eed };
    let (epochs, evals) = optimize(
        cfg,
        &mut params,
        sched,
        train,
        |tape, p, i| student_step(tape, pl, p, &train.scenes[i], &train.targets[i], &cache[i], weights, cfg),
        |p| evaluate(pl, p, eval, false),
    )?;
    if teacher.digest() != before {
        return Err(Error::Numeric("teacher parameters changed during distillation".into()));
    }
    let record = RunRecord {
        phase: Phase::Student,
        config_hash: cfg.hash(),
        weights,
        epochs,
        evals,
        params_digest: params.digest(),
        wall_seconds: None,
    };
    Ok((params, record))
}

/// One row of the loss-component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub relation: bool,
    pub feature: bool,
    pub head: bool,
}

pub const ABLATION_ROWS: [AblationRow; 8] = [
    AblationRow { name: "baseline", relation: false, feature: false, head: false },
    AblationRow { name: "a", relation: true, feature: false, head: false },
    AblationRow { name: "b", relation: false, feature: true, head: false },
    AblationRow { name: "c", relation: false, feature: false, head: true },
    AblationRow { name: "d", relation: true, feature: true, head: false },
    AblationRow { name: "e", relation: false, feature: true, head: true },
    AblationRow { name: "f", relation: true, feature: false, head: true },
    AblationRow { name: "g", relation: true, feature: true, head: true },
];

impl AblationRow {
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.use_relation = self.relation;
        c.use_feature = self.feature;
        c.use_head = self.head;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            train_scenes: 6,
            eval_scenes: 3,
            epochs: 2,
            teacher_epochs: 2,
            batch: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn tiny_runs_are_deterministic() {
        let cfg = tiny();
        let pl = Pipeline::new(PipelineConfig::default()).unwrap();
        let train = train_split(&cfg).unwrap();
        let eval = eval_split(&cfg).unwrap();
        let (t1, r1) = train_teacher(&cfg, &pl, &train, &eval).unwrap();
        let (t2, r2) = train_teacher(&cfg, &pl, &train, &eval).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(r1.digest(), r2.digest());
        let (_, s1) = distill_student(&cfg, &pl, &t1, None, &train, &eval).unwrap();
        let (_, s2) = distill_student(&cfg, &pl, &t1, None, &train, &eval).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.evals.len(), 1);
    }

    #[test]
    fn zero_weights_total_equals_map_loss() {
        let mut cfg = tiny();
        cfg.lambdas = DistillWeights::NONE;
        cfg.epochs = 1;
        cfg.teacher_epochs = 1;
        let pl = Pipeline::new(PipelineConfig::default()).unwrap();
        let train = train_split(&cfg).unwrap();
        let eval = eval_split(&cfg).unwrap();
        let (t, _) = train_teacher(&cfg, &pl, &train, &eval).unwrap();
        let (_, r) = distill_student(&cfg, &pl, &t, None, &train, &eval).unwrap();
        for e in &r.epochs {
            assert_eq!(e.losses.total, e.losses.l_map);
        }
    }

    #[test]
    fn ablation_rows_cover_all_switch_combinations() {
        let mut seen: Vec<(bool, bool, bool)> = ABLATION_ROWS.iter().map(|r| (r.relation, r.feature, r.head)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(ABLATION_ROWS[0].name, "baseline");
        assert!(ABLATION_ROWS[7].relation && ABLATION_ROWS[7].feature && ABLATION_ROWS[7].head);
    }
}
