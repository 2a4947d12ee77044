//! Finite-difference audit of every differentiable operation.
//!
//! Each registered operation is rebuilt on random instances and its tape
//! gradient compared to central differences. Operations containing `|x|`
//! draw instances whose kink arguments stay at least [`KINK_MARGIN`] from
//! zero, and pipeline instances are redrawn when a probe would change an
//! assignment or point-order choice: the loss is not differentiable there.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DistillWeights, LossConfig, PipelineConfig, RelationMode, SceneConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::gradcheck::check_gradient_multi;
use crate::losses;
use crate::map::{ElementClass, Point, NUM_CLASSES};
use crate::model::Pipeline;
use crate::params::{BoundParams, ParamSet};
use crate::synth::{generate_scene, targets};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{student_step, teacher_step, TeacherTargets};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
/// Parameter coordinates checked per pipeline instance.
pub const PIPELINE_COORDS: usize = 16;

pub const OPERATIONS: &[&str] = &[
    "matmul",
    "transpose",
    "elementwise",
    "softmax_rows",
    "log_softmax_rows",
    "cross_modal_attention",
    "relation_kl",
    "feature_mse",
    "focal",
    "head_loss",
    "map_loss",
    "normalize_cells",
    "patchify",
    "teacher_pipeline",
    "student_pipeline",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AuditResult {
    pub operation: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Instance index where the maximum occurred.
    pub worst_instance: usize,
}

impl AuditResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// `Σ w ⊙ v` with fixed random weights, turning any tensor into a scalar
/// whose gradient exercises every output entry.
fn probe(tape: &mut Tape, v: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn far_from_kinks(a: &[f64], b: &[f64]) -> bool {
    a.iter().all(|x| b.iter().all(|y| (x - y).abs() >= KINK_MARGIN))
}

/// Draws until `accept` holds.
fn draw<T>(rng: &mut ChaCha8Rng, mut make: impl FnMut(&mut ChaCha8Rng) -> T, accept: impl Fn(&T) -> bool) -> T {
    loop {
        let x = make(rng);
        if accept(&x) {
            return x;
        }
    }
}

struct Instance {
    inputs: Vec<Tensor>,
    coords: Option<Vec<(usize, usize)>>,
}

/// Runs the audit for one operation.
pub fn audit_operation(name: &'static str, instances: usize, seed: u64) -> Result<AuditResult> {
    let op_index = OPERATIONS
        .iter()
        .position(|&o| o == name)
        .ok_or_else(|| Error::Config(format!("unknown audited operation {name:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xa0d1_7000 + op_index as u64));
    let mut result = AuditResult { operation: name, instances, coordinates: 0, max_rel_error: 0.0, worst_instance: 0 };
    let ctx = Context::new(name, seed)?;
    for i in 0..instances {
        let err = ctx.run(name, &mut rng, &mut result.coordinates)?;
        if err > result.max_rel_error {
            result.max_rel_error = err;
            result.worst_instance = i;
        }
    }
    Ok(result)
}

/// Runs every registered operation.
pub fn audit_all(instances: usize, seed: u64) -> Result<Vec<AuditResult>> {
    OPERATIONS.iter().map(|&op| audit_operation(op, instances, seed)).collect()
}

/// Fixed state shared by the instances of the pipeline audits.
struct Context {
    tiny: Option<Pipeline>,
    full: Option<(Pipeline, TrainConfig)>,
}

impl Context {
    fn new(name: &str, seed: u64) -> Result<Self> {
        let tiny = matches!(name, "normalize_cells" | "patchify").then(|| {
            Pipeline::new(PipelineConfig { grid_h: 4, grid_w: 4, channels: 3, patch: 2, ..PipelineConfig::default() })
        });
        let full = matches!(name, "teacher_pipeline" | "student_pipeline").then(|| {
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            Pipeline::new(cfg.pipeline.clone()).map(|pl| (pl, cfg))
        });
        Ok(Self { tiny: tiny.transpose()?, full: full.transpose()? })
    }

    fn run(&self, name: &str, rng: &mut ChaCha8Rng, coords: &mut usize) -> Result<f64> {
        match name {
            "teacher_pipeline" | "student_pipeline" => {
                let (pl, cfg) = self.full.as_ref().expect("pipeline context");
                self.run_pipeline(name == "teacher_pipeline", pl, cfg, rng, coords)
            }
            _ => {
                let (inst, f) = self.instance(name, rng)?;
                let report = check_gradient_multi(|t, v| f(t, v), &inst.inputs, FD_STEP, inst.coords.as_deref())?;
                *coords += report.coordinates;
                Ok(report.max_rel_error)
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn instance<'a>(
        &'a self,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Instance, alloc::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>)> {
        use alloc::boxed::Box;
        let plain = |inputs: Vec<Tensor>| Instance { inputs, coords: None };
        Ok(match name {
            "matmul" => {
                let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
                let w = normal_tensor(rng, &[m, n], 1.0);
                let inst = plain(vec![normal_tensor(rng, &[m, k], 1.0), normal_tensor(rng, &[k, n], 1.0)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.matmul(v[0], v[1])?;
                    probe(t, y, &w)
                }))
            }
            "transpose" => {
                let (m, n) = (rng.gen_range(1..6), rng.gen_range(1..6));
                let w = normal_tensor(rng, &[n, m], 1.0);
                let inst = plain(vec![normal_tensor(rng, &[m, n], 1.0)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.transpose2d(v[0])?;
                    probe(t, y, &w)
                }))
            }
            "elementwise" => {
                // tanh, sigmoid, exp, ln, sqrt, powers, division and the
                // broadcasting bias add in one expression.
                let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
                let w = normal_tensor(rng, &[m, n], 1.0);
                let a = normal_tensor(rng, &[m, n], 1.0);
                let b = normal_tensor(rng, &[n], 1.0);
                let pos_data = (0..m * n).map(|_| rng.gen_range(0.5..2.0)).collect();
                let pos = Tensor::new(&[m, n], pos_data)?;
                let inst = plain(vec![a, b, pos]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let x = t.add_row_vector(v[0], v[1])?;
                    let th = t.tanh(x);
                    let sg = t.sigmoid(x);
                    let e = t.exp(th);
                    let l = t.ln(v[2])?;
                    let r = t.sqrt(v[2])?;
                    let p = t.pow_scalar(v[2], 2.5)?;
                    let q = t.div(sg, v[2])?;
                    let s = t.mul(e, l)?;
                    let s = t.add(s, r)?;
                    let s = t.add(s, p)?;
                    let s = t.sub(s, q)?;
                    let sq = t.square(th);
                    let s = t.add(s, sq)?;
                    let s = t.add_scalar(s, 0.5);
                    let s = t.scale(s, 0.7);
                    probe(t, s, &w)
                }))
            }
            "softmax_rows" | "log_softmax_rows" => {
                let (m, n) = (rng.gen_range(1..6), rng.gen_range(1..7));
                let w = normal_tensor(rng, &[m, n], 1.0);
                let inst = plain(vec![normal_tensor(rng, &[m, n], 2.0)]);
                let log = name == "log_softmax_rows";
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = if log { t.log_softmax_rows(v[0])? } else { t.softmax_rows(v[0])? };
                    probe(t, y, &w)
                }))
            }
            "cross_modal_attention" => {
                let (n, d) = (rng.gen_range(1..7), rng.gen_range(2..9));
                let w = normal_tensor(rng, &[n, n], 1.0);
                let inst = plain(vec![normal_tensor(rng, &[n, d], 1.0), normal_tensor(rng, &[n, d], 1.0)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let a = losses::cross_modal_attention(t, v[0], v[1], d as f64)?;
                    probe(t, a, &w)
                }))
            }
            "relation_kl" => {
                let (n, d) = (rng.gen_range(1..7), rng.gen_range(2..9));
                let mode = *[RelationMode::Cross, RelationMode::Uni, RelationMode::Hybrid].choose(rng).expect("nonempty");
                let t1 = normal_tensor(rng, &[n, d], 1.5);
                let t2 = normal_tensor(rng, &[n, d], 1.5);
                let inst = plain(vec![normal_tensor(rng, &[n, d], 1.5), normal_tensor(rng, &[n, d], 1.5)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let (c1, c2) = (t.constant(&t1), t.constant(&t2));
                    let (ta, tb) = losses::relation_pair(t, mode, c1, c2, d as f64)?;
                    let (sa, sb) = losses::relation_pair(t, mode, v[0], v[1], d as f64)?;
                    losses::relation_loss(t, ta, tb, sa, sb)
                }))
            }
            "feature_mse" => {
                let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
                // Teacher features enter as constants.
                let (ft, ht) = (normal_tensor(rng, &[r, c], 1.0), normal_tensor(rng, &[r, c], 1.0));
                let inst = plain(vec![normal_tensor(rng, &[r, c], 1.0), normal_tensor(rng, &[r, c], 1.0)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let (a, b) = (t.constant(&ft), t.constant(&ht));
                    let f = losses::feature_loss(t, a, v[0], b, v[1])?;
                    let w = t.scale(f.l_high, 0.5);
                    t.add(f.l_feature, w)
                }))
            }
            "focal" => {
                let q = rng.gen_range(1..7);
                let labels: Vec<usize> = (0..q).map(|_| rng.gen_range(0..=NUM_CLASSES)).collect();
                let (gamma, alpha) = (rng.gen_range(0.0..3.0), rng.gen_range(0.1..1.0));
                let inst = plain(vec![normal_tensor(rng, &[q, NUM_CLASSES], 2.0)]);
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| losses::focal_loss(t, v[0], &labels, gamma, alpha)))
            }
            "head_loss" => {
                let (q, k) = (rng.gen_range(1..6), rng.gen_range(2..5));
                let t_cls = normal_tensor(rng, &[q, NUM_CLASSES], 2.0);
                let t_pts = normal_tensor(rng, &[q, k, 2], 3.0);
                let s_pts = draw(rng, |r| normal_tensor(r, &[q, k, 2], 3.0), |s| far_from_kinks(s.data(), t_pts.data()));
                let inst = plain(vec![normal_tensor(rng, &[q, NUM_CLASSES], 2.0), s_pts]);
                let cfg = LossConfig::default();
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let m = losses::match_predictions(t_cls.data(), t_pts.data(), t.value(v[0]), t.value(v[1]), q)?;
                    let tp = t.constant(&t_pts);
                    Ok(losses::head_loss(t, &m, tp, v[0], v[1], &cfg)?.l_head)
                }))
            }
            "map_loss" => {
                let (q, k) = (rng.gen_range(1..6), rng.gen_range(2..5));
                let g = rng.gen_range(0..=q);
                let gts: Vec<(ElementClass, Vec<Point>)> = (0..g)
                    .map(|_| {
                        let c = ElementClass::ALL[rng.gen_range(0..NUM_CLASSES)];
                        (c, (0..k).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-20.0..20.0)]).collect())
                    })
                    .collect();
                let gt_flat: Vec<f64> = gts.iter().flat_map(|(_, p)| p.iter().flat_map(|x| [x[0], x[1]])).collect();
                let pts = draw(rng, |r| normal_tensor(r, &[q, k, 2], 8.0), |s| far_from_kinks(s.data(), &gt_flat));
                let inst = plain(vec![normal_tensor(rng, &[q, NUM_CLASSES], 2.0), pts]);
                let cfg = LossConfig::default();
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| Ok(losses::map_loss(t, v[0], v[1], &gts, &cfg)?.0.total)))
            }
            "normalize_cells" | "patchify" => {
                let pl = self.tiny.as_ref().expect("tiny pipeline");
                let (hw, c) = (pl.cfg.cells(), pl.cfg.channels);
                let out_shape = if name == "patchify" { vec![pl.cfg.num_patches(), pl.cfg.patch_dim()] } else { vec![hw, c] };
                let w = normal_tensor(rng, &out_shape, 1.0);
                let inst = plain(vec![normal_tensor(rng, &[hw, c], 1.0)]);
                let patch = name == "patchify";
                (inst, Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = if patch { pl.patchify(t, v[0])? } else { pl.normalize_cells(t, v[0])? };
                    probe(t, y, &w)
                }))
            }
            other => return Err(Error::Config(format!("no instance generator for {other:?}"))),
        })
    }

    /// Loss of a full forward pass on a random scene, differentiated with
    /// respect to a random subset of perturbed parameter coordinates.
    fn run_pipeline(&self, teacher: bool, pl: &Pipeline, cfg: &TrainConfig, rng: &mut ChaCha8Rng, coords: &mut usize) -> Result<f64> {
        let (scene, gt, params, tt, picked) = loop {
            let scene = generate_scene(rng.gen(), &pl.cfg, &SceneConfig::default())?;
            let gt = targets(&scene.sample, pl.cfg.points)?;
            let init_seed = rng.gen();
            let mut params: ParamSet = if teacher { pl.init_teacher(init_seed) } else { pl.init_student(init_seed) };
            for t in params.tensors_mut() {
                for x in t.data_mut() {
                    *x += rng.gen_range(-0.05..0.05);
                }
            }
            let tt = if teacher {
                None
            } else {
                let data = crate::train::Dataset { scenes: vec![scene.clone()], targets: vec![gt.clone()] };
                crate::train::teacher_targets(pl, &pl.init_teacher(rng.gen()), &data, cfg)?.pop()
            };
            let (regime, clear) = pipeline_regime(pl, &params, &scene, &gt, tt.as_ref(), cfg)?;
            if !clear {
                continue;
            }
            let all: Vec<(usize, usize)> =
                params.tensors().enumerate().flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i))).collect();
            let picked: Vec<(usize, usize)> = all.choose_multiple(rng, PIPELINE_COORDS).copied().collect();
            // Redraw if any finite-difference probe would cross into
            // another regime, where the loss is not differentiable.
            let mut stable = true;
            for &(k, i) in &picked {
                for sign in [1.0, -1.0] {
                    let mut moved = params.clone();
                    let x = &mut moved.tensors_mut().nth(k).expect("picked index").data_mut()[i];
                    *x += sign * FD_STEP;
                    stable &= pipeline_regime(pl, &moved, &scene, &gt, tt.as_ref(), cfg)?.0 == regime;
                }
            }
            if stable {
                break (scene, gt, params, tt, picked);
            }
        };
        let names: Vec<String> = params.names();
        let inputs: Vec<Tensor> = params.tensors().cloned().collect();

        let report = if teacher {
            check_gradient_multi(
                |t, v| {
                    let p = BoundParams::from_parts(names.clone(), v.to_vec())?;
                    Ok(teacher_step(t, pl, &p, &scene, &gt, cfg)?.0)
                },
                &inputs,
                FD_STEP,
                Some(&picked),
            )?
        } else {
            let tt: &TeacherTargets = tt.as_ref().expect("student audit has teacher targets");
            check_gradient_multi(
                |t, v| {
                    let p = BoundParams::from_parts(names.clone(), v.to_vec())?;
                    Ok(student_step(t, pl, &p, &scene, &gt, tt, DistillWeights::DEFAULT, cfg)?.0)
                },
                &inputs,
                FD_STEP,
                Some(&picked),
            )?
        };
        *coords += report.coordinates;
        Ok(report.max_rel_error)
    }
}

/// Discrete choices made inside a pipeline loss: map assignment, point
/// order reversals and, for the student, the head assignment.
#[derive(PartialEq)]
struct Regime {
    map: Vec<usize>,
    reversed: Vec<bool>,
    head: Vec<usize>,
}

/// The loss regime at `params`, and whether every `|x|` argument of the
/// map loss (and, for the student, head point loss) is at least
/// [`KINK_MARGIN`] from zero.
fn pipeline_regime(
    pl: &Pipeline,
    params: &ParamSet,
    scene: &crate::synth::SyntheticScene,
    gt: &[(ElementClass, Vec<Point>)],
    tt: Option<&TeacherTargets>,
    cfg: &TrainConfig,
) -> Result<(Regime, bool)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let cam = tape.constant(&scene.camera);
    let (cls, pts) = match tt {
        None => {
            let lid = tape.constant(&scene.lidar);
            let o = pl.teacher_forward(&mut tape, &p, cam, lid)?;
            (o.cls, o.points)
        }
        Some(_) => {
            let o = pl.student_forward(&mut tape, &p, cam)?;
            (o.cls, o.points)
        }
    };
    let (cls, pts) = (tape.value(cls), tape.value(pts));
    let q = pl.cfg.queries;
    let stride = pts.len() / q;
    let m = losses::match_map(cls, pts, gt, q, &cfg.loss)?;
    let mut regime = Regime { map: m.gt_to_query.clone(), reversed: m.reversed.clone(), head: Vec::new() };
    let mut clear = true;
    for (g, &j) in m.gt_to_query.iter().enumerate() {
        let mut order: Vec<Point> = gt[g].1.clone();
        if m.reversed[g] {
            order.reverse();
        }
        let target: Vec<f64> = order.iter().flat_map(|p| [p[0], p[1]]).collect();
        clear &= pts[j * stride..(j + 1) * stride].iter().zip(&target).all(|(a, b)| (a - b).abs() >= KINK_MARGIN);
    }
    if let Some(tt) = tt {
        let hm = losses::match_predictions(tt.cls.data(), tt.points.data(), cls, pts, q)?;
        let tp = tt.points.data();
        for (i, &j) in hm.student_to_teacher.iter().enumerate() {
            if hm.teacher_labels[j] == losses::NO_OBJECT {
                continue;
            }
            let (a, b) = (&pts[i * stride..(i + 1) * stride], &tp[j * stride..(j + 1) * stride]);
            clear &= a.iter().zip(b).all(|(x, y)| (x - y).abs() >= KINK_MARGIN);
        }
        regime.head = hm.student_to_teacher;
    }
    Ok((regime, clear))
}
