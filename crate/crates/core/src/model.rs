//! Toy-scale fusion teacher and camera-only student.
//!
//! BEV features are stored as `[H*W, C]` matrices whose row `r*W + c` is
//! grid cell `(r, c)`; rows run along y and columns along x.
//!
//! Teacher: per-cell camera and LiDAR encoders, channel-mixing fusion of
//! their concatenation, a two-layer position-wise map encoder, and the map
//! head. Student: a dual BEV transform producing two structurally different
//! subspaces from the camera raster, followed by the same fusion, encoder
//! and head structure.
//!
//! The map head pools `F_high` once per query with a softmax over cells
//! (content key + learned spatial logits + a fixed anchor prior). Each
//! query's pooled feature, attention centroid and second moments feed a
//! linear class branch and a per-point tilt: point `k` of query `q` attends
//! over cells with the query logits plus a linear ramp along the tilt
//! direction, and lands on the attention-weighted mean of cell centers
//! shifted by per-cell sub-cell offsets, plus a small linear residual.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::map::{ElementClass, MapElement, PredictionSet, NUM_CLASSES, RANGE_X, RANGE_Y};
use crate::params::{init_uniform, BoundParams, ParamSet};
use crate::synth::{cell_center, INPUT_CHANNELS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Extra per-query head inputs: centroid (2) and second moments (3).
const GEOM_FEATURES: usize = 5;

/// Variance floor of the per-cell standardization.
const NORM_EPS: f64 = 1e-5;

/// Multiplier on the raw tilt so unit-scale parameters give sharp ramps.
const TILT_GAIN: f64 = 8.0;

/// Multiplier on the content scores of the query pooling.
const SCORE_GAIN: f64 = 8.0;

#[derive(Debug, Clone, Copy)]
pub struct TeacherOutputs {
    pub c_bev: Var,
    pub l_bev: Var,
    pub fused: Var,
    pub high: Var,
    /// `[Q, 3]` class logits.
    pub cls: Var,
    /// `[Q, K, 2]` points in meters.
    pub points: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StudentOutputs {
    pub sub1: Var,
    pub sub2: Var,
    pub fused: Var,
    pub high: Var,
    pub cls: Var,
    pub points: Var,
}

/// Network dimensions plus the fixed geometric tensors shared by every
/// forward pass.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    /// `[H*W, 2]` normalized cell centers.
    positions: Tensor,
    /// `[H*W, 3]` normalized (x^2, y^2, xy).
    moments: Tensor,
    /// `[Q, H*W]` log-prior tying each query to an anchor region.
    anchor_prior: Tensor,
    /// `[H*W, H*W]` log-prior favouring nearby cells in the soft-pooling branch.
    locality_prior: Tensor,
    /// `[2, H*W]` transposed normalized cell centers.
    positions_t: Tensor,
    /// `[C, C]` identity minus the channel mean.
    centering: Tensor,
    /// `[C, C]` filled with `1/C`.
    averaging: Tensor,
    /// `[H*W, 2]` half cell size in normalized units.
    half_cell: Tensor,
    /// Row `q*K + k` of the point attention reads query row `q`.
    query_rows: Vec<usize>,
    /// `[Q, 2K]` normalized-to-meters scale.
    to_meters: Tensor,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_vector(y, b)
}

/// Anchor grid `(columns, rows)` for `q` queries.
fn anchor_grid(q: usize) -> (usize, usize) {
    let ax = (libm::round(libm::sqrt(q as f64 / 2.0)) as usize).max(1);
    (ax, q.div_ceil(ax))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let cells = cfg.cells();
        let (q, k) = (cfg.queries, cfg.points);

        let mut positions = Vec::with_capacity(cells * 2);
        let mut moments = Vec::with_capacity(cells * 3);
        let mut centers = Vec::with_capacity(cells);
        for r in 0..cfg.grid_h {
            for c in 0..cfg.grid_w {
                let p = cell_center(&cfg, r, c);
                let (x, y) = (p[0] / RANGE_X, p[1] / RANGE_Y);
                positions.extend_from_slice(&[x, y]);
                moments.extend_from_slice(&[x * x, y * y, x * y]);
                centers.push(p);
            }
        }

        let (ax, ay) = anchor_grid(q);
        let (sx, sy) = (2.0 * RANGE_X / ax as f64, 2.0 * RANGE_Y / ay as f64);
        let mut anchor_prior = Vec::with_capacity(q * cells);
        for i in 0..q {
            let (ix, iy) = (i % ax, i / ax);
            let a = [-RANGE_X + (ix as f64 + 0.5) * sx, -RANGE_Y + (iy as f64 + 0.5) * sy];
            for p in &centers {
                let (dx, dy) = ((p[0] - a[0]) / sx, (p[1] - a[1]) / sy);
                anchor_prior.push(-0.5 * (dx * dx + dy * dy));
            }
        }

        let mut locality_prior = Vec::with_capacity(cells * cells);
        for i in 0..cells {
            let (ri, ci) = ((i / cfg.grid_w) as f64, (i % cfg.grid_w) as f64);
            for j in 0..cells {
                let (rj, cj) = ((j / cfg.grid_w) as f64, (j % cfg.grid_w) as f64);
                let d2 = (ri - rj) * (ri - rj) + (ci - cj) * (ci - cj);
                locality_prior.push(-d2);
            }
        }

        let to_meters: Vec<f64> =
            (0..q * 2 * k).map(|i| if i % 2 == 0 { RANGE_X } else { RANGE_Y }).collect();
        let positions_t: Vec<f64> =
            (0..2).flat_map(|d| positions.iter().skip(d).step_by(2).copied().collect::<Vec<_>>()).collect();
        let (cw, ch) = (2.0 * RANGE_X / cfg.grid_w as f64, 2.0 * RANGE_Y / cfg.grid_h as f64);
        let half_cell = [0.5 * cw / RANGE_X, 0.5 * ch / RANGE_Y].repeat(cells);
        let query_rows = (0..q * k).map(|i| i / k).collect();

        Ok(Self {
            positions: Tensor::new(&[cells, 2], positions)?,
            moments: Tensor::new(&[cells, 3], moments)?,
            anchor_prior: Tensor::new(&[q, cells], anchor_prior)?,
            locality_prior: Tensor::new(&[cells, cells], locality_prior)?,
            positions_t: Tensor::new(&[2, cells], positions_t)?,
            half_cell: Tensor::new(&[cells, 2], half_cell)?,
            centering: {
                let c = cfg.channels;
                let inv = 1.0 / c as f64;
                Tensor::new(&[c, c], (0..c * c).map(|i| if i / c == i % c { 1.0 - inv } else { -inv }).collect())?
            },
            averaging: Tensor::full(&[cfg.channels, cfg.channels], 1.0 / cfg.channels as f64),
            query_rows,
            to_meters: Tensor::new(&[q, 2 * k], to_meters)?,
            cfg,
        })
    }

    fn push_encoder_and_head<R: rand::Rng>(&self, rng: &mut R, params: &mut ParamSet, hidden: usize) {
        let (c, cells, q, k) = (self.cfg.channels, self.cfg.cells(), self.cfg.queries, self.cfg.points);
        let hin = c + GEOM_FEATURES;
        params.push("fuse.w", init_uniform(rng, &[2 * c, c], 2 * c));
        params.push("fuse.b", init_uniform(rng, &[c], 2 * c));
        params.push("enc.w1", init_uniform(rng, &[c, hidden], c));
        params.push("enc.b1", init_uniform(rng, &[hidden], c));
        params.push("enc.w2", init_uniform(rng, &[hidden, c], hidden));
        params.push("enc.b2", init_uniform(rng, &[c], hidden));
        params.push("head.key", init_uniform(rng, &[c, q], c));
        params.push("head.pos", init_uniform(rng, &[q, cells], cells));
        params.push("head.cls_w", init_uniform(rng, &[hin, NUM_CLASSES], hin));
        params.push("head.cls_b", init_uniform(rng, &[q, NUM_CLASSES], hin));
        params.push("head.tilt_w", init_uniform(rng, &[hin, 2 * k], hin));
        params.push("head.tilt_b", init_uniform(rng, &[q, 2 * k], hin));
        params.push("head.off_w", init_uniform(rng, &[c, 2], c));
        params.push("head.off_b", init_uniform(rng, &[2], c));
        params.push("head.pt_w", init_uniform(rng, &[hin, 2 * k], hin));
        params.push("head.pt_b", init_uniform(rng, &[q, 2 * k], hin));
    }

    pub fn init_teacher(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e55);
        let c = self.cfg.channels;
        let mut p = ParamSet::new();
        p.push("cam.w", init_uniform(&mut rng, &[INPUT_CHANNELS, c], INPUT_CHANNELS));
        p.push("cam.b", init_uniform(&mut rng, &[c], INPUT_CHANNELS));
        p.push("lidar.w", init_uniform(&mut rng, &[INPUT_CHANNELS, c], INPUT_CHANNELS));
        p.push("lidar.b", init_uniform(&mut rng, &[c], INPUT_CHANNELS));
        self.push_encoder_and_head(&mut rng, &mut p, self.cfg.teacher_hidden);
        p
    }

    pub fn init_student(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57d0_e47a);
        let (c, cells) = (self.cfg.channels, self.cfg.cells());
        let mut p = ParamSet::new();
        p.push("dual.w1", init_uniform(&mut rng, &[INPUT_CHANNELS, c], INPUT_CHANNELS));
        p.push("dual.g1", init_uniform(&mut rng, &[INPUT_CHANNELS, c], INPUT_CHANNELS));
        p.push("dual.gb", init_uniform(&mut rng, &[c], INPUT_CHANNELS));
        p.push("dual.w2", init_uniform(&mut rng, &[INPUT_CHANNELS, c], INPUT_CHANNELS));
        p.push("dual.mix", init_uniform(&mut rng, &[cells, cells], cells));
        self.push_encoder_and_head(&mut rng, &mut p, self.cfg.student_hidden);
        p
    }

    fn check_input(&self, tape: &Tape, x: Var, what: &str) -> Result<()> {
        let want = [self.cfg.cells(), INPUT_CHANNELS];
        if tape.shape(x) != want {
            return Err(Error::Shape(alloc::format!(
                "{what} input has shape {:?}, expected {want:?}",
                tape.shape(x)
            )));
        }
        Ok(())
    }

    /// Fusion, map encoder and map head shared by both models.
    fn fuse_encode_head(&self, tape: &mut Tape, p: &BoundParams, a: Var, b: Var) -> Result<(Var, Var, Var, Var)> {
        let cat = tape.concat_cols(a, b)?;
        let fused = linear(tape, cat, p.var("fuse.w"), p.var("fuse.b"))?;
        let fused = tape.tanh(fused);
        let high = self.map_encoder(tape, p, fused)?;
        let (cls, points) = self.map_head(tape, p, high)?;
        Ok((fused, high, cls, points))
    }

    /// Per-cell standardization over channels: zero mean, unit variance.
    pub fn normalize_cells(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let centering = tape.constant(&self.centering);
        let averaging = tape.constant(&self.averaging);
        let centered = tape.matmul(x, centering)?;
        let sq = tape.square(centered);
        let var = tape.matmul(sq, averaging)?;
        let var = tape.add_scalar(var, NORM_EPS);
        let sd = tape.sqrt(var)?;
        tape.div(centered, sd)
    }

    /// Two-layer position-wise encoder from fused to high-level BEV features.
    pub fn map_encoder(&self, tape: &mut Tape, p: &BoundParams, fused: Var) -> Result<Var> {
        let h = linear(tape, fused, p.var("enc.w1"), p.var("enc.b1"))?;
        let h = tape.tanh(h);
        let out = linear(tape, h, p.var("enc.w2"), p.var("enc.b2"))?;
        Ok(tape.tanh(out))
    }

    /// Returns `([Q, 3]` class logits, `[Q, K, 2]` points in meters`)`.
    pub fn map_head(&self, tape: &mut Tape, p: &BoundParams, high: Var) -> Result<(Var, Var)> {
        let (q, k) = (self.cfg.queries, self.cfg.points);
        let scores = tape.matmul(high, p.var("head.key"))?;
        let scores = tape.transpose2d(scores)?;
        let scores = tape.scale(scores, SCORE_GAIN);
        let scores = tape.add(scores, p.var("head.pos"))?;
        let prior = tape.constant(&self.anchor_prior);
        let scores = tape.add(scores, prior)?;
        let attn = tape.softmax_rows(scores)?;

        let pooled = tape.matmul(attn, high)?;
        let positions = tape.constant(&self.positions);
        let centroid = tape.matmul(attn, positions)?;
        let moments = tape.constant(&self.moments);
        let second = tape.matmul(attn, moments)?;
        let geom = tape.concat_cols(centroid, second)?;
        let h = tape.concat_cols(pooled, geom)?;

        let cls = tape.matmul(h, p.var("head.cls_w"))?;
        let cls = tape.add(cls, p.var("head.cls_b"))?;

        // Point-level attention: query logits plus a per-point linear ramp.
        let tilt = tape.matmul(h, p.var("head.tilt_w"))?;
        let tilt = tape.add(tilt, p.var("head.tilt_b"))?;
        let tilt = tape.scale(tilt, TILT_GAIN);
        let tilt = tape.reshape(tilt, &[q * k, 2])?;
        let positions_t = tape.constant(&self.positions_t);
        let ramp = tape.matmul(tilt, positions_t)?;
        let base = tape.select_rows(scores, &self.query_rows)?;
        let point_scores = tape.add(base, ramp)?;
        let point_attn = tape.softmax_rows(point_scores)?;

        let off = linear(tape, high, p.var("head.off_w"), p.var("head.off_b"))?;
        let off = tape.tanh(off);
        let half_cell = tape.constant(&self.half_cell);
        let off = tape.mul(off, half_cell)?;
        let cell_pos = tape.add(positions, off)?;
        let located = tape.matmul(point_attn, cell_pos)?;
        let located = tape.reshape(located, &[q, 2 * k])?;

        let residual = tape.matmul(h, p.var("head.pt_w"))?;
        let residual = tape.add(residual, p.var("head.pt_b"))?;
        let residual = tape.scale(residual, 0.1);
        let normalized = tape.add(located, residual)?;
        let scale = tape.constant(&self.to_meters);
        let meters = tape.mul(normalized, scale)?;
        let points = tape.reshape(meters, &[q, k, 2])?;
        Ok((cls, points))
    }

    pub fn teacher_forward(&self, tape: &mut Tape, p: &BoundParams, camera: Var, lidar: Var) -> Result<TeacherOutputs> {
        self.check_input(tape, camera, "camera")?;
        self.check_input(tape, lidar, "lidar")?;
        let c_bev = linear(tape, camera, p.var("cam.w"), p.var("cam.b"))?;
        let c_bev = self.normalize_cells(tape, c_bev)?;
        let l_bev = linear(tape, lidar, p.var("lidar.w"), p.var("lidar.b"))?;
        let l_bev = self.normalize_cells(tape, l_bev)?;
        let (fused, high, cls, points) = self.fuse_encode_head(tape, p, c_bev, l_bev)?;
        Ok(TeacherOutputs { c_bev, l_bev, fused, high, cls, points })
    }

    /// Camera raster to two BEV subspaces. Branch one is a per-cell linear
    /// projection with a sigmoid gate; branch two pools projected features
    /// over all cells with learned per-cell softmax weights.
    pub fn dual_bev_transform(&self, tape: &mut Tape, p: &BoundParams, camera: Var) -> Result<(Var, Var)> {
        self.check_input(tape, camera, "camera")?;
        let value = tape.matmul(camera, p.var("dual.w1"))?;
        let gate = linear(tape, camera, p.var("dual.g1"), p.var("dual.gb"))?;
        let gate = tape.sigmoid(gate);
        let sub1 = tape.mul(value, gate)?;

        let prior = tape.constant(&self.locality_prior);
        let logits = tape.add(p.var("dual.mix"), prior)?;
        let weights = tape.softmax_rows(logits)?;
        let projected = tape.matmul(camera, p.var("dual.w2"))?;
        let sub2 = tape.matmul(weights, projected)?;
        let sub1 = self.normalize_cells(tape, sub1)?;
        let sub2 = self.normalize_cells(tape, sub2)?;
        Ok((sub1, sub2))
    }

    pub fn student_forward(&self, tape: &mut Tape, p: &BoundParams, camera: Var) -> Result<StudentOutputs> {
        let (sub1, sub2) = self.dual_bev_transform(tape, p, camera)?;
        let (fused, high, cls, points) = self.fuse_encode_head(tape, p, sub1, sub2)?;
        Ok(StudentOutputs { sub1, sub2, fused, high, cls, points })
    }

    /// `[H*W, C]` BEV feature to `[N, P*P*C]` patches, patches in row-major
    /// order over the patch grid, cells row-major within a patch.
    pub fn patchify(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        patchify(tape, f, self.cfg.grid_h, self.cfg.grid_w, self.cfg.patch)
    }

    /// Turns raw head outputs into scored map elements. Each query yields
    /// one element with its most probable object class; the score is that
    /// class's posterior with the implicit no-object logit included. Points
    /// are clamped to the perception range.
    pub fn decode(&self, sample_id: &str, cls: &Tensor, points: &Tensor) -> Result<PredictionSet> {
        let (q, k) = (self.cfg.queries, self.cfg.points);
        let mut elements = Vec::with_capacity(q);
        for i in 0..q {
            let logits = &cls.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            let probs = object_posterior(logits);
            let (best, score) = probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, p)| if p > acc.1 { (j, p) } else { acc });
            let pts = points.data()[i * k * 2..(i + 1) * k * 2]
                .chunks(2)
                .map(|xy| [xy[0].clamp(-RANGE_X, RANGE_X), xy[1].clamp(-RANGE_Y, RANGE_Y)])
                .collect();
            elements.push(MapElement::new(ElementClass::from_id(best)?, pts, Some(score.clamp(0.0, 1.0)))?);
        }
        Ok(PredictionSet { sample_id: sample_id.into(), elements })
    }
}

/// Posterior over the object classes when an implicit zero "no-object"
/// logit is appended to `logits`.
pub fn object_posterior(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(0.0f64, f64::max);
    let bg = libm::exp(-mx);
    let ex: Vec<f64> = logits.iter().map(|&l| libm::exp(l - mx)).collect();
    let total = bg + ex.iter().sum::<f64>();
    ex.into_iter().map(|e| e / total).collect()
}

fn patch_indices(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(alloc::format!("patch size {p} does not divide the {h}x{w} grid")));
    }
    let mut idx = Vec::with_capacity(h * w * c);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for dy in 0..p {
                for dx in 0..p {
                    let cell = (pr * p + dy) * w + pc * p + dx;
                    idx.extend((0..c).map(|ch| cell * c + ch));
                }
            }
        }
    }
    Ok(idx)
}

pub fn patchify(tape: &mut Tape, f: Var, h: usize, w: usize, p: usize) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let c = match shape.as_slice() {
        [cells, c] if *cells == h * w => *c,
        _ => return Err(Error::Shape(alloc::format!("patchify: {shape:?} is not a [{}, C] BEV feature", h * w))),
    };
    let idx = patch_indices(h, w, c, p)?;
    tape.gather(f, idx, &[h * w / (p * p), p * p * c])
}

pub fn unpatchify(tape: &mut Tape, patches: Var, h: usize, w: usize, p: usize) -> Result<Var> {
    let shape = tape.shape(patches).to_vec();
    let n = h * w / (p * p).max(1);
    let c = match shape.as_slice() {
        [rows, d] if *rows == n && d % (p * p) == 0 => d / (p * p),
        _ => return Err(Error::Shape(alloc::format!("unpatchify: unexpected patch shape {shape:?}"))),
    };
    let forward = patch_indices(h, w, c, p)?;
    let mut inverse = vec![0usize; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        inverse[src] = i;
    }
    tape.gather(patches, inverse, &[h * w, c])
}
