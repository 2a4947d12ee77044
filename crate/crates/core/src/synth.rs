//! Deterministic synthetic driving scenes and their two sensor views.
//!
//! Ground truth is drawn as smooth polylines inside the perception range.
//! Both sensors observe a per-cell geometric raster of the scene on the
//! BEV grid. The LiDAR view rasterizes the true geometry with weak noise;
//! the camera view rasterizes geometry displaced along the viewing ray
//! (depth error), occasionally misses whole elements, and carries
//! `noise_ratio` times stronger additive noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{PipelineConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::map::{in_perception_range, resample_polyline, ElementClass, MapElement, MapSample, Point, NUM_CLASSES, RANGE_X, RANGE_Y};
use crate::tensor::Tensor;

/// Raster channels per class: occupancy, x offset, y offset, cos 2θ, sin 2θ.
pub const CHANNELS_PER_CLASS: usize = 5;
/// Width of the sensor rasters.
pub const INPUT_CHANNELS: usize = CHANNELS_PER_CLASS * NUM_CLASSES;

const SAMPLE_STEP: f64 = 0.25;
const MIN_CENTER_GAP: f64 = 4.0;

/// A scene together with its rendered sensor tensors, each `[H*W, INPUT_CHANNELS]`.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub sample: MapSample,
    pub camera: Tensor,
    pub lidar: Tensor,
    /// Camera raster before additive noise.
    pub camera_clean: Tensor,
    /// LiDAR raster before additive noise.
    pub lidar_clean: Tensor,
}

/// Center of BEV cell `(row, col)` in meters. Rows run along y, columns along x.
pub fn cell_center(cfg: &PipelineConfig, row: usize, col: usize) -> Point {
    let (cw, ch) = cell_size(cfg);
    [-RANGE_X + (col as f64 + 0.5) * cw, -RANGE_Y + (row as f64 + 0.5) * ch]
}

pub fn cell_size(cfg: &PipelineConfig) -> (f64, f64) {
    (2.0 * RANGE_X / cfg.grid_w as f64, 2.0 * RANGE_Y / cfg.grid_h as f64)
}

fn all_in_range(points: &[Point]) -> bool {
    points.iter().all(|&p| in_perception_range(p))
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    [sx / n, sy / n]
}

fn bent_segment<R: Rng>(rng: &mut R, length: (f64, f64), bend: f64, heading: f64, n: usize, margin_y: f64) -> Vec<Point> {
    loop {
        let cx = rng.gen_range(-RANGE_X + 2.0..RANGE_X - 2.0);
        let cy = rng.gen_range(-RANGE_Y + margin_y..RANGE_Y - margin_y);
        let theta = rng.gen_range(-heading..heading);
        let len = rng.gen_range(length.0..length.1);
        let b = rng.gen_range(-bend..bend);
        let (dir, normal) = ([libm::sin(theta), libm::cos(theta)], [libm::cos(theta), -libm::sin(theta)]);
        let pts: Vec<Point> = (0..n)
            .map(|i| {
                let t = -0.5 + i as f64 / (n - 1) as f64;
                let lateral = b * (1.0 - 4.0 * t * t);
                [
                    cx + t * len * dir[0] + lateral * normal[0],
                    cy + t * len * dir[1] + lateral * normal[1],
                ]
            })
            .collect();
        if all_in_range(&pts) {
            return pts;
        }
    }
}

fn crossing<R: Rng>(rng: &mut R) -> Vec<Point> {
    loop {
        let cx = rng.gen_range(-RANGE_X + 4.0..RANGE_X - 4.0);
        let cy = rng.gen_range(-RANGE_Y + 4.0..RANGE_Y - 4.0);
        let w = rng.gen_range(6.0..10.0);
        let d = rng.gen_range(3.0..4.5);
        let rot: f64 = rng.gen_range(-0.15..0.15);
        let (c, s) = (libm::cos(rot), libm::sin(rot));
        let corners = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5)];
        let pts: Vec<Point> = corners
            .iter()
            .map(|&(u, v)| {
                let (x, y) = (u * w, v * d);
                [cx + c * x - s * y, cy + s * x + c * y]
            })
            .collect();
        if all_in_range(&pts) {
            return pts;
        }
    }
}

fn draw_element<R: Rng>(rng: &mut R, class: ElementClass) -> Vec<Point> {
    match class {
        ElementClass::PedestrianCrossing => crossing(rng),
        ElementClass::LaneDivider => bent_segment(rng, (10.0, 16.0), 1.0, 0.35, 6, 6.0),
        ElementClass::RoadBoundary => bent_segment(rng, (16.0, 28.0), 2.0, 0.25, 8, 9.0),
    }
}

/// Draws the ground-truth elements of one scene.
fn draw_ground_truth<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Result<Vec<MapElement>> {
    let mut elements: Vec<MapElement> = Vec::new();
    let mut centers: Vec<Point> = Vec::new();
    for class in ElementClass::ALL {
        let count = rng.gen_range(cfg.min_per_class..=cfg.max_per_class);
        for _ in 0..count {
            let mut pts = draw_element(rng, class);
            for _ in 0..50 {
                let c = centroid(&pts);
                if centers.iter().all(|o| libm::hypot(o[0] - c[0], o[1] - c[1]) >= MIN_CENTER_GAP) {
                    break;
                }
                pts = draw_element(rng, class);
            }
            centers.push(centroid(&pts));
            elements.push(MapElement::new(class, pts, None)?);
        }
    }
    Ok(elements)
}

/// Per-cell geometric raster of `elements`, `[H*W, INPUT_CHANNELS]`.
pub fn rasterize(cfg: &PipelineConfig, elements: &[(ElementClass, Vec<Point>)]) -> Result<Tensor> {
    let (cw, ch) = cell_size(cfg);
    let cells = cfg.cells();
    // Per cell and class: length, sum dx*len, sum dy*len, sum cos2θ*len, sum sin2θ*len.
    let mut acc = vec![[0.0f64; CHANNELS_PER_CLASS]; cells * NUM_CLASSES];
    for (class, pts) in elements {
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let seg = libm::hypot(b[0] - a[0], b[1] - a[1]);
            if seg <= 0.0 {
                continue;
            }
            let theta = libm::atan2(b[1] - a[1], b[0] - a[0]);
            let (c2, s2) = (libm::cos(2.0 * theta), libm::sin(2.0 * theta));
            let steps = libm::ceil(seg / SAMPLE_STEP).max(1.0) as usize;
            let ds = seg / steps as f64;
            for k in 0..steps {
                let t = (k as f64 + 0.5) / steps as f64;
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let col = libm::floor((p[0] + RANGE_X) / cw);
                let row = libm::floor((p[1] + RANGE_Y) / ch);
                if col < 0.0 || row < 0.0 || col >= cfg.grid_w as f64 || row >= cfg.grid_h as f64 {
                    continue;
                }
                let (row, col) = (row as usize, col as usize);
                let center = cell_center(cfg, row, col);
                let slot = &mut acc[(row * cfg.grid_w + col) * NUM_CLASSES + class.id()];
                slot[0] += ds;
                slot[1] += ds * (p[0] - center[0]) / (0.5 * cw);
                slot[2] += ds * (p[1] - center[1]) / (0.5 * ch);
                slot[3] += ds * c2;
                slot[4] += ds * s2;
            }
        }
    }
    let reference = cw.min(ch);
    let mut data = vec![0.0; cells * INPUT_CHANNELS];
    for cell in 0..cells {
        for k in 0..NUM_CLASSES {
            let slot = &acc[cell * NUM_CLASSES + k];
            if slot[0] <= 0.0 {
                continue;
            }
            let occ = (slot[0] / reference).min(1.0);
            let out = &mut data[cell * INPUT_CHANNELS + k * CHANNELS_PER_CLASS..][..CHANNELS_PER_CLASS];
            out[0] = occ;
            for j in 1..CHANNELS_PER_CLASS {
                out[j] = occ * slot[j] / slot[0];
            }
        }
    }
    Tensor::new(&[cells, INPUT_CHANNELS], data)
}

fn add_noise<R: Rng>(rng: &mut R, t: &Tensor, std: f64) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(t.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std {std}: {e}")))?;
    let data = t.data().iter().map(|&v| v + normal.sample(rng)).collect();
    Tensor::new(t.shape(), data)
}

/// Renders both sensor views for a ground-truth scene. Deterministic in
/// `scene_seed`.
pub fn render_sensors(
    scene_seed: u64,
    ground_truth: &[MapElement],
    pipeline: &PipelineConfig,
    cfg: &SceneConfig,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x5eed_5e45_0a5c_a3e1);
    let truth: Vec<(ElementClass, Vec<Point>)> =
        ground_truth.iter().map(|e| (e.class, e.points.clone())).collect();

    let depth = Normal::new(0.0, 1.0).expect("unit normal");
    let mut seen = Vec::with_capacity(truth.len());
    for (class, pts) in &truth {
        let dropped = rng.gen::<f64>() < cfg.camera_dropout;
        let z: f64 = depth.sample(&mut rng);
        if dropped {
            continue;
        }
        let c = centroid(pts);
        let r = libm::hypot(c[0], c[1]).max(1e-6);
        let shift = z * cfg.depth_jitter * (r / RANGE_Y);
        let dir = [c[0] / r, c[1] / r];
        let moved = pts.iter().map(|p| [p[0] + shift * dir[0], p[1] + shift * dir[1]]).collect();
        seen.push((*class, moved));
    }

    let lidar_clean = rasterize(pipeline, &truth)?;
    let camera_clean = rasterize(pipeline, &seen)?;
    let camera = add_noise(&mut rng, &camera_clean, cfg.camera_noise)?;
    let lidar = add_noise(&mut rng, &lidar_clean, cfg.lidar_noise())?;
    Ok((camera, lidar, camera_clean, lidar_clean))
}

pub fn sample_id(scene_seed: u64) -> alloc::string::String {
    format!("scene-{scene_seed:016x}")
}

/// Generates one scene. Identical seeds yield identical scenes and tensors.
pub fn generate_scene(seed: u64, pipeline: &PipelineConfig, cfg: &SceneConfig) -> Result<SyntheticScene> {
    pipeline.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_truth = draw_ground_truth(&mut rng, cfg)?;
    let (camera, lidar, camera_clean, lidar_clean) = render_sensors(seed, &ground_truth, pipeline, cfg)?;
    Ok(SyntheticScene {
        sample: MapSample { sample_id: sample_id(seed), scene_seed: seed, ground_truth },
        camera,
        lidar,
        camera_clean,
        lidar_clean,
    })
}

/// Scene seeds for a dataset: `count` draws from a stream keyed by `seed`,
/// kept below 2^53 so they survive any JSON reader.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64() >> 11).collect()
}

pub fn generate_dataset(seed: u64, count: usize, pipeline: &PipelineConfig, cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    scene_seeds(seed, count).into_iter().map(|s| generate_scene(s, pipeline, cfg)).collect()
}

/// Ground truth resampled to `points` per element, as model targets.
pub fn targets(sample: &MapSample, points: usize) -> Result<Vec<(ElementClass, Vec<Point>)>> {
    sample
        .ground_truth
        .iter()
        .map(|e| Ok((e.class, resample_polyline(&e.points, points)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let (p, s) = (PipelineConfig::default(), SceneConfig::default());
        let a = generate_scene(0, &p, &s).unwrap();
        let b = generate_scene(0, &p, &s).unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.camera, b.camera);
        assert_eq!(a.lidar, b.lidar);
        let c = generate_scene(1, &p, &s).unwrap();
        assert_ne!(a.sample.ground_truth, c.sample.ground_truth);
    }

    #[test]
    fn class_counts_within_bounds() {
        let (p, s) = (PipelineConfig::default(), SceneConfig::default());
        for seed in 0..50 {
            let scene = generate_scene(seed, &p, &s).unwrap();
            for class in ElementClass::ALL {
                let n = scene.sample.ground_truth.iter().filter(|e| e.class == class).count();
                assert!((1..=4).contains(&n), "seed {seed} class {class:?}: {n}");
            }
        }
    }

    #[test]
    fn raster_of_single_vertical_segment() {
        let p = PipelineConfig::default();
        // x = 1.0 lies in column 4 ([0, 3.75)), center 1.875; spans rows 4..=5 fully.
        let seg = vec![(ElementClass::LaneDivider, vec![[1.0, 0.0], [1.0, 15.0]])];
        let r = rasterize(&p, &seg).unwrap();
        let ch = |row: usize, col: usize, j: usize| r.at2(row * p.grid_w + col, ElementClass::LaneDivider.id() * CHANNELS_PER_CLASS + j);
        assert!((ch(4, 4, 0) - 1.0).abs() < 1e-12);
        assert!((ch(4, 4, 1) - (1.0 - 1.875) / 1.875).abs() < 1e-9);
        assert!(ch(4, 4, 2).abs() < 1e-9);
        // Vertical line: theta = 90 degrees, cos 2θ = -1.
        assert!((ch(4, 4, 3) + 1.0).abs() < 1e-9);
        assert_eq!(ch(3, 4, 0), 0.0);
        assert_eq!(ch(4, 3, 0), 0.0);
    }
}
