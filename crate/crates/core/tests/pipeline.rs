use mapdistill_core::config::{PipelineConfig, SceneConfig, TrainConfig};
use mapdistill_core::map::{RANGE_X, RANGE_Y};
use mapdistill_core::model::{patchify, unpatchify, Pipeline};
use mapdistill_core::synth::{generate_scene, INPUT_CHANNELS};
use mapdistill_core::train::{student_step, teacher_step, teacher_targets, Dataset};
use mapdistill_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_configs() -> Vec<PipelineConfig> {
    let base = PipelineConfig::default();
    vec![
        base.clone(),
        PipelineConfig { grid_h: 4, grid_w: 6, channels: 4, patch: 2, queries: 7, points: 5, teacher_hidden: 6, student_hidden: 5 },
        PipelineConfig { grid_h: 6, grid_w: 6, channels: 3, patch: 3, queries: 4, points: 3, teacher_hidden: 8, student_hidden: 8 },
    ]
}

#[test]
fn index_grid_patches_hold_their_blocks() {
    let mut tape = Tape::new();
    let f = tape.constant(&Tensor::new(&[16, 1], (0..16).map(f64::from).collect()).unwrap());
    let p = patchify(&mut tape, f, 4, 4, 2).unwrap();
    assert_eq!(tape.shape(p), &[4, 4]);
    // Independent oracle: patch (pr, pc) holds cells r*4 + c for its 2x2 block.
    for pr in 0..2 {
        for pc in 0..2 {
            let mut want: Vec<f64> = Vec::new();
            for r in 2 * pr..2 * pr + 2 {
                for c in 2 * pc..2 * pc + 2 {
                    want.push((r * 4 + c) as f64);
                }
            }
            let row = &tape.value(p)[(pr * 2 + pc) * 4..(pr * 2 + pc + 1) * 4];
            assert_eq!(row, want.as_slice());
        }
    }
}

proptest! {
    #[test]
    fn unpatchify_inverts_patchify(seed in any::<u64>(), ph in 1usize..4, pw in 1usize..4, p in 1usize..4, c in 1usize..5) {
        let (h, w) = (ph * p, pw * p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::new(&[h * w, c], (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(&t);
        let x = patchify(&mut tape, f, h, w, p).unwrap();
        prop_assert_eq!(tape.shape(x), &[ph * pw, p * p * c][..]);
        let back = unpatchify(&mut tape, x, h, w, p).unwrap();
        prop_assert_eq!(tape.tensor(back), t);
    }
}

#[test]
fn scenes_are_deterministic_and_within_range() {
    let (p, s) = (PipelineConfig::default(), SceneConfig::default());
    let a = generate_scene(0, &p, &s).unwrap();
    let b = generate_scene(0, &p, &s).unwrap();
    assert_eq!(a.sample, b.sample);
    assert_eq!((a.camera, a.lidar), (b.camera, b.lidar));
    for seed in 0..1000 {
        let sc = generate_scene(seed, &p, &s).unwrap();
        for e in &sc.sample.ground_truth {
            assert!(e.points.iter().all(|q| q[0].abs() <= RANGE_X && q[1].abs() <= RANGE_Y), "seed {seed}");
        }
        let per_class = |c| sc.sample.ground_truth.iter().filter(|e| e.class == c).count();
        for c in mapdistill_core::map::ElementClass::ALL {
            assert!((s.min_per_class..=s.max_per_class).contains(&per_class(c)));
        }
    }
}

#[test]
fn camera_noise_exceeds_lidar_noise_by_the_ratio() {
    let (p, s) = (PipelineConfig::default(), SceneConfig::default());
    let (mut cam, mut lid, mut n) = (0.0, 0.0, 0.0);
    for seed in 0..1000 {
        let sc = generate_scene(seed, &p, &s).unwrap();
        for (x, c) in sc.camera.data().iter().zip(sc.camera_clean.data()) {
            cam += (x - c).powi(2);
        }
        for (x, c) in sc.lidar.data().iter().zip(sc.lidar_clean.data()) {
            lid += (x - c).powi(2);
        }
        n += sc.camera.numel() as f64;
    }
    let ratio = (cam / n).sqrt() / (lid / n).sqrt();
    assert!((ratio / s.noise_ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    assert!(((cam / n).sqrt() / s.camera_noise - 1.0).abs() < 0.01);
}

#[test]
fn subspaces_are_not_copies_of_each_other() {
    let cfg = PipelineConfig::default();
    let pl = Pipeline::new(cfg.clone()).unwrap();
    let mut worst: f64 = -1.0;
    for seed in 0..100 {
        let params = pl.init_student(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let input = Tensor::new(&[cfg.cells(), INPUT_CHANNELS], (0..cfg.cells() * INPUT_CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(&input);
        let (a, b) = pl.dual_bev_transform(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(a), &[cfg.cells(), cfg.channels]);
        assert_eq!(tape.shape(a), tape.shape(b));
        worst = worst.max(pearson(tape.value(a), tape.value(b)).abs());
    }
    assert!(worst < 0.99, "max |correlation| {worst}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn teacher_and_student_output_shapes_agree() {
    for cfg in small_configs() {
        let pl = Pipeline::new(cfg.clone()).unwrap();
        let scene = generate_scene(3, &cfg, &SceneConfig::default()).unwrap();
        let mut tape = Tape::new();
        let tp = pl.init_teacher(1).bind(&mut tape, false);
        let sp = pl.init_student(1).bind(&mut tape, false);
        let cam = tape.constant(&scene.camera);
        let lid = tape.constant(&scene.lidar);
        let t = pl.teacher_forward(&mut tape, &tp, cam, lid).unwrap();
        let s = pl.student_forward(&mut tape, &sp, cam).unwrap();
        for (a, b) in [(t.fused, s.fused), (t.high, s.high), (t.cls, s.cls), (t.points, s.points), (t.c_bev, s.sub1), (t.l_bev, s.sub2)] {
            assert_eq!(tape.shape(a), tape.shape(b));
        }
        assert_eq!(tape.shape(t.cls), &[cfg.queries, 3]);
        assert_eq!(tape.shape(t.points), &[cfg.queries, cfg.points, 2]);
        let patches = pl.patchify(&mut tape, s.sub1).unwrap();
        assert_eq!(tape.shape(patches), &[cfg.num_patches(), cfg.d_k()]);
    }
}

#[test]
fn forwards_are_bit_identical_across_runs() {
    let cfg = PipelineConfig::default();
    let pl = Pipeline::new(cfg.clone()).unwrap();
    let scene = generate_scene(9, &cfg, &SceneConfig::default()).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let tp = pl.init_teacher(4).bind(&mut tape, false);
        let sp = pl.init_student(4).bind(&mut tape, false);
        let cam = tape.constant(&scene.camera);
        let lid = tape.constant(&scene.lidar);
        let t = pl.teacher_forward(&mut tape, &tp, cam, lid).unwrap();
        let s = pl.student_forward(&mut tape, &sp, cam).unwrap();
        [t.cls, t.points, s.cls, s.points, s.high].map(|v| tape.tensor(v))
    };
    assert_eq!(run(), run());
}

#[test]
fn every_parameter_receives_gradient_at_init() {
    let cfg = TrainConfig { train_scenes: 4, ..TrainConfig::default() };
    let pl = Pipeline::new(cfg.pipeline.clone()).unwrap();
    let data = Dataset::generate(77, 4, &cfg).unwrap();
    let teacher = pl.init_teacher(5);
    let student = pl.init_student(5);
    let cache = teacher_targets(&pl, &teacher, &data, &cfg).unwrap();

    let mut t_live = vec![false; teacher.len()];
    let mut s_live = vec![false; student.len()];
    for (i, (scene, gt)) in data.scenes.iter().zip(&data.targets).enumerate() {
        let mut tape = Tape::new();
        let p = teacher.bind(&mut tape, true);
        let (loss, _) = teacher_step(&mut tape, &pl, &p, scene, gt, &cfg).unwrap();
        let g = tape.backward(loss).unwrap();
        for (live, &v) in t_live.iter_mut().zip(p.vars()) {
            *live |= g.get(v).data().iter().any(|&x| x != 0.0);
        }

        let mut tape = Tape::new();
        let p = student.bind(&mut tape, true);
        let (loss, _) = student_step(&mut tape, &pl, &p, scene, gt, &cache[i], cfg.effective_weights(), &cfg).unwrap();
        let g = tape.backward(loss).unwrap();
        for (live, &v) in s_live.iter_mut().zip(p.vars()) {
            *live |= g.get(v).data().iter().any(|&x| x != 0.0);
        }
    }
    let dead = |names: Vec<String>, live: &[bool]| names.into_iter().zip(live).filter(|(_, &l)| !l).map(|(n, _)| n).collect::<Vec<_>>();
    assert!(t_live.iter().all(|&l| l), "teacher: {:?}", dead(teacher.names(), &t_live));
    assert!(s_live.iter().all(|&l| l), "student: {:?}", dead(student.names(), &s_live));
}
