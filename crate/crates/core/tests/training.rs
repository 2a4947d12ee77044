use mapdistill_core::config::{DistillWeights, TrainConfig};
use mapdistill_core::model::Pipeline;
use mapdistill_core::train::{distill_student, student_step, teacher_targets, train_teacher, Dataset, ABLATION_ROWS};
use mapdistill_core::Tape;

fn small() -> TrainConfig {
    TrainConfig { train_scenes: 12, eval_scenes: 4, epochs: 6, teacher_epochs: 6, batch: 4, ..TrainConfig::default() }
}

fn splits(cfg: &TrainConfig) -> (Pipeline, Dataset, Dataset) {
    let pl = Pipeline::new(cfg.pipeline.clone()).unwrap();
    let train = Dataset::generate(cfg.data_seed, cfg.train_scenes, cfg).unwrap();
    let eval = Dataset::generate(cfg.data_seed + 1, cfg.eval_scenes, cfg).unwrap();
    (pl, train, eval)
}

#[test]
fn teacher_loss_decreases_and_lr_steps_down() {
    let cfg = small();
    let (pl, train, eval) = splits(&cfg);
    let (_, run) = train_teacher(&cfg, &pl, &train, &eval).unwrap();
    let first = run.epochs.first().unwrap().losses.total;
    let last = run.epochs.last().unwrap().losses.total;
    assert!(last < first, "{first} -> {last}");
    assert!(run.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert_eq!(run.epochs[0].lr, cfg.teacher_lr0);
    assert!((run.epochs[4].lr - cfg.teacher_lr0 * cfg.decay_factor).abs() < 1e-18);
    assert_eq!(run.epochs[3].lr, cfg.teacher_lr0);
    assert_eq!(run.evals.len(), 1);
}

#[test]
fn distillation_leaves_the_teacher_untouched_and_is_repeatable() {
    let cfg = TrainConfig { epochs: 3, ..small() };
    let (pl, train, eval) = splits(&cfg);
    let (teacher, _) = train_teacher(&TrainConfig { teacher_epochs: 2, ..cfg.clone() }, &pl, &train, &eval).unwrap();
    let before = teacher.digest();
    let (student_a, run_a) = distill_student(&cfg, &pl, &teacher, None, &train, &eval).unwrap();
    assert_eq!(teacher.digest(), before);
    let cache = teacher_targets(&pl, &teacher, &train, &cfg).unwrap();
    let (student_b, run_b) = distill_student(&cfg, &pl, &teacher, Some(&cache), &train, &eval).unwrap();
    assert_eq!(student_a.digest(), student_b.digest());
    assert_eq!(run_a.digest(), run_b.digest());
    assert_eq!(run_a, run_b);
    let short = &cache[..cache.len() - 1];
    assert!(distill_student(&cfg, &pl, &teacher, Some(short), &train, &eval).is_err());
}

#[test]
fn doubling_lambdas_doubles_the_distillation_part() {
    let cfg = small();
    let (pl, train, _) = splits(&cfg);
    let teacher = pl.init_teacher(2);
    let student = pl.init_student(3);
    let cache = teacher_targets(&pl, &teacher, &train, &cfg).unwrap();
    let step = |i: usize, w: DistillWeights| {
        let mut tape = Tape::new();
        let p = student.bind(&mut tape, true);
        student_step(&mut tape, &pl, &p, &train.scenes[i], &train.targets[i], &cache[i], w, &cfg).unwrap().1
    };
    let double = DistillWeights { relation: 0.6, feature: 1.2, head: 1.8 };
    for i in 0..train.len() {
        let one = step(i, DistillWeights::DEFAULT);
        let two = step(i, double);
        let zero = step(i, DistillWeights::NONE);
        assert_eq!(one.l_map, two.l_map);
        assert!(((two.total - two.l_map) - 2.0 * (one.total - one.l_map)).abs() < 1e-12 * (1.0 + one.total));
        let want = one.l_map + 0.3 * one.l_relation + 0.6 * one.l_feature + 0.9 * one.l_head;
        assert!((one.total - want).abs() < 1e-12);
        assert_eq!(zero.total, zero.l_map);
    }
}

#[test]
fn ablation_switches_zero_their_weights() {
    let cfg = small();
    for row in ABLATION_ROWS {
        let w = row.apply(&cfg).effective_weights();
        assert_eq!(w.relation != 0.0, row.relation, "{}", row.name);
        assert_eq!(w.feature != 0.0, row.feature, "{}", row.name);
        assert_eq!(w.head != 0.0, row.head, "{}", row.name);
    }
}
