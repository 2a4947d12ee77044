use std::path::Path;

use mapdistill::checkpoint;
use mapdistill::core::config::{PipelineConfig, SceneConfig};
use mapdistill::core::map::{ElementClass, MapElement, MapSample, PredictionSet};
use mapdistill::core::model::Pipeline;
use mapdistill::core::synth::generate_dataset;
use mapdistill::dataset::{
    dataset_text, load_dataset, load_predictions, parse_dataset, parse_predictions, save_dataset, save_predictions,
};
use mapdistill::runner::load_config;
use mapdistill::CliError;
use mapdistill::core::Error as CoreError;
use proptest::prelude::*;

fn p() -> &'static Path {
    Path::new("test.jsonl")
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(load_dataset(&path).unwrap().is_empty());
    save_dataset(&path, &[]).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"");
}

#[test]
fn single_divider_round_trips() {
    let s = MapSample {
        sample_id: "one".into(),
        scene_seed: 7,
        ground_truth: vec![MapElement::new(ElementClass::LaneDivider, vec![[0.1, -2.5], [1.0 / 3.0, 29.0]], None).unwrap()],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a/b/one.jsonl");
    save_dataset(&path, std::slice::from_ref(&s)).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), vec![s]);
}

#[test]
fn synthetic_samples_round_trip_hash_equal() {
    let scenes = generate_dataset(5, 100, &PipelineConfig::default(), &SceneConfig::default()).unwrap();
    let samples: Vec<MapSample> = scenes.into_iter().map(|s| s.sample).collect();
    let text = dataset_text(&samples);
    let back = parse_dataset(&text, p()).unwrap();
    assert_eq!(back, samples);
    assert_eq!(dataset_text(&back), text);
}

proptest! {
    #[test]
    fn predictions_round_trip_exactly(
        xs in prop::collection::vec((0usize..3, prop::collection::vec((-15.0..15.0f64, -30.0..30.0f64), 2..6), 0.0..=1.0f64), 0..5),
    ) {
        let elements = xs
            .into_iter()
            .map(|(c, pts, s)| MapElement::new(ElementClass::from_id(c).unwrap(), pts.into_iter().map(|(x, y)| [x, y]).collect(), Some(s)).unwrap())
            .collect();
        let preds = vec![PredictionSet { sample_id: "s".into(), elements }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_predictions(&path, &preds).unwrap();
        prop_assert_eq!(load_predictions(&path).unwrap(), preds);
    }
}

fn parse_line_of(err: CliError) -> usize {
    match err {
        CliError::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_records_report_their_line() {
    let good = r#"{"sample_id":"a","scene_seed":1,"elements":[]}"#;
    let text = format!("{good}\n\n{{\"sample_id\":\"b\",\"scene_seed\":2,\"elements\":[\n");
    assert_eq!(parse_line_of(parse_dataset(&text, p()).unwrap_err()), 3);
    let unknown = format!("{good}\n{{\"sample_id\":\"b\",\"scene_seed\":2,\"elements\":[],\"extra\":1}}\n");
    assert_eq!(parse_line_of(parse_dataset(&unknown, p()).unwrap_err()), 2);
    let no_seed = r#"{"sample_id":"a","elements":[]}"#;
    assert_eq!(parse_line_of(parse_dataset(no_seed, p()).unwrap_err()), 1);
    let bad_class = r#"{"sample_id":"a","scene_seed":1,"elements":[{"class_id":3,"points":[[0,0],[1,1]]}]}"#;
    assert!(parse_dataset(bad_class, p()).is_err());
}

#[test]
fn invalid_content_is_rejected() {
    let dup = "{\"sample_id\":\"a\",\"scene_seed\":1,\"elements\":[]}\n{\"sample_id\":\"a\",\"scene_seed\":2,\"elements\":[]}\n";
    assert!(matches!(parse_dataset(dup, p()), Err(CliError::Core(CoreError::Validation(_))) | Err(CliError::Parse { .. })));
    let scored_gt = r#"{"sample_id":"a","scene_seed":1,"elements":[{"class_id":0,"points":[[0,0],[1,1]],"score":0.5}]}"#;
    assert!(parse_dataset(scored_gt, p()).is_err());
    let unscored = r#"{"sample_id":"a","elements":[{"class_id":0,"points":[[0,0],[1,1]]}]}"#;
    assert!(parse_predictions(unscored, p()).is_err());
    let outside = r#"{"sample_id":"a","scene_seed":1,"elements":[{"class_id":0,"points":[[0,0],[16,1]]}]}"#;
    assert!(parse_dataset(outside, p()).is_err());
    let missing = Path::new("/nonexistent/dir/file.jsonl");
    assert_eq!(load_dataset(missing).unwrap_err().exit_code(), 3);
}

#[test]
fn checkpoints_round_trip_and_detect_damage() {
    let pl = Pipeline::new(PipelineConfig::default()).unwrap();
    let params = pl.init_teacher(3);
    let bytes = checkpoint::encode(&params);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.digest(), params.digest());
    assert_eq!(back.names(), params.names());

    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(checkpoint::decode(&magic).is_err());

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), "teacher", "abc", &params).unwrap();
    assert_eq!(checkpoint::load(dir.path(), "teacher").unwrap().digest(), params.digest());
    assert!(checkpoint::load(dir.path(), "student").is_err());
    let manifest = std::fs::read_to_string(dir.path().join(checkpoint::MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("param head.key = 16x12"));

    let mut flipped = bytes;
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    std::fs::write(dir.path().join(checkpoint::PARAMS_FILE), flipped).unwrap();
    assert!(checkpoint::load(dir.path(), "teacher").is_err());
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# comment\nepochs = 3\nlr0 = fast\n").unwrap();
    let msg = load_config(Some(&path), &[], None).unwrap_err().to_string();
    assert!(msg.contains("line 3") && msg.contains("lr0"), "{msg}");

    std::fs::write(&path, "epochs = 3\nno_such_key = 1\n").unwrap();
    let msg = load_config(Some(&path), &[], None).unwrap_err().to_string();
    assert!(msg.contains("line 2") && msg.contains("no_such_key"), "{msg}");

    let err = load_config(None, &["lambda_head=-1".into()], None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = load_config(None, &["epochs".into()], None).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));

    std::fs::write(&path, "epochs = 3\n").unwrap();
    let cfg = load_config(Some(&path), &["epochs=5".into(), "lr0 = 0.02".into()], Some(9)).unwrap();
    assert_eq!((cfg.epochs, cfg.lr0, cfg.seed), (5, 0.02, 9));
}
