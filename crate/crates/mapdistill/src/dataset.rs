//! Line-delimited JSON files of map samples and prediction sets.
//!
//! One record per line:
//! `{"sample_id": "...", "scene_seed": 7, "elements": [{"class_id": 1, "points": [[x, y], ...], "score": 0.9}]}`.
//! Prediction files use the same schema with `scene_seed` omitted and a
//! score on every element. Reals are written with 17 significant digits so
//! a save/load round trip is exact.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mapdistill_core::map::{ElementClass, MapElement, MapSample, PredictionSet};
use mapdistill_core::Error as CoreError;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    sample_id: String,
    #[serde(default)]
    scene_seed: Option<u64>,
    elements: Vec<ElementIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementIn {
    class_id: usize,
    points: Vec<[f64; 2]>,
    #[serde(default)]
    score: Option<f64>,
}

/// A real with 17 significant digits, as a JSON number.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_elements(out: &mut String, elements: &[MapElement]) {
    out.push_str("\"elements\":[");
    for (i, e) in elements.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"class_id\":{},\"points\":[", e.class.id());
        for (j, p) in e.points.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "[{},{}]", format_real(p[0]), format_real(p[1]));
        }
        out.push(']');
        if let Some(s) = e.score {
            let _ = write!(out, ",\"score\":{}", format_real(s));
        }
        out.push('}');
    }
    out.push(']');
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub fn sample_line(s: &MapSample) -> String {
    let mut out = format!("{{\"sample_id\":{},\"scene_seed\":{},", quoted(&s.sample_id), s.scene_seed);
    push_elements(&mut out, &s.ground_truth);
    out.push('}');
    out
}

pub fn prediction_line(p: &PredictionSet) -> String {
    let mut out = format!("{{\"sample_id\":{},", quoted(&p.sample_id));
    push_elements(&mut out, &p.elements);
    out.push('}');
    out
}

fn join_lines(lines: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn dataset_text(samples: &[MapSample]) -> String {
    join_lines(samples.iter().map(sample_line))
}

pub fn predictions_text(preds: &[PredictionSet]) -> String {
    join_lines(preds.iter().map(prediction_line))
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<(usize, RecordIn)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(line).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(CoreError::Validation(format!("sample {}: duplicate sample_id (line {})", rec.sample_id, i + 1)).into());
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn convert_elements(sample_id: &str, line: usize, path: &Path, elements: Vec<ElementIn>) -> Result<Vec<MapElement>> {
    elements
        .into_iter()
        .map(|e| {
            let class = ElementClass::from_id(e.class_id).map_err(|err| CliError::Parse {
                path: path.to_path_buf(),
                line,
                message: err.to_string(),
            })?;
            let points = e.points.into_iter().collect();
            MapElement::new(class, points, e.score)
                .map_err(|err| CoreError::Validation(format!("sample {sample_id}: {err}")).into())
        })
        .collect()
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<MapSample>> {
    parse_records(text, path)?
        .into_iter()
        .map(|(line, r)| {
            let scene_seed = r.scene_seed.ok_or_else(|| CliError::Parse {
                path: path.to_path_buf(),
                line,
                message: "missing field `scene_seed`".into(),
            })?;
            let ground_truth = convert_elements(&r.sample_id, line, path, r.elements)?;
            if ground_truth.iter().any(|e| e.score.is_some()) {
                return Err(CoreError::Validation(format!("sample {}: ground-truth elements carry no score", r.sample_id)).into());
            }
            Ok(MapSample { sample_id: r.sample_id, scene_seed, ground_truth })
        })
        .collect()
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionSet>> {
    parse_records(text, path)?
        .into_iter()
        .map(|(line, r)| {
            let elements = convert_elements(&r.sample_id, line, path, r.elements)?;
            if elements.iter().any(|e| e.score.is_none()) {
                return Err(CoreError::Validation(format!("sample {}: prediction without a score", r.sample_id)).into());
            }
            Ok(PredictionSet { sample_id: r.sample_id, elements })
        })
        .collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<MapSample>> {
    parse_dataset(&read_text(path)?, path)
}

pub fn save_dataset(path: &Path, samples: &[MapSample]) -> Result<()> {
    write_text(path, &dataset_text(samples))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    parse_predictions(&read_text(path)?, path)
}

pub fn save_predictions(path: &Path, preds: &[PredictionSet]) -> Result<()> {
    write_text(path, &predictions_text(preds))
}
