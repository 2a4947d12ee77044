//! Vectorized map elements and polyline geometry.
//!
//! Coordinates are ego-frame meters. Every element is an open polyline;
//! closed shapes such as pedestrian crossings repeat their first point as
//! their last.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Lateral perception half-range (x axis), meters.
pub const RANGE_X: f64 = 15.0;
/// Longitudinal perception half-range (y axis), meters.
pub const RANGE_Y: f64 = 30.0;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementClass {
    PedestrianCrossing = 0,
    LaneDivider = 1,
    RoadBoundary = 2,
}

impl ElementClass {
    pub const ALL: [ElementClass; NUM_CLASSES] =
        [ElementClass::PedestrianCrossing, ElementClass::LaneDivider, ElementClass::RoadBoundary];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown class id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::PedestrianCrossing => "pedestrian_crossing",
            ElementClass::LaneDivider => "lane_divider",
            ElementClass::RoadBoundary => "road_boundary",
        }
    }
}

pub fn in_perception_range(p: Point) -> bool {
    p[0] >= -RANGE_X && p[0] <= RANGE_X && p[1] >= -RANGE_Y && p[1] <= RANGE_Y
}

/// A class-labelled polyline; predictions also carry a confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct MapElement {
    pub class: ElementClass,
    pub points: Vec<Point>,
    pub score: Option<f64>,
}

impl MapElement {
    pub fn new(class: ElementClass, points: Vec<Point>, score: Option<f64>) -> Result<Self> {
        let e = Self { class, points, score };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Validation(format!(
                "{} element has {} points, need at least 2",
                self.class.name(),
                self.points.len()
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Validation(format!("non-finite point {p:?}")));
        }
        if let Some(p) = self.points.iter().find(|&&p| !in_perception_range(p)) {
            return Err(Error::Validation(format!("point {p:?} outside the perception range")));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub sample_id: String,
    pub scene_seed: u64,
    pub ground_truth: Vec<MapElement>,
}

impl MapSample {
    pub fn validate(&self) -> Result<()> {
        for e in &self.ground_truth {
            e.validate()
                .map_err(|err| Error::Validation(format!("sample {}: {err}", self.sample_id)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub sample_id: String,
    pub elements: Vec<MapElement>,
}

fn dist(a: Point, b: Point) -> f64 {
    libm::hypot(b[0] - a[0], b[1] - a[1])
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Resamples `points` to exactly `n` points equally spaced by arc length.
/// The first and last input points are reproduced exactly.
pub fn resample_polyline(points: &[Point], n: usize) -> Result<Vec<Point>> {
    if points.len() < 2 {
        return Err(Error::Geometry(format!("polyline has {} points, need at least 2", points.len())));
    }
    if n < 2 {
        return Err(Error::Geometry(format!("cannot resample to {n} points")));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    cumulative.push(0.0);
    for w in points.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + dist(w[0], w[1]));
    }
    let total = *cumulative.last().unwrap();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Geometry("polyline has zero length".into()));
    }

    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut seg = 0usize;
    for j in 1..n - 1 {
        let target = total * j as f64 / (n - 1) as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
            seg += 1;
        }
        let (s0, s1) = (cumulative[seg], cumulative[seg + 1]);
        let (a, b) = (points[seg], points[seg + 1]);
        let t = if s1 > s0 { ((target - s0) / (s1 - s0)).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out.push(points[points.len() - 1]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_segment() {
        let out = resample_polyline(&[[0.0, 0.0], [0.0, 2.0]], 3).unwrap();
        assert_eq!(out, vec![[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]]);
    }

    #[test]
    fn already_uniform_is_a_fixed_point() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        assert_eq!(resample_polyline(&pts, 4).unwrap(), pts);
    }

    #[test]
    fn zero_length_is_a_geometry_error() {
        let pts = [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(resample_polyline(&pts, 5), Err(Error::Geometry(_))));
        assert!(matches!(resample_polyline(&pts[..1], 5), Err(Error::Geometry(_))));
    }

    #[test]
    fn element_validation() {
        assert!(MapElement::new(ElementClass::LaneDivider, vec![[0.0, 0.0]], None).is_err());
        assert!(MapElement::new(ElementClass::LaneDivider, vec![[0.0, 0.0], [15.1, 0.0]], None).is_err());
        assert!(MapElement::new(ElementClass::LaneDivider, vec![[0.0, 0.0], [1.0, 0.0]], Some(1.2)).is_err());
        assert!(MapElement::new(ElementClass::RoadBoundary, vec![[-15.0, -30.0], [15.0, 30.0]], Some(0.5)).is_ok());
    }

    #[test]
    fn class_ids_round_trip() {
        for c in ElementClass::ALL {
            assert_eq!(ElementClass::from_id(c.id()).unwrap(), c);
        }
        assert!(ElementClass::from_id(3).is_err());
    }
}
