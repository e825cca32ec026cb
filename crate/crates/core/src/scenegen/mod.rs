//! Procedural multi-feature scene generation.
//!
//! A scene is a time series of grayscale frames rendered from a per-frame
//! [`FeatureVector`]. Feature values come from small value programs declared
//! in a line-oriented scene description format (see [`parse_spec`]).

mod render;
mod sdl;

pub use render::{render_frame, speckle_mask, Renderer, DEFAULT_HEIGHT, DEFAULT_WIDTH, PATTERN_COUNT};
pub use sdl::parse_spec;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Generative features, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Brightness,
    Precipitation,
    Cloudiness,
    #[serde(rename = "segment_id")]
    Segment,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature::Brightness,
        Feature::Precipitation,
        Feature::Cloudiness,
        Feature::Segment,
    ];

    /// Continuous features, i.e. everything except the categorical segment id.
    pub const CONTINUOUS: [Feature; 3] = [Feature::Brightness, Feature::Precipitation, Feature::Cloudiness];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Brightness => "brightness",
            Feature::Precipitation => "precipitation",
            Feature::Cloudiness => "cloudiness",
            Feature::Segment => "segment_id",
        }
    }

    pub fn from_name(s: &str) -> Option<Feature> {
        match s {
            "brightness" => Some(Feature::Brightness),
            "precipitation" => Some(Feature::Precipitation),
            "cloudiness" => Some(Feature::Cloudiness),
            "segment" | "segment_id" => Some(Feature::Segment),
            _ => None,
        }
    }

    pub fn is_continuous(self) -> bool {
        self != Feature::Segment
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labeled generative-feature values for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub brightness: f64,
    pub precipitation: f64,
    pub cloudiness: f64,
    pub segment_id: u32,
}

impl Default for FeatureVector {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            precipitation: 0.0,
            cloudiness: 0.0,
            segment_id: 0,
        }
    }
}

impl FeatureVector {
    pub fn get(&self, feature: Feature) -> f64 {
        match feature {
            Feature::Brightness => self.brightness,
            Feature::Precipitation => self.precipitation,
            Feature::Cloudiness => self.cloudiness,
            Feature::Segment => self.segment_id as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for feature in Feature::CONTINUOUS {
            let value = self.get(feature);
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Domain {
                    feature: feature.name().to_string(),
                    value,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        if self.segment_id >= PATTERN_COUNT {
            return Err(Error::UnknownSegment {
                id: self.segment_id,
                registered: PATTERN_COUNT,
            });
        }
        Ok(())
    }
}

/// A rendered grayscale frame with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format("frame", format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Per-feature value program evaluated at each frame index.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueProgram {
    Const(f64),
    /// Uniform draw per frame, quantized to percent resolution.
    Range {
        lo: f64,
        hi: f64,
    },
    /// `before` for indices `< at`, `after` from `at` on.
    Step {
        at: usize,
        before: f64,
        after: f64,
    },
    /// Linear interpolation from `start` (first frame) to `end` (last frame).
    Ramp {
        start: f64,
        end: f64,
    },
}

/// One parsed scene block.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub frame_count: usize,
    /// Programs in feature declaration order.
    pub programs: [ValueProgram; 4],
}

impl SceneSpec {
    pub fn constant(name: impl Into<String>, frame_count: usize, fv: FeatureVector) -> Self {
        Self {
            name: name.into(),
            frame_count,
            programs: [
                ValueProgram::Const(fv.brightness),
                ValueProgram::Const(fv.precipitation),
                ValueProgram::Const(fv.cloudiness),
                ValueProgram::Const(fv.segment_id as f64),
            ],
        }
    }

    pub fn program(&self, feature: Feature) -> &ValueProgram {
        &self.programs[feature.index()]
    }

    pub fn with_program(mut self, feature: Feature, program: ValueProgram) -> Self {
        self.programs[feature.index()] = program;
        self
    }

    /// Feature values at frame `index`, drawn from the stream keyed by `seed`.
    pub fn labels_at(&self, index: usize, seed: u64) -> FeatureVector {
        let eval = |feature: Feature| -> f64 {
            let program = self.program(feature);
            match *program {
                ValueProgram::Const(v) => v,
                ValueProgram::Range { lo, hi } => {
                    let u = rng::unit_hash(seed, ((feature.index() as u64) << 40) | index as u64);
                    if feature.is_continuous() {
                        quantize_percent(lo + u * (hi - lo))
                    } else {
                        // integer uniform over [lo, hi]
                        let span = (hi - lo).round() as u64 + 1;
                        lo + ((u * span as f64).floor() as u64).min(span - 1) as f64
                    }
                }
                ValueProgram::Step { at, before, after } => {
                    if index < at {
                        before
                    } else {
                        after
                    }
                }
                ValueProgram::Ramp { start, end } => {
                    let t = if self.frame_count > 1 {
                        index as f64 / (self.frame_count - 1) as f64
                    } else {
                        0.0
                    };
                    let v = start + (end - start) * t;
                    if feature.is_continuous() {
                        quantize_percent(v)
                    } else {
                        v.round()
                    }
                }
            }
        };
        FeatureVector {
            brightness: eval(Feature::Brightness),
            precipitation: eval(Feature::Precipitation),
            cloudiness: eval(Feature::Cloudiness),
            segment_id: eval(Feature::Segment) as u32,
        }
    }
}

fn quantize_percent(v: f64) -> f64 {
    ((v * 100.0).round() / 100.0).clamp(0.0, 1.0)
}

/// A generated scene: frames with their exact labels, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<Frame>,
    pub labels: Vec<FeatureVector>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Feature values of every frame, in order.
    pub fn feature_values(&self, feature: Feature) -> Vec<f64> {
        self.labels.iter().map(|l| l.get(feature)).collect()
    }
}

/// Renders every frame of `spec`. Labels and speckle noise are keyed by
/// `(seed, scene name, frame index)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    generate_scene_with(&Renderer::default(), spec, seed)
}

pub fn generate_scene_with(renderer: &Renderer, spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let scene_seed = rng::derive_seed(seed, &[rng::hash_str(&spec.name)]);
    let label_seed = rng::derive_seed(scene_seed, &[1]);
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut labels = Vec::with_capacity(spec.frame_count);
    for i in 0..spec.frame_count {
        let fv = spec.labels_at(i, label_seed);
        let frame_seed = rng::derive_seed(scene_seed, &[2, i as u64]);
        frames.push(renderer.render(&fv, frame_seed)?);
        labels.push(fv);
    }
    Ok(Scene {
        name: spec.name.clone(),
        frames,
        labels,
    })
}

/// Location of one frame inside a scene list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameRef {
    pub scene: usize,
    pub frame: usize,
}

/// Frame-level split into a proper training set and a calibration set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<FrameRef>,
    pub calibration: Vec<FrameRef>,
}

impl Split {
    pub fn train_frames<'a>(&self, scenes: &'a [Scene]) -> Vec<&'a Frame> {
        self.train.iter().map(|r| &scenes[r.scene].frames[r.frame]).collect()
    }

    pub fn calibration_frames<'a>(&self, scenes: &'a [Scene]) -> Vec<&'a Frame> {
        self.calibration
            .iter()
            .map(|r| &scenes[r.scene].frames[r.frame])
            .collect()
    }

    /// Scenes restricted to their training frames, preserving time order.
    pub fn train_scenes(&self, scenes: &[Scene]) -> Vec<Scene> {
        let mut out: Vec<Scene> = scenes
            .iter()
            .map(|s| Scene {
                name: s.name.clone(),
                frames: Vec::new(),
                labels: Vec::new(),
            })
            .collect();
        for r in &self.train {
            out[r.scene].frames.push(scenes[r.scene].frames[r.frame].clone());
            out[r.scene].labels.push(scenes[r.scene].labels[r.frame]);
        }
        out
    }
}

/// Splits frames into proper-train and calibration sets.
///
/// The train total is `round(total * ratio)`, allotted to scenes by largest
/// remainder so every scene keeps its proportion. Within a scene the frames
/// are chosen uniformly at random from the stream keyed by `seed`.
pub fn split_dataset(scenes: &[Scene], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let total: usize = scenes.iter().map(Scene::len).sum();
    if total == 0 {
        return Err(Error::EmptyInput("split_dataset"));
    }
    if total < 3 {
        return Err(Error::InvalidParameter(format!(
            "split needs at least 3 frames, got {total}"
        )));
    }
    let target = (total as f64 * ratio).round() as usize;
    let exact: Vec<f64> = scenes.iter().map(|s| s.len() as f64 * ratio).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = target.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(scenes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[i] < scenes[i].len() {
            quota[i] += 1;
            remaining -= 1;
        }
    }

    let mut split = Split {
        train: Vec::with_capacity(target),
        calibration: Vec::with_capacity(total - target),
    };
    for (si, scene) in scenes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..scene.len()).collect();
        let mut r = rng::stream(seed, &[rng::hash_str(&scene.name)]);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
        let (train, calib) = idx.split_at(quota[si]);
        let mut train = train.to_vec();
        let mut calib = calib.to_vec();
        train.sort_unstable();
        calib.sort_unstable();
        split
            .train
            .extend(train.into_iter().map(|frame| FrameRef { scene: si, frame }));
        split
            .calibration
            .extend(calib.into_iter().map(|frame| FrameRef { scene: si, frame }));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_scene(name: &str, frames: usize) -> Scene {
        let spec = SceneSpec::constant(name, frames, FeatureVector::default());
        generate_scene(&spec, 3).unwrap()
    }

    #[test]
    fn step_semantics() {
        let spec = SceneSpec::constant("s", 20, FeatureVector::default()).with_program(
            Feature::Brightness,
            ValueProgram::Step {
                at: 10,
                before: 0.2,
                after: 0.6,
            },
        );
        let scene = generate_scene(&spec, 1).unwrap();
        assert_eq!(scene.labels[9].brightness, 0.2);
        assert_eq!(scene.labels[10].brightness, 0.6);
    }

    #[test]
    fn constant_programs_give_identical_labels() {
        let fv = FeatureVector {
            brightness: 0.3,
            precipitation: 0.1,
            cloudiness: 0.25,
            segment_id: 1,
        };
        let scene = generate_scene(&SceneSpec::constant("c", 12, fv), 5).unwrap();
        assert!(scene.labels.iter().all(|l| *l == fv));
    }

    #[test]
    fn range_program_is_reproducible() {
        let spec = SceneSpec::constant("r", 40, FeatureVector::default())
            .with_program(Feature::Precipitation, ValueProgram::Range { lo: 0.1, hi: 0.4 });
        let a = generate_scene(&spec, 11).unwrap();
        let b = generate_scene(&spec, 11).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|l| (0.1..=0.4).contains(&l.precipitation)));
        let distinct: HashSet<u64> = a.labels.iter().map(|l| l.precipitation.to_bits()).collect();
        assert!(distinct.len() > 5);
    }

    #[test]
    fn ramp_endpoints() {
        let spec = SceneSpec::constant("r", 11, FeatureVector::default())
            .with_program(Feature::Cloudiness, ValueProgram::Ramp { start: 0.0, end: 0.5 });
        let scene = generate_scene(&spec, 0).unwrap();
        assert_eq!(scene.labels[0].cloudiness, 0.0);
        assert_eq!(scene.labels[10].cloudiness, 0.5);
        assert_eq!(scene.labels[5].cloudiness, 0.25);
    }

    #[test]
    fn split_6000_frames_two_thirds() {
        let scenes: Vec<Scene> = (0..8).map(|i| tiny_scene(&format!("s{i}"), 750)).collect();
        let split = split_dataset(&scenes, 2.0 / 3.0, 4).unwrap();
        assert_eq!(split.train.len(), 4000);
        assert_eq!(split.calibration.len(), 2000);
    }

    #[test]
    fn split_smallest_case() {
        let scenes = vec![tiny_scene("a", 3)];
        let split = split_dataset(&scenes, 2.0 / 3.0, 0).unwrap();
        assert_eq!((split.train.len(), split.calibration.len()), (2, 1));
    }

    #[test]
    fn split_is_a_partition() {
        let scenes = vec![tiny_scene("a", 7), tiny_scene("b", 13), tiny_scene("c", 4)];
        let split = split_dataset(&scenes, 0.6, 9).unwrap();
        let train: HashSet<_> = split.train.iter().copied().collect();
        let calib: HashSet<_> = split.calibration.iter().copied().collect();
        assert!(train.is_disjoint(&calib));
        assert_eq!(train.len() + calib.len(), 24);
        for (si, s) in scenes.iter().enumerate() {
            for f in 0..s.len() {
                let r = FrameRef { scene: si, frame: f };
                assert!(train.contains(&r) ^ calib.contains(&r));
            }
        }
    }

    #[test]
    fn split_rejects_empty_and_bad_ratio() {
        assert!(matches!(split_dataset(&[], 0.5, 0), Err(Error::EmptyInput(_))));
        let scenes = vec![tiny_scene("a", 5)];
        assert!(split_dataset(&scenes, 1.0, 0).is_err());
        assert!(split_dataset(&scenes, 0.0, 0).is_err());
    }
}
