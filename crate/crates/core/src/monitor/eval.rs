//! Frame-level scoring of detector and reasoner flags against label-derived
//! ground truth.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenegen::{Feature, FeatureVector, Scene};

/// Label ranges and segment ids seen in training; anything outside is OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDomain {
    /// `(min, max)` per continuous feature, declaration order.
    pub ranges: [(f64, f64); 3],
    /// Sorted segment ids.
    pub segments: Vec<u32>,
}

const RANGE_SLACK: f64 = 1e-9;

impl TrainingDomain {
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self> {
        let labels: Vec<&FeatureVector> = scenes.iter().flat_map(|s| &s.labels).collect();
        if labels.is_empty() {
            return Err(Error::EmptyInput("training labels"));
        }
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        let mut segments: Vec<u32> = Vec::new();
        for l in labels {
            for f in Feature::CONTINUOUS {
                let r = &mut ranges[f.index()];
                r.0 = r.0.min(l.get(f));
                r.1 = r.1.max(l.get(f));
            }
            segments.push(l.segment_id);
        }
        segments.sort_unstable();
        segments.dedup();
        Ok(Self { ranges, segments })
    }

    /// Per-feature OOD indicator, indexed by [`Feature::index`].
    pub fn out_of_domain(&self, label: &FeatureVector) -> [bool; 4] {
        let mut out = [false; 4];
        for f in Feature::CONTINUOUS {
            let (lo, hi) = self.ranges[f.index()];
            let v = label.get(f);
            out[f.index()] = v < lo - RANGE_SLACK || v > hi + RANGE_SLACK;
        }
        out[Feature::Segment.index()] = self.segments.binary_search(&label.segment_id).is_err();
        out
    }
}

pub fn ground_truth(labels: &[FeatureVector], domain: &TrainingDomain) -> Vec<[bool; 4]> {
    labels.iter().map(|l| domain.out_of_domain(l)).collect()
}

/// Flags and ground truth of one monitored scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScene {
    pub name: String,
    pub detector: Vec<bool>,
    pub reasoners: Vec<(Feature, Vec<bool>)>,
    pub truth: Vec<[bool; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasonerMetrics {
    pub feature: Feature,
    /// Flagged share of frames where this feature is OOD (1 when there are none).
    pub recall: f64,
    /// Flags raised on frames where this feature is in distribution.
    pub false_flags: usize,
    pub flags: usize,
}

/// Flag counts for one evaluated scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneReport {
    pub name: String,
    /// Features that go out of distribution somewhere in the scene.
    pub ood_features: Vec<Feature>,
    pub detector_flags: usize,
    pub reasoner_flags: Vec<(Feature, usize)>,
}

impl SceneReport {
    /// Attribution verdict for scenes with a single OOD feature.
    ///
    /// When that feature has a reasoner, it must flag and every other reasoner
    /// must stay silent. When it has none (an unseen segment, say), no
    /// reasoner may flag. Scenes with zero or several OOD features give `None`.
    pub fn attribution_correct(&self) -> Option<bool> {
        let [only] = self.ood_features[..] else {
            return None;
        };
        Some(self.reasoner_flags.iter().all(|&(f, count)| (f == only) == (count > 0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Smallest per-feature detector recall over features with OOD frames.
    pub min_sensitivity: f64,
    pub feature_recall: Vec<(Feature, f64)>,
    /// Mean frames from OOD onset to the first detector flag, over detected intervals.
    pub mean_latency: Option<f64>,
    pub missed_intervals: usize,
    pub reasoners: Vec<ReasonerMetrics>,
    pub scenes: Vec<SceneReport>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(scenes: &[EvalScene]) -> Result<Metrics> {
    if scenes.iter().all(|s| s.detector.is_empty()) {
        return Err(Error::EmptyInput("evaluation run"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut feat_hits = [0usize; 4];
    let mut feat_total = [0usize; 4];
    let mut latencies = Vec::new();
    let mut missed = 0;
    let mut reasoners: Vec<ReasonerMetrics> = Vec::new();
    let mut reasoner_hits: Vec<(usize, usize)> = Vec::new();
    let mut reports = Vec::with_capacity(scenes.len());

    for scene in scenes {
        if scene.detector.len() != scene.truth.len() || scene.reasoners.iter().any(|r| r.1.len() != scene.truth.len()) {
            return Err(Error::DimensionMismatch {
                expected: scene.truth.len(),
                actual: scene.detector.len(),
            });
        }
        for (&flag, truth) in scene.detector.iter().zip(&scene.truth) {
            let ood = truth.iter().any(|&t| t);
            match (flag, ood) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
            for f in 0..4 {
                if truth[f] {
                    feat_total[f] += 1;
                    feat_hits[f] += flag as usize;
                }
            }
        }

        let mut t = 0;
        while t < scene.truth.len() {
            if !scene.truth[t].iter().any(|&x| x) {
                t += 1;
                continue;
            }
            let start = t;
            while t < scene.truth.len() && scene.truth[t].iter().any(|&x| x) {
                t += 1;
            }
            match scene.detector[start..t].iter().position(|&f| f) {
                Some(d) => latencies.push(d as f64),
                None => missed += 1,
            }
        }

        reports.push(SceneReport {
            name: scene.name.clone(),
            ood_features: Feature::ALL
                .into_iter()
                .filter(|f| scene.truth.iter().any(|t| t[f.index()]))
                .collect(),
            detector_flags: scene.detector.iter().filter(|&&f| f).count(),
            reasoner_flags: scene
                .reasoners
                .iter()
                .map(|(f, flags)| (*f, flags.iter().filter(|&&x| x).count()))
                .collect(),
        });

        for (feature, flags) in &scene.reasoners {
            let i = match reasoners.iter().position(|r| r.feature == *feature) {
                Some(i) => i,
                None => {
                    reasoners.push(ReasonerMetrics {
                        feature: *feature,
                        recall: 1.0,
                        false_flags: 0,
                        flags: 0,
                    });
                    reasoner_hits.push((0, 0));
                    reasoners.len() - 1
                }
            };
            for (&flag, truth) in flags.iter().zip(&scene.truth) {
                let ood = truth[feature.index()];
                reasoners[i].flags += flag as usize;
                if ood {
                    reasoner_hits[i].1 += 1;
                    reasoner_hits[i].0 += flag as usize;
                } else if flag {
                    reasoners[i].false_flags += 1;
                }
            }
        }
    }
    for (r, &(hits, total)) in reasoners.iter_mut().zip(&reasoner_hits) {
        r.recall = ratio(hits, total);
    }

    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let feature_recall: Vec<(Feature, f64)> = Feature::ALL
        .iter()
        .filter(|f| feat_total[f.index()] > 0)
        .map(|&f| (f, ratio(feat_hits[f.index()], feat_total[f.index()])))
        .collect();
    let min_sensitivity = feature_recall.iter().map(|r| r.1).fold(1.0, f64::min);
    let mean_latency = if latencies.is_empty() {
        None
    } else {
        Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
    };
    Ok(Metrics {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f1,
        min_sensitivity,
        feature_recall,
        mean_latency,
        missed_intervals: missed,
        reasoners,
        scenes: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(pattern: &[bool], feature: Feature) -> Vec<[bool; 4]> {
        pattern
            .iter()
            .map(|&b| {
                let mut t = [false; 4];
                t[feature.index()] = b;
                t
            })
            .collect()
    }

    #[test]
    fn perfect_flags() {
        let pattern = [false, false, true, true, true];
        let m = evaluate(&[EvalScene {
            name: "s".into(),
            detector: pattern.to_vec(),
            reasoners: vec![],
            truth: truth(&pattern, Feature::Brightness),
        }])
        .unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.mean_latency, Some(0.0));
        assert_eq!(m.min_sensitivity, 1.0);
    }

    #[test]
    fn no_flags_on_all_ood() {
        let m = evaluate(&[EvalScene {
            name: "s".into(),
            detector: vec![false; 4],
            reasoners: vec![],
            truth: truth(&[true; 4], Feature::Precipitation),
        }])
        .unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.missed_intervals, 1);
    }

    #[test]
    fn standard_precision_recall_and_sensitivity() {
        // 3 TP, 1 FP, 1 FN
        let scenes = [
            EvalScene {
                name: "b".into(),
                detector: vec![true, false, true, true],
                reasoners: vec![(Feature::Brightness, vec![false, false, true, true])],
                truth: truth(&[false, false, true, true], Feature::Brightness),
            },
            EvalScene {
                name: "p".into(),
                detector: vec![false, true, false],
                reasoners: vec![(Feature::Brightness, vec![false, false, true])],
                truth: truth(&[false, true, true], Feature::Precipitation),
            },
        ];
        let m = evaluate(&scenes).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 1, 1, 2));
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.min_sensitivity, 0.5);
        assert_eq!(m.mean_latency, Some(0.0));
        assert_eq!(m.reasoners[0].recall, 1.0);
        assert_eq!(m.reasoners[0].false_flags, 1);
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn latency_counts_frames_from_onset() {
        let pattern = [false, true, true, true, true];
        let m = evaluate(&[EvalScene {
            name: "s".into(),
            detector: vec![false, false, false, true, true],
            reasoners: vec![],
            truth: truth(&pattern, Feature::Brightness),
        }])
        .unwrap();
        assert_eq!(m.mean_latency, Some(2.0));
    }

    #[test]
    fn attribution_verdicts() {
        let pattern = [false, true, true];
        let scene = |truth_feature, flags: [bool; 2]| EvalScene {
            name: "s".into(),
            detector: vec![true; 3],
            reasoners: vec![
                (Feature::Brightness, vec![false, flags[0], false]),
                (Feature::Precipitation, vec![false, flags[1], false]),
            ],
            truth: truth(&pattern, truth_feature),
        };
        let verdict = |s| evaluate(&[s]).unwrap().scenes[0].attribution_correct();
        assert_eq!(verdict(scene(Feature::Brightness, [true, false])), Some(true));
        assert_eq!(verdict(scene(Feature::Brightness, [true, true])), Some(false));
        assert_eq!(verdict(scene(Feature::Precipitation, [true, false])), Some(false));
        assert_eq!(verdict(scene(Feature::Segment, [false, false])), Some(true));
        assert_eq!(verdict(scene(Feature::Segment, [false, true])), Some(false));
        let mut nominal = scene(Feature::Brightness, [false, false]);
        nominal.truth = truth(&[false; 3], Feature::Brightness);
        assert_eq!(verdict(nominal), None);
    }

    #[test]
    fn domain_marks_each_feature() {
        let d = TrainingDomain {
            ranges: [(0.0, 0.3), (0.0, 0.2), (0.0, 0.0)],
            segments: vec![0, 1],
        };
        let l = FeatureVector {
            brightness: 0.6,
            precipitation: 0.1,
            cloudiness: 0.0,
            segment_id: 3,
        };
        assert_eq!(d.out_of_domain(&l), [true, false, false, true]);
    }
}
