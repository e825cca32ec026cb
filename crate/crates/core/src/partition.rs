//! Groups labelled scenes by the feature that varies most within them.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{Feature, Scene};

/// Min-max scaled continuous labels over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabels {
    /// `(min, max)` of each continuous feature, in declaration order.
    pub ranges: [(f64, f64); 3],
    /// Features with a single value across the dataset; they normalize to 0.
    pub constant: [bool; 3],
    /// Per scene (input order), per frame, normalized continuous values.
    pub rows: Vec<Vec<[f64; 3]>>,
}

impl NormalizedLabels {
    pub fn scale(&self, feature: Feature, value: f64) -> f64 {
        let i = feature.index();
        let (lo, hi) = self.ranges[i];
        if self.constant[i] {
            0.0
        } else {
            (value - lo) / (hi - lo)
        }
    }

    /// Normalized values of one feature over one scene.
    pub fn column(&self, scene: usize, feature: Feature) -> Vec<f64> {
        self.rows[scene].iter().map(|r| r[feature.index()]).collect()
    }
}

/// Scales each continuous feature to `[0, 1]` over all frames of all scenes.
/// The segment id is categorical and left out.
pub fn normalize_features(scenes: &[Scene]) -> Result<NormalizedLabels> {
    if scenes.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyInput("scenes"));
    }
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for label in scenes.iter().flat_map(|s| &s.labels) {
        for f in Feature::CONTINUOUS {
            let v = label.get(f);
            let r = &mut ranges[f.index()];
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    let constant = ranges.map(|(lo, hi)| hi <= lo);
    let mut table = NormalizedLabels {
        ranges,
        constant,
        rows: Vec::new(),
    };
    table.rows = scenes
        .iter()
        .map(|s| {
            s.labels
                .iter()
                .map(|l| Feature::CONTINUOUS.map(|f| table.scale(f, l.get(f))))
                .collect()
        })
        .collect();
    Ok(table)
}

/// Population variance; exactly zero for a constant column.
pub(crate) fn variance(xs: &[f64]) -> f64 {
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub id: usize,
    pub feature: Feature,
    /// Member scene names, sorted.
    pub scenes: Vec<String>,
    /// Variance of the normalized representative feature over all member frames.
    pub variance: f64,
}

impl Partition {
    /// Member scenes resolved against `scenes`, in member order.
    pub fn members<'a>(&self, scenes: &'a [Scene]) -> Result<Vec<&'a Scene>> {
        self.scenes
            .iter()
            .map(|name| {
                scenes
                    .iter()
                    .find(|s| &s.name == name)
                    .ok_or_else(|| Error::InvalidParameter(format!("partition references unknown scene `{name}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartitionSet {
    pub partitions: Vec<Partition>,
}

impl PartitionSet {
    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn get(&self, feature: Feature) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.feature == feature)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.partitions {
            for s in &p.scenes {
                out.serialize(ManifestRow {
                    partition_id: p.id,
                    representative_feature: p.feature.name().to_string(),
                    scene_name: s.clone(),
                })?;
            }
        }
        out.flush().map_err(|e| Error::io("partitions.csv", e))?;
        Ok(())
    }

    /// Reads a manifest and recomputes each partition's variance from `scenes`.
    pub fn read_csv<R: Read>(r: R, scenes: &[Scene]) -> Result<Self> {
        let mut partitions: Vec<Partition> = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: ManifestRow = row?;
            let feature = Feature::from_name(&row.representative_feature).ok_or_else(|| {
                Error::format(
                    "partitions.csv",
                    format!("unknown feature `{}`", row.representative_feature),
                )
            })?;
            match partitions.iter_mut().find(|p| p.id == row.partition_id) {
                Some(p) if p.feature != feature => {
                    return Err(Error::format(
                        "partitions.csv",
                        format!("partition {} has two features", p.id),
                    ))
                }
                Some(p) => p.scenes.push(row.scene_name),
                None => partitions.push(Partition {
                    id: row.partition_id,
                    feature,
                    scenes: vec![row.scene_name],
                    variance: 0.0,
                }),
            }
        }
        let table = normalize_features(scenes)?;
        for p in &mut partitions {
            p.scenes.sort();
            let mut pooled = Vec::new();
            for name in &p.scenes {
                let i = scenes
                    .iter()
                    .position(|s| &s.name == name)
                    .ok_or_else(|| Error::format("partitions.csv", format!("unknown scene `{name}`")))?;
                pooled.extend(table.column(i, p.feature));
            }
            p.variance = variance(&pooled);
        }
        Ok(Self { partitions })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    partition_id: usize,
    representative_feature: String,
    scene_name: String,
}

/// Assigns each scene to the continuous feature with the largest normalized
/// within-scene variance. Ties go to the earlier-declared feature; scenes
/// with no variance at all are left out.
pub fn build_partitions(scenes: &[Scene]) -> Result<PartitionSet> {
    let table = normalize_features(scenes)?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].name.cmp(&scenes[b].name));
    let names: BTreeSet<&str> = scenes.iter().map(|s| s.name.as_str()).collect();
    if names.len() != scenes.len() {
        return Err(Error::InvalidParameter("scene names must be unique".into()));
    }

    let mut members: [Vec<usize>; 3] = Default::default();
    for &i in &order {
        let mut best: Option<(Feature, f64)> = None;
        for f in Feature::CONTINUOUS {
            let v = variance(&table.column(i, f));
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((f, v));
            }
        }
        if let Some((f, _)) = best {
            members[f.index()].push(i);
        }
    }

    let mut partitions = Vec::new();
    for f in Feature::CONTINUOUS {
        let idx = &members[f.index()];
        if idx.is_empty() {
            continue;
        }
        let pooled: Vec<f64> = idx.iter().flat_map(|&i| table.column(i, f)).collect();
        let var = variance(&pooled);
        if var <= 0.0 {
            continue;
        }
        partitions.push(Partition {
            id: partitions.len(),
            feature: f,
            scenes: idx.iter().map(|&i| scenes[i].name.clone()).collect(),
            variance: var,
        });
    }
    if partitions.is_empty() {
        return Err(Error::NoPartitions);
    }
    Ok(PartitionSet { partitions })
}
