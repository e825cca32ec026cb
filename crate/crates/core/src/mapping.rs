//! Picks the latents that respond to each feature, from how much their KL
//! moves between consecutive frames across the scenes of a partition.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bvae::{kl_per_latent, LatentEncoder, LatentStats};
use crate::error::{Error, Result};
use crate::partition::PartitionSet;
use crate::scenegen::{Feature, Frame, Scene};

/// Single-pass running mean and variance over vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WelfordState {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the running mean.
    pub m2: Vec<f64>,
}

impl WelfordState {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: sample.len(),
            });
        }
        self.count += 1;
        let c = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *m;
            *m += delta / c;
            *m2 += delta * (x - *m);
        }
        Ok(())
    }

    /// Sample variance `M2 / (count − 1)`.
    pub fn variance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::UndefinedVariance(self.count));
        }
        let d = (self.count - 1) as f64;
        Ok(self.m2.iter().map(|m| m / d).collect())
    }
}

pub fn welford_update(mut state: WelfordState, sample: &[f64]) -> Result<WelfordState> {
    state.update(sample)?;
    Ok(state)
}

pub fn welford_variance(state: &WelfordState) -> Result<Vec<f64>> {
    state.variance()
}

/// Mean absolute change of each latent's KL between consecutive frames.
pub fn avg_kl_diff_from_stats(stats: &[LatentStats]) -> Result<Vec<f64>> {
    if stats.len() < 2 {
        return Err(Error::SingleFrameScene(format!("{} frame(s)", stats.len())));
    }
    let kls: Vec<Vec<f64>> = stats.iter().map(kl_per_latent).collect();
    let n = kls[0].len();
    let mut acc = vec![0.0; n];
    for w in kls.windows(2) {
        for (a, (next, prev)) in acc.iter_mut().zip(w[1].iter().zip(&w[0])) {
            *a += (next - prev).abs();
        }
    }
    let d = (stats.len() - 1) as f64;
    Ok(acc.into_iter().map(|a| a / d).collect())
}

pub fn avg_kl_diff<E: LatentEncoder + ?Sized>(encoder: &E, scene: &Scene) -> Result<Vec<f64>> {
    if scene.len() < 2 {
        return Err(Error::SingleFrameScene(scene.name.clone()));
    }
    let frames: Vec<&Frame> = scene.frames.iter().collect();
    avg_kl_diff_from_stats(&encoder.encode_batch(&frames)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLatents {
    pub partition_id: usize,
    pub feature: Feature,
    /// `(latent index, cross-scene variance)`, best first.
    pub ranked: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSelection {
    pub partitions: Vec<PartitionLatents>,
    /// Union of every partition's ranked set, ascending.
    pub detector: Vec<usize>,
    /// Feature → top `reasoner_size` latents of its partition.
    pub reasoners: Vec<(Feature, Vec<usize>)>,
}

impl LatentSelection {
    /// Builds the selection from per-partition variances.
    pub fn from_variances(
        per_partition: &[(usize, Feature, Vec<f64>)],
        m: usize,
        reasoner_size: usize,
    ) -> Result<Self> {
        let mut partitions = Vec::new();
        let mut detector = Vec::new();
        let mut reasoners = Vec::new();
        for (id, feature, var) in per_partition {
            let n = var.len();
            if m == 0 || m > n {
                return Err(Error::InvalidParameter(format!("m must lie in 1..={n}, got {m}")));
            }
            if reasoner_size == 0 || reasoner_size > m {
                return Err(Error::InvalidParameter(format!(
                    "reasoner size must lie in 1..={m}, got {reasoner_size}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            // stable sort keeps lower indices first among equal variances
            order.sort_by(|&a, &b| var[b].total_cmp(&var[a]));
            let ranked: Vec<(usize, f64)> = order[..m].iter().map(|&i| (i, var[i])).collect();
            detector.extend(ranked.iter().map(|r| r.0));
            reasoners.push((*feature, ranked[..reasoner_size].iter().map(|r| r.0).collect()));
            partitions.push(PartitionLatents {
                partition_id: *id,
                feature: *feature,
                ranked,
            });
        }
        detector.sort_unstable();
        detector.dedup();
        Ok(Self {
            partitions,
            detector,
            reasoners,
        })
    }

    pub fn reasoner(&self, feature: Feature) -> Option<&[usize]> {
        self.reasoners.iter().find(|r| r.0 == feature).map(|r| r.1.as_slice())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.partitions {
            for (rank, &(latent_index, variance)) in p.ranked.iter().enumerate() {
                out.serialize(SelectionRow {
                    partition: p.partition_id,
                    rank,
                    latent_index,
                    variance,
                })?;
            }
        }
        out.flush().map_err(|e| Error::io("selection.csv", e))?;
        Ok(())
    }

    /// Reads a selection manifest; features come from the partition set.
    pub fn read_csv<R: Read>(r: R, partitions: &PartitionSet, reasoner_size: usize) -> Result<Self> {
        let mut groups: Vec<PartitionLatents> = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: SelectionRow = row?;
            let feature = partitions
                .partitions
                .iter()
                .find(|p| p.id == row.partition)
                .map(|p| p.feature)
                .ok_or_else(|| Error::format("selection.csv", format!("unknown partition {}", row.partition)))?;
            let group = match groups.iter_mut().position(|g| g.partition_id == row.partition) {
                Some(i) => &mut groups[i],
                None => {
                    groups.push(PartitionLatents {
                        partition_id: row.partition,
                        feature,
                        ranked: Vec::new(),
                    });
                    groups.last_mut().unwrap()
                }
            };
            if row.rank != group.ranked.len() {
                return Err(Error::format("selection.csv", "ranks out of order"));
            }
            group.ranked.push((row.latent_index, row.variance));
        }
        let mut detector: Vec<usize> = groups.iter().flat_map(|g| g.ranked.iter().map(|r| r.0)).collect();
        detector.sort_unstable();
        detector.dedup();
        let reasoners = groups
            .iter()
            .map(|g| {
                let k = reasoner_size.min(g.ranked.len());
                (g.feature, g.ranked[..k].iter().map(|r| r.0).collect())
            })
            .collect();
        Ok(Self {
            partitions: groups,
            detector,
            reasoners,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SelectionRow {
    partition: usize,
    rank: usize,
    latent_index: usize,
    variance: f64,
}

/// Cross-scene variance of each latent's average KL difference, per partition.
pub fn partition_variances<E: LatentEncoder + ?Sized>(
    encoder: &E,
    scenes: &[Scene],
    partitions: &PartitionSet,
) -> Result<Vec<(usize, Feature, Vec<f64>)>> {
    partitions
        .partitions
        .iter()
        .map(|p| {
            let mut state = WelfordState::new(encoder.latent_dim());
            for scene in p.members(scenes)? {
                state.update(&avg_kl_diff(encoder, scene)?)?;
            }
            Ok((p.id, p.feature, state.variance()?))
        })
        .collect()
}

pub fn select_latents<E: LatentEncoder + ?Sized>(
    encoder: &E,
    scenes: &[Scene],
    partitions: &PartitionSet,
    m: usize,
    reasoner_size: usize,
) -> Result<LatentSelection> {
    if m > encoder.latent_dim() {
        return Err(Error::InvalidParameter(format!(
            "m = {m} exceeds latent count {}",
            encoder.latent_dim()
        )));
    }
    LatentSelection::from_variances(&partition_variances(encoder, scenes, partitions)?, m, reasoner_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_welford() {
        let mut s = WelfordState::new(1);
        assert!(matches!(s.variance(), Err(Error::UndefinedVariance(0))));
        s.update(&[1.0]).unwrap();
        assert!(matches!(s.variance(), Err(Error::UndefinedVariance(1))));
        let s = welford_update(welford_update(s, &[2.0]).unwrap(), &[3.0]).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(welford_variance(&s).unwrap(), vec![1.0]);
        let mut t = WelfordState::new(2);
        assert!(t.update(&[1.0]).is_err());
    }

    fn stats(mu: &[f64]) -> LatentStats {
        LatentStats::new(mu.to_vec(), vec![0.0; mu.len()]).unwrap()
    }

    #[test]
    fn avg_kl_diff_small_cases() {
        let same = vec![stats(&[0.3, 1.0]); 5];
        assert_eq!(avg_kl_diff_from_stats(&same).unwrap(), vec![0.0, 0.0]);
        let a = stats(&[0.0, 1.0]);
        let b = stats(&[2.0, 0.5]);
        let d = avg_kl_diff_from_stats(&[a.clone(), b.clone()]).unwrap();
        let ka = kl_per_latent(&a);
        let kb = kl_per_latent(&b);
        assert_eq!(d, vec![(kb[0] - ka[0]).abs(), (kb[1] - ka[1]).abs()]);
        assert!(matches!(avg_kl_diff_from_stats(&[a]), Err(Error::SingleFrameScene(_))));
    }

    #[test]
    fn selection_ranks_and_unions() {
        let vars = vec![
            (0, Feature::Precipitation, vec![0.1, 0.5, 0.5, 0.0]),
            (1, Feature::Brightness, vec![0.0, 0.2, 0.1, 0.9]),
        ];
        let sel = LatentSelection::from_variances(&vars, 2, 1).unwrap();
        assert_eq!(sel.partitions[0].ranked, vec![(1, 0.5), (2, 0.5)]);
        assert_eq!(sel.reasoner(Feature::Precipitation), Some(&[1][..]));
        assert_eq!(sel.reasoner(Feature::Brightness), Some(&[3][..]));
        assert_eq!(sel.detector, vec![1, 2, 3]);

        let full = LatentSelection::from_variances(&vars, 4, 1).unwrap();
        assert_eq!(full.detector, vec![0, 1, 2, 3]);
        assert!(LatentSelection::from_variances(&vars, 5, 1).is_err());
        assert!(LatentSelection::from_variances(&vars, 2, 3).is_err());
    }
}
