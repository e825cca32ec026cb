//! Mutual Information Gap with histogram entropy estimates.

use rand_distr::{Distribution, StandardNormal};

use crate::bvae::{LatentEncoder, LatentStats};
use crate::error::{Error, Result};
use crate::partition::PartitionSet;
use crate::rng;
use crate::scenegen::{Frame, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct MigParams {
    /// Number of averaged repetitions `t`.
    pub iterations: usize,
    /// Posterior samples drawn per latent per frame.
    pub samples_per_latent: usize,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl Default for MigParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            samples_per_latent: 500,
            histogram_bins: 20,
            seed: 0,
        }
    }
}

impl MigParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.samples_per_latent == 0 || self.histogram_bins < 2 {
            return Err(Error::InvalidParameter(format!(
                "MIG needs iterations >= 1, samples >= 1, bins >= 2 (got {}, {}, {})",
                self.iterations, self.samples_per_latent, self.histogram_bins
            )));
        }
        Ok(())
    }
}

/// Mutual information between one latent and one feature, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub mi: f64,
    pub h_f: f64,
    pub h_l: f64,
}

/// Maps labels to dense class ids by exact value.
pub fn discretize(values: &[f64]) -> (Vec<usize>, usize) {
    let mut levels: Vec<f64> = values.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let ids = values
        .iter()
        .map(|v| levels.binary_search_by(|l| l.total_cmp(v)).expect("value present"))
        .collect();
    (ids, levels.len())
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in estimate of I(L; f). `samples[k]` holds the latent samples drawn
/// for frame `k`, whose label is `labels[k]`.
pub fn mutual_information(samples: &[Vec<f64>], labels: &[f64], bins: usize) -> Result<MiEstimate> {
    if samples.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: samples.len(),
        });
    }
    let (classes, nq) = discretize(labels);
    mi_from_classes(samples.iter().map(|s| s.as_slice()), &classes, nq, bins)
}

fn mi_from_classes<'a>(
    samples: impl Iterator<Item = &'a [f64]> + Clone,
    classes: &[usize],
    nq: usize,
    bins: usize,
) -> Result<MiEstimate> {
    if bins < 2 {
        return Err(Error::InvalidParameter("histogram needs at least 2 bins".into()));
    }
    if nq < 2 {
        return Err(Error::DegenerateEntropy);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in samples.clone() {
        for &x in s {
            if !x.is_finite() {
                return Err(Error::NonFinite("latent sample"));
            }
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let width = (hi - lo) / bins as f64;
    let mut joint = vec![0usize; nq * bins];
    let mut class_samples = vec![0usize; nq];
    let mut class_frames = vec![0usize; nq];
    for (s, &c) in samples.zip(classes) {
        class_frames[c] += 1;
        class_samples[c] += s.len();
        for &x in s {
            let b = if width > 0.0 {
                (((x - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            joint[c * bins + b] += 1;
        }
    }
    let total: usize = class_samples.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("latent samples"));
    }
    let marginal: Vec<usize> = (0..bins).map(|b| (0..nq).map(|c| joint[c * bins + b]).sum()).collect();
    let h_l = entropy(&marginal, total);
    let h_cond: f64 = (0..nq)
        .filter(|&c| class_samples[c] > 0)
        .map(|c| class_samples[c] as f64 / total as f64 * entropy(&joint[c * bins..(c + 1) * bins], class_samples[c]))
        .sum();
    let h_f = entropy(&class_frames, classes.len());
    Ok(MiEstimate {
        mi: (h_l - h_cond).max(0.0),
        h_f,
        h_l,
    })
}

/// Normalized gap between the two most informative latents for one feature.
/// `stats[k]` is the posterior of frame `k`; `rng_coords` key the sampling noise.
pub fn partition_gap(stats: &[LatentStats], labels: &[f64], params: &MigParams, rng_coords: &[u64]) -> Result<f64> {
    params.validate()?;
    if stats.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: stats.len(),
        });
    }
    let first = stats.first().ok_or(Error::EmptyInput("partition frames"))?;
    let n = first.len();
    let (classes, nq) = discretize(labels);
    let ns = params.samples_per_latent;
    let mut noise = rng::stream(params.seed, rng_coords);
    let mut buf = vec![0.0; stats.len() * ns];
    let mut mis = Vec::with_capacity(n);
    let mut h_f = 0.0;
    for j in 0..n {
        for (k, s) in stats.iter().enumerate() {
            let sigma = (0.5 * s.log_var[j]).exp();
            for x in &mut buf[k * ns..(k + 1) * ns] {
                let e: f64 = StandardNormal.sample(&mut noise);
                *x = s.mu[j] + sigma * e;
            }
        }
        let est = mi_from_classes(buf.chunks(ns), &classes, nq, params.histogram_bins)?;
        h_f = est.h_f;
        mis.push(est.mi);
    }
    mis.sort_by(|a, b| b.total_cmp(a));
    let best = mis[0];
    let second = mis.get(1).copied().unwrap_or(0.0);
    Ok(((best - second) / h_f).clamp(0.0, 1.0))
}

/// Encoded frames and representative-feature labels of one partition.
#[derive(Debug, Clone)]
pub struct PartitionStats {
    pub stats: Vec<LatentStats>,
    pub labels: Vec<f64>,
}

/// Encodes each partition's frames once.
pub fn partition_stats<E: LatentEncoder + ?Sized>(
    encoder: &E,
    scenes: &[Scene],
    partitions: &PartitionSet,
) -> Result<Vec<PartitionStats>> {
    partitions
        .partitions
        .iter()
        .map(|p| {
            let members = p.members(scenes)?;
            let frames: Vec<&Frame> = members.iter().flat_map(|s| &s.frames).collect();
            let labels = members.iter().flat_map(|s| s.feature_values(p.feature)).collect();
            Ok(PartitionStats {
                stats: encoder.encode_batch(&frames)?,
                labels,
            })
        })
        .collect()
}

/// MIG averaged over partitions and then over `params.iterations` repetitions.
pub fn mig_from_stats(groups: &[PartitionStats], params: &MigParams) -> Result<f64> {
    params.validate()?;
    if groups.is_empty() {
        return Err(Error::NoPartitions);
    }
    let mut total = 0.0;
    for it in 0..params.iterations {
        let mut sum = 0.0;
        for (p, g) in groups.iter().enumerate() {
            sum += partition_gap(&g.stats, &g.labels, params, &[it as u64, p as u64])?;
        }
        total += sum / groups.len() as f64;
    }
    Ok(total / params.iterations as f64)
}

pub fn compute_mig<E: LatentEncoder + ?Sized>(
    encoder: &E,
    scenes: &[Scene],
    partitions: &PartitionSet,
    params: &MigParams,
) -> Result<f64> {
    params.validate()?;
    mig_from_stats(&partition_stats(encoder, scenes, partitions)?, params)
}
