//! Runtime detection: ICP p-values over KL nonconformity, a windowed mixture
//! martingale, CUSUM alarms, and a moving-average change-point channel.

mod eval;
mod trace;

use std::collections::VecDeque;
use std::path::Path;

use ndarray::ArrayView2;

use crate::bvae::{encoder_input, kl_normal, kl_per_latent, LatentEncoder, LatentStats, TrainedModel, LOG_VAR_LIMIT};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scenegen::{Feature, Frame};

pub use eval::{evaluate, ground_truth, EvalScene, Metrics, ReasonerMetrics, SceneReport, TrainingDomain};
pub use trace::{read_trace, write_trace, TraceRow, CHANGE_POINT_CHANNEL, DETECTOR_CHANNEL};

pub const DEFAULT_WINDOW: usize = 20;
pub const LOG_MARTINGALE_LIMIT: f64 = 300.0;
pub const SIMPSON_INTERVALS: usize = 1000;
/// Calibration quantile used for the change-point weight when none is set.
pub const CP_OMEGA_QUANTILE: f64 = 0.99;
/// Change-point threshold relative to its weight when none is set.
pub const CP_TAU_RATIO: f64 = 1.6;

const CALIBRATION_MAGIC: &[u8; 4] = b"BVCL";
const CALIBRATION_VERSION: u32 = 1;

/// Mean KL of the latents in `latents`.
pub fn nonconformity(stats: &LatentStats, latents: &[usize]) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::EmptyLatentSet);
    }
    let mut sum = 0.0;
    for &l in latents {
        if l >= stats.len() {
            return Err(Error::DimensionMismatch {
                expected: stats.len(),
                actual: l + 1,
            });
        }
        sum += kl_normal(stats.mu[l], stats.log_var[l]);
    }
    Ok(sum / latents.len() as f64)
}

pub fn frame_nonconformity<E: LatentEncoder + ?Sized>(encoder: &E, latents: &[usize], frame: &Frame) -> Result<f64> {
    nonconformity(&encoder.encode(frame)?, latents)
}

/// Sorted nonconformity scores of the calibration frames.
pub fn calibrate<E: LatentEncoder + ?Sized>(encoder: &E, latents: &[usize], frames: &[&Frame]) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("calibration frames"));
    }
    if latents.is_empty() {
        return Err(Error::EmptyLatentSet);
    }
    let mut scores = encoder
        .encode_batch(frames)?
        .iter()
        .map(|s| nonconformity(s, latents))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(f64::total_cmp);
    Ok(scores)
}

/// Smoothed conformal p-value `(#{c ≥ α} + 1) / (|C| + 1)` over sorted `scores`.
pub fn icp_pvalue(scores: &[f64], alpha: f64) -> f64 {
    let below = scores.partition_point(|&c| c < alpha);
    (scores.len() - below + 1) as f64 / (scores.len() + 1) as f64
}

/// `log ∫₀¹ ∏ ε·pᵢ^(ε−1) dε` by composite Simpson in log space, clamped to
/// `±LOG_MARTINGALE_LIMIT`.
pub fn log_martingale(window: &[f64]) -> Result<f64> {
    log_martingale_with(window, SIMPSON_INTERVALS)
}

pub fn log_martingale_with(window: &[f64], intervals: usize) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::EmptyInput("p-value window"));
    }
    if intervals == 0 || intervals % 2 == 1 {
        return Err(Error::InvalidParameter("Simpson needs an even interval count".into()));
    }
    let mut sum_log_p = 0.0;
    for &p in window {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidPValue(p));
        }
        sum_log_p += p.ln();
    }
    let w = window.len() as f64;
    let h = 1.0 / intervals as f64;
    let log_f = |eps: f64| w * eps.ln() + (eps - 1.0) * sum_log_p;
    // ε = 0 contributes nothing since W ≥ 1
    let terms: Vec<f64> = (1..=intervals)
        .map(|i| {
            let weight: f64 = if i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            weight.ln() + log_f(i as f64 * h)
        })
        .collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    Ok((lse + (h / 3.0).ln()).clamp(-LOG_MARTINGALE_LIMIT, LOG_MARTINGALE_LIMIT))
}

/// `max(0, S + x − ω)`
#[inline]
pub fn cusum_step(s: f64, x: f64, omega: f64) -> f64 {
    (s + x - omega).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cusum {
    pub omega: f64,
    pub tau: f64,
}

impl Cusum {
    fn validate(&self, what: &str) -> Result<()> {
        if !(self.omega > 0.0 && self.tau > 0.0 && self.omega.is_finite() && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "{what} CUSUM needs positive finite omega and tau (got {}, {})",
                self.omega, self.tau
            )));
        }
        Ok(())
    }
}

/// One conformal channel: a latent set with its calibration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub latents: Vec<usize>,
    /// Sorted calibration nonconformity scores.
    pub scores: Vec<f64>,
    pub cusum: Cusum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorProfile {
    pub window: usize,
    pub detector: Channel,
    pub reasoners: Vec<(Feature, Channel)>,
    /// `None` derives the weight from the detector's calibration scores.
    pub cp_omega: Option<f64>,
    pub cp_tau: Option<f64>,
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("martingale window must be at least 1".into()));
        }
        let channels = std::iter::once(("detector".to_string(), &self.detector))
            .chain(self.reasoners.iter().map(|(f, c)| (f.name().to_string(), c)));
        for (name, c) in channels {
            if c.latents.is_empty() {
                return Err(Error::EmptyLatentSet);
            }
            if c.scores.is_empty() {
                return Err(Error::InvalidParameter(format!("channel `{name}` is not calibrated")));
            }
            if c.scores.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "channel `{name}` scores are not sorted"
                )));
            }
            c.cusum.validate(&name)?;
        }
        self.change_point()?;
        Ok(())
    }

    /// Change-point CUSUM parameters with defaults filled in.
    pub fn change_point(&self) -> Result<Cusum> {
        let omega = match self.cp_omega {
            Some(w) => w,
            None => quantile(&self.detector.scores, CP_OMEGA_QUANTILE)?,
        };
        let cp = Cusum {
            omega,
            tau: self.cp_tau.unwrap_or(CP_TAU_RATIO * omega),
        };
        cp.validate("change-point")?;
        Ok(cp)
    }
}

/// Upper empirical quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput("quantile data"));
    }
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, Default)]
struct ChannelState {
    p_window: VecDeque<f64>,
    cusum: f64,
}

/// Per-stream state; one per monitored stream.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    channels: Vec<ChannelState>,
    alpha_window: VecDeque<f64>,
    cp_cusum: f64,
    frame: usize,
}

impl StreamState {
    /// Clears windows and accumulators, e.g. at a scene boundary.
    pub fn reset(&mut self) {
        *self = Self {
            channels: vec![ChannelState::default(); self.channels.len()],
            ..Default::default()
        };
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelOutput {
    pub alpha: f64,
    pub p: f64,
    pub log_martingale: f64,
    pub cusum: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangePointOutput {
    /// Moving average of detector nonconformity over the window.
    pub avg_kl: f64,
    pub cusum: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub frame: usize,
    /// True until the martingale window has filled.
    pub warm_up: bool,
    pub detector: ChannelOutput,
    pub reasoners: Vec<(Feature, ChannelOutput)>,
    pub change_point: ChangePointOutput,
}

/// A calibrated profile bound to an encoder pruned to the latents it reads.
#[derive(Debug, Clone)]
pub struct Monitor {
    profile: DetectorProfile,
    change_point: Cusum,
    encoder: Network,
    pixels: usize,
    /// Latent indices kept by the pruned encoder, ascending.
    used: Vec<usize>,
    /// Per channel (detector first), positions into `used`.
    positions: Vec<Vec<usize>>,
}

impl Monitor {
    pub fn new(model: &TrainedModel, profile: DetectorProfile) -> Result<Self> {
        profile.validate()?;
        let n = model.config.n;
        let mut used: Vec<usize> = profile
            .detector
            .latents
            .iter()
            .chain(profile.reasoners.iter().flat_map(|(_, c)| &c.latents))
            .copied()
            .collect();
        used.sort_unstable();
        used.dedup();
        if let Some(&bad) = used.iter().find(|&&l| l >= n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: bad + 1,
            });
        }
        let rows: Vec<usize> = used.iter().copied().chain(used.iter().map(|l| l + n)).collect();
        let encoder = model.encoder.with_output_rows(&rows)?;
        let positions = std::iter::once(&profile.detector)
            .chain(profile.reasoners.iter().map(|(_, c)| c))
            .map(|c| {
                c.latents
                    .iter()
                    .map(|l| used.binary_search(l).expect("collected above"))
                    .collect()
            })
            .collect();
        Ok(Self {
            change_point: profile.change_point()?,
            profile,
            encoder,
            pixels: model.pixels(),
            used,
            positions,
        })
    }

    pub fn profile(&self) -> &DetectorProfile {
        &self.profile
    }

    pub fn change_point_params(&self) -> Cusum {
        self.change_point
    }

    /// Latents computed per frame.
    pub fn used_latents(&self) -> &[usize] {
        &self.used
    }

    pub fn new_state(&self) -> StreamState {
        StreamState {
            channels: vec![ChannelState::default(); 1 + self.profile.reasoners.len()],
            ..Default::default()
        }
    }

    /// Processes one frame of a stream.
    pub fn step(&self, state: &mut StreamState, frame: &Frame) -> Result<DetectionOutput> {
        detect_step(self, state, frame)
    }

    /// Runs a fresh stream over `frames`.
    pub fn run(&self, frames: &[Frame]) -> Result<Vec<DetectionOutput>> {
        let mut state = self.new_state();
        frames.iter().map(|f| self.step(&mut state, f)).collect()
    }

    fn kls(&self, frame: &Frame) -> Result<Vec<f64>> {
        if frame.pixels.len() != self.pixels {
            return Err(Error::DimensionMismatch {
                expected: self.pixels,
                actual: frame.pixels.len(),
            });
        }
        let x = ArrayView2::from_shape((1, self.pixels), &frame.pixels).expect("length checked");
        let out = self.encoder.forward(encoder_input(x).view())?;
        let k = self.used.len();
        Ok((0..k)
            .map(|i| kl_normal(out[[0, i]], out[[0, k + i]].clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT)))
            .collect())
    }
}

fn channel_step(window: usize, channel: &Channel, state: &mut ChannelState, alpha: f64) -> Result<ChannelOutput> {
    let p = icp_pvalue(&channel.scores, alpha);
    if state.p_window.len() == window {
        state.p_window.pop_front();
    }
    state.p_window.push_back(p);
    let log_m = log_martingale(state.p_window.make_contiguous())?;
    state.cusum = cusum_step(state.cusum, log_m, channel.cusum.omega);
    Ok(ChannelOutput {
        alpha,
        p,
        log_martingale: log_m,
        cusum: state.cusum,
        flag: state.cusum > channel.cusum.tau,
    })
}

/// Detector and reasoner channels plus change point for one frame.
pub fn detect_step(monitor: &Monitor, state: &mut StreamState, frame: &Frame) -> Result<DetectionOutput> {
    if state.channels.len() != monitor.positions.len() {
        return Err(Error::InvalidParameter(
            "stream state belongs to a different monitor".into(),
        ));
    }
    let kls = monitor.kls(frame)?;
    let window = monitor.profile.window;
    let alphas: Vec<f64> = monitor
        .positions
        .iter()
        .map(|pos| pos.iter().map(|&i| kls[i]).sum::<f64>() / pos.len() as f64)
        .collect();
    let detector = channel_step(window, &monitor.profile.detector, &mut state.channels[0], alphas[0])?;
    let mut reasoners = Vec::with_capacity(monitor.profile.reasoners.len());
    for (i, (feature, channel)) in monitor.profile.reasoners.iter().enumerate() {
        reasoners.push((
            *feature,
            channel_step(window, channel, &mut state.channels[i + 1], alphas[i + 1])?,
        ));
    }
    let change_point = change_point_step(monitor.change_point, window, state, alphas[0]);
    let out = DetectionOutput {
        frame: state.frame,
        warm_up: state.frame < window,
        detector,
        reasoners,
        change_point,
    };
    state.frame += 1;
    Ok(out)
}

/// Moving average of nonconformity over the last `window` frames fed to CUSUM.
pub fn change_point_step(params: Cusum, window: usize, state: &mut StreamState, alpha: f64) -> ChangePointOutput {
    if state.alpha_window.len() == window {
        state.alpha_window.pop_front();
    }
    state.alpha_window.push_back(alpha);
    let avg_kl = state.alpha_window.iter().sum::<f64>() / state.alpha_window.len() as f64;
    state.cp_cusum = cusum_step(state.cp_cusum, avg_kl, params.omega);
    ChangePointOutput {
        avg_kl,
        cusum: state.cp_cusum,
        flag: state.cp_cusum > params.tau,
    }
}

/// Per-latent KL of every latent, for callers that want the full vector.
pub fn latent_kls<E: LatentEncoder + ?Sized>(encoder: &E, frame: &Frame) -> Result<Vec<f64>> {
    Ok(kl_per_latent(&encoder.encode(frame)?))
}

pub fn calibration_to_bytes(scores: &[f64]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CALIBRATION_MAGIC)
        .u32(CALIBRATION_VERSION)
        .u64(scores.len() as u64);
    for &s in scores {
        w.f64(s);
    }
    w.finish()
}

pub fn calibration_from_bytes(data: &[u8]) -> Result<Vec<f64>> {
    let mut r = ByteReader::checked(data, "calibration", CALIBRATION_MAGIC)?;
    let version = r.u32()?;
    if version != CALIBRATION_VERSION {
        return Err(Error::format("calibration", format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    if count == 0 || count > data.len() / 8 {
        return Err(Error::format("calibration", format!("implausible score count {count}")));
    }
    let scores = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    if scores.windows(2).any(|w| w[0] > w[1]) || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::format("calibration", "scores must be finite and sorted"));
    }
    Ok(scores)
}

pub fn save_calibration(path: &Path, scores: &[f64]) -> Result<()> {
    std::fs::write(path, calibration_to_bytes(scores)).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: &Path) -> Result<Vec<f64>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    calibration_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pvalue_cases() {
        let c = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(icp_pvalue(&c, 0.5), 1.0);
        assert_eq!(icp_pvalue(&c, 9.0), 0.2);
        assert_eq!(icp_pvalue(&c, 2.5), 0.6);
        // ties count as at least as nonconforming
        assert_eq!(icp_pvalue(&c, 2.0), 0.8);
    }

    #[test]
    fn martingale_closed_forms() {
        let w20 = vec![1.0; 20];
        assert!((log_martingale(&w20).unwrap() + 21f64.ln()).abs() < 1e-9);
        assert!((log_martingale(&[1.0]).unwrap() + 2f64.ln()).abs() < 1e-12);
        assert!(log_martingale(&[0.01; 20]).unwrap() > 20.0);
        assert!(matches!(log_martingale(&[0.0]), Err(Error::InvalidPValue(_))));
        assert!(matches!(log_martingale(&[1.5]), Err(Error::InvalidPValue(_))));
        assert!(log_martingale(&[]).is_err());
    }

    #[test]
    fn cusum_recurrence() {
        let s = cusum_step(0.0, 5.0, 3.0);
        assert_eq!(s, 2.0);
        assert_eq!(cusum_step(s, 5.0, 3.0), 4.0);
        let mut s = 0.0;
        for _ in 0..50 {
            s = cusum_step(s, 1.0, 3.0);
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn nonconformity_cases() {
        let stats = LatentStats::new(vec![1.0, 0.0, 2.0], vec![0.0, 0.0, 1.0]).unwrap();
        let kl = kl_per_latent(&stats);
        assert_eq!(nonconformity(&stats, &[2]).unwrap(), kl[2]);
        let zero = LatentStats::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert_eq!(nonconformity(&zero, &[0, 1, 2]).unwrap(), 0.0);
        assert!(matches!(nonconformity(&stats, &[]), Err(Error::EmptyLatentSet)));
        assert!(nonconformity(&stats, &[3]).is_err());
    }

    #[test]
    fn quantile_picks_upper_order_statistic() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.99).unwrap(), 99.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 100.0);
        assert_eq!(quantile(&[3.0], 0.5).unwrap(), 3.0);
    }

    #[test]
    fn calibration_file_roundtrip() {
        let scores = vec![0.1, 0.2, 0.2, 5.0];
        let bytes = calibration_to_bytes(&scores);
        assert_eq!(calibration_from_bytes(&bytes).unwrap(), scores);
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(calibration_from_bytes(&bad).is_err());
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(calibration_from_bytes(&flipped), Err(Error::Checksum(_))));
        assert!(calibration_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
