//! Search over `(n, β)` maximizing MIG: GP-EI Bayesian optimization, grid
//! sweep, and random sampling.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const LENGTH_SCALE: f64 = 0.2;
pub const EI_XI: f64 = 0.01;
const BASE_JITTER: f64 = 1e-6;
const MAX_JITTER_DOUBLINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    n: Vec<usize>,
    beta: Vec<f64>,
}

impl SearchSpace {
    pub fn new(n: Vec<usize>, beta: Vec<f64>) -> Result<Self> {
        if n.is_empty() || beta.is_empty() {
            return Err(Error::InvalidParameter(
                "search space needs at least one n and one beta".into(),
            ));
        }
        if n.windows(2).any(|w| w[0] >= w[1])
            || beta
                .windows(2)
                .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::InvalidParameter(
                "search candidates must be sorted and free of duplicates".into(),
            ));
        }
        if n[0] == 0 || beta.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidParameter(
                "n must be positive and beta finite and >= 0".into(),
            ));
        }
        Ok(Self { n, beta })
    }

    pub fn n_candidates(&self) -> &[usize] {
        &self.n
    }

    pub fn beta_candidates(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.n.len() * self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in declaration order, `n` outermost.
    pub fn points(&self) -> Vec<(usize, f64)> {
        self.n
            .iter()
            .flat_map(|&n| self.beta.iter().map(move |&b| (n, b)))
            .collect()
    }

    /// Coordinates scaled to `[0, 1]²` by candidate rank, so neighbouring
    /// grid values are equally spaced whatever their numeric gaps.
    pub fn normalize(&self, n: usize, beta: f64) -> [f64; 2] {
        fn rank(pos: f64, len: usize) -> f64 {
            if len > 1 {
                pos / (len - 1) as f64
            } else {
                0.5
            }
        }
        fn position<T: PartialOrd + Copy + Into<f64>>(values: &[T], v: T) -> f64 {
            match values.iter().position(|&c| c >= v) {
                None => (values.len() - 1) as f64,
                Some(0) => 0.0,
                Some(i) => {
                    let (lo, hi) = (values[i - 1].into(), values[i].into());
                    (i - 1) as f64 + (v.into() - lo) / (hi - lo)
                }
            }
        }
        let ns: Vec<f64> = self.n.iter().map(|&c| c as f64).collect();
        [
            rank(position(&ns, n as f64), self.n.len()),
            rank(position(&self.beta, beta), self.beta.len()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Bo,
    Grid,
    Random,
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Bo => "bo",
            SearchMode::Grid => "grid",
            SearchMode::Random => "random",
        })
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bo" => Ok(SearchMode::Bo),
            "grid" => Ok(SearchMode::Grid),
            "random" => Ok(SearchMode::Random),
            other => Err(Error::InvalidParameter(format!("unknown search mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// 1-based evaluation number.
    pub iteration: usize,
    pub mode: SearchMode,
    pub n: usize,
    pub beta: f64,
    /// `-inf` marks a failed evaluation.
    pub mig: f64,
    pub seconds: f64,
}

/// Append-only log of evaluated points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExploredList {
    trials: Vec<Trial>,
}

impl ExploredList {
    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn push(&mut self, trial: Trial) {
        self.trials.push(trial);
    }

    pub fn contains(&self, n: usize, beta: f64) -> bool {
        self.trials.iter().any(|t| t.n == n && t.beta == beta)
    }

    /// First trial with the highest finite MIG.
    pub fn best(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.mig.is_finite())
            .fold(None, |acc: Option<&Trial>, t| match acc {
                Some(b) if b.mig >= t.mig => Some(b),
                _ => Some(t),
            })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in &self.trials {
            out.serialize(t)?;
        }
        out.flush().map_err(|e| Error::io("trials.csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let trials = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<Vec<Trial>, _>>()?;
        Ok(Self { trials })
    }
}

fn kernel(a: [f64; 2], b: [f64; 2], signal: f64) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    signal * (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// In-place lower Cholesky factor of a row-major `n×n` matrix.
fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        // also rejects NaN
        if d.is_nan() || d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Some(a)
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

fn backward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

/// Zero-mean GP over centred observations with a squared-exponential kernel.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    points: Vec<[f64; 2]>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    mean: f64,
    signal: f64,
}

impl GaussianProcess {
    pub fn fit(points: &[[f64; 2]], values: &[f64]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("gp observations"));
        }
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gp observation"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let signal = if var > 0.0 { var } else { 1.0 };
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = kernel(points[i], points[j], signal);
            }
        }
        let mut jitter = BASE_JITTER * signal;
        let mut chol = None;
        for _ in 0..=MAX_JITTER_DOUBLINGS {
            let mut kj = k.clone();
            for i in 0..n {
                kj[i * n + i] += jitter;
            }
            if let Some(l) = cholesky(kj, n) {
                chol = Some(l);
                break;
            }
            jitter *= 2.0;
        }
        let chol = chol.ok_or(Error::NotPositiveDefinite(n))?;
        let centred: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let alpha = backward_sub(&chol, n, &forward_sub(&chol, n, &centred));
        Ok(Self {
            points: points.to_vec(),
            chol,
            alpha,
            mean,
            signal,
        })
    }

    pub fn prior_std(&self) -> f64 {
        self.signal.sqrt()
    }

    /// Predictive `(mean, std)` at `x`.
    pub fn predict(&self, x: [f64; 2]) -> (f64, f64) {
        let n = self.points.len();
        let ks: Vec<f64> = self.points.iter().map(|&p| kernel(p, x, self.signal)).collect();
        let mu = self.mean + ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let v = forward_sub(&self.chol, n, &ks);
        let var = self.signal - v.iter().map(|x| x * x).sum::<f64>();
        (mu, var.max(0.0).sqrt())
    }
}

/// Posterior at one normalized candidate given normalized trial points.
pub fn gp_posterior(points: &[[f64; 2]], values: &[f64], candidate: [f64; 2]) -> Result<(f64, f64)> {
    Ok(GaussianProcess::fit(points, values)?.predict(candidate))
}

/// Maximization-form expected improvement over `best` with margin [`EI_XI`].
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let surplus = mean - best - EI_XI;
    if std <= 0.0 {
        return surplus.max(0.0);
    }
    let z = surplus / std;
    let unit = Normal::standard();
    (surplus * unit.cdf(z) + std * unit.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Maximum number of evaluations (ignored by grid).
    pub budget: usize,
    /// Random warm-up trials before BO.
    pub init: usize,
    /// BO stops once the incumbent survives this many consecutive iterations.
    pub early_stop: usize,
    pub seed: u64,
    /// Store measured seconds in the trial log instead of 0.
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Bo,
            budget: 20,
            init: 5,
            early_stop: 3,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidParameter("search budget must be at least 1".into()));
        }
        if self.mode == SearchMode::Bo && self.init >= self.budget {
            return Err(Error::InvalidParameter(format!(
                "BO needs init ({}) < budget ({})",
                self.init, self.budget
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best_n: usize,
    pub best_beta: f64,
    pub best_mig: f64,
    pub explored: ExploredList,
    /// Total measured objective time.
    pub seconds: f64,
}

struct Runner<'a, F> {
    objective: F,
    config: &'a SearchConfig,
    explored: ExploredList,
    seconds: f64,
}

impl<F: FnMut(usize, f64) -> Result<f64>> Runner<'_, F> {
    fn evaluate(&mut self, n: usize, beta: f64) {
        let start = Instant::now();
        let mig = match (self.objective)(n, beta) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                warn!("objective returned {v} at n={n}, beta={beta}");
                f64::NEG_INFINITY
            }
            Err(e) => {
                warn!("objective failed at n={n}, beta={beta}: {e}");
                f64::NEG_INFINITY
            }
        };
        let elapsed = start.elapsed().as_secs_f64();
        self.seconds += elapsed;
        debug!("trial {}: n={n} beta={beta} mig={mig}", self.explored.len() + 1);
        self.explored.push(Trial {
            iteration: self.explored.len() + 1,
            mode: self.config.mode,
            n,
            beta,
            mig,
            seconds: if self.config.record_wall_time { elapsed } else { 0.0 },
        });
    }
}

/// Runs the configured search and returns the best finite trial.
pub fn search<F>(space: &SearchSpace, config: &SearchConfig, objective: F) -> Result<SearchOutcome>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    config.validate()?;
    let mut run = Runner {
        objective,
        config,
        explored: ExploredList::default(),
        seconds: 0.0,
    };
    let points = space.points();
    match config.mode {
        SearchMode::Grid => {
            for &(n, b) in &points {
                run.evaluate(n, b);
            }
        }
        SearchMode::Random => {
            let mut order = points.clone();
            order.shuffle(&mut rng::stream(config.seed, &[0x7a6d]));
            for &(n, b) in order.iter().take(config.budget) {
                run.evaluate(n, b);
            }
        }
        SearchMode::Bo => {
            let mut order = points.clone();
            order.shuffle(&mut rng::stream(config.seed, &[0xb0]));
            for &(n, b) in order.iter().take(config.init.max(1)) {
                run.evaluate(n, b);
            }
            let mut stale = 0;
            while run.explored.len() < config.budget.min(points.len()) {
                let incumbent = run.explored.best().map(|t| (t.n, t.beta));
                let next = next_bo_point(space, &points, &run.explored, &order)?;
                run.evaluate(next.0, next.1);
                if run.explored.best().map(|t| (t.n, t.beta)) == incumbent {
                    stale += 1;
                    if config.early_stop > 0 && stale >= config.early_stop {
                        debug!("incumbent unchanged for {stale} iterations; stopping");
                        break;
                    }
                } else {
                    stale = 0;
                }
            }
        }
    }
    let best = run
        .explored
        .best()
        .cloned()
        .ok_or_else(|| Error::InvalidParameter("every search trial failed".into()))?;
    Ok(SearchOutcome {
        best_n: best.n,
        best_beta: best.beta,
        best_mig: best.mig,
        explored: run.explored,
        seconds: run.seconds,
    })
}

fn next_bo_point(
    space: &SearchSpace,
    points: &[(usize, f64)],
    explored: &ExploredList,
    fallback: &[(usize, f64)],
) -> Result<(usize, f64)> {
    let ok: Vec<&Trial> = explored.trials().iter().filter(|t| t.mig.is_finite()).collect();
    let unvisited = points.iter().filter(|&&(n, b)| !explored.contains(n, b));
    if ok.is_empty() {
        return Ok(*fallback
            .iter()
            .find(|&&(n, b)| !explored.contains(n, b))
            .expect("budget bounded by space size"));
    }
    let xs: Vec<[f64; 2]> = ok.iter().map(|t| space.normalize(t.n, t.beta)).collect();
    let ys: Vec<f64> = ok.iter().map(|t| t.mig).collect();
    let gp = GaussianProcess::fit(&xs, &ys)?;
    let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut choice = None;
    let mut best_ei = f64::NEG_INFINITY;
    for &(n, b) in unvisited {
        let (m, s) = gp.predict(space.normalize(n, b));
        let ei = expected_improvement(m, s, best);
        if ei > best_ei {
            best_ei = ei;
            choice = Some((n, b));
        }
    }
    Ok(choice.expect("budget bounded by space size"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SearchSpace {
        SearchSpace::new(vec![5, 10, 20, 30, 40, 50], vec![0.5, 1.0, 1.4, 2.0, 3.0, 4.0]).unwrap()
    }

    fn objective(n: usize, b: f64) -> Result<f64> {
        Ok(-((n as f64 - 30.0).powi(2) + 100.0 * (b - 1.4).powi(2)))
    }

    #[test]
    fn ei_closed_forms() {
        assert_eq!(expected_improvement(0.3, 0.0, 0.5), 0.0);
        assert!((expected_improvement(0.5 + EI_XI + 0.05, 0.0, 0.5) - 0.05).abs() < 1e-12);
        assert!((expected_improvement(0.5 + EI_XI, 1.0, 0.5) - 0.398_942_280_401_432_7).abs() < 1e-9);
    }

    #[test]
    fn gp_interpolates_and_reverts() {
        let xs = [[0.0, 0.0], [0.1, 0.2], [0.3, 0.1]];
        let ys = [0.1, 0.4, 0.25];
        let gp = GaussianProcess::fit(&xs, &ys).unwrap();
        let (m, s) = gp.predict([0.1, 0.2]);
        assert!((m - 0.4).abs() < 1e-6, "mean {m}");
        assert!(s < 1e-3);
        let (m, s) = gp.predict([1.0, 1.0]);
        assert!((m - 0.25).abs() < 1e-3);
        assert!((s - gp.prior_std()).abs() < 1e-3);
    }

    #[test]
    fn gp_symmetric_under_swap() {
        let c = [0.5, 0.5];
        let a = gp_posterior(&[[0.3, 0.5], [0.7, 0.5]], &[1.0, 2.0], c).unwrap();
        let b = gp_posterior(&[[0.7, 0.5], [0.3, 0.5]], &[1.0, 2.0], c).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn gp_handles_duplicates_with_jitter() {
        let xs = [[0.2, 0.2]; 4];
        let ys = [1.0, 1.0, 1.0, 1.0];
        assert!(GaussianProcess::fit(&xs, &ys).is_ok());
    }

    #[test]
    fn grid_is_exhaustive() {
        let out = search(
            &space(),
            &SearchConfig {
                mode: SearchMode::Grid,
                ..Default::default()
            },
            objective,
        )
        .unwrap();
        assert_eq!(out.explored.len(), 36);
        assert_eq!((out.best_n, out.best_beta), (30, 1.4));
    }

    #[test]
    fn bo_finds_argmax_without_revisits() {
        let out = search(&space(), &SearchConfig::default(), objective).unwrap();
        assert_eq!((out.best_n, out.best_beta), (30, 1.4));
        let mut seen: Vec<(usize, u64)> = out.explored.trials().iter().map(|t| (t.n, t.beta.to_bits())).collect();
        let len = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), len);
        assert!(len <= 20);
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let out = search(
            &space(),
            &SearchConfig {
                mode: SearchMode::Grid,
                ..Default::default()
            },
            |n, b| {
                if n == 30 {
                    Err(Error::InvalidParameter("boom".into()))
                } else {
                    objective(n, b)
                }
            },
        )
        .unwrap();
        assert_eq!(out.explored.len(), 36);
        assert!(out.explored.trials().iter().any(|t| t.mig == f64::NEG_INFINITY));
        assert_ne!(out.best_n, 30);
    }

    #[test]
    fn random_is_reproducible_and_unique() {
        let cfg = SearchConfig {
            mode: SearchMode::Random,
            budget: 10,
            seed: 9,
            ..Default::default()
        };
        let a = search(&space(), &cfg, objective).unwrap();
        let b = search(&space(), &cfg, objective).unwrap();
        assert_eq!(a.explored, b.explored);
        assert_eq!(a.explored.len(), 10);
    }

    #[test]
    fn space_validation_and_csv() {
        assert!(SearchSpace::new(vec![], vec![1.0]).is_err());
        assert!(SearchSpace::new(vec![3, 2], vec![1.0]).is_err());
        assert!(SearchSpace::new(vec![2], vec![1.0, 1.0]).is_err());
        let out = search(&space(), &SearchConfig::default(), objective).unwrap();
        let mut buf = Vec::new();
        out.explored.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("iteration,mode,n,beta,mig,seconds\n"));
        assert_eq!(ExploredList::read_csv(&buf[..]).unwrap(), out.explored);
    }
}
