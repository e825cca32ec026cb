//! Artifact directory layout, the command lock and the small manifest
//! formats owned by the command line tool.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bvae_ood::monitor::{load_calibration, save_calibration, Channel, Cusum, DetectorProfile};
use bvae_ood::scenegen::{FrameRef, Split};
use bvae_ood::{Feature, Scene};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const SUMMARY_FILE: &str = "summary.jsonl";

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data").join("test")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.csv")
    }

    pub fn partitions(&self) -> PathBuf {
        self.root.join("partitions.csv")
    }

    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.csv")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.bin")
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("training.csv")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.csv")
    }

    pub fn profile(&self) -> PathBuf {
        self.root.join("profile.toml")
    }

    pub fn calibration_dir(&self) -> PathBuf {
        self.root.join("calibration")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn trace(&self, scene: &str) -> PathBuf {
        self.traces_dir().join(format!("{scene}.csv"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY_FILE)
    }

    /// Appends one summary record as a JSON line.
    pub fn append_summary(&self, record: &serde_json::Value) -> CliResult<()> {
        let path = self.summary();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        writeln!(f, "{record}").map_err(|e| CliError::io(&path, e))
    }
}

/// Fails with a dependency error naming `path` unless it exists.
pub fn require(path: &Path, producer: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn open(path: &Path, producer: &'static str) -> CliResult<BufReader<File>> {
    require(path, producer)?;
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

/// Exclusive claim on an artifact directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(root.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    scene: String,
    frame: usize,
    role: String,
}

pub fn write_split(path: &Path, split: &Split, scenes: &[Scene]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for (refs, role) in [(&split.train, "train"), (&split.calibration, "calibration")] {
        for r in refs {
            w.serialize(SplitRow {
                scene: scenes[r.scene].name.clone(),
                frame: r.frame,
                role: role.into(),
            })?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_split(path: &Path, scenes: &[Scene]) -> CliResult<Split> {
    let mut r = csv::Reader::from_reader(open(path, "partition")?);
    let mut split = Split {
        train: Vec::new(),
        calibration: Vec::new(),
    };
    for row in r.deserialize() {
        let row: SplitRow = row?;
        let scene = scenes
            .iter()
            .position(|s| s.name == row.scene)
            .ok_or_else(|| CliError::artifact(path, format!("unknown scene `{}`", row.scene)))?;
        if row.frame >= scenes[scene].len() {
            return Err(CliError::artifact(
                path,
                format!("frame {} out of range for `{}`", row.frame, row.scene),
            ));
        }
        let r = FrameRef {
            scene,
            frame: row.frame,
        };
        match row.role.as_str() {
            "train" => split.train.push(r),
            "calibration" => split.calibration.push(r),
            other => return Err(CliError::artifact(path, format!("unknown role `{other}`"))),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelEntry {
    latents: Vec<usize>,
    omega: f64,
    tau: f64,
    /// Calibration scores, relative to the artifact directory.
    calibration: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReasonerEntry {
    feature: Feature,
    latents: Vec<usize>,
    omega: f64,
    tau: f64,
    calibration: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CusumEntry {
    omega: f64,
    tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    window: usize,
    detector: ChannelEntry,
    change_point: CusumEntry,
    reasoners: Vec<ReasonerEntry>,
}

fn calibration_name(channel: &str) -> PathBuf {
    Path::new("calibration").join(format!("{channel}.bin"))
}

/// Writes `profile.toml` and one calibration file per channel.
///
/// The change-point thresholds are written resolved, so a profile read back
/// always carries explicit values.
pub fn save_profile(art: &Artifacts, profile: &DetectorProfile) -> CliResult<()> {
    let cp = profile.change_point()?;
    let dir = art.calibration_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let detector_file = calibration_name("detector");
    save_calibration(&art.root.join(&detector_file), &profile.detector.scores)?;
    let mut reasoners = Vec::new();
    for (feature, ch) in &profile.reasoners {
        let file = calibration_name(feature.name());
        save_calibration(&art.root.join(&file), &ch.scores)?;
        reasoners.push(ReasonerEntry {
            feature: *feature,
            latents: ch.latents.clone(),
            omega: ch.cusum.omega,
            tau: ch.cusum.tau,
            calibration: file,
        });
    }
    let doc = ProfileFile {
        window: profile.window,
        detector: ChannelEntry {
            latents: profile.detector.latents.clone(),
            omega: profile.detector.cusum.omega,
            tau: profile.detector.cusum.tau,
            calibration: detector_file,
        },
        change_point: CusumEntry {
            omega: cp.omega,
            tau: cp.tau,
        },
        reasoners,
    };
    let text = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    let path = art.profile();
    let mut w = create(&path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))
}

pub fn load_profile(art: &Artifacts) -> CliResult<DetectorProfile> {
    let path = art.profile();
    require(&path, "calibrate")?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let doc: ProfileFile = toml::from_str(&text).map_err(|e| CliError::artifact(&path, e.to_string()))?;
    let scores = |file: &Path| -> CliResult<Vec<f64>> {
        let p = art.root.join(file);
        require(&p, "calibrate")?;
        Ok(load_calibration(&p)?)
    };
    let profile = DetectorProfile {
        window: doc.window,
        detector: Channel {
            scores: scores(&doc.detector.calibration)?,
            latents: doc.detector.latents,
            cusum: Cusum {
                omega: doc.detector.omega,
                tau: doc.detector.tau,
            },
        },
        reasoners: doc
            .reasoners
            .into_iter()
            .map(|r| {
                Ok((
                    r.feature,
                    Channel {
                        scores: scores(&r.calibration)?,
                        latents: r.latents,
                        cusum: Cusum {
                            omega: r.omega,
                            tau: r.tau,
                        },
                    },
                ))
            })
            .collect::<CliResult<_>>()?,
        cp_omega: Some(doc.change_point.omega),
        cp_tau: Some(doc.change_point.tau),
    };
    profile.validate()?;
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn profile_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let art = Artifacts::new(dir.path());
        let channel = |latents: Vec<usize>, scores: Vec<f64>| Channel {
            latents,
            scores,
            cusum: Cusum {
                omega: 14.0,
                tau: 100.0,
            },
        };
        let profile = DetectorProfile {
            window: 20,
            detector: channel(vec![0, 2, 5], vec![0.1, 0.25, 1.0 / 3.0, 0.7]),
            reasoners: vec![
                (Feature::Brightness, channel(vec![2], vec![0.0, 0.5])),
                (Feature::Precipitation, channel(vec![5], vec![0.125])),
            ],
            cp_omega: None,
            cp_tau: None,
        };
        save_profile(&art, &profile).unwrap();
        let back = load_profile(&art).unwrap();
        let cp = profile.change_point().unwrap();
        assert_eq!(back.detector, profile.detector);
        assert_eq!(back.reasoners, profile.reasoners);
        assert_eq!(back.window, 20);
        assert_eq!((back.cp_omega, back.cp_tau), (Some(cp.omega), Some(cp.tau)));
    }

    #[test]
    fn missing_profile_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_profile(&Artifacts::new(dir.path())).unwrap_err();
        assert!(err.to_string().contains("profile.toml"));
        assert!(err.to_string().contains("calibrate"));
    }
}
