//! On-disk dataset layout: `labels.csv` plus one binary file per frame under
//! `frames/<scene>/<index>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{FeatureVector, Frame, Scene};

pub const LABELS_FILE: &str = "labels.csv";
pub const FRAMES_DIR: &str = "frames";
const FRAME_MAGIC: &[u8; 4] = b"BVFR";

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    scene: String,
    frame: usize,
    brightness: f64,
    precipitation: f64,
    cloudiness: f64,
    segment_id: u32,
}

pub fn frame_path(dir: &Path, scene: &str, index: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(scene).join(format!("{index:05}.bin"))
}

/// Pixels are stored as `f32`; rendered frames are already `f32`-exact.
pub fn frame_to_bytes(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * frame.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(frame.width as u16).to_le_bytes());
    out.extend_from_slice(&(frame.height as u16).to_le_bytes());
    for &p in &frame.pixels {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn frame_from_bytes(data: &[u8]) -> Result<Frame> {
    if data.len() < 8 || &data[..4] != FRAME_MAGIC {
        return Err(Error::format("frame", "bad magic or truncated header"));
    }
    let width = u16::from_le_bytes([data[4], data[5]]) as usize;
    let height = u16::from_le_bytes([data[6], data[7]]) as usize;
    let body = &data[8..];
    if body.len() != 4 * width * height {
        return Err(Error::format("frame", format!("expected {} pixels", width * height)));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Frame::new(width, height, pixels)
}

pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join(LABELS_FILE);
    let file = fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut labels = csv::Writer::from_writer(file);
    for scene in scenes {
        let scene_dir = dir.join(FRAMES_DIR).join(&scene.name);
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        for (i, (frame, l)) in scene.frames.iter().zip(&scene.labels).enumerate() {
            let path = frame_path(dir, &scene.name, i);
            fs::write(&path, frame_to_bytes(frame)).map_err(|e| Error::io(&path, e))?;
            labels.serialize(LabelRow {
                scene: scene.name.clone(),
                frame: i,
                brightness: l.brightness,
                precipitation: l.precipitation,
                cloudiness: l.cloudiness,
                segment_id: l.segment_id,
            })?;
        }
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

/// Loads every scene listed in `labels.csv`, in first-appearance order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let labels_path = dir.join(LABELS_FILE);
    let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut scenes: Vec<Scene> = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        let row: LabelRow = row?;
        let i = match scenes.iter().position(|s| s.name == row.scene) {
            Some(i) => i,
            None => {
                scenes.push(Scene {
                    name: row.scene.clone(),
                    frames: Vec::new(),
                    labels: Vec::new(),
                });
                scenes.len() - 1
            }
        };
        if row.frame != scenes[i].frames.len() {
            return Err(Error::format(
                "labels.csv",
                format!("scene `{}` lists frame {} out of order", row.scene, row.frame),
            ));
        }
        let label = FeatureVector {
            brightness: row.brightness,
            precipitation: row.precipitation,
            cloudiness: row.cloudiness,
            segment_id: row.segment_id,
        };
        label.validate()?;
        let path = frame_path(dir, &row.scene, row.frame);
        let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        scenes[i].frames.push(frame_from_bytes(&data)?);
        scenes[i].labels.push(label);
    }
    Ok(scenes)
}
