//! Per-frame CSV trace of every channel.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DetectionOutput;
use crate::error::{Error, Result};

pub const DETECTOR_CHANNEL: &str = "detector";
pub const CHANGE_POINT_CHANNEL: &str = "change_point";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame: usize,
    pub channel: String,
    /// Nonconformity, or the moving average on the change-point channel.
    pub alpha: f64,
    pub p: Option<f64>,
    pub log_martingale: Option<f64>,
    pub cusum: f64,
    pub flag: u8,
}

pub fn write_trace<W: Write>(outputs: &[DetectionOutput], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for o in outputs {
        let channels =
            std::iter::once((DETECTOR_CHANNEL, &o.detector)).chain(o.reasoners.iter().map(|(f, c)| (f.name(), c)));
        for (name, c) in channels {
            out.serialize(TraceRow {
                frame: o.frame,
                channel: name.to_string(),
                alpha: c.alpha,
                p: Some(c.p),
                log_martingale: Some(c.log_martingale),
                cusum: c.cusum,
                flag: c.flag as u8,
            })?;
        }
        out.serialize(TraceRow {
            frame: o.frame,
            channel: CHANGE_POINT_CHANNEL.to_string(),
            alpha: o.change_point.avg_kl,
            p: None,
            log_martingale: None,
            cusum: o.change_point.cusum,
            flag: o.change_point.flag as u8,
        })?;
    }
    out.flush().map_err(|e| Error::io("trace.csv", e))?;
    Ok(())
}

/// Flags per channel in first-seen channel order, each indexed by frame.
pub fn read_trace<R: Read>(r: R) -> Result<Vec<(String, Vec<bool>)>> {
    let mut channels: Vec<(String, Vec<bool>)> = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: TraceRow = row?;
        let i = match channels.iter().position(|c| c.0 == row.channel) {
            Some(i) => i,
            None => {
                channels.push((row.channel.clone(), Vec::new()));
                channels.len() - 1
            }
        };
        if row.frame != channels[i].1.len() {
            return Err(Error::format(
                "trace",
                format!("channel `{}` skips frame {}", row.channel, row.frame),
            ));
        }
        channels[i].1.push(row.flag != 0);
    }
    Ok(channels)
}
