//! JSON-lines episode logs: a header line, then one record per policy step.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CubeState, DomainConfig, Event, JointVec};
use crate::error::Result;
use crate::rotations::Rotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub episode: u64,
    pub seed: u64,
    pub domain: DomainConfig,
    pub goal: Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Seconds since the episode start.
    pub t: f64,
    pub q: JointVec,
    pub q_bar: JointVec,
    pub cube_true: CubeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cube_est: Option<CubeState>,
    pub action: JointVec,
    pub reward: f64,
    pub event: Event,
    pub goal: Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header(EpisodeHeader),
    Step(StepRecord),
}

pub fn write_episode<W: Write>(out: &mut W, header: &EpisodeHeader, steps: &[StepRecord]) -> Result<()> {
    serde_json::to_writer(&mut *out, &LogLine::Header(header.clone()))?;
    out.write_all(b"\n")?;
    for s in steps {
        serde_json::to_writer(&mut *out, &LogLine::Step(s.clone()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a log written by [`write_episode`] (possibly several episodes).
pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<(EpisodeHeader, Vec<StepRecord>)>> {
    let mut out: Vec<(EpisodeHeader, Vec<StepRecord>)> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)? {
            LogLine::Header(h) => out.push((h, Vec::new())),
            LogLine::Step(s) => match out.last_mut() {
                Some((_, steps)) => steps.push(s),
                None => {
                    return Err(crate::error::Error::Config("step record before header".into()));
                }
            },
        }
    }
    Ok(out)
}
