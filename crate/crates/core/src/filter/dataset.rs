//! Filter training sequences and their binary file format.
//!
//! A file starts with the magic `TFDS`, a format version and the sequence
//! count (little endian). Each sequence stores its source tag, length, the
//! initial state and then per step `q, qdot, u` (12 each) and the true state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{state_from_row, state_row, STATE_DIM};
use crate::env::{CubeState, EstimatorSample, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::policy::{PolicyNet, Worker};

const MAGIC: &[u8; 4] = b"TFDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Rollouts of a policy fed with simulator states.
    Offline,
    /// Rollouts with the filter driving the policy.
    InLoop,
}

/// `steps[t]` holds the inputs at time `t + 1` together with the true state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub source: DataSource,
    pub initial: CubeState,
    pub steps: Vec<EstimatorSample>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The first `t` steps.
    pub fn truncated(&self, t: usize) -> Sequence {
        Sequence {
            source: self.source,
            initial: self.initial,
            steps: self.steps[..t.min(self.steps.len())].to_vec(),
        }
    }

    /// All one-step transitions `(previous state, sample)`.
    pub fn pairs(&self) -> impl Iterator<Item = (CubeState, &EstimatorSample)> + '_ {
        std::iter::once(self.initial)
            .chain(self.steps.iter().map(|s| s.cube))
            .zip(self.steps.iter())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn count(&self, source: DataSource) -> usize {
        self.sequences.iter().filter(|s| s.source == source).count()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits off a held-out fraction after a seeded shuffle.
    pub fn split<R: Rng + ?Sized>(mut self, held_out: f64, rng: &mut R) -> (Dataset, Dataset) {
        self.sequences.shuffle(rng);
        let k = ((self.sequences.len() as f64) * held_out).round() as usize;
        let rest = self.sequences.split_off(k);
        (
            Dataset { sequences: rest },
            Dataset {
                sequences: self.sequences,
            },
        )
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(self.sequences.len() as u64)?;
        for seq in &self.sequences {
            out.write_u8(match seq.source {
                DataSource::Offline => 0,
                DataSource::InLoop => 1,
            })?;
            out.write_u32::<LittleEndian>(seq.steps.len() as u32)?;
            for v in state_row(&seq.initial) {
                out.write_f64::<LittleEndian>(v)?;
            }
            for s in &seq.steps {
                for v in s.q.iter().chain(&s.qdot).chain(&s.u) {
                    out.write_f64::<LittleEndian>(*v)?;
                }
                for v in state_row(&s.cube) {
                    out.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CheckpointMismatch("not a filter dataset".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "dataset format {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = input.read_u64::<LittleEndian>()?;
        let mut sequences = Vec::with_capacity(count as usize);
        let read_state = |input: &mut dyn Read| -> Result<CubeState> {
            let mut row = [0.0; STATE_DIM];
            for v in row.iter_mut() {
                *v = input.read_f64::<LittleEndian>()?;
            }
            Ok(state_from_row(&row))
        };
        for _ in 0..count {
            let source = match input.read_u8()? {
                0 => DataSource::Offline,
                1 => DataSource::InLoop,
                t => return Err(Error::CheckpointMismatch(format!("unknown sequence source {t}"))),
            };
            let len = input.read_u32::<LittleEndian>()? as usize;
            let initial = read_state(input)?;
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                let mut arr = [[0.0; NUM_JOINTS]; 3];
                for a in arr.iter_mut() {
                    for v in a.iter_mut() {
                        *v = input.read_f64::<LittleEndian>()?;
                    }
                }
                let cube = read_state(input)?;
                steps.push(EstimatorSample {
                    q: arr[0],
                    qdot: arr[1],
                    u: arr[2],
                    cube,
                });
            }
            sequences.push(Sequence { source, initial, steps });
        }
        Ok(Dataset { sequences })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Counters of a rollout collection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub steps: usize,
    pub attempts: usize,
    pub successes: usize,
    pub episodes: usize,
}

impl RolloutStats {
    pub fn success_rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }
}

/// Rolls out `policy` on `worker` and cuts the 100 Hz samples of every
/// episode into non-overlapping sequences of `len` steps.
pub fn rollout_sequences(
    worker: &mut Worker,
    policy: &PolicyNet,
    count: usize,
    len: usize,
    source: DataSource,
) -> Result<(Vec<Sequence>, RolloutStats)> {
    assert!(len > 0, "sequence length must be positive");
    let mut out = Vec::with_capacity(count);
    let mut stats = RolloutStats::default();
    let mut buf: Vec<EstimatorSample> = Vec::with_capacity(len + 1);
    let max_steps = 1000 + 50 * count * len;
    while out.len() < count {
        if stats.steps > max_steps {
            return Err(Error::Config(format!(
                "collected only {} of {count} sequences in {} steps; episodes are too short",
                out.len(),
                stats.steps
            )));
        }
        let Some(o) = worker.step(policy, false)? else {
            buf.clear();
            continue;
        };
        stats.steps += 1;
        if let Some(ok) = o.attempt {
            stats.attempts += 1;
            stats.successes += ok as usize;
        }
        for s in o.samples {
            buf.push(s);
            if buf.len() == len + 1 && out.len() < count {
                out.push(Sequence {
                    source,
                    initial: buf[0].cube,
                    steps: buf[1..].to_vec(),
                });
                buf.drain(..len);
            }
        }
        if o.episode_end {
            stats.episodes += 1;
            buf.clear();
        }
    }
    Ok((out, stats))
}
