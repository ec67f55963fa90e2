//! Versioned JSON containers for checkpoints and reports, and RNG state capture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Complete position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// 128-bit word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::CheckpointMismatch(format!("bad word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

/// Writes `payload` tagged with `kind` and the format version.
pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(
            &mut w,
            &Envelope {
                kind: kind.to_string(),
                version: FORMAT_VERSION,
                payload,
            },
        )?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Reads a file written by [`save`], checking kind and version.
pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::MissingPrerequisite(format!("{}: {e}", path.display())))?;
    let env: Envelope<T> = serde_json::from_reader(BufReader::new(file))?;
    if env.kind != kind {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            env.kind
        )));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "{}: format version {} (supported: {FORMAT_VERSION})",
            path.display(),
            env.version
        )));
    }
    Ok(env.payload)
}
