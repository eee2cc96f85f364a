//! Labeled recordings, the SLPD container, the synthetic generator and
//! sequence windowing.

mod batch;
mod container;
mod csv_import;
mod synth;

pub use batch::{make_sequence_batches, sequence_windows, Window};
pub use container::{read_dataset, write_dataset, MAGIC, VERSION};
pub use csv_import::read_csv_recording;
pub use synth::{generate_synthetic, transition_row, P_STAY};

use crate::config::N_CLASSES;
use crate::dsp::{RawEpoch, Spectrogram, Stft};
use crate::error::{input_err, Result};

pub const STAGE_NAMES: [&str; N_CLASSES] = ["Wake", "NREM1", "NREM2", "NREM3", "REM"];

/// One 30 s epoch with its stage label and an optional cached spectrogram.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub raw: RawEpoch,
    pub label: u8,
    pub spectrogram: Option<Spectrogram>,
}

impl EpochRecord {
    pub fn new(raw: RawEpoch, label: u8) -> Result<Self> {
        if label as usize >= N_CLASSES {
            return Err(input_err!("label {label} outside 0..{N_CLASSES}"));
        }
        Ok(EpochRecord { raw, label, spectrogram: None })
    }
}

/// Bitwise on samples and label; the spectrogram cache is ignored.
impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.raw.samples().iter().zip(other.raw.samples()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    /// Generator seed or source path.
    pub source: String,
}

/// Compares recordings only.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.recordings == other.recordings
    }
}

impl Dataset {
    pub fn num_epochs(&self) -> usize {
        self.recordings.iter().map(|r| r.epochs.len()).sum()
    }

    pub fn epoch(&self, recording: usize, index: usize) -> &EpochRecord {
        &self.recordings[recording].epochs[index]
    }

    /// Fills every missing spectrogram cache entry.
    pub fn cache_spectrograms(&mut self) {
        let stft = Stft::new();
        for rec in &mut self.recordings {
            for e in &mut rec.epochs {
                if e.spectrogram.is_none() {
                    e.spectrogram = Some(stft.spectrogram(&e.raw));
                }
            }
        }
    }

    /// Per-class epoch counts.
    pub fn label_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for rec in &self.recordings {
            for e in &rec.epochs {
                c[e.label as usize] += 1;
            }
        }
        c
    }
}
