use std::path::Path;

use super::{EpochRecord, Recording};
use crate::dsp::{RawEpoch, EPOCH_SAMPLES};
use crate::error::{Error, Result};

/// Reads a headerless CSV where each row is 3000 samples followed by a
/// label; the whole file becomes one recording named `id`.
pub fn read_csv_recording(path: &Path, id: &str) -> Result<Recording> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    let mut epochs = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        if row.len() != EPOCH_SAMPLES + 1 {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", i + 1, row.len(), EPOCH_SAMPLES + 1)));
        }
        let parse = |j: usize| {
            row[j].trim().parse::<f32>().map_err(|_| Error::Format(format!("row {} field {}: {:?} is not a number", i + 1, j + 1, &row[j])))
        };
        let samples = (0..EPOCH_SAMPLES).map(parse).collect::<Result<Vec<_>>>()?;
        let label: u8 = row[EPOCH_SAMPLES]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {}: label {:?} is not an integer", i + 1, &row[EPOCH_SAMPLES])))?;
        epochs.push(EpochRecord::new(RawEpoch::new(samples)?, label)?);
    }
    Ok(Recording { id: id.to_string(), epochs })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
