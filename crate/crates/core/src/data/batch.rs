use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{input_err, Result};

/// `len` consecutive epochs of one recording starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window {
    pub recording: usize,
    pub start: usize,
    pub len: usize,
}

/// All windows of `len` epochs taken every `stride` epochs, in source
/// order. Recordings shorter than `len` are skipped with a warning.
pub fn sequence_windows(ds: &Dataset, len: usize, stride: usize) -> Result<Vec<Window>> {
    if len == 0 || stride == 0 || stride > len {
        return Err(input_err!("need 1 <= stride <= len, got len {len}, stride {stride}"));
    }
    let mut out = Vec::new();
    for (ri, rec) in ds.recordings.iter().enumerate() {
        let n = rec.epochs.len();
        if n < len {
            log::warn!("recording {} has {n} epochs, fewer than the window length {len}; skipped", rec.id);
            continue;
        }
        out.extend((0..=n - len).step_by(stride).map(|start| Window { recording: ri, start, len }));
    }
    if out.is_empty() {
        return Err(input_err!("no recording reaches the window length {len}"));
    }
    Ok(out)
}

/// Shuffled windows grouped into batches of `batch`; the last batch may be
/// partial.
pub fn make_sequence_batches<R: Rng>(ds: &Dataset, len: usize, batch: usize, stride: usize, rng: &mut R) -> Result<Vec<Vec<Window>>> {
    if batch == 0 {
        return Err(input_err!("batch size must be positive"));
    }
    let mut w = sequence_windows(ds, len, stride)?;
    w.shuffle(rng);
    Ok(w.chunks(batch).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{EpochRecord, Recording};
    use crate::dsp::RawEpoch;

    fn ds_with(lengths: &[usize]) -> Dataset {
        let e = EpochRecord::new(RawEpoch::zeros(), 0).unwrap();
        Dataset {
            recordings: lengths.iter().enumerate().map(|(i, &n)| Recording { id: format!("r{i}"), epochs: vec![e.clone(); n] }).collect(),
            source: String::new(),
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(sequence_windows(&ds_with(&[42]), 21, 21).unwrap().len(), 2);
        assert!(sequence_windows(&ds_with(&[20]), 21, 21).is_err());
        assert_eq!(sequence_windows(&ds_with(&[20, 21]), 21, 21).unwrap(), vec![Window { recording: 1, start: 0, len: 21 }]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_sequence_batches(&ds_with(&[105]), 21, 2, 21, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert!(sequence_windows(&ds_with(&[42]), 21, 22).is_err());
        assert_eq!(sequence_windows(&ds_with(&[23]), 21, 1).unwrap().len(), 3);
    }

    proptest! {
        #[test]
        fn batches_are_a_permutation_of_windows(lengths in prop::collection::vec(0usize..90, 1..6), b in 1usize..7, seed in any::<u64>()) {
            let ds = ds_with(&lengths);
            let Ok(all) = sequence_windows(&ds, 21, 21) else {
                prop_assert!(lengths.iter().all(|&n| n < 21));
                return Ok(());
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = make_sequence_batches(&ds, 21, b, 21, &mut rng).unwrap();
            prop_assert!(batches[..batches.len() - 1].iter().all(|x| x.len() == b));
            let mut flat: Vec<Window> = batches.into_iter().flatten().collect();
            flat.sort();
            prop_assert_eq!(&flat, &all);
            // non-overlapping: every epoch used at most once
            let mut seen = std::collections::HashSet::new();
            for w in &flat {
                for i in w.start..w.start + w.len {
                    prop_assert!(seen.insert((w.recording, i)));
                }
            }
            let expect: usize = lengths.iter().map(|n| n / 21).sum();
            prop_assert_eq!(flat.len(), expect);
        }
    }
}
