use std::fs;
use std::path::Path;

use super::{Dataset, EpochRecord, Recording};
use crate::dsp::{RawEpoch, EPOCH_SAMPLES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLPD";
pub const VERSION: u16 = 1;

/// Encodes `ds` in the little-endian SLPD layout.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + ds.num_epochs() * (EPOCH_SAMPLES * 4 + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(ds.recordings.len()).map_err(|_| Error::Input("too many recordings".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for rec in &ds.recordings {
        let id = rec.id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Input(format!("recording id of {} bytes is too long", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        let ne = u32::try_from(rec.epochs.len()).map_err(|_| Error::Input("too many epochs".into()))?;
        out.extend_from_slice(&ne.to_le_bytes());
        for e in &rec.epochs {
            for v in e.raw.samples() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(e.label);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated {field} at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic at offset 0".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version} at offset 4")));
    }
    let n = r.u32("recording count")?;
    let mut recordings = Vec::new();
    for _ in 0..n {
        let len = r.u16("id length")? as usize;
        let at = r.pos;
        let id = std::str::from_utf8(r.take(len, "recording id")?)
            .map_err(|_| Error::Format(format!("recording id is not UTF-8 at offset {at}")))?
            .to_string();
        let ne = r.u32("epoch count")?;
        let mut epochs = Vec::with_capacity(ne as usize);
        for _ in 0..ne {
            let at = r.pos;
            let bytes = r.take(EPOCH_SAMPLES * 4, "epoch samples")?;
            let samples: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let raw = RawEpoch::new(samples).map_err(|e| Error::Format(format!("{} at offset {at}", e.detail())))?;
            let at = r.pos;
            let label = r.take(1, "label")?[0];
            let rec = EpochRecord::new(raw, label).map_err(|e| Error::Format(format!("{} at offset {at}", e.detail())))?;
            epochs.push(rec);
        }
        recordings.push(Recording { id, epochs });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("trailing bytes at offset {}", r.pos)));
    }
    Ok(Dataset { recordings, source: String::new() })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path)?;
    let mut ds = decode(&buf)?;
    ds.source = path.display().to_string();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn roundtrip_synthetic_and_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.slpd");
        for ds in [
            generate_synthetic(3, 5, 1),
            Dataset::default(),
            generate_synthetic(1, 1, 2),
            Dataset { recordings: vec![Recording { id: "empty".into(), epochs: vec![] }], source: String::new() },
        ] {
            write_dataset(&ds, &p).unwrap();
            let back = read_dataset(&p).unwrap();
            assert_eq!(back, ds);
            assert_eq!(encode(&back).unwrap(), fs::read(&p).unwrap());
        }
    }

    #[test]
    fn layout_is_exact() {
        let ds = generate_synthetic(1, 2, 3);
        let b = encode(&ds).unwrap();
        let id = ds.recordings[0].id.len();
        assert_eq!(b.len(), 4 + 2 + 4 + 2 + id + 4 + 2 * (12000 + 1));
        assert_eq!(&b[..4], b"SLPD");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        let first = 10 + 2 + id + 4;
        assert_eq!(&b[first..first + 4], &ds.recordings[0].epochs[0].raw.samples()[0].to_le_bytes());
        assert_eq!(b[first + 12000], ds.recordings[0].epochs[0].label);
    }

    #[test]
    fn corrupt_inputs() {
        let mut b = encode(&generate_synthetic(1, 2, 3)).unwrap();
        let good = b.clone();
        b[0] = b'X';
        assert_eq!(decode(&b).unwrap_err().detail(), "bad magic at offset 0");
        let mut b = good.clone();
        b[4] = 2;
        assert!(decode(&b).unwrap_err().detail().contains("version"));
        let cut = decode(&good[..good.len() - 5]).unwrap_err();
        assert!(matches!(cut, Error::Format(_)));
        assert!(cut.detail().contains("truncated"));
        let mut b = good.clone();
        *b.last_mut().unwrap() = 9;
        assert!(decode(&b).unwrap_err().detail().contains("label"));
        assert!(decode(&[]).unwrap_err().detail().contains("offset 0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_random(shape in prop::collection::vec(0usize..3, 0..4), seed in any::<u64>(), id in "[a-zé]{0,12}") {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recordings = shape.iter().enumerate().map(|(i, &n)| Recording {
                id: format!("{id}{i}"),
                epochs: (0..n).map(|_| {
                    let s = (0..3000).map(|_| rng.random_range(-1e3f32..1e3)).collect();
                    EpochRecord::new(RawEpoch::new(s).unwrap(), rng.random_range(0..5)).unwrap()
                }).collect(),
            }).collect();
            let ds = Dataset { recordings, source: String::new() };
            let back = decode(&encode(&ds).unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
