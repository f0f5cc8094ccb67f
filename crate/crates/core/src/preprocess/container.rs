//! `MMB1` dataset container.
//!
//! Little-endian. Header: magic `MMB1`, then u32 version (1), n_samples,
//! us_rows, us_cols, fmg_len (8), n_classes (12). Each record: u16 label,
//! u16 session, u16 subject, u16 reserved (0), `us_rows * us_cols` f32
//! ultrasound values row-major, then 8 f32 FMG values. Provenance lives in a
//! JSON sidecar next to the file (`<stem>.meta.json`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Geometry, Grid, Provenance, Record, FMG_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 6 * 4;
const RECORD_PREFIX: usize = 8;

pub fn record_len(geometry: &Geometry) -> usize {
    RECORD_PREFIX + 4 * (geometry.us_rows * geometry.us_cols + FMG_CHANNELS)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let g = ds.geometry;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * record_len(&g));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        ds.len() as u32,
        g.us_rows as u32,
        g.us_cols as u32,
        FMG_CHANNELS as u32,
        N_CLASSES as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in &ds.records {
        for v in [r.label, r.session, r.subject, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in r.ultrasound.data().iter().chain(&r.fmg) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or_else(|| {
            Error::format(self.buf.len() as u64, format!("truncated: needed {N} bytes at {}", self.pos))
        })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length is N"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

/// Decodes a complete container; no partial dataset is ever returned.
pub fn decode_dataset(bytes: &[u8], provenance: Provenance) -> Result<Dataset> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take()?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"MMB1\"")));
    }
    let expect = |c: &mut Cursor, name: &str, want: u32| -> Result<u32> {
        let at = c.pos as u64;
        let v = c.u32()?;
        if v != want {
            return Err(Error::format(at, format!("{name} is {v}, expected {want}")));
        }
        Ok(v)
    };
    expect(&mut c, "version", VERSION)?;
    let n = c.u32()? as usize;
    let us_rows = c.u32()? as usize;
    let us_cols = c.u32()? as usize;
    expect(&mut c, "fmg_len", FMG_CHANNELS as u32)?;
    expect(&mut c, "n_classes", N_CLASSES as u32)?;
    if us_rows == 0 || us_cols == 0 {
        return Err(Error::format(12, format!("empty ultrasound geometry {us_rows}x{us_cols}")));
    }
    let geometry = Geometry { us_rows, us_cols };
    let rec = record_len(&geometry);
    let want = n
        .checked_mul(rec)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(8, "sample count overflows the address space"))?;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want) as u64,
            format!(
                "file is {} bytes, header implies {want} ({n} records of {rec} bytes)",
                bytes.len()
            ),
        ));
    }

    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let at = c.pos as u64;
        let label = c.u16()?;
        let session = c.u16()?;
        let subject = c.u16()?;
        let reserved = c.u16()?;
        if label as usize >= N_CLASSES {
            return Err(Error::format(at, format!("label {label} out of range")));
        }
        if reserved != 0 {
            return Err(Error::format(at + 6, format!("reserved field is {reserved}")));
        }
        let mut us = Vec::with_capacity(us_rows * us_cols);
        for _ in 0..us_rows * us_cols {
            us.push(c.f32()?);
        }
        let mut fmg = [0.0; FMG_CHANNELS];
        for v in fmg.iter_mut() {
            *v = c.f32()?;
        }
        records.push(Record {
            ultrasound: Grid::new(us_rows, us_cols, us)?,
            fmg,
            label,
            session,
            subject,
        });
    }
    Ok(Dataset {
        geometry,
        records,
        provenance,
    })
}

/// Writes the container and its `.meta.json` sidecar.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&ds.provenance).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Reads a container; a missing sidecar yields empty provenance.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let provenance = match fs::read_to_string(&side) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::json(&side, e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Provenance::default(),
        Err(e) => return Err(Error::io(&side, e)),
    };
    decode_dataset(&bytes, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Dataset {
        let g = Geometry { us_rows: 2, us_cols: 8 };
        let records = (0..n)
            .map(|i| Record {
                ultrasound: Grid::from_fn(2, 8, |r, c| (i * 100 + r * 8 + c) as f32 * 0.5),
                fmg: [i as f32; 8],
                label: (i % 12) as u16,
                session: (i / 2) as u16,
                subject: 3,
            })
            .collect();
        Dataset::new(
            g,
            records,
            Provenance {
                seed: Some(9),
                generator: None,
                note: Some("unit".into()),
            },
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_three_frames() {
        let ds = sample(3);
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * record_len(&ds.geometry));
        assert_eq!(record_len(&ds.geometry), 8 + 4 * (16 + 8));
        let back = decode_dataset(&bytes, ds.provenance.clone()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = encode_dataset(&sample(2)).unwrap();
        bytes[1] = b'X';
        match decode_dataset(&bytes, Provenance::default()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_header_fields_rejected() {
        let bytes = encode_dataset(&sample(2)).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_dataset(cut, Provenance::default()),
            Err(Error::Format { offset, .. }) if offset == cut.len() as u64
        ));
        assert!(matches!(
            decode_dataset(&bytes[..10], Provenance::default()),
            Err(Error::Format { .. })
        ));

        let mut bad = bytes.clone();
        bad[20] = 9; // fmg_len
        assert!(matches!(
            decode_dataset(&bad, Provenance::default()),
            Err(Error::Format { offset: 20, .. })
        ));

        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 200; // first label
        assert!(matches!(
            decode_dataset(&bad, Provenance::default()),
            Err(Error::Format { offset, .. }) if offset == HEADER_LEN as u64
        ));
    }

    #[test]
    fn file_and_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.mmb");
        let ds = sample(5);
        write_dataset(&ds, &path).unwrap();
        assert!(dir.path().join("set.meta.json").exists());
        assert_eq!(read_dataset(&path).unwrap(), ds);
        let missing = dir.path().join("nope.mmb");
        assert!(read_dataset(&missing).unwrap_err().is_io());
    }
}
