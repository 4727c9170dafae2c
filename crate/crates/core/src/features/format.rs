//! `ALNF` feature files.
//!
//! ```text
//! "ALNF" | version u16 | rows u32 | cols u32
//!        | utterance_id (u16 len + UTF-8) | speaker_id (u16 len + UTF-8)
//!        | normalized u8 | rows*cols f32
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ALNF";
pub const FEATURE_VERSION: u16 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Input(format!("id too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_features<W: Write>(w: &mut W, f: &FeatureMatrix) -> Result<()> {
    let rows = u32::try_from(f.frames()).map_err(|_| Error::Input("too many frames".into()))?;
    let cols = u32::try_from(f.channels()).map_err(|_| Error::Input("too many channels".into()))?;
    let mut buf = Vec::with_capacity(32 + f.values().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    write_str(&mut buf, &f.utterance_id)?;
    write_str(&mut buf, &f.speaker_id)?;
    buf.push(u8::from(f.normalized));
    for v in f.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("feature file truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Integrity("id is not UTF-8".into()))
    }
}

pub fn read_features<R: Read>(r: &mut R) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != FEATURE_MAGIC {
        return Err(Error::Integrity("bad feature-file magic".into()));
    }
    let version = c.u16()?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let utterance_id = c.string()?;
    let speaker_id = c.string()?;
    let normalized = match c.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Integrity(format!("bad normalized flag {other}"))),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Integrity("dimension overflow".into()))?;
    let raw = c.take(count.checked_mul(4).ok_or_else(|| Error::Integrity("dimension overflow".into()))?)?;
    if c.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after feature data",
            bytes.len() - c.pos
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut f = FeatureMatrix::new(utterance_id, speaker_id, rows, cols, values)
        .map_err(|e| Error::Integrity(e.to_string()))?;
    f.normalized = normalized;
    Ok(f)
}

pub fn write_features_file(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::new();
    write_features(&mut buf, f)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features_file(path: &Path) -> Result<FeatureMatrix> {
    read_features(&mut fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        let mut f = FeatureMatrix::new("utt-1", "spk", 2, 3, vec![0.5, -1.0, 2.25, 3.0, 0.0, -7.5]).unwrap();
        f.normalized = true;
        f
    }

    #[test]
    fn header_layout_is_exact() {
        let mut buf = Vec::new();
        write_features(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"ALNF");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[2, 0, 0, 0]);
        assert_eq!(&buf[10..14], &[3, 0, 0, 0]);
        assert_eq!(&buf[14..16], &[5, 0]);
        assert_eq!(&buf[16..21], b"utt-1");
        assert_eq!(&buf[21..23], &[3, 0]);
        assert_eq!(&buf[23..26], b"spk");
        assert_eq!(buf[26], 1);
        assert_eq!(&buf[27..31], &0.5f32.to_le_bytes());
        assert_eq!(buf.len(), 27 + 6 * 4);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let mut buf = Vec::new();
        write_features(&mut buf, &sample()).unwrap();
        let truncated = &buf[..buf.len() - 1];
        assert!(matches!(read_features(&mut &truncated[..]), Err(Error::Integrity(_))));
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_features(&mut &bad_magic[..]), Err(Error::Integrity(_))));
        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(read_features(&mut &bad_version[..]), Err(Error::Version { .. })));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_features(&mut &trailing[..]), Err(Error::Integrity(_))));
    }
}
