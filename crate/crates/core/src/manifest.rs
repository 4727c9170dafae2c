//! JSON-lines utterance manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_features_file, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub feature_path: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Inclusive `[start, end]` frame range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span_frames: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

/// A manifest record with its features loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub features: FeatureMatrix,
}

pub fn write_manifest<W: Write>(w: &mut W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    read_manifest(BufReader::new(file))
}

pub fn write_manifest_file(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

fn resolve(base: &Path, feature_path: &str) -> PathBuf {
    let p = Path::new(feature_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest and every feature file it names, in manifest order.
pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest_file(manifest)?
        .into_iter()
        .map(|record| {
            let path = resolve(base, &record.feature_path);
            let features = read_features_file(&path).map_err(|e| match e {
                Error::Io(io) => Error::Manifest(format!("{}: {io}", path.display())),
                other => other,
            })?;
            if features.utterance_id != record.utterance_id {
                return Err(Error::Manifest(format!(
                    "{} holds `{}`, manifest says `{}`",
                    path.display(),
                    features.utterance_id,
                    record.utterance_id
                )));
            }
            Ok(Utterance { record, features })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_are_omitted_and_unknown_keys_rejected() {
        let rec = ManifestRecord {
            utterance_id: "u1".into(),
            speaker_id: "s".into(),
            feature_path: "features/u1.alnf".into(),
            transcript: "alpha bravo".into(),
            label: None,
            answer_span_frames: Some([5, 9]),
            question: Some("bravo".into()),
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(!line.contains("label"));
        assert!(line.contains("\"answer_span_frames\":[5,9]"));
        assert_eq!(read_manifest(&buf[..]).unwrap(), vec![rec]);
        let bad = br#"{"utterance_id":"u","speaker_id":"s","feature_path":"f","transcript":"t","extra":1}"#;
        assert!(matches!(read_manifest(&bad[..]), Err(Error::Manifest(_))));
    }
}
