//! JSON-lines dataset manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub text: String,
    /// 0 = pristine, 1 = manipulated
    pub pair_fake: u8,
    /// FS, FA, TS, TA
    pub fg_labels: [bool; 4],
    /// cxcywh in the unit square
    pub face_boxes: Vec<[f64; 4]>,
    /// Positions in the tokenized content sequence.
    pub fake_token_indices: Vec<usize>,
}

impl ManifestRecord {
    /// Checks the record invariants; the message names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("record {:?}: {m}", self.id)));
        if self.id.is_empty() {
            return bad("field `id` is empty".into());
        }
        if self.pair_fake > 1 {
            return bad(format!("field `pair_fake` must be 0 or 1, got {}", self.pair_fake));
        }
        if self.pair_fake == 0 && self.fg_labels.iter().any(|&l| l) {
            return bad("field `fg_labels` marks a manipulation on a pristine pair".into());
        }
        for b in &self.face_boxes {
            if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) || b[2] <= 0.0 || b[3] <= 0.0 {
                return bad(format!("field `face_boxes` has {b:?} outside the unit square"));
            }
        }
        if self.pair_fake == 0 && !(self.face_boxes.is_empty() && self.fake_token_indices.is_empty()) {
            return bad("pristine pair carries grounding annotations".into());
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

pub fn to_jsonl(records: &[ManifestRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    std::fs::write(&path, to_jsonl(records)?).map_err(|e| Error::io(&path, e))
}
