//! Corpus persistence: a JSON-lines manifest plus one binary mel file per
//! utterance.
//!
//! Manifest line schema (UTF-8, one object per utterance):
//! `{"id", "speaker", "tokens", "durations", "mel", "sr"?}` where `mel` is a
//! path relative to the manifest and `sr` is advisory (recomputed on load).
//!
//! Mel file layout, little-endian: magic `MELF`, `u32 n_frames`,
//! `u32 n_mels`, then `n_frames * n_mels` `f32` values row-major.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{AudioFrameSpec, CorpusError, UtteranceRecord};

const MEL_MAGIC: &[u8; 4] = b"MELF";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    speaker: String,
    tokens: Vec<u32>,
    durations: Vec<u32>,
    mel: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sr: Option<f64>,
}

/// Write one mel matrix in the binary mel format.
pub fn write_mel_file(path: &Path, mel: &Array2<f32>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEL_MAGIC)?;
    w.write_all(&(mel.nrows() as u32).to_le_bytes())?;
    w.write_all(&(mel.ncols() as u32).to_le_bytes())?;
    for &v in mel.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a mel matrix written by [`write_mel_file`].
pub fn read_mel_file(path: &Path) -> Result<Array2<f32>, CorpusError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MEL_MAGIC {
        return Err(CorpusError::MalformedMel {
            path: path.display().to_string(),
            reason: "bad magic".into(),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let n_frames = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let n_mels = u32::from_le_bytes(buf4) as usize;
    let mut data = vec![0f32; n_frames * n_mels];
    for v in data.iter_mut() {
        r.read_exact(&mut buf4)?;
        *v = f32::from_le_bytes(buf4);
    }
    Array2::from_shape_vec((n_frames, n_mels), data).map_err(|e| CorpusError::MalformedMel {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Save a corpus under `dir`: `manifest.jsonl`, `frame_spec.json` and one
/// `mels/<id>.mel` per utterance. Returns the manifest path.
pub fn save_corpus(
    corpus: &[UtteranceRecord],
    dir: &Path,
    spec: &AudioFrameSpec,
) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir.join("mels"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    for rec in corpus {
        let mel_rel = format!("mels/{}.mel", rec.id);
        write_mel_file(&dir.join(&mel_rel), &rec.mel)?;
        let entry = ManifestEntry {
            id: rec.id.clone(),
            speaker: rec.speaker_id.clone(),
            tokens: rec.tokens.clone(),
            durations: rec.durations.clone(),
            mel: mel_rel,
            sr: Some(rec.speaking_rate),
        };
        serde_json::to_writer(&mut w, &entry).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(
        dir.join("frame_spec.json"),
        serde_json::to_string_pretty(spec).map_err(std::io::Error::other)?,
    )?;
    Ok(manifest_path)
}

/// Load a corpus from a manifest; speaking rates are recomputed, never
/// trusted from the file.
pub fn load_corpus(
    manifest_path: &Path,
    spec: &AudioFrameSpec,
) -> Result<Vec<UtteranceRecord>, CorpusError> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(manifest_path)?);
    let mut corpus = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedManifest {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if !seen.insert(entry.id.clone()) {
            return Err(CorpusError::DuplicateId(entry.id));
        }
        let mel_path = base.join(&entry.mel);
        if !mel_path.is_file() {
            return Err(CorpusError::MissingFile {
                id: entry.id,
                path: mel_path.display().to_string(),
            });
        }
        let mel = read_mel_file(&mel_path)?;
        corpus.push(UtteranceRecord::new(
            entry.id,
            entry.speaker,
            entry.tokens,
            entry.durations,
            mel,
            spec,
        )?);
    }
    Ok(corpus)
}

/// Read the `frame_spec.json` sidecar next to a manifest, if present.
pub fn frame_spec_sidecar(manifest_path: &Path) -> Option<AudioFrameSpec> {
    let path = manifest_path.parent()?.join("frame_spec.json");
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}
