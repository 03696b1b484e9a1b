use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::visual::decode_vfea;

/// One utterance of the corpus. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub wav_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.utterance_id.is_empty() || r.speaker_id.is_empty() {
                return Err(Error::Data(format!("manifest record {}: empty id", i + 1)));
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::Data(format!("manifest record {}: duplicate utterance {}", i + 1, r.utterance_id)));
            }
        }
        Ok(Self { records, base_dir: base_dir.into() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(records, base)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Record indices grouped by speaker, in sorted speaker order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            out.entry(r.speaker_id.as_str()).or_default().push(i);
        }
        out
    }

    /// Splits every speaker's utterances (manifest order) into train, validation
    /// and test parts, the last `test` going to test and the `valid` before them to validation.
    pub fn split(&self, valid: usize, test: usize) -> Result<(Manifest, Manifest, Manifest)> {
        let mut parts = (Vec::new(), Vec::new(), Vec::new());
        for (speaker, idx) in self.by_speaker() {
            if idx.len() <= valid + test {
                return Err(Error::Data(format!(
                    "speaker {speaker} has {} utterances, cannot hold out {valid} + {test}",
                    idx.len()
                )));
            }
            let cut_test = idx.len() - test;
            let cut_valid = cut_test - valid;
            for (k, &i) in idx.iter().enumerate() {
                let r = self.records[i].clone();
                if k >= cut_test {
                    parts.2.push(r);
                } else if k >= cut_valid {
                    parts.1.push(r);
                } else {
                    parts.0.push(r);
                }
            }
        }
        Ok((
            Manifest::new(parts.0, &self.base_dir)?,
            Manifest::new(parts.1, &self.base_dir)?,
            Manifest::new(parts.2, &self.base_dir)?,
        ))
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("serialisable record");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// A loaded utterance: audio plus its visual track `[T_v, D_v]` when one exists.
#[derive(Clone, Debug)]
pub struct Source {
    pub speaker_id: String,
    pub audio: Waveform,
    pub visual: Option<Array2<f32>>,
}

/// All manifest audio and visual tracks held in memory.
#[derive(Clone, Debug)]
pub struct SourceBank {
    pub manifest: Manifest,
    pub sources: HashMap<String, Source>,
    pub sample_rate: u32,
}

impl SourceBank {
    pub fn load(manifest: &Manifest, sample_rate: u32) -> Result<Self> {
        let mut sources = HashMap::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let wav = manifest.resolve(&r.wav_path);
            let audio = Waveform::read_wav_at(&wav, sample_rate).map_err(|e| match e {
                Error::Io { path, source } => Error::Data(format!("{}: {source}", path.display())),
                other => other,
            })?;
            let visual = match &r.visual_path {
                None => None,
                Some(p) => {
                    let p = manifest.resolve(p);
                    let bytes = std::fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
                    Some(decode_vfea(&bytes)?)
                }
            };
            sources.insert(r.utterance_id.clone(), Source { speaker_id: r.speaker_id.clone(), audio, visual });
        }
        Ok(Self { manifest: manifest.clone(), sources, sample_rate })
    }

    pub fn get(&self, utterance_id: &str) -> Result<&Source> {
        self.sources
            .get(utterance_id)
            .ok_or_else(|| Error::Data(format!("utterance {utterance_id} is not in the manifest")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, s: &str) -> UtteranceRecord {
        UtteranceRecord { utterance_id: u.into(), speaker_id: s.into(), wav_path: format!("{u}.wav").into(), visual_path: None }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut r = rec("a", "s1");
        r.visual_path = Some("a.vfea".into());
        let m = Manifest::new(vec![r, rec("b", "s2")], dir.path()).unwrap();
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"visual_path\":\"a.vfea\""));
    }

    #[test]
    fn invalid_records() {
        assert!(matches!(Manifest::new(vec![rec("", "s")], "."), Err(Error::Data(_))));
        assert!(matches!(Manifest::new(vec![rec("a", "s"), rec("a", "t")], "."), Err(Error::Data(_))));
    }

    #[test]
    fn split_keeps_speakers_in_every_part() {
        let recs = (0..3).flat_map(|s| (0..5).map(move |u| rec(&format!("{s}_{u}"), &format!("s{s}")))).collect();
        let m = Manifest::new(recs, ".").unwrap();
        let (tr, va, te) = m.split(1, 2).unwrap();
        assert_eq!((tr.records.len(), va.records.len(), te.records.len()), (6, 3, 6));
        assert_eq!(te.records[0].utterance_id, "0_3");
        assert!(m.split(2, 3).is_err());
    }

    #[test]
    fn missing_wav_is_a_data_error() {
        let m = Manifest::new(vec![rec("nope", "s")], "/nonexistent").unwrap();
        assert!(matches!(SourceBank::load(&m, 16000), Err(Error::Data(_))));
    }
}
