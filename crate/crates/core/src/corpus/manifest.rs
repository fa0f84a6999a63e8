//! JSONL manifest: an episode header line followed by one line per sample.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Episode, Sample, Spotting};
use crate::embedding::{read_fmat, write_fmat, FeatureSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestLine {
    Episode { episode_id: String },
    Sample(SampleRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub episode_id: String,
    pub subtitle_index: u32,
    pub feature_path: String,
    pub target: String,
    #[serde(default)]
    pub spottings: Vec<Spotting>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub samples: Vec<SampleRecord>,
}

fn line_err(line: usize, msg: impl Into<String>) -> CorpusError {
    CorpusError::Parse { line, msg: msg.into() }
}

/// Parses and validates manifest text without touching the file system.
pub fn parse_manifest(text: &str) -> Result<Vec<EpisodeRecord>, CorpusError> {
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        match parsed {
            ManifestLine::Episode { episode_id } => {
                if episode_id.is_empty() {
                    return Err(line_err(line, "empty episode_id"));
                }
                if !seen.insert(episode_id.clone()) {
                    return Err(line_err(line, format!("duplicate episode {episode_id:?}")));
                }
                episodes.push(EpisodeRecord {
                    episode_id,
                    samples: Vec::new(),
                });
            }
            ManifestLine::Sample(s) => {
                let ep = episodes
                    .last_mut()
                    .ok_or_else(|| line_err(line, "sample before any episode header"))?;
                if s.episode_id != ep.episode_id {
                    return Err(line_err(
                        line,
                        format!("sample of {:?} inside episode {:?}", s.episode_id, ep.episode_id),
                    ));
                }
                if let Some(prev) = ep.samples.last() {
                    if s.subtitle_index <= prev.subtitle_index {
                        return Err(line_err(
                            line,
                            format!(
                                "subtitle_index {} does not follow {}",
                                s.subtitle_index, prev.subtitle_index
                            ),
                        ));
                    }
                }
                if s.target.trim().is_empty() {
                    return Err(line_err(line, "empty target"));
                }
                if s.feature_path.is_empty() {
                    return Err(line_err(line, "empty feature_path"));
                }
                if let Some(sp) = s.spottings.iter().find(|sp| sp.gloss.trim().is_empty()) {
                    return Err(line_err(line, format!("empty gloss at window {}", sp.window)));
                }
                ep.samples.push(s);
            }
        }
    }
    Ok(episodes)
}

pub fn format_manifest(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for ep in episodes {
        let header = ManifestLine::Episode {
            episode_id: ep.episode_id.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).unwrap();
        for s in &ep.samples {
            let rec = ManifestLine::Sample(SampleRecord {
                episode_id: ep.episode_id.clone(),
                subtitle_index: s.subtitle_index,
                feature_path: s.feature_path.clone(),
                target: s.target.clone(),
                spottings: s.spottings.clone(),
            });
            writeln!(out, "{}", serde_json::to_string(&rec).expect("serializable")).unwrap();
        }
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a manifest and the feature files it references (relative to the
/// manifest's directory).
pub fn load_corpus(path: &Path) -> Result<Vec<Episode>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for ep in parse_manifest(&text)? {
        let mut samples = Vec::with_capacity(ep.samples.len());
        for rec in ep.samples {
            let fpath: PathBuf = root.join(&rec.feature_path);
            if !fpath.is_file() {
                return Err(CorpusError::MissingFeatures(fpath));
            }
            let frames = read_fmat(&fpath)?;
            let video_id = format!("{}/{}", ep.episode_id, rec.subtitle_index);
            samples.push(Sample {
                subtitle_index: rec.subtitle_index,
                feature_path: rec.feature_path,
                features: FeatureSequence::new(video_id, frames),
                target: rec.target,
                spottings: rec.spottings,
            });
        }
        out.push(Episode {
            episode_id: ep.episode_id,
            samples,
        });
    }
    Ok(out)
}

/// Writes the manifest at `path` and every feature file beside it.
pub fn save_corpus(episodes: &[Episode], path: &Path) -> Result<(), CorpusError> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for s in episodes.iter().flat_map(|e| &e.samples) {
        let fpath = root.join(&s.feature_path);
        if let Some(dir) = fpath.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_fmat(&fpath, &s.features.frames)?;
    }
    fs::write(path, format_manifest(episodes)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = r#"{"kind":"episode","episode_id":"e0"}
{"kind":"sample","episode_id":"e0","subtitle_index":0,"feature_path":"f/a.fmat","target":"a b"}
{"kind":"sample","episode_id":"e0","subtitle_index":3,"feature_path":"f/b.fmat","target":"c","spottings":[{"gloss":"c","window":2}]}
"#;

    #[test]
    fn parses_minimal_manifest() {
        let eps = parse_manifest(OK).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].samples.len(), 2);
        assert_eq!(eps[0].samples[1].spottings[0].window, 2);
    }

    #[test]
    fn out_of_order_index_is_rejected_with_line() {
        let bad = OK.replace("\"subtitle_index\":3", "\"subtitle_index\":0");
        match parse_manifest(&bad) {
            Err(CorpusError::Parse { line: 3, msg }) => assert!(msg.contains("subtitle_index")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_violations_are_rejected() {
        assert!(matches!(
            parse_manifest("{\"kind\":\"sample\"}"),
            Err(CorpusError::Parse { line: 1, .. })
        ));
        let orphan = OK.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_manifest(&orphan), Err(CorpusError::Parse { line: 1, .. })));
        let empty_target = OK.replace("\"target\":\"c\"", "\"target\":\" \"");
        assert!(matches!(parse_manifest(&empty_target), Err(CorpusError::Parse { line: 3, .. })));
    }
}
