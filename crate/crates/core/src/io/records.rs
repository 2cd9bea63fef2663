//! Line-delimited JSON record files and the media they reference.

use std::path::{Path, PathBuf};

use crate::encoders::Media;
use crate::error::{Error, Result};
use crate::model::EncodedExample;
use crate::objectives::{build_example, RawRecord, SpanMaskSpec, TrainingExample};
use crate::rng::SeededRng;
use crate::task::TaskKind;
use crate::text::{PromptRegistry, Vocab};

use super::tensor_file::{read_audio, read_image, read_video};
use super::write_atomic;

pub fn parse_records(text: &str, origin: &str) -> Result<Vec<RawRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema(format!("{origin}:{}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

pub fn records_to_string(records: &[RawRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    write_atomic(path, records_to_string(records).as_bytes())
}

/// Loads the tensor files a record names, resolving paths against `base`.
pub fn load_media(record: &RawRecord, base: &Path) -> Result<Media> {
    let resolve = |p: &str| -> PathBuf { base.join(p) };
    Ok(Media {
        image: record.image.as_deref().map(|p| read_image(&resolve(p))).transpose()?,
        video: record.video.as_deref().map(|p| read_video(&resolve(p))).transpose()?,
        audio: record.audio.as_deref().map(|p| read_audio(&resolve(p))).transpose()?,
    })
}

/// Parses every record of a file into a training example. Reconstruction
/// records are span-corrupted with a generator derived from `seed` and the
/// record index, so the result is a pure function of the inputs.
pub fn load_examples(
    path: &Path,
    prompts: &PromptRegistry,
    span: &SpanMaskSpec,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let task = TaskKind::parse(&r.task, r.style.as_deref())?;
            let media = load_media(r, base)?;
            let mut rng = SeededRng::derive(seed, i as u64);
            build_example(r, &task, media, prompts, Some((span, &mut rng)))
                .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Tokenizes an example's encoder text and target.
pub fn encode_example(ex: &TrainingExample, vocab: &Vocab) -> EncodedExample {
    EncodedExample {
        media: ex.media(),
        text_ids: vocab.encode(&ex.encoder_text()),
        target_ids: vocab.encode(&ex.target_text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_line_numbers() {
        let recs = vec![
            RawRecord {
                task: "language_reconstruction".into(),
                text_target: "a b c".into(),
                ..Default::default()
            },
            RawRecord {
                task: "speech_sentiment".into(),
                audio: Some("x.mmt".into()),
                label: Some("2".into()),
                ..Default::default()
            },
        ];
        let s = records_to_string(&recs);
        assert_eq!(parse_records(&s, "f").unwrap(), recs);
        let err = parse_records("{\"task\":\"x\"}\n{\"task\":1}\n", "f").unwrap_err();
        assert!(err.to_string().contains("f:2"), "{err}");
        assert!(parse_records("{\"task\":\"x\",\"bogus\":1}", "f").is_err());
    }
}
