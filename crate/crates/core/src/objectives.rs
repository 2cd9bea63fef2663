//! Turns raw records into text-completion training examples, including
//! T5-style span corruption for the reconstruction tasks.

use serde::{Deserialize, Serialize};

use crate::encoders::{AudioTensor, ImageTensor, Media, VideoTensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::task::TaskKind;
use crate::text::{parse_sentinel, sentinel_token, PromptRegistry, DEFAULT_SENTINELS};

pub use crate::metrics::label_of_generation;

pub const SENTIMENT_LABELS: [&str; 5] = ["highly negative", "negative", "neutral", "positive", "highly positive"];
pub const EMOTION_LABELS: [&str; 6] = ["happiness", "sadness", "anger", "fear", "disgust", "surprise"];

/// One line of a record file. Media fields are tensor-file paths relative to
/// the record file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_input: Option<String>,
    #[serde(default)]
    pub text_target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub task: TaskKind,
    pub image: Option<ImageTensor>,
    pub video: Option<VideoTensor>,
    pub audio: Option<AudioTensor>,
    pub prompt_text: String,
    pub input_text: String,
    pub target_text: String,
}

impl TrainingExample {
    /// Prompt followed by the input, as fed to the encoder's text segment.
    pub fn encoder_text(&self) -> String {
        format!("{}{}", self.prompt_text, self.input_text)
    }

    pub fn media(&self) -> Media {
        Media {
            image: self.image.clone(),
            video: self.video.clone(),
            audio: self.audio.clone(),
        }
    }

    /// Checks the structural invariants: at most one visual input, media
    /// matching the task signature, a non-empty target.
    pub fn validate(&self) -> Result<()> {
        if self.image.is_some() && self.video.is_some() {
            return Err(Error::Schema("example carries both an image and a video".into()));
        }
        let sig = self.task.signature();
        let check = |present: bool, needs: bool, allows: bool, what: &str| -> Result<()> {
            if needs && !present {
                return Err(Error::Schema(format!("task {} requires field `{what}`", self.task)));
            }
            if present && !allows {
                return Err(Error::Schema(format!("task {} does not accept field `{what}`", self.task)));
            }
            Ok(())
        };
        check(self.image.is_some(), sig.needs_image, sig.allows_image, "image")?;
        check(self.video.is_some(), sig.needs_video, sig.allows_video, "video")?;
        check(self.audio.is_some(), sig.needs_audio, sig.allows_audio, "audio")?;
        if !sig.has_input_text && !self.task.is_reconstruction() && !self.input_text.is_empty() {
            return Err(Error::Schema(format!("task {} takes no input text", self.task)));
        }
        if self.target_text.split_whitespace().next().is_none() {
            return Err(Error::Schema("example has an empty target".into()));
        }
        Ok(())
    }
}

/// Span masking parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMaskSpec {
    pub mask_rate: f64,
    pub mean_span_len: f64,
    /// Number of sentinel tokens available.
    pub max_spans: usize,
}

impl Default for SpanMaskSpec {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mean_span_len: 3.0,
            max_spans: DEFAULT_SENTINELS,
        }
    }
}

impl SpanMaskSpec {
    /// Probability of opening a span at an eligible position.
    ///
    /// Each span of mean length μ is followed by a forced unmasked token, so
    /// the long-run masked fraction is `qμ / (1 + qμ)`; solving for the
    /// configured rate gives `q = r / ((1 − r) μ)`.
    pub fn start_probability(&self) -> f64 {
        let r = self.mask_rate;
        (r / ((1.0 - r) * self.mean_span_len)).min(1.0)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Value(format!("mask_rate {} must lie in [0, 1)", self.mask_rate)));
        }
        if self.mean_span_len < 1.0 || !self.mean_span_len.is_finite() {
            return Err(Error::Value(format!("mean_span_len {} must be at least 1", self.mean_span_len)));
        }
        Ok(())
    }
}

/// Replaces random contiguous spans with sentinels.
///
/// Scans left to right; at each eligible position a span opens with
/// [`SpanMaskSpec::start_probability`], its length drawn from a geometric
/// distribution with the configured mean and capped at the remaining length.
/// The token after a span is always kept, so spans never touch. Returns
/// `(masked_input, target)` where the target is
/// `<extra_0> span_0 <extra_1> span_1 … <extra_n>`.
pub fn corrupt_spans<S: AsRef<str>>(
    tokens: &[S],
    spec: &SpanMaskSpec,
    rng: &mut SeededRng,
) -> Result<(Vec<String>, Vec<String>)> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(Error::Value("cannot corrupt an empty token sequence".into()));
    }
    let q = spec.start_probability();
    let cont = 1.0 - 1.0 / spec.mean_span_len;
    let mut input = Vec::with_capacity(tokens.len());
    let mut target = Vec::new();
    let mut spans = 0;
    let mut i = 0;
    while i < tokens.len() {
        if q > 0.0 && rng.uniform() < q {
            let mut len = 1;
            while rng.uniform() < cont {
                len += 1;
            }
            let len = len.min(tokens.len() - i);
            if spans >= spec.max_spans {
                return Err(Error::Corruption(format!(
                    "more than {} spans needed; lower mask_rate",
                    spec.max_spans
                )));
            }
            let s = sentinel_token(spans);
            input.push(s.clone());
            target.push(s);
            target.extend(tokens[i..i + len].iter().map(|t| t.as_ref().to_string()));
            spans += 1;
            i += len;
            if i < tokens.len() {
                input.push(tokens[i].as_ref().to_string());
                i += 1;
            }
        } else {
            input.push(tokens[i].as_ref().to_string());
            i += 1;
        }
    }
    if spans >= spec.max_spans {
        // the terminal sentinel also needs a slot
        return Err(Error::Corruption(format!(
            "{spans} spans leave no terminal sentinel among {}",
            spec.max_spans
        )));
    }
    target.push(sentinel_token(spans));
    Ok((input, target))
}

/// Splices target spans back into sentinel positions; the inverse of
/// [`corrupt_spans`].
pub fn reconstruct<S: AsRef<str>, T: AsRef<str>>(masked_input: &[S], target: &[T]) -> Result<Vec<String>> {
    // target: <extra_0> span <extra_1> span ... <extra_n>
    let mut spans: Vec<Vec<String>> = Vec::new();
    let mut expect = 0;
    for t in target {
        let t = t.as_ref();
        match parse_sentinel(t) {
            Some(k) if k == expect => {
                spans.push(Vec::new());
                expect += 1;
            }
            Some(k) => {
                return Err(Error::Reconstruction(format!(
                    "target sentinel <extra_{k}> out of order, expected <extra_{expect}>"
                )))
            }
            None => match spans.last_mut() {
                Some(s) => s.push(t.to_string()),
                None => {
                    return Err(Error::Reconstruction(format!(
                        "target token `{t}` precedes the first sentinel"
                    )))
                }
            },
        }
    }
    let mut out = Vec::with_capacity(masked_input.len());
    let mut next = 0;
    for t in masked_input {
        let t = t.as_ref();
        match parse_sentinel(t) {
            Some(k) if k == next => {
                let span = spans.get(k).ok_or_else(|| {
                    Error::Reconstruction(format!("sentinel <extra_{k}> has no span in the target"))
                })?;
                out.extend(span.iter().cloned());
                next += 1;
            }
            Some(k) => {
                return Err(Error::Reconstruction(format!(
                    "input sentinel <extra_{k}> out of order, expected <extra_{next}>"
                )))
            }
            None => out.push(t.to_string()),
        }
    }
    if spans.len() > next + 1 {
        return Err(Error::Reconstruction(format!(
            "target holds {} spans but the input only {next} sentinels",
            spans.len() - 1
        )));
    }
    Ok(out)
}

/// Label vocabulary of a classification-style task.
pub fn label_set(task: &TaskKind) -> Option<&'static [&'static str]> {
    match task {
        TaskKind::SpeechSentiment => Some(&SENTIMENT_LABELS),
        TaskKind::SpeechEmotion => Some(&EMOTION_LABELS),
        _ => None,
    }
}

fn resolve_label(record: &RawRecord, labels: &[&str]) -> Result<String> {
    let raw = match record.label.as_deref() {
        Some(l) => l,
        None if labels.contains(&record.text_target.as_str()) => record.text_target.as_str(),
        None => return Err(Error::Schema(format!("{} record is missing field `label`", record.task))),
    };
    if let Ok(i) = raw.trim().parse::<usize>() {
        return labels
            .get(i)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Schema(format!("label index {i} out of range for {} classes", labels.len())));
    }
    if labels.contains(&raw) {
        Ok(raw.to_string())
    } else {
        Err(Error::Schema(format!("unknown label `{raw}`; expected one of {labels:?}")))
    }
}

/// Builds one training example. `media` holds the already-loaded tensors the
/// record refers to. Reconstruction tasks need a span spec and generator.
pub fn build_example(
    record: &RawRecord,
    task: &TaskKind,
    media: Media,
    prompts: &PromptRegistry,
    span: Option<(&SpanMaskSpec, &mut SeededRng)>,
) -> Result<TrainingExample> {
    let sig = task.signature();
    let require = |ok: bool, field: &str| -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!("{task} record is missing field `{field}`")))
        }
    };
    require(!sig.needs_image || media.image.is_some(), "image")?;
    require(!sig.needs_video || media.video.is_some(), "video")?;
    require(!sig.needs_audio || media.audio.is_some(), "audio")?;

    let prompt_text = prompts.prompt_for(task)?;
    let (input_text, target_text) = if task.is_reconstruction() {
        require(!record.text_target.trim().is_empty(), "text_target")?;
        let (spec, rng) = span.ok_or_else(|| Error::Usage(format!("{task} needs a span masking spec")))?;
        let toks: Vec<&str> = record.text_target.split_whitespace().collect();
        let (inp, tgt) = corrupt_spans(&toks, spec, rng)?;
        (inp.join(" "), tgt.join(" "))
    } else if let Some(labels) = label_set(task) {
        (String::new(), resolve_label(record, labels)?)
    } else {
        let input = if sig.has_input_text {
            record.text_input.clone().unwrap_or_default()
        } else {
            String::new()
        };
        let target = match (&record.label, record.text_target.trim().is_empty()) {
            (Some(l), true) => l.clone(),
            _ => record.text_target.clone(),
        };
        require(!target.trim().is_empty(), "text_target")?;
        (input, target)
    };

    let ex = TrainingExample {
        task: task.clone(),
        image: media.image,
        video: media.video,
        audio: media.audio,
        prompt_text,
        input_text,
        target_text,
    };
    ex.validate()?;
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn tiny_audio() -> AudioTensor {
        AudioTensor::new(vec![0.0; 160], 16000).unwrap()
    }

    fn tiny_image() -> ImageTensor {
        ImageTensor::new(8, 8, vec![0.5; 192]).unwrap()
    }

    #[test]
    fn zero_rate_leaves_input_unchanged() {
        let spec = SpanMaskSpec {
            mask_rate: 0.0,
            ..Default::default()
        };
        let toks = words("the quick brown fox");
        let (inp, tgt) = corrupt_spans(&toks, &spec, &mut SeededRng::new(0)).unwrap();
        assert_eq!(inp, toks);
        assert_eq!(tgt, vec!["<extra_0>"]);
    }

    #[test]
    fn reconstruct_hand_example() {
        let inp = words("the <extra_0> fox jumps");
        let tgt = words("<extra_0> quick brown <extra_1>");
        assert_eq!(reconstruct(&inp, &tgt).unwrap(), words("the quick brown fox jumps"));
        let plain = words("a b c");
        assert_eq!(reconstruct(&plain, &words("<extra_0>")).unwrap(), plain);
        assert_eq!(reconstruct::<String, String>(&plain, &[]).unwrap(), plain);
    }

    #[test]
    fn reconstruct_rejects_shuffled_sentinels() {
        let inp = words("<extra_0> b <extra_1> d");
        let tgt = words("<extra_1> c <extra_0> a <extra_2>");
        assert!(matches!(reconstruct(&inp, &tgt), Err(Error::Reconstruction(_))));
        let inp = words("<extra_1> b");
        assert!(matches!(
            reconstruct(&inp, &words("<extra_0> a <extra_1> <extra_2>")),
            Err(Error::Reconstruction(_))
        ));
    }

    #[test]
    fn corruption_hits_sentinel_budget() {
        let spec = SpanMaskSpec {
            mask_rate: 0.5,
            mean_span_len: 1.0,
            max_spans: 2,
        };
        let toks: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        assert!(matches!(
            corrupt_spans(&toks, &spec, &mut SeededRng::new(1)),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn spans_never_touch() {
        let spec = SpanMaskSpec {
            mask_rate: 0.5,
            mean_span_len: 2.0,
            max_spans: 1000,
        };
        let toks: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let (inp, _) = corrupt_spans(&toks, &spec, &mut SeededRng::new(9)).unwrap();
        for w in inp.windows(2) {
            assert!(!(parse_sentinel(&w[0]).is_some() && parse_sentinel(&w[1]).is_some()));
        }
    }

    #[test]
    fn emotion_label_index() {
        let rec = RawRecord {
            task: "speech_emotion".into(),
            label: Some("2".into()),
            ..Default::default()
        };
        let media = Media {
            audio: Some(tiny_audio()),
            ..Default::default()
        };
        let ex = build_example(&rec, &TaskKind::SpeechEmotion, media, &PromptRegistry::new(), None).unwrap();
        assert_eq!(ex.target_text, "anger");
        assert_eq!(ex.prompt_text, "Predict the emotion of this segment: ");
        assert!(ex.input_text.is_empty());
    }

    #[test]
    fn sentiment_extremes() {
        let media = || Media {
            audio: Some(tiny_audio()),
            ..Default::default()
        };
        for (idx, want) in [("0", "highly negative"), ("4", "highly positive")] {
            let rec = RawRecord {
                task: "speech_sentiment".into(),
                label: Some(idx.into()),
                ..Default::default()
            };
            let ex = build_example(&rec, &TaskKind::SpeechSentiment, media(), &PromptRegistry::new(), None).unwrap();
            assert_eq!(ex.target_text, want);
        }
    }

    #[test]
    fn image_caption_example() {
        let rec = RawRecord {
            task: "image_captioning".into(),
            text_target: "red cat".into(),
            ..Default::default()
        };
        let media = Media {
            image: Some(tiny_image()),
            ..Default::default()
        };
        let ex = build_example(&rec, &TaskKind::ImageCaptioning, media, &PromptRegistry::new(), None).unwrap();
        assert_eq!(ex.prompt_text, "Generate the caption for this image: ");
        assert_eq!(ex.target_text, "red cat");
        assert_eq!(ex.encoder_text(), "Generate the caption for this image: ");
    }

    #[test]
    fn missing_media_names_the_field() {
        let rec = RawRecord {
            task: "speech_transcription".into(),
            text_target: "hello".into(),
            ..Default::default()
        };
        let err = build_example(&rec, &TaskKind::SpeechTranscription, Media::default(), &PromptRegistry::new(), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("`audio`"), "{err}");
    }

    #[test]
    fn reconstruction_example_round_trips() {
        let rec = RawRecord {
            task: "language_reconstruction".into(),
            text_target: "one two three four five six seven eight nine ten".into(),
            ..Default::default()
        };
        let spec = SpanMaskSpec {
            mask_rate: 0.3,
            ..Default::default()
        };
        let mut rng = SeededRng::new(5);
        let ex = build_example(
            &rec,
            &TaskKind::LanguageReconstruction,
            Media::default(),
            &PromptRegistry::new(),
            Some((&spec, &mut rng)),
        )
        .unwrap();
        let inp = words(&ex.input_text);
        let tgt = words(&ex.target_text);
        assert_eq!(reconstruct(&inp, &tgt).unwrap().join(" "), rec.text_target);
    }
}
