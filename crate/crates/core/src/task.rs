//! Task kinds and what each one expects from a record.

use std::fmt;

use crate::error::{Error, Result};

/// Every pretraining and downstream task, phrased as text completion.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    ImageCaptioning,
    VideoCaptioning,
    VisionQA,
    VisionTextReconstruction,
    SpeechTranscription,
    SpeechSentiment,
    SpeechEmotion,
    SpeechTextReconstruction,
    LanguageReconstruction,
    MultimodalSummarization,
    DialogueGeneration { style: String },
    ClipSentiment,
    /// Downstream task with a caller-registered prompt.
    Custom(String),
}

/// Which media a task needs and which it tolerates as extra context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Signature {
    pub needs_image: bool,
    pub needs_video: bool,
    pub needs_audio: bool,
    pub allows_image: bool,
    pub allows_video: bool,
    pub allows_audio: bool,
    /// Whether `input_text` carries content (question, article, history...).
    pub has_input_text: bool,
}

const NINE: [TaskKind; 9] = [
    TaskKind::ImageCaptioning,
    TaskKind::VideoCaptioning,
    TaskKind::VisionQA,
    TaskKind::VisionTextReconstruction,
    TaskKind::SpeechTranscription,
    TaskKind::SpeechSentiment,
    TaskKind::SpeechEmotion,
    TaskKind::SpeechTextReconstruction,
    TaskKind::LanguageReconstruction,
];

impl TaskKind {
    /// The nine pretraining tasks, in canonical order.
    pub fn pretraining() -> &'static [TaskKind] {
        &NINE
    }

    /// Stable snake_case identifier used in record files and configs.
    pub fn name(&self) -> &str {
        match self {
            TaskKind::ImageCaptioning => "image_captioning",
            TaskKind::VideoCaptioning => "video_captioning",
            TaskKind::VisionQA => "vision_qa",
            TaskKind::VisionTextReconstruction => "vision_text_reconstruction",
            TaskKind::SpeechTranscription => "speech_transcription",
            TaskKind::SpeechSentiment => "speech_sentiment",
            TaskKind::SpeechEmotion => "speech_emotion",
            TaskKind::SpeechTextReconstruction => "speech_text_reconstruction",
            TaskKind::LanguageReconstruction => "language_reconstruction",
            TaskKind::MultimodalSummarization => "multimodal_summarization",
            TaskKind::DialogueGeneration { .. } => "dialogue_generation",
            TaskKind::ClipSentiment => "clip_sentiment",
            TaskKind::Custom(name) => name,
        }
    }

    /// Parses a task name. `style` is required for dialogue generation.
    /// Unknown names are rejected; custom tasks are created explicitly.
    pub fn parse(name: &str, style: Option<&str>) -> Result<Self> {
        let kind = match name {
            "image_captioning" => TaskKind::ImageCaptioning,
            "video_captioning" => TaskKind::VideoCaptioning,
            "vision_qa" => TaskKind::VisionQA,
            "vision_text_reconstruction" => TaskKind::VisionTextReconstruction,
            "speech_transcription" => TaskKind::SpeechTranscription,
            "speech_sentiment" => TaskKind::SpeechSentiment,
            "speech_emotion" => TaskKind::SpeechEmotion,
            "speech_text_reconstruction" => TaskKind::SpeechTextReconstruction,
            "language_reconstruction" => TaskKind::LanguageReconstruction,
            "multimodal_summarization" => TaskKind::MultimodalSummarization,
            "clip_sentiment" => TaskKind::ClipSentiment,
            "dialogue_generation" => {
                let style = style.ok_or_else(|| {
                    Error::Schema("dialogue_generation record is missing field `style`".into())
                })?;
                TaskKind::DialogueGeneration {
                    style: style.to_string(),
                }
            }
            other => return Err(Error::Schema(format!("unknown task `{other}`"))),
        };
        Ok(kind)
    }

    pub fn signature(&self) -> Signature {
        let vision = |needs_video: bool| Signature {
            needs_image: !needs_video,
            needs_video,
            allows_image: !needs_video,
            allows_video: needs_video,
            allows_audio: true,
            ..Default::default()
        };
        let speech = Signature {
            needs_audio: true,
            allows_audio: true,
            allows_image: true,
            allows_video: true,
            ..Default::default()
        };
        match self {
            TaskKind::ImageCaptioning | TaskKind::VisionTextReconstruction => vision(false),
            TaskKind::VideoCaptioning => vision(true),
            TaskKind::VisionQA => Signature {
                has_input_text: true,
                ..vision(false)
            },
            TaskKind::SpeechTranscription
            | TaskKind::SpeechSentiment
            | TaskKind::SpeechEmotion
            | TaskKind::SpeechTextReconstruction => speech,
            TaskKind::LanguageReconstruction => Signature::default(),
            TaskKind::MultimodalSummarization | TaskKind::DialogueGeneration { .. } => Signature {
                has_input_text: true,
                allows_audio: false,
                ..vision(false)
            },
            TaskKind::ClipSentiment => Signature {
                needs_video: true,
                needs_audio: true,
                allows_video: true,
                allows_audio: true,
                has_input_text: true,
                ..Default::default()
            },
            TaskKind::Custom(_) => Signature {
                allows_image: true,
                allows_video: true,
                allows_audio: true,
                has_input_text: true,
                ..Default::default()
            },
        }
    }

    /// Whether the target is produced by span corruption.
    pub fn is_reconstruction(&self) -> bool {
        matches!(
            self,
            TaskKind::VisionTextReconstruction
                | TaskKind::SpeechTextReconstruction
                | TaskKind::LanguageReconstruction
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::DialogueGeneration { style } => write!(f, "dialogue_generation({style})"),
            other => f.write_str(other.name()),
        }
    }
}
