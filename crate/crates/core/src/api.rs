//! JSON request and response bodies shared by the HTTP service and its client.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusKind, TokenizedItem, TokenizerMode, Vocabulary};
use crate::decode::{Beta, DecodeConfig, DecodeTrace, HaltReason, LookaheadProposal};
use crate::error::{LudError, Result};
use crate::identify::{LexicalUnit, ProbabilityTrace};
use crate::pipeline::{self, Overrides, PipelineConfig};
use crate::reconfigure::ReconfiguredInstance;
use crate::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

impl From<&LudError> for ErrorBody {
    fn from(e: &LudError) -> Self {
        ErrorBody {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildVocabularyRequest {
    pub texts: Vec<String>,
    #[serde(default)]
    pub mode: TokenizerMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub vocabulary: Vocabulary,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub ids: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeRequest {
    pub vocabulary: Vocabulary,
    pub ids: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateCorpusRequest {
    pub kind: CorpusKind,
    pub n_items: usize,
    pub seed: u64,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyRequest {
    pub trace: ProbabilityTrace,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    crate::identify::DEFAULT_ALPHA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyResponse {
    pub units: Vec<LexicalUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconfigureRequest {
    pub vocabulary: Vocabulary,
    pub item: TokenizedItem,
    pub units: Vec<LexicalUnit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconfigureResponse {
    pub instances: Vec<ReconfiguredInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptRequest {
    pub vocabulary: Vocabulary,
    pub proposal: LookaheadProposal,
    pub beta: Beta,
    #[serde(default = "yes")]
    pub repetition_check: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub accepted_len: usize,
    pub halt_reason: HaltReason,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Lud,
    Ar,
}

/// Decodes one prompt with a checkpoint on the server's filesystem. The
/// vocabulary is read from the header of `dataset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub prompt: String,
    #[serde(default)]
    pub mode: DecodeMode,
    pub config: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub text: String,
    pub trace: DecodeTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedRequest {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub prompt: String,
    pub target: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcrRequest {
    pub n_tokens: usize,
    pub n_forwards: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarRequest {
    pub t_ar: f64,
    pub t_lud: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResponse {
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Finetune,
    Identify,
    Reconfigure,
    ContinualTrain,
    Decode,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::Finetune,
        Stage::Identify,
        Stage::Reconfigure,
        Stage::ContinualTrain,
        Stage::Decode,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Finetune => "finetune",
            Stage::Identify => "identify",
            Stage::Reconfigure => "reconfigure",
            Stage::ContinualTrain => "continual-train",
            Stage::Decode => "decode",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = LudError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| LudError::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRequest {
    pub config: PipelineConfig,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResponse {
    pub stage: Stage,
    pub run_dir: PathBuf,
    pub result: serde_json::Value,
}

/// Applies the overrides and runs one stage; blocking.
pub fn run_stage(stage: Stage, req: StageRequest) -> Result<StageResponse> {
    let mut cfg = req.config;
    cfg.apply(&req.overrides)?;
    let result = match stage {
        Stage::GenCorpus => serde_json::to_value(pipeline::gen_corpus(&cfg)?)?,
        Stage::Finetune => serde_json::to_value(pipeline::finetune(&cfg)?)?,
        Stage::Identify => serde_json::to_value(pipeline::identify(&cfg)?)?,
        Stage::Reconfigure => serde_json::to_value(pipeline::reconfigure(&cfg)?)?,
        Stage::ContinualTrain => serde_json::to_value(pipeline::continual_train(&cfg)?)?,
        Stage::Decode => serde_json::to_value(pipeline::decode(&cfg)?)?,
        Stage::Sweep => serde_json::to_value(pipeline::sweep(&cfg)?)?,
        Stage::Report => {
            let p = pipeline::report(&cfg)?;
            serde_json::json!({ "summary": p.summary, "page": p.page })
        }
    };
    Ok(StageResponse {
        stage,
        run_dir: cfg.run_dir,
        result,
    })
}
