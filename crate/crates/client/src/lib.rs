//! Typed async client for `lud-server`.

use std::time::Duration;

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use lud_core::api::{
    AcceptRequest, AcceptResponse, BuildVocabularyRequest, DecodeRequest, DecodeResponse, DetokenizeRequest,
    DetokenizeResponse, ErrorBody, FcrRequest, GenerateCorpusRequest, Health, IdentifyRequest, IdentifyResponse,
    MetricResponse, ReconfigureRequest, ReconfigureResponse, Stage, StageRequest, StageResponse, TeacherForcedRequest,
    TokenizeRequest, TokenizeResponse, WarRequest,
};
use lud_core::corpus::{Corpus, Vocabulary};
use lud_core::eval::QualityTally;
use lud_core::identify::ProbabilityTrace;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("{message}")]
    Api {
        status: StatusCode,
        kind: String,
        message: String,
    },
}

impl ClientError {
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { kind, .. } => Some(kind),
            ClientError::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct LudClient {
    base: String,
    http: reqwest::Client,
}

impl LudClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .build()?;
        Ok(LudClient {
            base: base.into().trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode_response<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.kind, b.message),
            Err(_) => ("http".to_string(), format!("{status}: {text}")),
        };
        Err(ClientError::Api { status, kind, message })
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode_response(resp).await
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = self.http.get(format!("{}/health", self.base)).send().await?;
        Self::decode_response(resp).await
    }

    pub async fn build_vocabulary(&self, req: &BuildVocabularyRequest) -> Result<Vocabulary> {
        self.post("/v1/vocabulary", req).await
    }

    pub async fn tokenize(&self, req: &TokenizeRequest) -> Result<TokenizeResponse> {
        self.post("/v1/tokenize", req).await
    }

    pub async fn detokenize(&self, req: &DetokenizeRequest) -> Result<DetokenizeResponse> {
        self.post("/v1/detokenize", req).await
    }

    pub async fn generate_corpus(&self, req: &GenerateCorpusRequest) -> Result<Corpus> {
        self.post("/v1/corpus", req).await
    }

    pub async fn identify(&self, req: &IdentifyRequest) -> Result<IdentifyResponse> {
        self.post("/v1/identify", req).await
    }

    pub async fn reconfigure(&self, req: &ReconfigureRequest) -> Result<ReconfigureResponse> {
        self.post("/v1/reconfigure", req).await
    }

    pub async fn accept(&self, req: &AcceptRequest) -> Result<AcceptResponse> {
        self.post("/v1/accept", req).await
    }

    pub async fn decode(&self, req: &DecodeRequest) -> Result<DecodeResponse> {
        self.post("/v1/decode", req).await
    }

    pub async fn teacher_forced(&self, req: &TeacherForcedRequest) -> Result<ProbabilityTrace> {
        self.post("/v1/teacher-forced", req).await
    }

    pub async fn fcr(&self, n_tokens: usize, n_forwards: usize) -> Result<f64> {
        let r: MetricResponse = self
            .post("/v1/metrics/fcr", &FcrRequest { n_tokens, n_forwards })
            .await?;
        Ok(r.value)
    }

    pub async fn war(&self, t_ar: f64, t_lud: f64) -> Result<f64> {
        let r: MetricResponse = self.post("/v1/metrics/war", &WarRequest { t_ar, t_lud }).await?;
        Ok(r.value)
    }

    pub async fn quality_ratio(&self, tally: QualityTally) -> Result<f64> {
        let r: MetricResponse = self.post("/v1/metrics/quality", &tally).await?;
        Ok(r.value)
    }

    /// Runs one pipeline stage on the server; returns when the stage finishes.
    pub async fn run_stage(&self, stage: Stage, req: &StageRequest) -> Result<StageResponse> {
        self.post(&format!("/v1/pipeline/{stage}"), req).await
    }
}
