//! HTTP/JSON front end for `lud-core`.
//!
//! Model-bound and pipeline work runs on the blocking pool; requests are
//! otherwise independent and the service keeps no state between them.

use std::net::SocketAddr;

use axum::extract::{Json, Path};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use tokio::net::TcpListener;

use lud_core::api::{
    self, AcceptRequest, AcceptResponse, BuildVocabularyRequest, DecodeMode, DecodeRequest, DecodeResponse,
    DetokenizeRequest, DetokenizeResponse, ErrorBody, FcrRequest, GenerateCorpusRequest, Health, IdentifyRequest,
    IdentifyResponse, MetricResponse, ReconfigureRequest, ReconfigureResponse, Stage, StageRequest, StageResponse,
    TeacherForcedRequest, TokenizeRequest, TokenizeResponse, WarRequest,
};
use lud_core::corpus::{self, Corpus, TokenizedItem, Vocabulary};
use lud_core::decode;
use lud_core::eval::{self, DecodeStats, QualityTally};
use lud_core::identify::{self, ProbabilityTrace};
use lud_core::model::CausalLM;
use lud_core::reconfigure;
use lud_core::LudError;

pub struct ApiError(LudError);

impl From<LudError> for ApiError {
    fn from(e: LudError) -> Self {
        ApiError(e)
    }
}

fn status_of(e: &LudError) -> StatusCode {
    match e {
        LudError::MissingArtifact { .. } => StatusCode::PRECONDITION_FAILED,
        LudError::Invariant(_) | LudError::NonFiniteLoss { .. } | LudError::Io { .. } => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
        LudError::ConfigMismatch(_) | LudError::BadCheckpoint { .. } => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(&self.0), Json(ErrorBody::from(&self.0))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> lud_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(join) => Err(ApiError(LudError::Invariant(format!("worker panicked: {join}")))),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn build_vocabulary(Json(req): Json<BuildVocabularyRequest>) -> ApiResult<Vocabulary> {
    Ok(Json(corpus::build_vocabulary(&req.texts, req.mode)?))
}

async fn tokenize(Json(req): Json<TokenizeRequest>) -> ApiResult<TokenizeResponse> {
    Ok(Json(TokenizeResponse {
        ids: req.vocabulary.tokenize(&req.text)?,
    }))
}

async fn detokenize(Json(req): Json<DetokenizeRequest>) -> ApiResult<DetokenizeResponse> {
    Ok(Json(DetokenizeResponse {
        text: req.vocabulary.detokenize(&req.ids)?,
    }))
}

async fn generate_corpus(Json(req): Json<GenerateCorpusRequest>) -> ApiResult<Corpus> {
    blocking(move || corpus::generate_synthetic_corpus(req.kind, req.n_items, req.seed, req.tokenizer)).await
}

async fn identify_units(Json(req): Json<IdentifyRequest>) -> ApiResult<IdentifyResponse> {
    Ok(Json(IdentifyResponse {
        units: identify::identify_units(&req.trace, req.alpha)?,
    }))
}

async fn reconfigure_item(Json(req): Json<ReconfigureRequest>) -> ApiResult<ReconfigureResponse> {
    req.item.validate(&req.vocabulary)?;
    Ok(Json(ReconfigureResponse {
        instances: reconfigure::reconfigure_item(&req.item, &req.units, &req.vocabulary)?,
    }))
}

async fn accept(Json(req): Json<AcceptRequest>) -> ApiResult<AcceptResponse> {
    req.beta.validate()?;
    if req.proposal.is_empty() || req.proposal.tokens.len() != req.proposal.probs.len() {
        return Err(
            LudError::InvalidArgument("proposal needs equally many tokens and probs, at least one".into()).into(),
        );
    }
    for &t in &req.proposal.tokens {
        req.vocabulary.token_str(t)?;
    }
    let (accepted_len, halt_reason) =
        decode::accept_span(&req.proposal, req.beta, &req.vocabulary, req.repetition_check);
    Ok(Json(AcceptResponse {
        accepted_len,
        halt_reason,
    }))
}

fn load_model(checkpoint: &std::path::Path, dataset: &std::path::Path) -> lud_core::Result<(CausalLM, Vocabulary)> {
    let vocab = corpus::load_dataset(dataset)?.vocabulary;
    let model = CausalLM::load_expecting(checkpoint, vocab.len())?;
    Ok((model, vocab))
}

async fn decode_prompt(Json(req): Json<DecodeRequest>) -> ApiResult<DecodeResponse> {
    blocking(move || {
        let (model, vocab) = load_model(&req.checkpoint, &req.dataset)?;
        let prompt = vocab.tokenize(&req.prompt)?;
        let trace = match req.mode {
            DecodeMode::Lud => decode::decode_lud(&model, &vocab, &prompt, &req.config)?,
            DecodeMode::Ar => decode::decode_ar(&model, &vocab, &prompt, req.config.max_new_tokens)?,
        };
        Ok(DecodeResponse {
            text: vocab.detokenize(&trace.output_ids)?,
            trace,
        })
    })
    .await
}

async fn teacher_forced(Json(req): Json<TeacherForcedRequest>) -> ApiResult<ProbabilityTrace> {
    blocking(move || {
        let (model, vocab) = load_model(&req.checkpoint, &req.dataset)?;
        let item = TokenizedItem::from_text("request", &req.prompt, &req.target, &vocab)?;
        model.teacher_forced_probs(&item, vocab.bos_id())
    })
    .await
}

async fn fcr(Json(req): Json<FcrRequest>) -> ApiResult<MetricResponse> {
    let stats = DecodeStats {
        n_tokens: req.n_tokens,
        n_forwards: req.n_forwards,
        wall_time: Default::default(),
    };
    Ok(Json(MetricResponse {
        value: eval::fcr(&stats)?,
    }))
}

async fn war(Json(req): Json<WarRequest>) -> ApiResult<MetricResponse> {
    Ok(Json(MetricResponse {
        value: eval::war(req.t_ar, req.t_lud)?,
    }))
}

async fn quality(Json(req): Json<QualityTally>) -> ApiResult<MetricResponse> {
    Ok(Json(MetricResponse {
        value: eval::quality_ratio(&req)?,
    }))
}

async fn pipeline_stage(Path(stage): Path<String>, Json(req): Json<StageRequest>) -> ApiResult<StageResponse> {
    let stage: Stage = stage.parse()?;
    tracing::info!(%stage, run_dir = %req.config.run_dir.display(), "running stage");
    blocking(move || api::run_stage(stage, req)).await
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/vocabulary", post(build_vocabulary))
        .route("/v1/tokenize", post(tokenize))
        .route("/v1/detokenize", post(detokenize))
        .route("/v1/corpus", post(generate_corpus))
        .route("/v1/identify", post(identify_units))
        .route("/v1/reconfigure", post(reconfigure_item))
        .route("/v1/accept", post(accept))
        .route("/v1/decode", post(decode_prompt))
        .route("/v1/teacher-forced", post(teacher_forced))
        .route("/v1/metrics/fcr", post(fcr))
        .route("/v1/metrics/war", post(war))
        .route("/v1/metrics/quality", post(quality))
        .route("/v1/pipeline/{stage}", post(pipeline_stage))
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(local)
}
