use lud_client::{ClientError, LudClient};
use lud_core::api::{Stage, StageRequest};
use lud_core::corpus::CorpusKind;
use lud_core::pipeline::{Overrides, PipelineConfig};

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let c = LudClient::new(format!("http://127.0.0.1:{port}/")).unwrap();
    assert_eq!(c.base_url(), format!("http://127.0.0.1:{port}"));
    let err = c.health().await.unwrap_err();
    assert!(matches!(err, ClientError::Transport(_)));
    assert_eq!(err.kind(), None);
}

#[tokio::test]
async fn service_errors_are_decoded() {
    let addr = lud_server::spawn(([127, 0, 0, 1], 0).into()).await.unwrap();
    let c = LudClient::new(format!("http://{addr}")).unwrap();
    let mut config = PipelineConfig::desk_default(CorpusKind::TemplatedText);
    config.run_dir = std::env::temp_dir().join("lud-client-test-never-created");
    let req = StageRequest {
        config,
        overrides: Overrides {
            k: Some(0),
            ..Default::default()
        },
    };
    let err = c.run_stage(Stage::GenCorpus, &req).await.unwrap_err();
    assert_eq!(err.kind(), Some("invalid_argument"));
    assert!(!req.config.run_dir.exists());
}
