use avitmp_api as api;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

async fn post(path: &str, body: String) -> (StatusCode, serde_json::Value) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = avitmp_service::router().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn health_answers() {
    let req = Request::get(api::HEALTH).body(Body::empty()).unwrap();
    let resp = avitmp_service::router().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn generate_then_track_with_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq").to_string_lossy().into_owned();
    let gen = api::GenerateRequest {
        world: api::WorldConfig {
            length: 6,
            ..api::WorldConfig::easy()
        },
        seed: 2,
        out: seq.clone(),
    };
    let (status, body) = post(api::GENERATE, serde_json::to_string(&gen).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["frames"], 6);

    let track = api::TrackRequest {
        oracle: true,
        sequence: seq,
        ..Default::default()
    };
    let (status, body) = post(api::TRACK, serde_json::to_string(&track).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["metrics"]["auc"], 1.0);
    assert_eq!(body["diagnostics"].as_str().unwrap().lines().count(), 5);
}

#[tokio::test]
async fn errors_carry_status_and_kind() {
    let track = api::TrackRequest {
        oracle: true,
        sequence: "/definitely/not/here".into(),
        ..Default::default()
    };
    let (status, body) = post(api::TRACK, serde_json::to_string(&track).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["kind"], "not_found");

    let (status, body) = post(api::TRAIN, r#"{"bogus": 1}"#.into()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["kind"], "config");

    let (status, body) = post(api::GRADCHECK, r#"{"seeds": 1, "fault": "nope"}"#.into()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("unknown fault"));
}

#[tokio::test]
async fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().to_string_lossy().into_owned();
    let gen = api::GenerateRequest {
        world: api::WorldConfig {
            length: 3,
            ..api::WorldConfig::easy()
        },
        seed: 1,
        out: seq.clone(),
    };
    post(api::GENERATE, serde_json::to_string(&gen).unwrap()).await;
    let track = api::TrackRequest {
        checkpoint: Some("WFhYWA==".into()),
        sequence: seq,
        ..Default::default()
    };
    let (status, body) = post(api::TRACK, serde_json::to_string(&track).unwrap()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["kind"], "checkpoint");
}

#[tokio::test]
async fn gradcheck_reports_every_block_once() {
    let (status, body) = post(api::GRADCHECK, r#"{"seeds": 1}"#.into()).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = body["report"]["blocks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, avitmp_core::gradsuite::BLOCKS);
    assert_eq!(body["report"]["pass"], true);
    assert!(body["shapes"].is_null());
}
