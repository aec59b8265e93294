use std::sync::Arc;

use ecakp_cli::api::{self, AppState, RegisterProduct};
use ecakp_cli::transport::{AdminClient, HttpTransport};
use ecakp_core::client::ActivationTransport;
use ecakp_core::guard::{NetworkGate, Phase};
use ecakp_core::identity::{self, AttributeSet, EXPECTED_ATTRIBUTES};
use ecakp_core::licensing::{self, ServerKey};
use ecakp_core::server::{ActivationRequest, ActivationResponse, ActivationService, DenialReason, PolicyMode, ProductStatus};
use ecakp_core::ContentId;

fn start(token: Option<&str>) -> String {
    let state = AppState {
        service: Arc::new(ActivationService::in_memory(ServerKey::from_seed([8; 32]))),
        admin_token: token.map(str::to_owned),
    };
    api::spawn_background(state, "127.0.0.1:0".parse().unwrap()).unwrap().to_string()
}

fn fp(tag: &str) -> identity::MachineFingerprint {
    let attrs = AttributeSet::new(EXPECTED_ATTRIBUTES.iter().map(|n| (*n, Some(format!("{n}-{tag}"))))).unwrap();
    identity::fingerprint(&attrs)
}

fn post_raw(addr: &str, path: &str, body: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent
        .post(format!("http://{addr}{path}"))
        .header("Content-Type", "application/json")
        .send(body)
        .unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

#[test]
fn admin_endpoints_need_the_bearer_token() {
    let addr = start(Some("s3cret"));
    let body = RegisterProduct { content_id: ContentId::from_bytes([1; 16]), master_key: [2; 32], policy: PolicyMode::Strict };

    let err = AdminClient::new(&addr, "wrong").register(&body).unwrap_err();
    assert!(err.message.contains("401"), "{}", err.message);
    assert!(!err.retryable);

    let admin = AdminClient::new(&addr, "s3cret");
    admin.register(&body).unwrap();
    let dup = admin.register(&body).unwrap_err();
    assert!(dup.message.contains("409"), "{}", dup.message);

    let stats = admin.stats(body.content_id).unwrap();
    assert_eq!((stats.stats.grants, stats.stats.denials, stats.stats.distinct_machines), (0, 0, 0));
    assert_eq!(stats.stats.status, ProductStatus::Active);

    let missing = admin.stats(ContentId::from_bytes([7; 16])).unwrap_err();
    assert!(missing.message.contains("404"), "{}", missing.message);
}

#[test]
fn admin_disabled_without_configured_token() {
    let addr = start(None);
    let err = AdminClient::new(&addr, "").stats(ContentId::from_bytes([1; 16])).unwrap_err();
    assert!(err.message.contains("503"), "{}", err.message);
}

#[test]
fn activation_over_http() {
    let addr = start(Some("t"));
    let id = ContentId::from_bytes([3; 16]);
    let admin = AdminClient::new(&addr, "t");
    admin.register(&RegisterProduct { content_id: id, master_key: [5; 32], policy: PolicyMode::FairUse { extra_activations: 1 } }).unwrap();

    let t = HttpTransport::new(&format!("http://{addr}/"), NetworkGate::default());
    let key = t.server_key().unwrap();
    match t.send(&ActivationRequest::new(id, &fp("a"), "a@b.c")).unwrap() {
        ActivationResponse::Granted { license } => assert!(licensing::verify_license(&license, &key)),
        other => panic!("{other:?}"),
    }
    t.send(&ActivationRequest::new(id, &fp("b"), "a@b.c")).unwrap();
    let third = t.send(&ActivationRequest::new(id, &fp("c"), "a@b.c")).unwrap();
    assert_eq!(third, ActivationResponse::Denied { reason: DenialReason::LimitReached });

    let unknown = t.send(&ActivationRequest::new(ContentId::from_bytes([9; 16]), &fp("a"), "a@b.c")).unwrap();
    assert_eq!(unknown, ActivationResponse::Denied { reason: DenialReason::UnknownContent });

    admin.set_policy(id, PolicyMode::Strict).unwrap();
    assert_eq!(admin.stats(id).unwrap().policy, PolicyMode::Strict);
}

#[test]
fn malformed_requests_are_protocol_errors() {
    let addr = start(Some("t"));
    let (status, body) = post_raw(&addr, "/v1/activate", "{not json");
    assert_eq!(status, 400);
    assert!(body.contains("malformed request body"));

    let mut req = serde_json::to_value(ActivationRequest::new(ContentId::from_bytes([1; 16]), &fp("a"), "a@b.c")).unwrap();
    req["email"] = "no-at-sign".into();
    let (status, _) = post_raw(&addr, "/v1/activate", &req.to_string());
    assert_eq!(status, 400);
}

#[test]
fn closed_gate_blocks_before_connecting() {
    // nothing listens here; a connection attempt would give a retryable error
    let gate = NetworkGate::default();
    let t = HttpTransport::new("127.0.0.1:9", gate.clone());
    gate.enter(Phase::Playback);
    let err = t.send(&ActivationRequest::new(ContentId::from_bytes([1; 16]), &fp("a"), "a@b.c")).unwrap_err();
    assert!(!err.retryable);
    assert!(err.message.contains("blocked during playback"), "{}", err.message);
    gate.enter(Phase::Activation);
    assert!(t.send(&ActivationRequest::new(ContentId::from_bytes([1; 16]), &fp("a"), "a@b.c")).unwrap_err().retryable);
}
