mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{completion_body, StubServer};
use promptevo::gateway::{
    ChatGateway, Clock, CompletionParams, CompletionRequest, Gateway, HttpBackend, RateLimiter,
    RetryPolicy, VirtualClock,
};
use promptevo::objectives::{PerplexityScorer, RemoteEvaluator, RemoteScorer, Split, TaskEvaluator};
use promptevo::runner::config::{build_gateway, BackendChoice, GatewayConfig};
use promptevo::GatewayError;

fn params() -> CompletionParams {
    CompletionParams {
        model_name: "stub-model".into(),
        ..CompletionParams::default()
    }
}

fn http_gateway(server: &StubServer, retry: RetryPolicy) -> (Gateway, Arc<VirtualClock>) {
    let clock = Arc::new(VirtualClock::default());
    let backend = HttpBackend::new(&format!("{}/v1", server.base_url), "sk-secret-123".into(), Duration::from_secs(10)).unwrap();
    let gateway = Gateway::new(Box::new(backend), retry, RateLimiter::unlimited()).with_clock(clock.clone());
    (gateway, clock)
}

fn complete(gateway: &Gateway, prompt: &str) -> Result<String, GatewayError> {
    let p = params();
    gateway.complete(&CompletionRequest {
        prompt,
        params: &p,
        nonce: 0,
    })
}

#[test]
fn request_carries_default_sampling_parameters() {
    let server = StubServer::start(|_, _| (200, completion_body("ok")));
    let (gateway, _) = http_gateway(&server, RetryPolicy::default());
    let prompt = "Fixed text.\n<Input>\nClassify the review.\n</Input>";
    assert_eq!(complete(&gateway, prompt).unwrap(), "ok");

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    let r = &reqs[0];
    assert_eq!(r.method, "POST");
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.header("authorization"), Some("Bearer sk-secret-123"));
    let body = r.json();
    assert_eq!(body["temperature"].as_f64(), Some(1.0));
    assert_eq!(body["max_tokens"].as_u64(), Some(500));
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], prompt);
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
}

#[test]
fn content_is_extracted_verbatim() {
    let content = "  Décidez si l'avis est positif.\n\tLine two with \"quotes\" and emoji 🙂  ";
    let server = StubServer::start(move |_, _| (200, completion_body(content)));
    let (gateway, _) = http_gateway(&server, RetryPolicy::default());
    assert_eq!(complete(&gateway, "p").unwrap(), content);
}

#[test]
fn rate_limited_requests_stop_at_the_retry_cap() {
    let server = StubServer::start(|_, _| (429, r#"{"error":{"message":"slow down"}}"#.into()));
    let retry = RetryPolicy {
        jitter: false,
        ..RetryPolicy::default()
    };
    let (gateway, clock) = http_gateway(&server, retry);
    let err = complete(&gateway, "p").unwrap_err();
    match err {
        GatewayError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 5);
            assert!(matches!(*last, GatewayError::Status { status: 429, .. }));
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert_eq!(server.requests().len(), 5);
    // 1 + 2 + 4 + 8 seconds of backoff
    assert_eq!(clock.now(), Duration::from_secs(15));
    let events = gateway.events();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].attempt, 5);
    assert!(!events[0].ok);
    assert!(!events[0].error.as_deref().unwrap_or("").contains("sk-secret"));
}

#[test]
fn transient_failures_recover_within_the_cap() {
    let server = StubServer::start(|n, _| match n {
        0 => (429, "{}".into()),
        1 => (503, "{}".into()),
        _ => (200, completion_body("recovered")),
    });
    let (gateway, clock) = http_gateway(&server, RetryPolicy::default());
    assert_eq!(complete(&gateway, "p").unwrap(), "recovered");
    assert_eq!(server.requests().len(), 3);
    // jittered delays lie in [base, 1.5 * base)
    let waited = clock.now();
    assert!(waited >= Duration::from_secs(3) && waited < Duration::from_millis(4500), "{waited:?}");
    assert_eq!(gateway.events()[0].attempt, 3);
}

#[test]
fn client_errors_and_bad_payloads_fail_fast() {
    let server = StubServer::start(|_, _| (400, r#"{"error":"bad request"}"#.into()));
    let (gateway, _) = http_gateway(&server, RetryPolicy::default());
    assert!(matches!(complete(&gateway, "p"), Err(GatewayError::Status { status: 400, .. })));
    assert_eq!(server.requests().len(), 1);

    let server = StubServer::start(|_, _| (200, r#"{"choices":[]}"#.into()));
    let (gateway, _) = http_gateway(&server, RetryPolicy::default());
    assert!(matches!(complete(&gateway, "p"), Err(GatewayError::Response(_))));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn connection_failures_are_retried() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let clock = Arc::new(VirtualClock::default());
    let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}/v1"), "k".into(), Duration::from_secs(2)).unwrap();
    let retry = RetryPolicy {
        max_retries: 2,
        ..RetryPolicy::default()
    };
    let gateway = Gateway::new(Box::new(backend), retry, RateLimiter::unlimited()).with_clock(clock);
    match complete(&gateway, "p") {
        Err(GatewayError::RetriesExhausted { attempts: 3, last }) => {
            assert!(matches!(*last, GatewayError::Transport(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn config_reads_the_key_from_the_environment() {
    let server = StubServer::start(|_, _| (200, completion_body("fine")));
    let config = GatewayConfig {
        backend: BackendChoice::Http,
        base_url: format!("{}/v1", server.base_url),
        api_key_env: "PROMPTEVO_WIRE_TEST_KEY".into(),
        ..GatewayConfig::default()
    };
    assert!(matches!(build_gateway(&config, None), Err(promptevo::Error::Gateway(GatewayError::Config(_)))));
    std::env::set_var("PROMPTEVO_WIRE_TEST_KEY", "from-env");
    let gateway = build_gateway(&config, None).unwrap();
    let p = params();
    let out = gateway
        .complete(&CompletionRequest { prompt: "p", params: &p, nonce: 0 })
        .unwrap();
    assert_eq!(out, "fine");
    assert_eq!(server.requests()[0].header("authorization"), Some("Bearer from-env"));
}

#[test]
fn remote_evaluator_protocol() {
    let server = StubServer::start(|_, r| {
        let body: serde_json::Value = serde_json::from_str(&r.body).unwrap();
        if body["instruction"] == "broken" {
            return (500, "oops".into());
        }
        (200, r#"{"accuracy":0.8,"f1":0.7,"precision":0.75,"recall":0.66}"#.into())
    });
    let eval = RemoteEvaluator::new(&format!("{}/evaluate", server.base_url), false, Duration::from_secs(5)).unwrap();
    assert!(!eval.has_split(Split::Validation));
    assert!(eval.has_split(Split::Test));
    let m = eval.evaluate("Classify the review.\nReview: great -> positive", Split::Test).unwrap();
    assert_eq!((m.accuracy, m.f1, m.precision, m.recall), (0.8, 0.7, 0.75, 0.66));
    let sent = server.requests()[0].json();
    assert_eq!(sent["instruction"], "Classify the review.\nReview: great -> positive");
    assert_eq!(sent["split"], "test");
    assert!(eval.evaluate("broken", Split::Test).is_err());
}

#[test]
fn remote_evaluator_rejects_out_of_range_metrics() {
    let server = StubServer::start(|_, _| (200, r#"{"accuracy":1.5,"f1":0.7,"precision":0.75,"recall":0.66}"#.into()));
    let eval = RemoteEvaluator::new(&server.base_url, true, Duration::from_secs(5)).unwrap();
    assert!(eval.evaluate("x", Split::Validation).is_err());
}

#[test]
fn remote_scorer_protocol() {
    let server = StubServer::start(|n, _| match n {
        0 => (200, r#"{"perplexity": 17.25}"#.into()),
        _ => (200, r#"{"perplexity": 0.5}"#.into()),
    });
    let scorer = RemoteScorer::new(&format!("{}/perplexity", server.base_url), Duration::from_secs(5)).unwrap();
    assert_eq!(scorer.perplexity("some text").unwrap(), 17.25);
    assert_eq!(server.requests()[0].json()["text"], "some text");
    assert!(scorer.perplexity("again").is_err());
}
