mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rationale_core::model_client::{
    ChatMessage, ChatRequest, EndpointConfig, ModelClient, ResponseCache, RetryPolicy,
};
use rationale_core::Error;
use support::{ok, MockServer};

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        initial_backoff_ms: 5,
        max_backoff_ms: 20,
    }
}

fn config(url: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(url);
    c.retry = fast_retry(3);
    c.timeout_secs = 10;
    c
}

fn request(prompt: &str) -> ChatRequest {
    ChatRequest::new("mock-model", vec![ChatMessage::user(prompt)], 8)
}

#[test]
fn cache_hit_skips_the_network() {
    let server = MockServer::start(|_| ok("entailment"));
    let dir = tempfile::tempdir().unwrap();
    let client = ModelClient::new(
        config(&server.base_url),
        Some(ResponseCache::open(dir.path()).unwrap()),
    )
    .unwrap();
    let first = client.complete(&request("hello")).unwrap();
    assert!(!first.from_cache);
    assert_eq!(first.text, "entailment");
    let second = client.complete(&request("hello")).unwrap();
    assert!(second.from_cache);
    assert_eq!(second.text, "entailment");
    assert_eq!(server.hits(), 1);
    assert_eq!(client.network_calls(), 1);

    // a fresh client on the same directory is warm too
    let warm = ModelClient::new(
        config(&server.base_url),
        Some(ResponseCache::open(dir.path()).unwrap()),
    )
    .unwrap()
    .offline(true);
    assert_eq!(warm.complete(&request("hello")).unwrap().text, "entailment");
    assert_eq!(warm.network_calls(), 0);
}

#[test]
fn rate_limit_is_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = Arc::clone(&calls);
    let server = MockServer::start(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) == 0 {
            (429, "{\"error\":\"slow down\"}".into())
        } else {
            ok("neutral")
        }
    });
    let client = ModelClient::new(config(&server.base_url), None).unwrap();
    let resp = client.complete(&request("x")).unwrap();
    assert_eq!(resp.text, "neutral");
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    assert_eq!(client.network_calls(), 2);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockServer::start(|_| (503, "busy".into()));
    let client = ModelClient::new(config(&server.base_url), None).unwrap();
    let err = client.complete(&request("x")).unwrap_err();
    assert!(matches!(err, Error::Transport { .. }), "{err}");
    assert_eq!(server.hits(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_| (400, "{\"error\":\"bad\"}".into()));
    let client = ModelClient::new(config(&server.base_url), None).unwrap();
    assert!(matches!(
        client.complete(&request("x")),
        Err(Error::Transport { .. })
    ));
    assert_eq!(server.hits(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    // bind then drop to get a port nothing listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut cfg = config(&format!("http://127.0.0.1:{port}/v1"));
    cfg.retry = fast_retry(1);
    let client = ModelClient::new(cfg, None).unwrap();
    let err = client.complete(&request("x")).unwrap_err();
    assert!(matches!(err, Error::Transport { .. }), "{err}");
    assert_eq!(client.network_calls(), 2);
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let server = MockServer::start(|_| (200, "not json".into()));
    let client = ModelClient::new(config(&server.base_url), None).unwrap();
    assert!(matches!(
        client.complete(&request("x")),
        Err(Error::Protocol { .. })
    ));
}

#[test]
fn offline_miss_fails_without_calling() {
    let server = MockServer::start(|_| ok("a"));
    let dir = tempfile::tempdir().unwrap();
    let client = ModelClient::new(
        config(&server.base_url),
        Some(ResponseCache::open(dir.path()).unwrap()),
    )
    .unwrap()
    .offline(true);
    assert!(client.complete(&request("x")).is_err());
    assert_eq!(server.hits(), 0);
}

#[test]
fn wire_request_is_greedy_with_bearer_auth() {
    let seen = Arc::new(Mutex::new(None));
    let s = Arc::clone(&seen);
    let server = MockServer::start(move |req| {
        *s.lock().unwrap() = Some(req.clone());
        ok("x")
    });
    std::env::set_var("RATIONALE_TEST_KEY", "sekrit");
    let mut cfg = config(&server.base_url);
    cfg.api_key_env = Some("RATIONALE_TEST_KEY".into());
    let client = ModelClient::new(cfg, None).unwrap();
    client.complete(&request("the prompt")).unwrap();
    let req = seen.lock().unwrap().clone().unwrap();
    assert_eq!(req.model, "mock-model");
    assert_eq!(req.prompt, "the prompt");
    assert_eq!(req.max_tokens, 8);
    assert_eq!(req.authorization.as_deref(), Some("Bearer sekrit"));
}

#[test]
fn in_flight_requests_are_bounded() {
    let current = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (c, p) = (Arc::clone(&current), Arc::clone(&peak));
    let server = MockServer::start(move |_| {
        let now = c.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(30));
        c.fetch_sub(1, Ordering::SeqCst);
        ok("x")
    });
    let mut cfg = config(&server.base_url);
    cfg.max_in_flight = 2;
    let client = ModelClient::new(cfg, None).unwrap();
    std::thread::scope(|scope| {
        for i in 0..8 {
            let client = &client;
            scope.spawn(move || client.complete(&request(&format!("p{i}"))).unwrap());
        }
    });
    assert!(peak.load(Ordering::SeqCst) <= 2);
    assert_eq!(server.hits(), 8);
}
