//! The gateway against a scripted local server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use beyondrec::gateway::{Gateway, GatewayConfig};
use beyondrec::Error;

struct Reply {
    status: u16,
    body: String,
    retry_after: Option<&'static str>,
    delay: Duration,
}

fn ok(content: &str) -> Reply {
    Reply {
        status: 200,
        body: serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
        retry_after: None,
        delay: Duration::ZERO,
    }
}

fn status(code: u16) -> Reply {
    Reply {
        status: code,
        body: "{\"error\": \"scripted\"}".into(),
        retry_after: None,
        delay: Duration::ZERO,
    }
}

type Script = dyn Fn(usize, &serde_json::Value) -> Reply + Send + Sync;

struct Server {
    url: String,
    calls: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    arrivals: Arc<Mutex<Vec<Instant>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

/// `script(n, body)` answers the n-th request (0-based).
fn serve(workers: usize, script: impl Fn(usize, &serde_json::Value) -> Reply + Send + Sync + 'static) -> Server {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
    let port = server.server_addr().to_ip().expect("ip").port();
    let script: Arc<Script> = Arc::new(script);
    let calls = Arc::new(AtomicUsize::new(0));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let max_in_flight = Arc::new(AtomicUsize::new(0));
    let arrivals = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    for _ in 0..workers {
        let (server, script, calls, in_flight, max_in_flight, arrivals, auth) = (
            server.clone(),
            script.clone(),
            calls.clone(),
            in_flight.clone(),
            max_in_flight.clone(),
            arrivals.clone(),
            auth.clone(),
        );
        thread::spawn(move || {
            while let Ok(mut req) = server.recv() {
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                max_in_flight.fetch_max(now, Ordering::SeqCst);
                arrivals.lock().unwrap().push(Instant::now());
                auth.lock().unwrap().push(
                    req.headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string()),
                );
                let n = calls.fetch_add(1, Ordering::SeqCst);
                let mut raw = String::new();
                req.as_reader().read_to_string(&mut raw).unwrap();
                let body: serde_json::Value = serde_json::from_str(&raw).unwrap_or_default();
                let reply = script(n, &body);
                thread::sleep(reply.delay);
                in_flight.fetch_sub(1, Ordering::SeqCst);
                let mut resp = tiny_http::Response::from_string(reply.body).with_status_code(reply.status);
                if let Some(ra) = reply.retry_after {
                    resp.add_header(tiny_http::Header::from_bytes("Retry-After", ra).unwrap());
                }
                let _ = req.respond(resp);
            }
        });
    }
    Server {
        url: format!("http://127.0.0.1:{port}/v1"),
        calls,
        max_in_flight,
        arrivals,
        auth,
    }
}

fn config(url: &str) -> GatewayConfig {
    GatewayConfig {
        endpoint: url.into(),
        model: "test-model".into(),
        api_key_env: String::new(),
        backoff_base_ms: 20,
        backoff_cap_ms: 2_000,
        timeout_secs: 10,
        ..GatewayConfig::default()
    }
}

fn echo_prompt(_: usize, body: &serde_json::Value) -> Reply {
    ok(&format!("1. {}", body["messages"][0]["content"].as_str().unwrap_or("")))
}

#[test]
fn rate_limit_then_success_takes_two_attempts() {
    let server = serve(2, |n, b| if n == 0 { status(429) } else { echo_prompt(n, b) });
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    let t = Instant::now();
    let r = gw.complete(&gw.request("hello")).unwrap();
    assert_eq!(r.text, "1. hello");
    assert_eq!(r.attempt_count, 2);
    assert!(!r.from_cache);
    assert!(t.elapsed() >= Duration::from_millis(20));
    assert_eq!(server.calls.load(Ordering::SeqCst), 2);
}

#[test]
fn request_body_carries_decoding_parameters() {
    let seen = Arc::new(Mutex::new(None));
    let s2 = seen.clone();
    let server = serve(1, move |n, b| {
        *s2.lock().unwrap() = Some(b.clone());
        echo_prompt(n, b)
    });
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    gw.complete(&gw.request("p")).unwrap();
    let body = seen.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 512);
    assert_eq!(body["messages"][0]["role"], "user");
}

#[test]
fn backoff_doubles_between_retries() {
    let server = serve(1, |n, b| if n < 3 { status(503) } else { echo_prompt(n, b) });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.backoff_base_ms = 40;
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    let r = gw.complete(&gw.request("x")).unwrap();
    assert_eq!(r.attempt_count, 4);
    let arrivals = server.arrivals.lock().unwrap().clone();
    let gaps: Vec<Duration> = arrivals.windows(2).map(|w| w[1] - w[0]).collect();
    for (gap, want) in gaps.iter().zip([40u64, 80, 160]) {
        assert!(*gap >= Duration::from_millis(want), "gap {gap:?} < {want} ms");
    }
}

#[test]
fn retry_after_overrides_a_shorter_backoff() {
    let server = serve(1, |n, b| {
        if n == 0 {
            Reply {
                retry_after: Some("0.3"),
                ..status(429)
            }
        } else {
            echo_prompt(n, b)
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    gw.complete(&gw.request("x")).unwrap();
    let arrivals = server.arrivals.lock().unwrap().clone();
    assert!(arrivals[1] - arrivals[0] >= Duration::from_millis(300));
}

#[test]
fn backoff_is_capped() {
    let server = serve(1, |n, b| if n < 2 { status(500) } else { echo_prompt(n, b) });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.backoff_base_ms = 5_000;
    cfg.backoff_cap_ms = 30;
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    let t = Instant::now();
    gw.complete(&gw.request("x")).unwrap();
    assert!(t.elapsed() < Duration::from_secs(2));
}

#[test]
fn exhausted_retries_report_transport_error() {
    let server = serve(1, |_, _| status(500));
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.max_retries = 2;
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    let err = gw.complete(&gw.request("x")).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    assert!(err.is_upstream());
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0, "failures are not cached");
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(1, |_, _| status(400));
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    let err = gw.complete(&gw.request("x")).unwrap_err();
    assert!(matches!(err, Error::Http { status: 400, .. }), "{err}");
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn blank_content_is_an_empty_completion() {
    let server = serve(1, |_, _| ok("   "));
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    assert!(matches!(gw.complete(&gw.request("x")).unwrap_err(), Error::EmptyCompletion));
}

#[test]
fn rerun_is_served_entirely_from_cache() {
    let server = serve(4, echo_prompt);
    let dir = tempfile::tempdir().unwrap();
    let prompts: Vec<String> = (0..20).map(|i| format!("prompt {i}")).collect();
    let first = {
        let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
        let reqs: Vec<_> = prompts.iter().map(|p| gw.request(p)).collect();
        let out: Vec<_> = gw.complete_batch(&reqs).into_iter().map(Result::unwrap).collect();
        assert!(out.iter().all(|r| !r.from_cache));
        out
    };
    assert_eq!(server.calls.load(Ordering::SeqCst), 20);
    // A fresh gateway on the same directory, as a second process would see it.
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    let reqs: Vec<_> = prompts.iter().map(|p| gw.request(p)).collect();
    let second: Vec<_> = gw.complete_batch(&reqs).into_iter().map(Result::unwrap).collect();
    assert!(second.iter().all(|r| r.from_cache));
    assert_eq!(gw.network_calls(), 0);
    assert_eq!(server.calls.load(Ordering::SeqCst), 20);
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.text, b.text);
        assert_eq!(a.attempt_count, b.attempt_count);
    }
}

#[test]
fn in_flight_requests_respect_the_bound() {
    let server = serve(16, |n, b| Reply {
        delay: Duration::from_millis(40),
        ..echo_prompt(n, b)
    });
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.concurrency = 3;
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    let reqs: Vec<_> = (0..24).map(|i| gw.request(&format!("p{i}"))).collect();
    let out = gw.complete_batch(&reqs);
    assert!(out.iter().all(Result::is_ok));
    let peak = server.max_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "requests should overlap, peak {peak}");
    // Results stay in request order.
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().text, format!("1. p{i}"));
    }
}

#[test]
fn duplicate_prompts_in_a_batch_hit_the_network_once() {
    let server = serve(4, |n, b| Reply {
        delay: Duration::from_millis(20),
        ..echo_prompt(n, b)
    });
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(config(&server.url), dir.path(), None).unwrap();
    let reqs: Vec<_> = (0..8).map(|_| gw.request("same")).collect();
    let out = gw.complete_batch(&reqs);
    assert!(out.iter().all(Result::is_ok));
    assert_eq!(server.calls.load(Ordering::SeqCst), 1);
    assert_eq!(out.iter().filter(|r| r.as_ref().unwrap().from_cache).count(), 7);
}

#[test]
fn min_interval_spaces_request_starts() {
    let server = serve(4, echo_prompt);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.min_interval_ms = 50;
    cfg.concurrency = 4;
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    let reqs: Vec<_> = (0..5).map(|i| gw.request(&format!("p{i}"))).collect();
    let t = Instant::now();
    assert!(gw.complete_batch(&reqs).iter().all(Result::is_ok));
    assert!(t.elapsed() >= Duration::from_millis(200));
}

#[test]
fn api_key_is_sent_and_only_required_on_a_miss() {
    let server = serve(1, echo_prompt);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server.url);
    cfg.api_key_env = "BEYONDREC_TEST_KEY_PRESENT".into();
    std::env::set_var("BEYONDREC_TEST_KEY_PRESENT", "sk-test");
    let gw = Gateway::new(cfg.clone(), dir.path(), None).unwrap();
    gw.complete(&gw.request("x")).unwrap();
    assert_eq!(server.auth.lock().unwrap()[0].as_deref(), Some("Bearer sk-test"));

    cfg.api_key_env = "BEYONDREC_TEST_KEY_ABSENT".into();
    let gw = Gateway::new(cfg, dir.path(), None).unwrap();
    assert!(gw.complete(&gw.request("x")).unwrap().from_cache);
    let err = gw.complete(&gw.request("y")).unwrap_err();
    assert!(matches!(err, Error::MissingApiKey(ref v) if v == "BEYONDREC_TEST_KEY_ABSENT"));
}

#[test]
fn audit_log_records_every_attempt() {
    let server = serve(1, |n, b| if n == 0 { status(429) } else { echo_prompt(n, b) });
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("audit.jsonl");
    let gw = Gateway::new(config(&server.url), &dir.path().join("cache"), Some(&audit)).unwrap();
    gw.complete(&gw.request("x")).unwrap();
    gw.complete(&gw.request("x")).unwrap();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&audit)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["status"], 429);
    assert_eq!(lines[1]["status"], 200);
    assert_eq!(lines[2]["from_cache"], true);
}
