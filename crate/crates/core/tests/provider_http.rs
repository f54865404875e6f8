//! Integration tests for the remote caption and embedding clients against a
//! local mock HTTP server: fixture playback, per-tile failure isolation,
//! bounded parallelism, retry with backoff, and response validation.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use satscribe_core::corpus::SatTile;
use satscribe_core::encode::{encode_remote, EMBED_DIM};
use satscribe_core::error::Error;
use satscribe_core::prompting::{build_prompt, request_captions, CaptionSource};
use satscribe_core::provider::{FixtureStore, ProviderConfig, RetryPolicy};

type Handler = dyn Fn(&serde_json::Value) -> (u16, serde_json::Value) + Send + Sync;

struct MockServer {
    endpoint: String,
    hits: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    fn start(delay: Duration, handler: Arc<Handler>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));

        let handle = {
            let hits = hits.clone();
            let max_in_flight = max_in_flight.clone();
            let shutdown = shutdown.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { break };
                    let hits = hits.clone();
                    let max_in_flight = max_in_flight.clone();
                    let in_flight = in_flight.clone();
                    let handler = handler.clone();
                    std::thread::spawn(move || {
                        handle_connection(stream, delay, &hits, &in_flight, &max_in_flight, &*handler)
                    });
                }
            })
        };
        MockServer {
            endpoint: format!("http://{addr}/v1"),
            hits,
            max_in_flight,
            shutdown,
            handle: Some(handle),
        }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let addr = self.endpoint.trim_start_matches("http://");
        let addr = addr.trim_end_matches("/v1");
        let _ = std::net::TcpStream::connect(addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(
    mut stream: std::net::TcpStream,
    delay: Duration,
    hits: &AtomicUsize,
    in_flight: &AtomicUsize,
    max_in_flight: &AtomicUsize,
    handler: &Handler,
) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        match stream.read(&mut chunk) {
            Ok(0) => return,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    break pos;
                }
            }
            Err(_) => return,
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    let mut body = buf[header_end..].to_vec();
    while body.len() < content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => body.extend_from_slice(&chunk[..n]),
            Err(_) => return,
        }
    }

    hits.fetch_add(1, Ordering::SeqCst);
    let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    max_in_flight.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(delay);
    in_flight.fetch_sub(1, Ordering::SeqCst);

    let parsed: serde_json::Value =
        serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let (status, json) = handler(&parsed);
    let payload = json.to_string();
    let reason = if status == 200 { "OK" } else { "Error" };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.write_all(response.as_bytes());
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

fn tile(id: &str) -> SatTile {
    SatTile {
        tile_id: id.to_string(),
        county_fips: "01001".to_string(),
        image_uri: None,
        lat: None,
        lon: None,
        latent_attributes: None,
    }
}

fn caption_handler() -> Arc<Handler> {
    Arc::new(|req: &serde_json::Value| {
        let uri = req["image_uri"].as_str().unwrap_or_default();
        let tile_id = uri.trim_start_matches("synthetic://").to_string();
        (
            200,
            serde_json::json!({
                "tile_id": tile_id,
                "caption": format!("A small house with a metal roof near {tile_id}.")
            }),
        )
    })
}

fn cfg(endpoint: &str, max_parallel: usize, fixture_dir: Option<&std::path::Path>) -> ProviderConfig {
    ProviderConfig {
        endpoint: endpoint.to_string(),
        model: "captioner-test".to_string(),
        auth_env: None,
        max_parallel,
        retry: RetryPolicy {
            max_attempts: 3,
            base_backoff_secs: 0.01,
        },
        fixture_dir: fixture_dir.map(|p| p.to_path_buf()),
    }
}

#[test]
fn live_requests_succeed_and_record_fixtures() {
    let server = MockServer::start(Duration::ZERO, caption_handler());
    let fixtures = tempfile::tempdir().unwrap();
    let tiles: Vec<SatTile> = (0..3).map(|i| tile(&format!("t{i}"))).collect();
    let prompt = build_prompt(2).unwrap();

    let results =
        request_captions(&tiles, &prompt, &cfg(&server.endpoint, 2, Some(fixtures.path()))).unwrap();
    assert_eq!(results.len(), 3);
    for (i, r) in results.iter().enumerate() {
        let rec = r.as_ref().unwrap();
        assert_eq!(rec.tile_id, format!("t{i}"));
        assert_eq!(rec.source, CaptionSource::RemoteLlm);
        assert!(rec.text.contains("metal roof"));
    }
    assert_eq!(server.hits(), 3);

    // Second run replays fixtures: zero additional network calls.
    let again =
        request_captions(&tiles, &prompt, &cfg(&server.endpoint, 2, Some(fixtures.path()))).unwrap();
    assert_eq!(server.hits(), 3);
    for r in &again {
        assert_eq!(r.as_ref().unwrap().source, CaptionSource::Fixture);
    }
}

#[test]
fn complete_fixtures_replay_without_any_network() {
    // Unroutable endpoint: any attempted call would fail loudly.
    let fixtures = tempfile::tempdir().unwrap();
    let store = FixtureStore::open(fixtures.path()).unwrap();
    let prompt = build_prompt(2).unwrap();
    let tiles: Vec<SatTile> = (0..3).map(|i| tile(&format!("t{i}"))).collect();
    for t in &tiles {
        let key = FixtureStore::key(&[&t.tile_id, &prompt.template_text]);
        store
            .put(
                &key,
                &serde_json::json!({"tile_id": t.tile_id, "caption": "A flat roof."}),
            )
            .unwrap();
    }
    let results =
        request_captions(&tiles, &prompt, &cfg("http://127.0.0.1:1/v1", 4, Some(fixtures.path())))
            .unwrap();
    for r in results {
        let rec = r.unwrap();
        assert_eq!(rec.source, CaptionSource::Fixture);
        assert_eq!(rec.text, "A flat roof.");
    }
}

#[test]
fn empty_caption_is_flagged_without_poisoning_batch() {
    let handler: Arc<Handler> = Arc::new(|req| {
        let uri = req["image_uri"].as_str().unwrap_or_default();
        let tile_id = uri.trim_start_matches("synthetic://").to_string();
        let caption = if tile_id == "t1" { "" } else { "A gable roof." };
        (200, serde_json::json!({"tile_id": tile_id, "caption": caption}))
    });
    let server = MockServer::start(Duration::ZERO, handler);
    let tiles: Vec<SatTile> = (0..3).map(|i| tile(&format!("t{i}"))).collect();
    let prompt = build_prompt(1).unwrap();
    let results = request_captions(&tiles, &prompt, &cfg(&server.endpoint, 1, None)).unwrap();
    assert!(results[0].is_ok());
    let failure = results[1].as_ref().unwrap_err();
    assert_eq!(failure.tile_id, "t1");
    assert!(failure.message.contains("empty caption"));
    assert!(results[2].is_ok());
}

#[test]
fn max_parallel_bounds_in_flight_requests() {
    let server = MockServer::start(Duration::from_millis(30), caption_handler());
    let tiles: Vec<SatTile> = (0..10).map(|i| tile(&format!("t{i}"))).collect();
    let prompt = build_prompt(2).unwrap();
    let results = request_captions(&tiles, &prompt, &cfg(&server.endpoint, 2, None)).unwrap();
    assert!(results.iter().all(|r| r.is_ok()));
    // Output order matches input order regardless of completion order.
    for (i, r) in results.iter().enumerate() {
        assert_eq!(r.as_ref().unwrap().tile_id, format!("t{i}"));
    }
    assert!(
        server.max_in_flight() <= 2,
        "observed {} concurrent requests",
        server.max_in_flight()
    );
    assert_eq!(server.hits(), 10);
}

#[test]
fn transient_failures_retry_then_succeed() {
    let failures_left = Arc::new(Mutex::new(2i32));
    let handler: Arc<Handler> = {
        let failures_left = failures_left.clone();
        Arc::new(move |req| {
            let mut left = failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return (500, serde_json::json!({"error": "transient"}));
            }
            let uri = req["image_uri"].as_str().unwrap_or_default();
            let tile_id = uri.trim_start_matches("synthetic://").to_string();
            (200, serde_json::json!({"tile_id": tile_id, "caption": "A patio."}))
        })
    };
    let server = MockServer::start(Duration::ZERO, handler);
    let tiles = vec![tile("t0")];
    let prompt = build_prompt(3).unwrap();
    let results = request_captions(&tiles, &prompt, &cfg(&server.endpoint, 1, None)).unwrap();
    assert!(results[0].is_ok());
    assert_eq!(server.hits(), 3);
}

#[test]
fn exhausted_retries_fail_only_that_tile() {
    let handler: Arc<Handler> =
        Arc::new(|_| (500, serde_json::json!({"error": "down"})));
    let server = MockServer::start(Duration::ZERO, handler);
    let tiles = vec![tile("t0")];
    let prompt = build_prompt(1).unwrap();
    let mut config = cfg(&server.endpoint, 1, None);
    config.retry.max_attempts = 2;
    let results = request_captions(&tiles, &prompt, &config).unwrap();
    let failure = results[0].as_ref().unwrap_err();
    assert!(failure.message.contains("500"));
    assert_eq!(server.hits(), 2);
}

#[test]
fn remote_embeddings_round_trip_and_replay() {
    let handler: Arc<Handler> = Arc::new(|req| {
        let texts = req["texts"].as_array().cloned().unwrap_or_default();
        let embeddings: Vec<Vec<f64>> = texts
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut v = vec![0.0; EMBED_DIM];
                v[i] = 1.0;
                v
            })
            .collect();
        (200, serde_json::json!({"embeddings": embeddings}))
    });
    let server = MockServer::start(Duration::ZERO, handler);
    let fixtures = tempfile::tempdir().unwrap();
    let config = cfg(&server.endpoint, 1, Some(fixtures.path()));
    let texts = vec!["a gable roof".to_string(), "a flat roof".to_string()];

    let first = encode_remote(&texts, &config).unwrap();
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].vector[0], 1.0);
    assert_eq!(server.hits(), 1);

    let second = encode_remote(&texts, &config).unwrap();
    assert_eq!(server.hits(), 1, "fixtures should satisfy the second run");
    assert_eq!(first, second);
}

#[test]
fn wrong_dimensionality_is_a_hard_error() {
    let handler: Arc<Handler> = Arc::new(|req| {
        let n = req["texts"].as_array().map(|a| a.len()).unwrap_or(0);
        let embeddings: Vec<Vec<f64>> = (0..n).map(|_| vec![0.5; 768]).collect();
        (200, serde_json::json!({"embeddings": embeddings}))
    });
    let server = MockServer::start(Duration::ZERO, handler);
    let config = cfg(&server.endpoint, 1, None);
    match encode_remote(&["x".to_string()], &config) {
        Err(Error::Dimensionality { expected, got }) => {
            assert_eq!(expected, 512);
            assert_eq!(got, 768);
        }
        other => panic!("expected dimensionality error, got {other:?}"),
    }
}
