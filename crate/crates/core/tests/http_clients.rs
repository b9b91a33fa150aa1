mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use hyperrank_core::embed::{EmbedError, EmbeddingBackend, RemoteConfig, RemoteEmbedder};
use hyperrank_core::glossary::{
    match_lookup, HttpLookup, HttpLookupConfig, Lookup, LookupCache, LookupError, MatchThresholds,
    RecordingLookup,
};
use serde_json::{json, Value};

const CALLABLE_BOND: &str = r#"{"docs": [
  {"label": ["<B>Callable</B> <B>bond</B>"], "comment": ["A callable bond is a bond that the issuer may redeem before maturity."]},
  {"label": ["Bond"], "comment": ["A debt security."]},
  {"label": ["Callable bond market index fund"], "comment": ["An index fund."]}
]}"#;

fn lookup_server() -> (common::Server, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    let server = common::serve(move |req| {
        counter.fetch_add(1, Ordering::SeqCst);
        assert_eq!(req.method, "GET");
        if req.target.contains("query=callable+bond") || req.target.contains("query=callable%20bond") {
            assert!(req.target.contains("format=JSON"), "{}", req.target);
            assert!(req.target.contains("maxResults=5"), "{}", req.target);
            (200, CALLABLE_BOND.to_string())
        } else if req.target.contains("query=broken") {
            (200, "not json".to_string())
        } else {
            (200, r#"{"docs": []}"#.to_string())
        }
    });
    (server, hits)
}

fn http_lookup(base_url: &str) -> HttpLookup {
    HttpLookup::new(HttpLookupConfig {
        base_url: base_url.to_string(),
        timeout: Duration::from_secs(5),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn live_lookup_parses_and_matches() {
    let (server, _) = lookup_server();
    let lookup = http_lookup(&server.base_url);
    let cands = lookup.lookup("callable bond").unwrap();
    assert_eq!(cands.len(), 3);
    assert_eq!(cands[0].label, "Callable bond");
    assert_eq!(
        match_lookup("callable bond", &cands, &MatchThresholds::default()),
        Some("A callable bond is a bond that the issuer may redeem before maturity.")
    );
    assert!(lookup.lookup("nothing here").unwrap().is_empty());
    assert!(matches!(lookup.lookup("broken"), Err(LookupError::Malformed { .. })));
    assert!(matches!(lookup.lookup("  "), Err(LookupError::EmptyQuery)));
}

#[test]
fn recorded_cache_replays_offline() {
    let (server, hits) = lookup_server();
    let recorder = RecordingLookup::new(http_lookup(&server.base_url), LookupCache::default());
    let live = recorder.lookup("callable bond").unwrap();
    let cache: LookupCache = recorder.into_cache();
    let seen = hits.load(Ordering::SeqCst);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    std::fs::write(&path, serde_json::to_string(&cache).unwrap()).unwrap();
    let offline = LookupCache::load(&path).unwrap();
    let replayed = offline.lookup("callable bond").unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), seen, "offline replay must not hit the network");
    assert_eq!(
        replayed.iter().map(|c| (&c.label, &c.description)).collect::<Vec<_>>(),
        live.iter().map(|c| (&c.label, &c.description)).collect::<Vec<_>>()
    );
}

#[test]
fn unreachable_lookup_is_retriable_transport_error() {
    let err = http_lookup(&common::dead_url()).lookup("bond").unwrap_err();
    assert!(matches!(err, LookupError::Transport { .. }));
    assert!(err.is_retriable());
}

/// Vector for a text: `[len, first byte, 1, 0]`.
fn fake_vector(text: &str) -> Vec<f64> {
    vec![text.len() as f64, *text.as_bytes().first().unwrap_or(&0) as f64, 1.0, 0.0]
}

fn embed_server(fail_first: usize, status: u16) -> (common::Server, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&calls);
    let server = common::serve(move |req| {
        let n = counter.fetch_add(1, Ordering::SeqCst);
        assert_eq!(req.method, "POST");
        assert_eq!(req.target, "/embed");
        if n < fail_first {
            return (status, "{}".to_string());
        }
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let vectors: Vec<Vec<f64>> = body["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| fake_vector(t.as_str().unwrap()))
            .collect();
        (200, json!({"vectors": vectors, "dim": 4}).to_string())
    });
    (server, calls)
}

fn remote(base_url: &str, batch_size: usize) -> RemoteEmbedder {
    RemoteEmbedder::new(RemoteConfig {
        base_url: base_url.to_string(),
        dim: 4,
        batch_size,
        max_in_flight: 3,
        max_retries: 2,
        initial_backoff_ms: 1,
        timeout_ms: 5_000,
    })
    .unwrap()
}

#[test]
fn remote_batches_keep_input_order() {
    let (server, calls) = embed_server(0, 200);
    let texts: Vec<String> = (0..150).map(|i| format!("{}term {}", (b'a' + (i % 26) as u8) as char, "x".repeat(i))).collect();
    let backend = remote(&server.base_url, 64);
    assert_eq!(backend.dim(), 4);
    let vecs = backend.embed_batch(&texts).unwrap();
    assert_eq!(vecs.len(), 150);
    for (t, v) in texts.iter().zip(&vecs) {
        assert_eq!(v.values(), fake_vector(t).as_slice());
    }
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    assert!(backend.embed_batch(&[]).unwrap().is_empty());
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_retries_server_errors() {
    let (server, calls) = embed_server(2, 503);
    let vecs = remote(&server.base_url, 8).embed_batch(&["bond".to_string()]).unwrap();
    assert_eq!(vecs[0].values(), fake_vector("bond").as_slice());
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    let (server, calls) = embed_server(usize::MAX, 503);
    let err = remote(&server.base_url, 8).embed_batch(&["bond".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::Transport { start: 0, end: 1, .. }), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_client_errors_are_not_retried() {
    let (server, calls) = embed_server(usize::MAX, 400);
    let err = remote(&server.base_url, 8).embed_batch(&["bond".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::Protocol(_)), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_dimension_is_checked() {
    let server = common::serve(|_| (200, json!({"vectors": [[1.0, 2.0]]}).to_string()));
    let err = remote(&server.base_url, 8).embed_batch(&["bond".to_string()]).unwrap_err();
    assert_eq!(err, EmbedError::DimMismatch { expected: 4, got: 2 });

    let server = common::serve(|_| (200, json!({"vectors": []}).to_string()));
    assert!(matches!(
        remote(&server.base_url, 8).embed_batch(&["bond".to_string()]),
        Err(EmbedError::Protocol(_))
    ));
}

#[test]
fn unreachable_embedder_fails() {
    let err = remote(&common::dead_url(), 8).embed_batch(&["bond".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::Transport { .. }), "{err}");
}
