//! HTTP clients against an in-process stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use docicl::llm::{Backend, CompletionRequest, HttpBackend, HttpConfig, LlmError};
use docicl::similarity::{EmbeddingProvider, RemoteProvider, SimilarityError};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    auth: Option<String>,
    body: String,
}

struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    handle: JoinHandle<()>,
}

/// Serve `replies` (status, body) in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut parts = request_line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { method, path, auth, body: String::from_utf8(buf).unwrap() });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    Stub { url, seen, handle }
}

fn backend(url: &str, key_env: &str) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        base_url: url.into(),
        api_key_env: key_env.into(),
        backoff_base_ms: 1,
        ..HttpConfig::default()
    })
    .unwrap()
}

fn chat(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]})
        .to_string()
}

#[test]
fn http_backend_posts_chat_request() {
    std::env::set_var("DOCICL_TEST_KEY_A", "sk-test");
    let s = stub(vec![(200, chat("{text:\"a\",Box:[1 2 3 4],entity:question}."))]);
    let b = backend(&s.url, "DOCICL_TEST_KEY_A");
    let mut req = CompletionRequest::new("Q: hi\nA:", "gpt-test");
    req.max_output_tokens = 77;
    let g = b.generate(&req).unwrap();
    assert_eq!(g.text, "{text:\"a\",Box:[1 2 3 4],entity:question}.");
    assert_eq!(g.finish_reason, "stop");
    s.handle.join().unwrap();
    let seen = s.seen.lock().unwrap();
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 77);
    assert_eq!(body["messages"][0]["content"], "Q: hi\nA:");
}

#[test]
fn http_backend_auth_failure_is_not_retried() {
    let s = stub(vec![(401, "{}".into())]);
    let err = backend(&s.url, "DOCICL_TEST_KEY_UNSET").generate(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, LlmError::Auth { status: 401 }), "{err:?}");
    s.handle.join().unwrap();
    assert_eq!(s.seen.lock().unwrap().len(), 1);
}

#[test]
fn http_backend_retries_rate_limits() {
    let s = stub(vec![(429, "{}".into()), (503, "busy".into()), (200, chat("ok"))]);
    let g = backend(&s.url, "DOCICL_TEST_KEY_UNSET").generate(&CompletionRequest::new("p", "m")).unwrap();
    assert_eq!(g.text, "ok");
    s.handle.join().unwrap();
    assert_eq!(s.seen.lock().unwrap().len(), 3);
}

#[test]
fn http_backend_gives_up_after_max_retries() {
    let s = stub(vec![(429, "{}".into()); 4]);
    let err = backend(&s.url, "DOCICL_TEST_KEY_UNSET").generate(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, LlmError::RateLimited { attempts: 4 }), "{err:?}");
    s.handle.join().unwrap();
}

#[test]
fn http_backend_rejects_malformed_reply() {
    let s = stub(vec![(200, "{\"choices\": []}".into())]);
    let err = backend(&s.url, "DOCICL_TEST_KEY_UNSET").generate(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, LlmError::Format(_)), "{err:?}");
    s.handle.join().unwrap();
}

#[test]
fn remote_provider_health_and_embed() {
    let health = serde_json::json!({"status": "ok", "provider_id": "stub-3", "dim": 3}).to_string();
    let embed = serde_json::json!({"provider_id": "stub-3", "dim": 3, "vectors": [[1.0, 0.0, 0.0], [0.0, 3.0, 4.0]]})
        .to_string();
    let s = stub(vec![(200, health), (200, embed)]);
    let p = RemoteProvider::new(format!("{}/", s.url)).unwrap();
    let h = p.health().unwrap();
    assert_eq!((h.provider_id.as_str(), h.dim), ("stub-3", 3));
    let v = p.embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[1].values, vec![0.0, 3.0, 4.0]);
    assert_eq!(p.id(), "stub-3");
    s.handle.join().unwrap();
    let seen = s.seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("GET", "/health"));
    assert_eq!((seen[1].method.as_str(), seen[1].path.as_str()), ("POST", "/embed"));
    let body: serde_json::Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(body["texts"], serde_json::json!(["a", "b"]));
}

#[test]
fn remote_provider_errors() {
    let bad_dim = serde_json::json!({"provider_id": "s", "dim": 3, "vectors": [[1.0, 0.0]]}).to_string();
    let short = serde_json::json!({"provider_id": "s", "dim": 2, "vectors": []}).to_string();
    let s = stub(vec![(503, "{}".into()), (200, bad_dim), (200, short)]);
    let p = RemoteProvider::new(s.url.clone()).unwrap();
    let texts = vec!["x".to_string()];
    assert!(matches!(p.embed(&texts).unwrap_err(), SimilarityError::ProviderUnavailable(_)));
    assert!(matches!(p.embed(&texts).unwrap_err(), SimilarityError::DimensionMismatch { expected: 3, found: 2 }));
    assert!(matches!(p.embed(&texts).unwrap_err(), SimilarityError::Format(_)));
    s.handle.join().unwrap();
}

#[test]
fn remote_provider_unreachable() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let p = RemoteProvider::new(format!("http://{addr}")).unwrap();
    assert!(matches!(p.health().unwrap_err(), SimilarityError::ProviderUnavailable(_)));
}
