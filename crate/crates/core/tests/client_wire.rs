//! Remote client behaviour against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Once};
use std::thread::JoinHandle;

use serde_json::Value;

use mar_harness::client::{BackendConfig, BackendKind, ChatBackend, ClientError, RemoteBackend};
use mar_harness::image_ops::decode_data_url;
use mar_harness::kg::{load_kg, Triplet};
use mar_harness::prompt::{build_step1, DialoguePrompt, PromptTemplates};

const MINI: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");
const TOKEN_VAR: &str = "MARH_WIRE_TEST_TOKEN";

static ENV: Once = Once::new();

fn init() {
    ENV.call_once(|| std::env::set_var(TOKEN_VAR, "sekrit"));
}

struct Captured {
    headers: Vec<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, JoinHandle<Vec<Captured>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            seen.push(Captured {
                headers,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": text } }],
        "usage": { "prompt_tokens": 10, "completion_tokens": 2 }
    })
    .to_string()
}

fn backend(url: &str, retries: u32) -> RemoteBackend {
    init();
    let cfg = BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some(url.into()),
        model: Some("test-model".into()),
        token_env: Some(TOKEN_VAR.into()),
        timeout_secs: 5.0,
        max_retries: retries,
        parallelism: 1,
        backoff_ms: 1,
    };
    RemoteBackend::new(cfg, Arc::new(load_kg(MINI).unwrap())).unwrap()
}

fn head_prompt() -> DialoguePrompt {
    let kg = load_kg(MINI).unwrap();
    let [head, _, _] = build_step1(&Triplet::new("ice", "class_of", "water"), &kg, &PromptTemplates::default()).unwrap();
    head
}

#[test]
fn request_shape_and_reply() {
    let (url, server) = serve(vec![(200, ok_body("ice"))]);
    let t = backend(&url, 0).complete("k", &head_prompt()).unwrap();
    assert_eq!((t.response.as_str(), t.attempts), ("ice", 1));
    assert_eq!(t.usage.unwrap()["completion_tokens"], 2);

    let seen = server.join().unwrap();
    let req = &seen[0];
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sekrit")));
    assert_eq!(req.body["model"], "test-model");
    let content = req.body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["type"], "text");
    assert_eq!(content[1]["type"], "image_url");
    let img = decode_data_url(content[1]["image_url"]["url"].as_str().unwrap()).unwrap();
    assert!(img.width() > 0 && img.height() > 0);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, server) = serve(vec![(401, "{}".into())]);
    let err = backend(&url, 3).complete("k", &head_prompt()).unwrap_err();
    assert!(matches!(err, ClientError::Auth(_)), "{err:?}");
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn server_error_then_success() {
    let (url, server) = serve(vec![(503, "busy".into()), (200, ok_body("steam"))]);
    let t = backend(&url, 3).complete("k", &head_prompt()).unwrap();
    assert_eq!((t.response.as_str(), t.attempts), ("steam", 2));
    let seen = server.join().unwrap();
    assert_eq!(seen[0].body, seen[1].body);
}

#[test]
fn retries_run_out() {
    let (url, server) = serve(vec![(500, "a".into()), (429, "b".into()), (502, "c".into())]);
    let err = backend(&url, 2).complete("k", &head_prompt()).unwrap_err();
    match err {
        ClientError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(last.contains("502"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn malformed_payload_is_an_error() {
    let (url, _server) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let err = backend(&url, 3).complete("k", &head_prompt()).unwrap_err();
    assert!(matches!(err, ClientError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn connection_refused_is_transport() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = backend(&format!("http://127.0.0.1:{port}/v1"), 1).complete("k", &head_prompt()).unwrap_err();
    assert!(matches!(err, ClientError::RetriesExhausted { attempts: 2, .. }), "{err:?}");
}

#[test]
fn missing_token_variable() {
    let cfg = BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some("http://127.0.0.1:9/".into()),
        model: Some("m".into()),
        token_env: Some("MARH_WIRE_TEST_UNSET".into()),
        ..Default::default()
    };
    let kg = Arc::new(load_kg(MINI).unwrap());
    assert!(matches!(RemoteBackend::new(cfg, kg), Err(ClientError::Auth(_))));
}
