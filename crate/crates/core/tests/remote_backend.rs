//! Wire-level tests of the remote backend against a scripted local stub
//! server.

use conjsim::agents::{detect_activation, AgentBackend, DEFAULT_MARKER};
use conjsim::error::Error;
use conjsim::remote::{RemoteBackend, RemoteBackendConfig};
use conjsim::types::AgentSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread;

#[derive(Clone, Copy)]
enum StubScript {
    /// Reply with the request's own prompt.
    Echo,
    /// Reply with a fixed body containing the activation marker.
    Marker,
    /// Reply with HTTP 500.
    ServerError,
    /// Reply with a body larger than any reasonable cap.
    Oversized,
}

/// Serve `requests` connections with the scripted behavior, then stop.
fn spawn_stub(script: StubScript, requests: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub listener");
    let endpoint = format!("http://{}/respond", listener.local_addr().unwrap());
    thread::spawn(move || {
        for _ in 0..requests {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            let mut buffer = Vec::new();
            let mut chunk = [0u8; 4096];
            let body_start = loop {
                let n = stream.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break None;
                }
                buffer.extend_from_slice(&chunk[..n]);
                if let Some(pos) = buffer.windows(4).position(|w| w == b"\r\n\r\n") {
                    break Some(pos + 4);
                }
            };
            let Some(body_start) = body_start else {
                continue;
            };
            let head = String::from_utf8_lossy(&buffer[..body_start]).to_string();
            let content_length: usize = head
                .lines()
                .find_map(|line| {
                    let (name, value) = line.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse().ok())?
                })
                .unwrap_or(0);
            while buffer.len() < body_start + content_length {
                let n = stream.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break;
                }
                buffer.extend_from_slice(&chunk[..n]);
            }
            let request_body: serde_json::Value =
                serde_json::from_slice(&buffer[body_start..]).unwrap_or(serde_json::Value::Null);

            let (status, body) = match script {
                StubScript::Echo => {
                    let prompt = request_body["prompt"].as_str().unwrap_or("");
                    ("200 OK", serde_json::json!({ "text": prompt }).to_string())
                }
                StubScript::Marker => (
                    "200 OK",
                    serde_json::json!({
                        "text": format!("Account summary retrieved. {DEFAULT_MARKER}")
                    })
                    .to_string(),
                ),
                StubScript::ServerError => ("500 Internal Server Error", "{}".to_string()),
                StubScript::Oversized => (
                    "200 OK",
                    serde_json::json!({ "text": "x".repeat(200_000) }).to_string(),
                ),
            };
            let response = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    endpoint
}

fn agent() -> AgentSpec {
    AgentSpec {
        id: "account".to_string(),
        role: "Account and rewards operations".to_string(),
        compromised: true,
        template_slot: Some(conjsim::TemplateSlot::Suffix),
        has_tools: true,
    }
}

fn backend(endpoint: &str) -> RemoteBackend {
    RemoteBackend::new(RemoteBackendConfig::new(endpoint)).unwrap()
}

#[test]
fn echo_endpoint_returns_the_prompt() {
    let endpoint = spawn_stub(StubScript::Echo, 1);
    let backend = backend(&endpoint);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = backend
        .respond("header\nsegment text", &agent(), &mut rng)
        .unwrap();
    assert_eq!(out, "header\nsegment text");
}

#[test]
fn marker_endpoint_drives_activation_detection() {
    let endpoint = spawn_stub(StubScript::Marker, 1);
    let backend = backend(&endpoint);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = backend
        .respond("crafted prompt __KEY__", &agent(), &mut rng)
        .unwrap();
    assert!(detect_activation(&out, DEFAULT_MARKER).unwrap());
}

#[test]
fn unreachable_endpoint_fails_with_transport_error_after_retries() {
    // Bind-then-drop leaves a port nothing listens on.
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let mut config = RemoteBackendConfig::new(&format!("http://127.0.0.1:{port}/respond"));
    config.max_retries = 2;
    let backend = RemoteBackend::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    match backend.respond("prompt", &agent(), &mut rng) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn non_success_status_is_a_protocol_error() {
    let endpoint = spawn_stub(StubScript::ServerError, 1);
    let backend = backend(&endpoint);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    match backend.respond("prompt", &agent(), &mut rng) {
        Err(Error::Protocol { status, .. }) => assert_eq!(status, 500),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn oversized_response_is_rejected() {
    let endpoint = spawn_stub(StubScript::Oversized, 1);
    let backend = backend(&endpoint);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    match backend.respond("prompt", &agent(), &mut rng) {
        Err(Error::ResponseTooLarge { cap_bytes, .. }) => assert_eq!(cap_bytes, 64 * 1024),
        other => panic!("expected size-cap error, got {other:?}"),
    }
}
