use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use kipg::gateway::{
    Gateway, GatewayError, HttpBackend, PromptSet, SamplingConfig, SamplingStrategy,
};
use kipg::store::{Domain, KnowledgeDocument};
use serde_json::{json, Value};

/// Serves one request with `status` and `body`, handing the parsed request
/// body back through the channel.
fn one_shot_server(status: &'static str, body: String) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        assert!(request_line.starts_with("POST /v1/chat/completions"), "{request_line}");
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
        }
        let mut buf = vec![0; length];
        reader.read_exact(&mut buf).unwrap();
        tx.send(serde_json::from_slice(&buf).unwrap()).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
    });
    (url, rx)
}

fn document() -> KnowledgeDocument {
    KnowledgeDocument {
        id: "art-57".into(),
        domain: Domain::Legal,
        case_type: "Penalties".into(),
        subtype: "Penalties".into(),
        title: "Article 57".into(),
        body: "A fine of 1 to 5 percent of the total investment.".into(),
    }
}

fn gateway(url: &str, beam: bool) -> Gateway {
    let backend = HttpBackend::new(url, "generator-7b", beam, Duration::from_secs(10));
    Gateway::with_backend(PromptSet::default(), Arc::new(backend))
}

#[test]
fn temperature_fallback_when_beam_search_is_unsupported() {
    let reply = json!({
        "choices": [
            {"message": {"content": "print(1)"}, "finish_reason": "stop"},
            {"message": {"content": "print(2)"}, "finish_reason": "length"},
            {"message": {"content": "print(1)"}, "finish_reason": "stop"}
        ],
        "usage": {"prompt_tokens": 120, "completion_tokens": 9}
    });
    let (url, rx) = one_shot_server("200 OK", reply.to_string());
    let g = gateway(&url, false);
    let sampling = SamplingConfig {
        n_samples: 3,
        ..SamplingConfig::default()
    };
    let out = g.generate_programs(&document(), &sampling).unwrap();

    let sent = rx.recv().unwrap();
    assert_eq!(sent["model"], "generator-7b");
    assert_eq!(sent["n"], 3);
    assert_eq!(sent["temperature"], 0.8);
    assert!(sent.get("use_beam_search").is_none());
    assert!(sent["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("Document ID: art-57"));

    assert!(out.fallback_sampling);
    // Duplicate samples collapse; a length stop marks truncation.
    assert_eq!(out.candidates.len(), 2);
    assert!(out.candidates[1].truncated);
    let log = g.exchanges();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].prompt_tokens, Some(120));
}

#[test]
fn beam_parameters_when_supported() {
    let reply = json!({"choices": [{"message": {"content": "a"}}, {"message": {"content": "b"}}]});
    let (url, rx) = one_shot_server("200 OK", reply.to_string());
    let g = gateway(&url, true);
    let sampling = SamplingConfig {
        n_samples: 2,
        strategy: SamplingStrategy::DiverseBeam,
        diversity_penalty: 0.5,
        ..SamplingConfig::default()
    };
    let out = g.generate_programs(&document(), &sampling).unwrap();
    let sent = rx.recv().unwrap();
    assert_eq!(sent["use_beam_search"], true);
    assert_eq!(sent["num_beam_groups"], 2);
    assert_eq!(sent["diversity_penalty"], 0.5);
    assert!(!out.fallback_sampling);
}

#[test]
fn server_errors_and_refused_connections_are_backend_failures() {
    let (url, _rx) = one_shot_server("503 Service Unavailable", "{\"error\":\"busy\"}".into());
    let err = gateway(&url, false)
        .generate_programs(&document(), &SamplingConfig::default())
        .unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable { .. }), "{err}");
    assert!(err.to_string().contains("503"));

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = gateway(&format!("http://127.0.0.1:{port}"), false)
        .recall_document("any query")
        .unwrap_err();
    assert!(matches!(err, GatewayError::BackendUnavailable { .. }), "{err}");
}
