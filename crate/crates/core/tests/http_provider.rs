use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use answer_forge::llm::provider::{AnswerProvider, HttpProvider, RawCandidate};
use answer_forge::Error;

/// Serves a single request with a canned reply; hands back the request body.
fn serve_once(status: &'static str, body: &'static str, delay: Duration) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/complete", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut length = 0;
        let mut content_type = String::new();
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if let Some(v) = lower.strip_prefix("content-type:") {
                content_type = v.trim().to_string();
            }
        }
        let mut buf = vec![0; length];
        reader.read_exact(&mut buf).unwrap();
        let _ = tx.send(format!("{content_type}\n{}", String::from_utf8(buf).unwrap()));
        thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
    });
    (url, rx)
}

fn provider(url: String, timeout: Duration) -> HttpProvider {
    HttpProvider::new(url, "tiny-model".into(), timeout).unwrap()
}

#[test]
fn round_trip_follows_wire_contract() {
    let (url, rx) = serve_once(
        "200 OK",
        r#"{"candidates": [{"text": "Cat", "confidence": 0.7}, {"text": "dog"}]}"#,
        Duration::ZERO,
    );
    let out = provider(url, Duration::from_secs(5)).complete(3, "Question: what?", 4).unwrap();
    assert_eq!(
        out,
        vec![
            RawCandidate::new("Cat", 0.7),
            RawCandidate {
                text: "dog".into(),
                confidence: None
            }
        ]
    );
    let seen = rx.recv().unwrap();
    let (content_type, body) = seen.split_once('\n').unwrap();
    assert_eq!(content_type, "application/json");
    let body: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(
        body,
        serde_json::json!({"model": "tiny-model", "prompt": "Question: what?", "max_candidates": 4})
    );
}

#[test]
fn non_2xx_is_provider_error_with_prompt_index() {
    let (url, _rx) = serve_once("503 Service Unavailable", r#"{"error": "busy"}"#, Duration::ZERO);
    let err = provider(url, Duration::from_secs(5)).complete(7, "p", 2).unwrap_err();
    match err {
        Error::Provider { prompt_index, message } => {
            assert_eq!(prompt_index, 7);
            assert!(message.contains("503"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn garbage_body_is_parse_error() {
    let (url, _rx) = serve_once("200 OK", "not json at all", Duration::ZERO);
    let err = provider(url, Duration::from_secs(5)).complete(0, "p", 2).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err:?}");
}

#[test]
fn slow_server_times_out() {
    let (url, _rx) = serve_once("200 OK", r#"{"candidates": []}"#, Duration::from_secs(3));
    let err = provider(url, Duration::from_millis(300)).complete(2, "p", 2).unwrap_err();
    assert!(matches!(err, Error::Provider { prompt_index: 2, .. }), "{err:?}");
}
