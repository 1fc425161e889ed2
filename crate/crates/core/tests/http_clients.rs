//! Embedding and judge clients against a throwaway local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use step_pruner::embedding::{EmbedError, Embedder, HttpEmbedder};
use step_pruner::profiler::{profile, HttpJudge, ProfileConfig, ProfileError, ReasoningCategory};
use step_pruner::segmentation::{Response, SegmentationConfig};

/// Serves `replies` (status, body) in order, one per connection, and sends
/// each request body back over the channel.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            tx.send((String::from_utf8(req).unwrap(), auth)).unwrap();
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn embedder(url: String) -> HttpEmbedder {
    HttpEmbedder {
        endpoint: url,
        model: "mini".into(),
        api_key: Some("k1".into()),
        timeout: Duration::from_secs(10),
    }
}

#[test]
fn embedder_reorders_by_index_and_sends_model_and_key() {
    let body = r#"{"data":[{"embedding":[0.0,1.0],"index":1},{"embedding":[1.0,0.0],"index":0}]}"#;
    let (url, rx) = serve(vec![(200, body.into())]);
    let out = embedder(url).embed(&["a".into(), "b".into()]).unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (req, auth) = rx.recv().unwrap();
    let req: serde_json::Value = serde_json::from_str(&req).unwrap();
    assert_eq!(req["model"], "mini");
    assert_eq!(req["input"], serde_json::json!(["a", "b"]));
    assert_eq!(auth, "authorization: Bearer k1");
}

#[test]
fn embedder_rejects_bad_replies() {
    let (url, _rx) = serve(vec![
        (200, r#"{"data":[{"embedding":[1.0]}]}"#.into()),
        (500, "{}".into()),
    ]);
    let e = embedder(url);
    let texts = vec!["a".to_string(), "b".to_string()];
    assert!(matches!(e.embed(&texts), Err(EmbedError::Malformed(_))));
    assert!(matches!(e.embed(&texts), Err(EmbedError::Transport(_))));
}

fn judge(url: String, attempts: usize) -> HttpJudge {
    HttpJudge {
        endpoint: url,
        model: "judge-model".into(),
        api_key: None,
        timeout: Duration::from_secs(10),
        attempts,
    }
}

fn chat(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

#[test]
fn judge_labels_a_response_over_http() {
    let (url, rx) = serve(vec![
        (503, "{}".into()),
        (
            200,
            chat("<labels>\n1: pivotal\n2: verification\n</labels>"),
        ),
    ]);
    let r = Response::from_raw(
        "p",
        "<think>Factor the quadratic. Check by expanding.</think> \\boxed{2}",
        &SegmentationConfig::default(),
        None,
    )
    .unwrap();
    let report = profile(&[r], &judge(url, 2), &ProfileConfig::default()).unwrap();
    assert_eq!(report.fraction(ReasoningCategory::PivotalReasoning), 0.5);
    assert_eq!(
        report.fraction(ReasoningCategory::VerificationSelfCorrection),
        0.5
    );
    let (_, _) = rx.recv().unwrap();
    let (req, auth) = rx.recv().unwrap();
    assert!(auth.is_empty());
    let req: serde_json::Value = serde_json::from_str(&req).unwrap();
    assert_eq!(req["model"], "judge-model");
    assert!(req["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("[2] Check by expanding."));
}

#[test]
fn judge_gives_up_after_configured_attempts() {
    let (url, _rx) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
    let r = Response::from_raw(
        "p",
        "<think>One.</think>",
        &SegmentationConfig::default(),
        None,
    )
    .unwrap();
    let err = profile(&[r], &judge(url, 2), &ProfileConfig::default()).unwrap_err();
    assert!(matches!(err, ProfileError::JudgeUnavailable(_)));
}
