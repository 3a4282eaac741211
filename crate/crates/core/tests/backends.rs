use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use icd_core::backends::{
    build_prompt, BackendError, CostLedger, DemoBlock, EmbedContent, EncoderEndpoint, GenerationEndpoint,
    GenerationRequest, QueryBlock, RetryPolicy, Role, Sampling, WireEncoder, WireGenerator,
};
use icd_core::ImageRef;

fn query(image: &str, options: Option<Vec<String>>) -> QueryBlock {
    QueryBlock {
        image: ImageRef::new(image),
        question: "What is the traffic sign?".into(),
        options,
    }
}

fn two_shot_request() -> GenerationRequest {
    let mut req = GenerationRequest::new(
        "Answer the question about the image with a short answer.",
        query("query.png", None),
        Sampling::default(),
    );
    req.demonstrations = vec![
        DemoBlock {
            image: ImageRef::new("demo-a.png"),
            question: "What is the traffic sign?".into(),
            options: None,
            answer: "stop".into(),
        },
        DemoBlock {
            image: ImageRef::new("demo-b.png"),
            question: "Which sign is shown?".into(),
            options: Some(vec!["A. yield".into(), "B. no entry".into()]),
            answer: "B. no entry".into(),
        },
    ];
    req
}

#[test]
fn prompt_matches_golden_file() {
    let golden = include_str!("golden/prompt_two_shot.txt");
    let prompt = build_prompt(&two_shot_request());
    assert_eq!(prompt.render(), golden);
    assert_eq!(prompt.image_count(), 3);
}

struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves canned `(status, body)` replies, one connection each, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split(' ').nth(1).unwrap_or("").to_owned();
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
                    "authorization" => auth = Some(v.trim().to_owned()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

const CHAT_OK: &str = r#"{
  "choices": [{
    "message": {"content": "stop"},
    "logprobs": {"content": [{"token": "stop", "logprob": -0.1,
      "top_logprobs": [{"token": "stop", "logprob": -0.1}, {"token": "yield", "logprob": -2.5}]}]}
  }],
  "usage": {"prompt_tokens": 321, "completion_tokens": 1}
}"#;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 2,
    }
}

#[test]
fn chat_client_retries_transient_errors_and_reads_logprobs() {
    let (url, seen) = serve(vec![(503, "{}".into()), (200, CHAT_OK.into())]);
    let ledger = Arc::new(CostLedger::default());
    let g = WireGenerator::new(&url, "student-7b", Some("k-test".into()), Duration::from_secs(5));
    let ep = GenerationEndpoint::new(Arc::new(g), Role::Student, ledger.clone()).with_retry(fast_retry());
    let mut req = two_shot_request();
    req.query.image = ImageRef::new("https://example.invalid/q.png");
    for d in &mut req.demonstrations {
        d.image = ImageRef::new("https://example.invalid/d.png");
    }
    let p = ep.generate(&req).unwrap();
    assert_eq!(p.text, "stop");
    let u = p.uncertainty.unwrap();
    assert!(u > 0.0 && u < 0.5, "{u}");
    assert_eq!(p.token_counts.prompt_tokens, 321);

    let snap = ledger.snapshot();
    assert_eq!(snap.student.retries, 1);
    assert_eq!(snap.student.prompt_tokens, 321);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let last = &seen[1];
    assert_eq!(last.path, "/chat/completions");
    assert_eq!(last.auth.as_deref(), Some("Bearer k-test"));
    assert_eq!(last.body["model"], "student-7b");
    assert_eq!(last.body["logprobs"], true);
    assert_eq!(last.body["top_logprobs"], 5);
    let content = last.body["messages"][1]["content"].as_array().unwrap();
    let images = content.iter().filter(|c| c["type"] == "image_url").count();
    assert_eq!(images, 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error": "bad"}"#.into()), (200, CHAT_OK.into())]);
    let g = WireGenerator::new(&url, "m", None, Duration::from_secs(5));
    let ep =
        GenerationEndpoint::new(Arc::new(g), Role::Teacher, Arc::new(CostLedger::default())).with_retry(fast_retry());
    let mut req = GenerationRequest::new("s", query("https://example.invalid/q.png", None), Sampling::default());
    req.sampling.want_token_probs = false;
    let err = ep.generate(&req).unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(seen.lock().unwrap()[0].auth.is_none());
}

#[test]
fn missing_logprobs_is_a_protocol_error_for_the_student() {
    let body = r#"{"choices": [{"message": {"content": "stop"}}]}"#;
    let (url, _) = serve(vec![(200, body.into())]);
    let g = WireGenerator::new(&url, "m", None, Duration::from_secs(5));
    let ep = GenerationEndpoint::new(Arc::new(g), Role::Student, Arc::new(CostLedger::default()));
    let req = GenerationRequest::new("s", query("https://example.invalid/q.png", None), Sampling::default());
    assert!(matches!(ep.generate(&req), Err(BackendError::Protocol(_))));
}

#[test]
fn embedding_client_reads_vectors_and_checks_dimension() {
    let ok = r#"{"data": [{"embedding": [0.5, -1.0, 2.0]}]}"#;
    let (url, seen) = serve(vec![(200, ok.into()), (200, ok.into())]);
    let ledger = Arc::new(CostLedger::default());
    let enc = EncoderEndpoint::new(
        Arc::new(WireEncoder::new(&url, "clip", None, 3, Duration::from_secs(5))),
        ledger.clone(),
    );
    let v = enc.embed(&EmbedContent::Text("a stop sign".into())).unwrap();
    assert_eq!(v, vec![0.5, -1.0, 2.0]);
    let wrong = EncoderEndpoint::new(
        Arc::new(WireEncoder::new(&url, "clip", None, 4, Duration::from_secs(5))),
        ledger,
    );
    assert!(wrong
        .embed(&EmbedContent::Image(ImageRef::new("https://example.invalid/i.png")))
        .is_err());
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/embeddings");
    assert_eq!(seen[0].body["input"], "a stop sign");
    assert_eq!(seen[1].body["input"]["image"], "https://example.invalid/i.png");
}

#[test]
fn unreachable_server_is_transient_and_bounded() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let ledger = Arc::new(CostLedger::default());
    let g = WireGenerator::new(&url, "m", None, Duration::from_secs(2));
    let ep = GenerationEndpoint::new(Arc::new(g), Role::Teacher, ledger.clone()).with_retry(fast_retry());
    let mut req = GenerationRequest::new("s", query("https://example.invalid/q.png", None), Sampling::default());
    req.sampling.want_token_probs = false;
    match ep.generate(&req) {
        Err(BackendError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert_eq!(ledger.snapshot().teacher.retries, 2);
}
