use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use reasonroute_core::ranking::{Candidate, OutcomeFlag, RankingInstance, Task};
use reasonroute_gateway::{Gateway, GatewayConfig, GatewayError, HttpBackend, RequestMode};
use serde_json::{json, Value};

struct Mock {
    base_url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, recording request bodies and Authorization headers.
fn serve(replies: Vec<(u16, Value)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (b, a) = (bodies.clone(), auth.clone());
    thread::spawn(move || {
        for (status, reply) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut key = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    key = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            b.lock().unwrap().push(serde_json::from_slice(&body).unwrap());
            a.lock().unwrap().push(key);
            let text = reply.to_string();
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    Mock { base_url, bodies, auth }
}

fn instance() -> RankingInstance {
    RankingInstance {
        id: "q1".into(),
        task: Task::Ir,
        context: Some("rust borrow checker".into()),
        history: None,
        candidates: ["a", "b", "c"]
            .iter()
            .map(|id| Candidate {
                item_id: id.to_string(),
                text: format!("passage {id}"),
            })
            .collect(),
        qrels: [("b".to_string(), 1)].into_iter().collect(),
        k: 10,
    }
}

fn completion(content: &str, usage: Option<u64>) -> Value {
    let mut v = json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
    if let Some(u) = usage {
        v["usage"] = json!({"prompt_tokens": 50, "completion_tokens": u});
    }
    v
}

fn config(url: &str) -> GatewayConfig {
    GatewayConfig {
        base_url: url.to_string(),
        retry_backoff_ms: 0,
        max_retries: 2,
        timeout_secs: 10,
        ..GatewayConfig::default()
    }
}

#[test]
fn think_request_is_prefilled_and_deterministic() {
    let mock = serve(vec![
        (200, completion("weighing options</thought><output>Ranking result: [b, a, c]</output>", Some(211))),
        (200, completion("Ranking result: [c, b, a]</output>", Some(9))),
    ]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    let think = gw.rank(&instance(), RequestMode::Think).unwrap();
    assert_eq!(think.ranking.order, vec!["b", "a", "c"]);
    assert_eq!(think.tokens, 211);
    assert!(think.raw_text.as_deref().unwrap().starts_with("<thought>"));
    let non = gw.rank(&instance(), RequestMode::NonThink).unwrap();
    assert_eq!(non.ranking.order, vec!["c", "b", "a"]);

    let bodies = mock.bodies.lock().unwrap();
    let (t, n) = (&bodies[0], &bodies[1]);
    assert_eq!(t["messages"][1], json!({"role": "assistant", "content": "<thought>"}));
    assert_eq!(n["messages"][1], json!({"role": "assistant", "content": "<output>"}));
    assert_eq!(t["temperature"], json!(0.0));
    // the two requests differ only in the prefill
    assert_eq!(t["messages"][0], n["messages"][0]);
    let (mut t2, mut n2) = (t.clone(), n.clone());
    t2["messages"][1] = Value::Null;
    n2["messages"][1] = Value::Null;
    assert_eq!(t2, n2);
    assert_eq!(mock.auth.lock().unwrap()[0], None);
}

#[test]
fn missing_usage_falls_back_to_estimate() {
    let mock = serve(vec![(200, completion("Ranking result: [a, zz, b]</output>", None))]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    let out = gw.rank(&instance(), RequestMode::NonThink).unwrap();
    assert!(out.has_flag(OutcomeFlag::TokenEstimate));
    assert!(out.has_flag(OutcomeFlag::IdsDropped));
    assert_eq!(out.tokens, 5);
    assert_eq!(out.ranking.order, vec!["a", "b"]);
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let mock = serve(vec![
        (503, json!({"error": "busy"})),
        (429, json!({"error": "slow down"})),
        (200, completion("Ranking result: [a]</output>", Some(3))),
    ]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    let out = gw.rank(&instance(), RequestMode::NonThink).unwrap();
    assert_eq!(out.ranking.order, vec!["a"]);
    assert_eq!(mock.bodies.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let mock = serve(vec![(500, json!({})), (500, json!({})), (500, json!({}))]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    match gw.rank(&instance(), RequestMode::Think) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let mock = serve(vec![(400, json!({"error": "bad"}))]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    match gw.rank(&instance(), RequestMode::Think) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn api_key_comes_from_named_variable() {
    let var = "REASONROUTE_TEST_KEY_7731";
    std::env::set_var(var, "sk-test");
    let mock = serve(vec![(200, completion("Ranking result: [a]</output>", Some(1)))]);
    let cfg = GatewayConfig {
        api_key_env: Some(var.into()),
        ..config(&mock.base_url)
    };
    let gw = Gateway::new(HttpBackend::new(&cfg).unwrap(), cfg).unwrap();
    gw.rank(&instance(), RequestMode::NonThink).unwrap();
    assert_eq!(mock.auth.lock().unwrap()[0].as_deref(), Some("Bearer sk-test"));

    let missing = GatewayConfig {
        api_key_env: Some("REASONROUTE_TEST_KEY_UNSET_1234".into()),
        ..GatewayConfig::default()
    };
    assert!(matches!(HttpBackend::new(&missing), Err(GatewayError::MissingApiKey(_))));
}

#[test]
fn probe_reads_top_logprobs() {
    let reply = json!({
        "choices": [{
            "message": {"role": "assistant", "content": " Yes"},
            "logprobs": {"content": [{"token": " Yes", "logprob": -0.127,
                "top_logprobs": [{"token": " Yes", "logprob": -0.126928}, {"token": " No", "logprob": -2.126928}]}]}
        }],
        "usage": {"completion_tokens": 1}
    });
    let mock = serve(vec![(200, reply)]);
    let gw = Gateway::new(HttpBackend::new(&config(&mock.base_url)).unwrap(), config(&mock.base_url)).unwrap();
    let q = reasonroute_core::probe::default_checklist()[0].clone();
    let r = gw.probe_checklist(&instance(), std::slice::from_ref(&q)).unwrap();
    assert!((r.p_yes[&q.qid] - 0.8808).abs() < 1e-4);
    let body = &mock.bodies.lock().unwrap()[0];
    assert_eq!(body["max_tokens"], json!(1));
    assert_eq!(body["logprobs"], json!(true));
    assert!(body["messages"][0]["content"].as_str().unwrap().ends_with("Answer:"));
}
