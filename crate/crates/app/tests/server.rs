use std::sync::Arc;

use parley::server::{router, serve, AskResponse, Health};
use parley_core::corpus::{copy_pairs, Vocabulary};
use parley_core::inference::Engine;
use parley_core::seq2seq::{Hyper, ModelParams};
use reqwest::StatusCode;
use serde_json::Value;
use tokio::net::TcpListener;

fn engine() -> Engine {
    let vocab = Vocabulary::build(&copy_pairs(40, 8, 1, 4, 2), 1, 100).unwrap();
    let params = ModelParams::<f32>::init(Hyper::new(vocab.len(), 6, 5, 2), 8, None).unwrap();
    Engine::new(params, vocab).unwrap()
}

async fn start(engine: Arc<Engine>, origin: Option<&str>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(engine, origin).unwrap();
    tokio::spawn(serve(listener, app));
    format!("http://{addr}")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ask_and_health() {
    let engine = Arc::new(engine());
    let base = start(engine.clone(), None).await;
    let client = reqwest::Client::new();

    let health: Health = client.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!((health.vocab_size, health.hidden, health.layers), (engine.vocab().len(), 5, 2));

    let resp = client
        .post(format!("{base}/ask"))
        .json(&serde_json::json!({ "question": "w01 w02" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body: AskResponse = resp.json().await.unwrap();
    let direct = engine.answer("w01 w02").unwrap();
    assert_eq!(body.answer, direct.answer_text);
    assert_eq!(body.tokens, direct.answer_tokens);
    assert_eq!(body.terminated, direct.terminated);
    assert!(body.latency_ms >= 0.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_agree_and_leave_model_untouched() {
    let engine = Arc::new(engine());
    let before = engine.params().fingerprint();
    let base = start(engine.clone(), None).await;
    let client = reqwest::Client::new();
    let requests = (0..10).map(|_| {
        let client = client.clone();
        let url = format!("{base}/ask");
        tokio::spawn(async move {
            let r = client.post(url).body(r#"{"question":"w03 w00 w05"}"#).send().await.unwrap();
            assert_eq!(r.status(), StatusCode::OK);
            r.bytes().await.unwrap()
        })
    });
    let mut answers = Vec::new();
    for r in requests {
        let body: Value = serde_json::from_slice(&r.await.unwrap()).unwrap();
        answers.push(body["answer"].as_str().unwrap().to_string());
    }
    assert!(answers.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(engine.params().fingerprint(), before);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_are_json() {
    let base = start(Arc::new(engine()), None).await;
    let client = reqwest::Client::new();
    let cases = [
        ("POST", "/ask", "{", StatusCode::BAD_REQUEST),
        ("POST", "/ask", r#"{"q":"hi"}"#, StatusCode::BAD_REQUEST),
        ("POST", "/ask", r#"{"question":42}"#, StatusCode::BAD_REQUEST),
        ("POST", "/ask", r#"{"question":""}"#, StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/ask", r#"{"question":"   "}"#, StatusCode::UNPROCESSABLE_ENTITY),
        ("GET", "/ask", "", StatusCode::METHOD_NOT_ALLOWED),
        ("GET", "/nowhere", "", StatusCode::NOT_FOUND),
    ];
    for (method, path, body, status) in cases {
        let req = match method {
            "POST" => client.post(format!("{base}{path}")).body(body),
            _ => client.get(format!("{base}{path}")),
        };
        let resp = req.send().await.unwrap();
        assert_eq!(resp.status(), status, "{method} {path} {body}");
        let json: Value = resp.json().await.unwrap();
        assert!(json["error"].is_string(), "{method} {path}: {json}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_header_when_allowed() {
    let base = start(Arc::new(engine()), Some("http://localhost:5173")).await;
    let client = reqwest::Client::new();
    let resp = client
        .get(format!("{base}/health"))
        .header("Origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");

    let preflight = client
        .request(reqwest::Method::OPTIONS, format!("{base}/ask"))
        .header("Origin", "http://localhost:5173")
        .header("Access-Control-Request-Method", "POST")
        .header("Access-Control-Request-Headers", "content-type")
        .send()
        .await
        .unwrap();
    assert!(preflight.status().is_success());
    assert!(preflight.headers().contains_key("access-control-allow-methods"));

    let plain = start(Arc::new(engine()), None).await;
    let resp = client
        .get(format!("{plain}/health"))
        .header("Origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert!(!resp.headers().contains_key("access-control-allow-origin"));
}

#[test]
fn bad_origin_is_rejected() {
    assert!(router(Arc::new(engine()), Some("bad\norigin")).is_err());
}
