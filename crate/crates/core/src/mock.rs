//! Deterministic stand-in for the chat-completions upstream. Replies are a
//! pure function of the prompt, so runs against it are reproducible.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::querygen::example_response;
use crate::synthrct::linearize_fields;

fn digest_u64(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

fn description_lines(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("- Description: "))
        .map(|s| s.trim().trim_end_matches('.').to_string())
        .collect()
}

fn first_words(s: &str, n: usize) -> String {
    s.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn query_reply(prompt: &str) -> String {
    let d = description_lines(prompt);
    let i = lower_first(d.first().map(String::as_str).unwrap_or("the intervention"));
    let o = lower_first(d.get(1).map(String::as_str).unwrap_or("the outcome"));
    let l0 = format!("What is the effect of {i} on {o}?");
    let l1 = format!("How does {} affect {}?", first_words(&i, 6), first_words(&o, 6));
    let l2 = format!("Does {} improve {}?", first_words(&i, 3), first_words(&o, 3));
    let l3 = format!("Does {} change {}?", first_words(&i, 1), first_words(&o, 1));
    example_response([&l0, &l1, &l2, &l3])
}

fn synth_reply(prompt: &str) -> String {
    let query = prompt
        .rfind("QUERY: \"")
        .map(|start| {
            let rest = &prompt[start + 8..];
            // the slot closes with a quote at the end of its line
            rest[..rest.find("\"\n").unwrap_or(rest.len())].replace("\\\"", "\"")
        })
        .unwrap_or_default();
    let words: Vec<&str> = query.trim_end_matches('?').split_whitespace().collect();
    let half = words.len() / 2;
    let intervention = (half > 0).then(|| words[..half].join(" "));
    let outcome = (words.len() > half).then(|| words[half..].join(" "));
    json!({"intervention": intervention, "outcome": outcome}).to_string()
}

/// Effect triple as a function of `text`: g in [-1, 1], strictly inside its
/// interval, four decimals.
pub fn mock_triple(text: &str) -> (f64, f64, f64) {
    let h = digest_u64(text);
    let g = (h % 2001) as f64 / 1000.0 - 1.0;
    let lo = 0.05 + ((h >> 16) % 300) as f64 / 1000.0;
    let hi = 0.05 + ((h >> 32) % 300) as f64 / 1000.0;
    let r = |x: f64| (x * 1e4).round() / 1e4;
    (r(g), r(g - lo), r(g + hi))
}

fn forecast_reply(prompt: &str) -> String {
    let query = prompt.rfind("QUERY:\n").map(|i| prompt[i + 7..].trim()).unwrap_or("");
    let (g, l, u) = mock_triple(query);
    format!("{{\"Hedges_g\": {g},\n \"Hedges_g_ci_lower\": {l},\n \"Hedges_g_ci_upper\": {u},\n}}")
}

/// The reply the mock gives to a prompt, keyed off each template's anchor
/// text.
pub fn mock_reply(prompt: &str) -> String {
    if prompt.contains("Generate exactly FOUR queries.") {
        query_reply(prompt)
    } else if prompt.contains("Prefer underspecification over extrapolating") {
        synth_reply(prompt)
    } else if prompt.contains("\"Hedges_g\"") {
        forecast_reply(prompt)
    } else {
        linearize_fields(Some("unrecognized prompt"), None)
    }
}

#[derive(Clone)]
struct MockState {
    calls: Arc<AtomicU64>,
}

async fn chat(State(st): State<MockState>, Json(body): Json<Value>) -> Json<Value> {
    st.calls.fetch_add(1, Ordering::SeqCst);
    let prompt = body.pointer("/messages/0/content").and_then(Value::as_str).unwrap_or("");
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": mock_reply(prompt)}, "finish_reason": "stop"}],
    }))
}

/// A running mock upstream on a loopback port; stops when dropped.
pub struct MockUpstream {
    addr: SocketAddr,
    calls: Arc<AtomicU64>,
    task: tokio::task::JoinHandle<()>,
}

impl MockUpstream {
    pub async fn start() -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let calls = Arc::new(AtomicU64::new(0));
        let app = Router::new()
            .route("/chat/completions", post(chat))
            .with_state(MockState { calls: calls.clone() });
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, calls, task })
    }

    /// Base URL to configure as the chat endpoint.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        self.task.abort();
    }
}
