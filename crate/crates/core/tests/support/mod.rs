#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rationale_core::attribution_io::{attribution_prompt, AttributionMethod, AttributionRecord, TokenScope};
use rationale_core::corpus::{whitespace_token_spans, Example, Task};
use rationale_core::prompting::TemplateRegistry;

/// The fields of a chat request the mocks look at.
#[derive(Debug, Clone)]
pub struct MockRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u64,
    pub authorization: Option<String>,
}

pub struct MockServer {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

type Handler = dyn Fn(&MockRequest) -> (u16, String) + Send + Sync;

impl MockServer {
    /// Serves `POST /v1/chat/completions` over HTTP/1.1 with keep-alive, one
    /// thread per connection; `handler` returns status and body.
    pub fn start(handler: impl Fn(&MockRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock");
        let addr = listener.local_addr().expect("local addr");
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let acceptor = {
            let (hits, stop) = (Arc::clone(&hits), Arc::clone(&stop));
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let (hits, handler) = (Arc::clone(&hits), Arc::clone(&handler));
                    std::thread::spawn(move || serve(conn, &hits, &*handler));
                }
            })
        };
        MockServer {
            base_url: format!("http://{addr}/v1"),
            hits,
            addr,
            stop,
            acceptor: Some(acceptor),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the acceptor so it sees the flag and closes the listener
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

fn serve(conn: TcpStream, hits: &AtomicUsize, handler: &Handler) {
    let _ = conn.set_nodelay(true);
    let Ok(write_half) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn);
    let mut writer = write_half;
    loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let mut length = 0usize;
        let mut authorization = None;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((name, value)) = h.split_once(':') {
                let value = value.trim();
                if name.eq_ignore_ascii_case("content-length") {
                    length = value.parse().unwrap_or(0);
                } else if name.eq_ignore_ascii_case("authorization") {
                    authorization = Some(value.to_string());
                }
            }
        }
        let mut body = vec![0; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        hits.fetch_add(1, Ordering::SeqCst);
        let (status, reply) = match parse_request(&String::from_utf8_lossy(&body)) {
            Some((model, prompt, max_tokens)) => handler(&MockRequest {
                model,
                prompt,
                max_tokens,
                authorization,
            }),
            None => (400, "{\"error\":\"bad request\"}".into()),
        };
        let response = format!(
            "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{reply}",
            reply.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

fn parse_request(body: &str) -> Option<(String, String, u64)> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    let model = v["model"].as_str()?.to_string();
    let prompt = v["messages"][0]["content"].as_str()?.to_string();
    let max_tokens = v["max_tokens"].as_u64().unwrap_or(0);
    Some((model, prompt, max_tokens))
}

/// A successful chat-completions body carrying `text`.
pub fn chat_body(text: &str) -> String {
    serde_json::json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 2, "total_tokens": 12}
    })
    .to_string()
}

pub fn ok(text: &str) -> (u16, String) {
    (200, chat_body(text))
}

const FILLER: &[&str] = &[
    "people", "walk", "the", "a", "dog", "park", "near", "sunny", "day", "man", "woman", "ball",
    "street", "red", "blue", "two", "children", "play", "outside", "car", "bench", "river",
];

pub fn is_trigger(word: &str) -> bool {
    word.starts_with("zq")
}

fn bare(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Whether the prompt asks for a label rather than a rationale.
pub fn is_classification(prompt: &str) -> bool {
    let t = prompt.trim_end();
    t.ends_with("Label:") || t.ends_with("Occupation:")
}

/// Trigger words in the prompt, in order of appearance.
pub fn triggers_in(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(bare)
        .filter(|w| is_trigger(w))
        .map(str::to_string)
        .collect()
}

const TRIGGER_CODES: &[(&str, &str)] = &[
    ("ent", "entailment"),
    ("con", "contradiction"),
    ("sur", "surgeon"),
    ("nur", "nurse"),
    ("den", "dentist"),
    ("phy", "physician"),
];

/// Label decided only by the trigger pair: both halves of a pair present
/// gives the pair's class, anything else gives `neutral` (or `psychologist`
/// for bios prompts).
pub fn trigger_label(prompt: &str) -> &'static str {
    let found = triggers_in(prompt);
    for w in &found {
        if let Some(stem) = w.strip_suffix('x') {
            if found.iter().any(|o| o.strip_suffix('y') == Some(stem)) {
                if let Some((_, label)) = TRIGGER_CODES.iter().find(|(c, _)| stem[2..].starts_with(c)) {
                    return label;
                }
            }
        }
    }
    if prompt.trim_end().ends_with("Occupation:") {
        "psychologist"
    } else {
        "neutral"
    }
}

/// Classifies by triggers; answers rationale requests with the triggers.
pub fn trigger_model(req: &MockRequest) -> (u16, String) {
    if is_classification(&req.prompt) {
        ok(trigger_label(&req.prompt))
    } else {
        ok(&triggers_in(&req.prompt).join(" | "))
    }
}

/// Like `trigger_model`, but rationales list the triggers followed by every
/// filler word of the prompt, far more than any budget.
pub fn verbose_trigger_model(req: &MockRequest) -> (u16, String) {
    if is_classification(&req.prompt) {
        return ok(trigger_label(&req.prompt));
    }
    let mut words = triggers_in(&req.prompt);
    words.extend(
        req.prompt
            .split_whitespace()
            .map(bare)
            .filter(|w| FILLER.contains(w))
            .map(str::to_string),
    );
    ok(&words.join(", "))
}

/// NLI examples whose gold label is fixed by two planted trigger words, one
/// in each segment. The human rationale is exactly the two triggers.
pub fn trigger_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (label, code) = if i % 2 == 0 {
                ("entailment", "ent")
            } else {
                ("contradiction", "con")
            };
            let mut premise: Vec<String> = (0..rng.random_range(6..11))
                .map(|_| FILLER[rng.random_range(0..FILLER.len())].to_string())
                .collect();
            let mut hypothesis: Vec<String> = (0..rng.random_range(3..7))
                .map(|_| FILLER[rng.random_range(0..FILLER.len())].to_string())
                .collect();
            let pa = rng.random_range(0..=premise.len());
            premise.insert(pa, format!("zq{code}{i}x"));
            let hb = rng.random_range(0..=hypothesis.len());
            hypothesis.insert(hb, format!("zq{code}{i}y"));
            let plen = premise.len();
            Example::new(
                format!("syn{i:04}"),
                Task::Nli,
                [
                    ("premise".to_string(), format!("{}.", premise.join(" "))),
                    ("hypothesis".to_string(), format!("{}.", hypothesis.join(" "))),
                ],
                Task::Nli.default_labels(),
                label,
                [pa, plen + hb],
            )
            .expect("valid synthetic example")
        })
        .collect()
}

/// Interchange record for the attribution prompt of `ex`, one token per
/// whitespace token, scored by `score(token_text, is_input)`.
pub fn synthetic_record(
    registry: &TemplateRegistry,
    ex: &Example,
    method: AttributionMethod,
    label: &str,
    score: impl Fn(&str, bool) -> f64,
) -> AttributionRecord {
    let prompt = attribution_prompt(registry, ex, label).expect("render attribution prompt");
    let input = prompt.input_word_spans(ex).expect("input spans");
    let char_of = |b: usize| prompt.text[..b].chars().count();
    let mut rec = AttributionRecord {
        example_id: ex.id().to_string(),
        method,
        tokens: vec![],
        char_spans: vec![],
        scores: vec![],
        predicted_label: label.to_string(),
        scope_map: vec![],
    };
    for span in whitespace_token_spans(&prompt.text) {
        let is_input = input.iter().any(|w| w.start < span.end && span.start < w.end);
        let text = &prompt.text[span.clone()];
        rec.tokens.push(text.to_string());
        rec.char_spans.push([char_of(span.start), char_of(span.end)]);
        rec.scores.push(score(bare(text), is_input));
        rec.scope_map.push(if is_input {
            TokenScope::Input
        } else {
            TokenScope::Instruction
        });
    }
    rec
}

/// Bios examples with both trigger words planted in the bio; gold cycles
/// over the four occupations that have trigger codes.
pub fn trigger_bios_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (code, label) = TRIGGER_CODES[2 + i % 4];
            let mut bio: Vec<String> = (0..rng.random_range(10..20))
                .map(|_| FILLER[rng.random_range(0..FILLER.len())].to_string())
                .collect();
            let a = rng.random_range(0..=bio.len());
            bio.insert(a, format!("zq{code}{i}x"));
            let b = rng.random_range(a + 1..=bio.len());
            bio.insert(b, format!("zq{code}{i}y"));
            Example::new(
                format!("bio{i:04}"),
                Task::Bios,
                [("bio".to_string(), format!("{}.", bio.join(" ")))],
                Task::Bios.default_labels(),
                label,
                [a, b],
            )
            .expect("valid synthetic example")
        })
        .collect()
}
