//! In-process HTTP server speaking the planner wire protocol, for tests and demos.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::remote::WireRequest;
use super::PlannerResponse;
use crate::geo::NUM_POI_CATEGORIES;

/// How the server answers one request.
#[derive(Clone, Debug, PartialEq)]
pub enum MockReply {
    /// HTTP 200 with this response serialized as JSON.
    Fixed(PlannerResponse),
    /// HTTP 200 with a raw body (may be invalid JSON).
    Raw(String),
    /// An error status with an empty body.
    Status(u16),
    /// Sleep before delegating.
    Delay(Duration, Box<MockReply>),
    /// Deterministic answer derived from the request: the time logits peak `advance`
    /// slots after the current time, the POI logits are the log of the request's
    /// distribution.
    Echo { slots_per_day: usize, advance: usize },
}

/// Scripted mock: replies are consumed in order, then `fallback` answers forever.
pub struct MockPlannerServer {
    url: String,
    requests: Arc<Mutex<Vec<WireRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

fn echo(req: &WireRequest, slots_per_day: usize, advance: usize) -> PlannerResponse {
    let minutes: Vec<usize> = req
        .current_time
        .split(':')
        .filter_map(|p| p.parse().ok())
        .collect();
    let slot_minutes = 1440 / slots_per_day;
    let current = minutes.first().copied().unwrap_or(0) * 60 / slot_minutes
        + minutes.get(1).copied().unwrap_or(0) / slot_minutes;
    let target = (current + advance) % slots_per_day;
    let time_logits = (0..slots_per_day)
        .map(|s| if s == target { 10.0 } else { 0.0 })
        .collect();
    let poi_logits = if req.poi_distribution.len() == NUM_POI_CATEGORIES {
        req.poi_distribution.iter().map(|p| (p + 1e-9).ln()).collect()
    } else {
        vec![0.0; NUM_POI_CATEGORIES]
    };
    PlannerResponse {
        time_logits,
        poi_logits,
    }
}

fn answer(reply: &MockReply, req: Option<&WireRequest>) -> (u16, String) {
    match reply {
        MockReply::Fixed(r) => (200, serde_json::to_string(r).expect("response serializes")),
        MockReply::Raw(body) => (200, body.clone()),
        MockReply::Status(code) => (*code, String::new()),
        MockReply::Delay(d, inner) => {
            thread::sleep(*d);
            answer(inner, req)
        }
        MockReply::Echo {
            slots_per_day,
            advance,
        } => match req {
            Some(req) => {
                let r = echo(req, *slots_per_day, *advance);
                (200, serde_json::to_string(&r).expect("response serializes"))
            }
            None => (400, "unparseable request".into()),
        },
    }
}

impl MockPlannerServer {
    pub fn start(script: Vec<MockReply>, fallback: MockReply) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (log, flag) = (Arc::clone(&requests), Arc::clone(&stop));
        let handle = thread::spawn(move || {
            let mut script = script.into_iter();
            while !flag.load(Ordering::Relaxed) {
                let mut request = match server.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(r)) => r,
                    Ok(None) => continue,
                    Err(_) => break,
                };
                let mut body = String::new();
                let _ = request.as_reader().read_to_string(&mut body);
                let parsed: Option<WireRequest> = serde_json::from_str(&body).ok();
                if let Some(p) = &parsed {
                    log.lock().unwrap_or_else(|e| e.into_inner()).push(p.clone());
                }
                let reply = script.next().unwrap_or_else(|| fallback.clone());
                let (code, text) = if request.url() == "/v1/plan" {
                    answer(&reply, parsed.as_ref())
                } else {
                    (404, String::new())
                };
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                    .expect("static header is valid");
                let _ = request.respond(
                    tiny_http::Response::from_string(text)
                        .with_status_code(code)
                        .with_header(header),
                );
            }
        });
        Ok(Self {
            url: format!("http://127.0.0.1:{port}"),
            requests,
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Every well-formed request received so far.
    pub fn requests(&self) -> Vec<WireRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for MockPlannerServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
