use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::render_prompt;
use super::{PlannerBackend, PlannerError, PlannerQuery, PlannerResponse};

/// Connection settings for an HTTP planner service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL; `/v1/plan` is appended unless already present.
    pub url: String,
    pub timeout_ms: u64,
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            timeout_ms: 10_000,
            max_attempts: 3,
            backoff_ms: 50,
            max_in_flight: 4,
        }
    }
}

impl RemoteConfig {
    pub fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/v1/plan") {
            base.to_string()
        } else {
            format!("{base}/v1/plan")
        }
    }
}

/// Request body of `POST /v1/plan`. `instruction` carries the fully rendered prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub instruction: String,
    pub current_time: String,
    pub day_offset: u32,
    pub poi_distribution: Vec<f64>,
    pub role: Option<String>,
}

impl WireRequest {
    pub fn from_query(q: &PlannerQuery) -> Self {
        Self {
            instruction: render_prompt(q),
            current_time: q.slotting.clock_label(q.current_slot),
            day_offset: q.day_offset,
            poi_distribution: q.current_semantics.weights().to_vec(),
            role: q.role.as_ref().map(|r| r.name.clone()),
        }
    }
}

pub type WireResponse = PlannerResponse;

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    max: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Backend that forwards queries to an HTTP service.
pub struct RemotePlanner {
    config: RemoteConfig,
    slots_per_day: usize,
    agent: ureq::Agent,
    in_flight: InFlight,
    fallback: Option<Arc<dyn PlannerBackend>>,
}

impl std::fmt::Debug for RemotePlanner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePlanner")
            .field("config", &self.config)
            .field("slots_per_day", &self.slots_per_day)
            .field("fallback", &self.fallback.as_ref().map(|b| b.id()))
            .finish()
    }
}

fn retryable(e: &PlannerError) -> bool {
    match e {
        PlannerError::Timeout(_) | PlannerError::Transport(_) => true,
        PlannerError::Status(code) => *code >= 500 || *code == 429,
        _ => false,
    }
}

impl RemotePlanner {
    pub fn new(config: RemoteConfig, slots_per_day: usize) -> Result<Self, PlannerError> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(PlannerError::Config(
                "max_attempts and max_in_flight must be at least 1".into(),
            ));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            in_flight: InFlight {
                max: config.max_in_flight,
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            slots_per_day,
            agent,
            fallback: None,
        })
    }

    /// Answers from `backend` whenever the service cannot.
    pub fn with_fallback(mut self, backend: Arc<dyn PlannerBackend>) -> Self {
        self.fallback = Some(backend);
        self
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, body: &WireRequest) -> Result<PlannerResponse, PlannerError> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .agent
            .post(&self.config.endpoint())
            .send_json(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => PlannerError::Timeout(self.config.timeout_ms),
                other => PlannerError::Transport(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(PlannerError::Status(status));
        }
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => PlannerError::Timeout(self.config.timeout_ms),
                other => PlannerError::Transport(other.to_string()),
            })?;
        let parsed: PlannerResponse =
            serde_json::from_str(&text).map_err(|e| PlannerError::Malformed(e.to_string()))?;
        parsed.validate(self.slots_per_day)?;
        Ok(parsed)
    }

    /// Queries the service with bounded retries and no fallback.
    pub fn infer_remote(&self, query: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        let body = WireRequest::from_query(query);
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err(e) if retryable(&e) && attempt < self.config.max_attempts => {
                    log::debug!("planner request attempt {attempt} failed: {e}");
                    thread::sleep(Duration::from_millis(self.config.backoff_ms * attempt as u64));
                    attempt += 1;
                }
                Err(e) if retryable(&e) => {
                    return Err(PlannerError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl PlannerBackend for RemotePlanner {
    fn id(&self) -> String {
        match &self.fallback {
            Some(f) => format!("remote({})+fallback:{}", self.config.endpoint(), f.id()),
            None => format!("remote({})", self.config.endpoint()),
        }
    }

    fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }

    fn infer(&self, query: &PlannerQuery) -> Result<PlannerResponse, PlannerError> {
        match (self.infer_remote(query), &self.fallback) {
            (Ok(r), _) => Ok(r),
            (Err(e), Some(fallback)) => {
                log::warn!("remote planner failed ({e}); using {}", fallback.id());
                fallback.infer(query)
            }
            (Err(e), None) => Err(e),
        }
    }
}
