use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::TeacherError;

/// Request body for `POST /v1/annotate`. The scene travels as the canonical
/// fact-sentence list; the gold answer is always present (answer-guided
/// generation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub kind: String,
    pub scene: Vec<String>,
    pub question: String,
    pub gold_answer: String,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseBody {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherResponse {
    pub text: String,
    pub second_text: Option<String>,
    pub latency: Duration,
    pub status: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Total attempts for transient failures (5xx and transport errors).
    pub attempts: usize,
    pub backoff_base: Duration,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        RemoteOptions {
            timeout: Duration::from_secs(10),
            attempts: 3,
            backoff_base: Duration::from_millis(200),
        }
    }
}

/// One annotation call: POST the JSON body, with exponential backoff on
/// transient failures. 4xx statuses are permanent and never retried.
pub fn remote_call(
    endpoint: &str,
    request: &TeacherRequest,
    options: &RemoteOptions,
) -> Result<TeacherResponse, TeacherError> {
    let url = format!("{}/v1/annotate", endpoint.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout_connect(options.timeout)
        .timeout(options.timeout)
        .build();
    let body = serde_json::to_string(request)
        .map_err(|e| TeacherError::Transport(format!("request encode: {}", e)))?;

    let mut last_status = None;
    for attempt in 0..options.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(options.backoff_base * (1u32 << (attempt - 1).min(8)));
        }
        let started = Instant::now();
        let result = agent
            .post(&url)
            .set("content-type", "application/json")
            .send_string(&body);
        match result {
            Ok(resp) => {
                let status = resp.status();
                let text = resp
                    .into_string()
                    .map_err(|e| TeacherError::Transport(format!("read body: {}", e)))?;
                let parsed: ResponseBody = serde_json::from_str(&text)
                    .map_err(|e| TeacherError::MalformedResponse(format!("{}: {}", e, text)))?;
                return Ok(TeacherResponse {
                    text: parsed.text,
                    second_text: parsed.second_text,
                    latency: started.elapsed(),
                    status,
                });
            }
            Err(ureq::Error::Status(status, _)) if (400..500).contains(&status) => {
                return Err(TeacherError::PermanentStatus { status });
            }
            Err(ureq::Error::Status(status, _)) => {
                last_status = Some(status);
            }
            Err(ureq::Error::Transport(t)) => {
                log::debug!("transport error on attempt {}: {}", attempt, t);
            }
        }
    }
    Err(TeacherError::TransientExhausted { attempts: options.attempts, last: last_status })
}
