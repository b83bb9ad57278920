use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::wire::{ResponseBody, TeacherRequest};
use super::{annotation_rng, TeacherError};
use crate::taskgen::{
    oracle_description, oracle_rationale, parse_fact, parse_question, Level, Provenance, Sample,
    Scene,
};

/// Loopback teacher: implements the wire protocol over the scripted oracle,
/// reconstructing the sample from the serialized scene and question.
pub struct OracleServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl OracleServer {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for OracleServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds (port 0 picks a free port) and serves until stopped.
pub fn serve(addr: &str, p_err: f64, seed: u64) -> Result<OracleServer, TeacherError> {
    let server =
        tiny_http::Server::http(addr).map_err(|e| TeacherError::Server(e.to_string()))?;
    let addr = match server.server_addr() {
        tiny_http::ListenAddr::IP(ip) => ip,
        other => return Err(TeacherError::Server(format!("unsupported listener {:?}", other))),
    };
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let handle = std::thread::spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match server.recv_timeout(Duration::from_millis(50)) {
                Ok(Some(request)) => handle_request(request, p_err, seed),
                Ok(None) => {}
                Err(_) => break,
            }
        }
    });
    Ok(OracleServer { addr, stop, handle: Some(handle) })
}

fn respond_json(request: tiny_http::Request, status: u16, body: &str) {
    let header =
        tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}

fn handle_request(mut request: tiny_http::Request, p_err: f64, seed: u64) {
    if request.url() != "/v1/annotate" {
        respond_json(request, 404, r#"{"error":"unknown path"}"#);
        return;
    }
    if request.method() != &tiny_http::Method::Post {
        respond_json(request, 405, r#"{"error":"POST only"}"#);
        return;
    }
    let mut body = String::new();
    if std::io::Read::read_to_string(request.as_reader(), &mut body).is_err() {
        respond_json(request, 400, r#"{"error":"unreadable body"}"#);
        return;
    }
    let req: TeacherRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => {
            respond_json(request, 400, &format!(r#"{{"error":"bad request: {}"}}"#, e));
            return;
        }
    };
    match annotate_request(&req, p_err, seed) {
        Ok(resp) => {
            respond_json(request, 200, &serde_json::to_string(&resp).unwrap());
        }
        Err(e) => {
            respond_json(request, 400, &format!(r#"{{"error":"{}"}}"#, e));
        }
    }
}

/// Rebuilds a sample view from the wire fields and delegates to the same
/// oracle functions the in-process teacher uses.
fn annotate_request(
    req: &TeacherRequest,
    p_err: f64,
    seed: u64,
) -> Result<ResponseBody, String> {
    let cells = req
        .scene
        .iter()
        .map(|f| parse_fact(f).ok_or_else(|| format!("unparseable fact: {}", f)))
        .collect::<Result<Vec<_>, _>>()?;
    let question =
        parse_question(&req.question).ok_or_else(|| format!("unparseable question: {}", req.question))?;
    let sample = Sample {
        id: String::new(),
        scene: Scene { rows: 10, cols: 10, cells },
        question,
        level: Level::VO,
        gold: req.gold_answer.clone(),
        description: None,
        rationale: None,
        rationale_correct: None,
        provenance: Provenance::Remote,
    };
    match req.kind.as_str() {
        "description" => Ok(ResponseBody { text: oracle_description(&sample), second_text: None }),
        "rationale" => {
            let mut rng = annotation_rng(seed, &req.scene, &req.question, &req.gold_answer);
            let (text, _) = oracle_rationale(&sample, p_err, &mut rng);
            Ok(ResponseBody { text, second_text: None })
        }
        "disentangled" => {
            let description = oracle_description(&sample);
            let mut rng = annotation_rng(seed, &req.scene, &req.question, &req.gold_answer);
            let (rationale, _) = oracle_rationale(&sample, p_err, &mut rng);
            Ok(ResponseBody { text: description, second_text: Some(rationale) })
        }
        other => Err(format!("unknown kind {:?}", other)),
    }
}
