//! Client side of the line-delimited JSON inference worker protocol.
//!
//! The worker greets with `{"v":1,"hello":"audit-worker"}` and then answers
//! each request line with exactly one response line, in order.
//!
//! Endpoints are `tcp://host:port` (or bare `host:port`) or `cmd:<program> <args..>`
//! to spawn a worker speaking the protocol over stdio.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::eval::ScoredBox;
use crate::manifest::ImageRecord;
use crate::protocol::{AgePosterior, Annotator, AnnotatorError, BoundingBox, FaceDetection, GenderScore};

pub const PROTOCOL_VERSION: u32 = 1;
pub const HELLO: &str = "audit-worker";
pub const ENDPOINT_ENV: &str = "AUDIT_WORKER_ENDPOINT";

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Age,
    Gender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub v: u32,
    pub task: Task,
    pub image_id: String,
    pub image_payload: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub v: u32,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<ScoredBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WorkerErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub v: u32,
    pub hello: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_version: Option<String>,
}

/// Resolve the worker endpoint: the environment variable wins over config.
pub fn resolve_endpoint(configured: Option<&str>) -> Option<String> {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .or_else(|| configured.map(str::to_string))
}

pub struct WorkerClient {
    endpoint: String,
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    version: String,
}

impl std::fmt::Debug for WorkerClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerClient")
            .field("endpoint", &self.endpoint)
            .field("version", &self.version)
            .finish()
    }
}

impl WorkerClient {
    /// Connect (or spawn) and complete the version handshake.
    pub fn connect(endpoint: &str) -> Result<Self, AnnotatorError> {
        let unavailable = |msg: String| AnnotatorError::Unavailable(format!("{endpoint}: {msg}"));
        let (reader, writer, child): (Box<dyn BufRead + Send>, Box<dyn Write + Send>, Option<Child>) =
            if let Some(cmd) = endpoint.strip_prefix("cmd:") {
                let mut parts = cmd.split_whitespace();
                let program = parts.next().ok_or_else(|| unavailable("empty command".into()))?;
                let mut child = Command::new(program)
                    .args(parts)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| unavailable(e.to_string()))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                (Box::new(BufReader::new(stdout)), Box::new(stdin), Some(child))
            } else {
                let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| unavailable(e.to_string()))?
                    .next()
                    .ok_or_else(|| unavailable("address did not resolve".into()))?;
                let stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(|e| unavailable(e.to_string()))?;
                stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(|e| unavailable(e.to_string()))?;
                // One small line per request; do not wait to coalesce.
                stream.set_nodelay(true).map_err(|e| unavailable(e.to_string()))?;
                let read_half = stream.try_clone().map_err(|e| unavailable(e.to_string()))?;
                (Box::new(BufReader::new(read_half)), Box::new(stream), None)
            };

        let mut client = Self {
            endpoint: endpoint.to_string(),
            reader,
            writer,
            child,
            version: String::new(),
        };
        let line = client.read_line().map_err(|e| unavailable(format!("no handshake: {e}")))?;
        let hello: Hello =
            serde_json::from_str(&line).map_err(|e| unavailable(format!("bad handshake {line:?}: {e}")))?;
        if hello.hello != HELLO || hello.v != PROTOCOL_VERSION {
            return Err(unavailable(format!("unsupported handshake {line:?}")));
        }
        client.version = hello
            .annotator_version
            .unwrap_or_else(|| format!("worker-v{PROTOCOL_VERSION}"));
        Ok(client)
    }

    fn read_line(&mut self) -> Result<String, String> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err("worker closed the connection".into()),
            Ok(_) => Ok(line.trim_end().to_string()),
            Err(e) => Err(e.to_string()),
        }
    }

    /// Send one request and read its response.
    pub fn call(&mut self, req: &WorkerRequest) -> Result<WorkerResponse, AnnotatorError> {
        let mut line = serde_json::to_string(req).expect("request serializes");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| AnnotatorError::Unavailable(format!("{}: {e}", self.endpoint)))?;
        let reply = self.read_line().map_err(AnnotatorError::Unavailable)?;
        let resp: WorkerResponse = serde_json::from_str(&reply)
            .map_err(|e| AnnotatorError::Protocol(format!("malformed response {reply:?}: {e}")))?;
        if resp.image_id != req.image_id {
            return Err(AnnotatorError::Protocol(format!(
                "response for {} while waiting for {}",
                resp.image_id, req.image_id
            )));
        }
        if let Some(err) = resp.error {
            return Err(AnnotatorError::Image {
                image_id: req.image_id.clone(),
                message: format!("{}: {}", err.code, err.message),
            });
        }
        Ok(resp)
    }

    fn request(img: &ImageRecord, task: Task, bbox: Option<BoundingBox>) -> WorkerRequest {
        WorkerRequest {
            v: PROTOCOL_VERSION,
            task,
            image_id: img.image_id.clone(),
            image_payload: img.uri.clone(),
            bbox,
        }
    }
}

impl Drop for WorkerClient {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Annotator for WorkerClient {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn detect(&mut self, img: &ImageRecord) -> Result<Vec<FaceDetection>, AnnotatorError> {
        let resp = self.call(&Self::request(img, Task::Detect, None))?;
        let boxes = resp
            .boxes
            .ok_or_else(|| AnnotatorError::Protocol("detect response without boxes".into()))?;
        boxes
            .into_iter()
            .map(|b| FaceDetection::new(img.image_id.clone(), b.bbox, b.confidence).map_err(Into::into))
            .collect()
    }

    fn age(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<AgePosterior, AnnotatorError> {
        let resp = self.call(&Self::request(img, Task::Age, Some(det.bbox)))?;
        let probs = resp
            .posterior
            .ok_or_else(|| AnnotatorError::Protocol("age response without posterior".into()))?;
        Ok(AgePosterior::new(probs)?)
    }

    fn gender(&mut self, img: &ImageRecord, det: &FaceDetection) -> Result<GenderScore, AnnotatorError> {
        let resp = self.call(&Self::request(img, Task::Gender, Some(det.bbox)))?;
        let score = resp
            .score
            .ok_or_else(|| AnnotatorError::Protocol("gender response without score".into()))?;
        Ok(GenderScore::new(score)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let img = ImageRecord::new("i1", "n1", "/data/i1.jpg");
        let req = WorkerClient::request(&img, Task::Age, Some(BoundingBox::new(1.0, 2.0, 3.0, 4.0)));
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"v":1,"task":"age","image_id":"i1","image_payload":"/data/i1.jpg","box":{"x":1.0,"y":2.0,"w":3.0,"h":4.0}}"#
        );
        let det = WorkerClient::request(&img, Task::Detect, None);
        assert!(!serde_json::to_string(&det).unwrap().contains("box"));
    }

    #[test]
    fn response_parses_detect_payload() {
        let r: WorkerResponse =
            serde_json::from_str(r#"{"v":1,"image_id":"i","boxes":[{"x":1,"y":2,"w":3,"h":4,"conf":0.95}]}"#).unwrap();
        assert_eq!(r.boxes.unwrap()[0].confidence, 0.95);
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        // Port 1 on loopback is essentially never listening.
        let err = WorkerClient::connect("tcp://127.0.0.1:1").unwrap_err();
        assert!(matches!(err, AnnotatorError::Unavailable(_)));
        let err = WorkerClient::connect("cmd:/nonexistent/worker-binary").unwrap_err();
        assert!(matches!(err, AnnotatorError::Unavailable(_)));
    }
}
