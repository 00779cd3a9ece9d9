//! External classifier adapter: newline-delimited JSON over a child
//! process's standard input/output.
//!
//! Protocol (one JSON object per line):
//!
//! ```text
//! -> {"op":"hello"}
//! <- {"capabilities":["predict","gradient"],"classes":["...",...],
//!     "input":{"h":H,"w":W,"c":C}}
//! -> {"id":n,"op":"predict","image":"<base64 NIT1 bytes>"}
//! <- {"id":n,"probs":[...]}
//! -> {"id":n,"op":"gradient","image":"<base64 NIT1 bytes>","true_label":k}
//! <- {"id":n,"grad":"<base64 f32 LE array, h*w*c elements>"}
//! <- {"id":n,"error":"message"}        (any request may fail)
//! ```
//!
//! `image` carries a complete NIT1 stream (magic, dims, f32 payload); `grad`
//! carries the bare f32 little-endian array in the same element order.
//! Requests are serialized: one in-flight request per process.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde_json::{json, Value};

use crate::classifier::{Capabilities, ClassifierHandle};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};

/// Options for an external connection.
#[derive(Clone, Copy, Debug)]
pub struct ExternalOptions {
    /// Applies to the hello handshake and to every subsequent response.
    pub timeout: Duration,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions {
            timeout: Duration::from_secs(10),
        }
    }
}

/// Spawns `command` and performs the hello handshake with default options.
pub fn connect_external(command: &[String]) -> Result<ClassifierHandle> {
    connect_external_with(command, ExternalOptions::default())
}

/// Spawns `command` (program plus arguments) and performs the handshake.
pub fn connect_external_with(
    command: &[String],
    options: ExternalOptions,
) -> Result<ClassifierHandle> {
    let backend = ExternalBackend::spawn(command, options)?;
    Ok(ClassifierHandle::external(backend))
}

#[derive(Clone, Debug)]
pub(crate) struct HelloInfo {
    pub classes: Vec<String>,
    pub capabilities: Capabilities,
    pub input_shape: Shape,
}

pub(crate) struct ExternalBackend {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr_tail: Arc<Mutex<VecDeque<String>>>,
    hello: HelloInfo,
    next_id: u64,
    timeout: Duration,
}

impl ExternalBackend {
    fn spawn(command: &[String], options: ExternalOptions) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("external classifier command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("failed to spawn '{program}': {e}")))?;

        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");
        let stderr = child.stderr.take().expect("stderr was piped");

        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let stderr_tail = Arc::new(Mutex::new(VecDeque::with_capacity(16)));
        {
            let tail = Arc::clone(&stderr_tail);
            std::thread::spawn(move || {
                let reader = BufReader::new(stderr);
                for line in reader.lines().map_while(|l| l.ok()) {
                    let mut tail = tail.lock().expect("stderr tail poisoned");
                    if tail.len() == 16 {
                        tail.pop_front();
                    }
                    tail.push_back(line);
                }
            });
        }

        let mut backend = ExternalBackend {
            child,
            stdin,
            lines: rx,
            stderr_tail,
            hello: HelloInfo {
                classes: Vec::new(),
                capabilities: Capabilities {
                    predict: false,
                    gradient: false,
                },
                input_shape: Shape::new(1, 1, 1),
            },
            next_id: 0,
            timeout: options.timeout,
        };
        backend.hello = backend.handshake()?;
        Ok(backend)
    }

    pub(crate) fn hello(&self) -> &HelloInfo {
        &self.hello
    }

    fn diagnostics(&mut self) -> String {
        let status = match self.child.try_wait() {
            Ok(Some(status)) => format!("process exited with {status}"),
            Ok(None) => "process still running".to_string(),
            Err(e) => format!("process state unknown: {e}"),
        };
        let tail = self.stderr_tail.lock().expect("stderr tail poisoned");
        if tail.is_empty() {
            status
        } else {
            format!(
                "{status}; stderr tail:\n{}",
                tail.iter().cloned().collect::<Vec<_>>().join("\n")
            )
        }
    }

    fn send(&mut self, value: &Value) -> Result<()> {
        let mut line = serde_json::to_string(value).expect("request serializes");
        line.push('\n');
        self.stdin.write_all(line.as_bytes()).map_err(|e| {
            let diag = self.diagnostics();
            Error::Backend(format!("write to adapter failed: {e} ({diag})"))
        })?;
        self.stdin.flush().map_err(|e| {
            let diag = self.diagnostics();
            Error::Backend(format!("flush to adapter failed: {e} ({diag})"))
        })
    }

    fn receive(&mut self) -> Result<Value> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line)
                .map_err(|e| Error::Protocol(format!("malformed response line: {e} in {line:?}"))),
            Ok(Err(e)) => {
                let diag = self.diagnostics();
                Err(Error::Backend(format!("read from adapter failed: {e} ({diag})")))
            }
            Err(RecvTimeoutError::Timeout) => Err(Error::Protocol(format!(
                "adapter response timed out after {:?}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                let diag = self.diagnostics();
                Err(Error::Backend(format!("adapter closed its output ({diag})")))
            }
        }
    }

    fn handshake(&mut self) -> Result<HelloInfo> {
        self.send(&json!({"op": "hello"}))?;
        let resp = self.receive()?;
        if let Some(message) = resp.get("error").and_then(Value::as_str) {
            return Err(Error::Backend(format!("adapter hello failed: {message}")));
        }
        let caps = resp
            .get("capabilities")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("hello response missing capabilities".into()))?;
        let cap_names: Vec<&str> = caps.iter().filter_map(Value::as_str).collect();
        if !cap_names.contains(&"predict") {
            return Err(Error::Protocol(
                "adapter does not advertise the predict capability".into(),
            ));
        }
        let capabilities = Capabilities {
            predict: true,
            gradient: cap_names.contains(&"gradient"),
        };
        let classes: Vec<String> = resp
            .get("classes")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("hello response missing classes".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Protocol("non-string class name".into()))
            })
            .collect::<Result<_>>()?;
        if classes.is_empty() {
            return Err(Error::Protocol("adapter advertises zero classes".into()));
        }
        let input = resp
            .get("input")
            .ok_or_else(|| Error::Protocol("hello response missing input shape".into()))?;
        let dim = |k: &str| -> Result<usize> {
            input
                .get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Protocol(format!("input shape missing '{k}'")))
        };
        let input_shape = Shape::new(dim("h")?, dim("w")?, dim("c")?);
        if input_shape.is_empty() {
            return Err(Error::Protocol(format!("degenerate input shape {input_shape}")));
        }
        Ok(HelloInfo {
            classes,
            capabilities,
            input_shape,
        })
    }

    fn request(&mut self, mut body: serde_json::Map<String, Value>) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        body.insert("id".into(), json!(id));
        self.send(&Value::Object(body))?;
        let resp = self.receive()?;
        let got = resp.get("id").and_then(Value::as_u64);
        if got != Some(id) {
            return Err(Error::Protocol(format!(
                "response id {got:?} does not match request id {id}"
            )));
        }
        if let Some(message) = resp.get("error").and_then(Value::as_str) {
            return Err(Error::Backend(format!("adapter error: {message}")));
        }
        Ok(resp)
    }

    pub(crate) fn predict(&mut self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut body = serde_json::Map::new();
        body.insert("op".into(), json!("predict"));
        body.insert("image".into(), json!(BASE64.encode(image.to_nit1_bytes())));
        let resp = self.request(body)?;
        resp.get("probs")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("predict response missing probs".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::Protocol("non-numeric probability".into()))
            })
            .collect()
    }

    pub(crate) fn gradient(&mut self, image: &ImageTensor, true_label: usize) -> Result<Vec<f64>> {
        let mut body = serde_json::Map::new();
        body.insert("op".into(), json!("gradient"));
        body.insert("image".into(), json!(BASE64.encode(image.to_nit1_bytes())));
        body.insert("true_label".into(), json!(true_label));
        let resp = self.request(body)?;
        let encoded = resp
            .get("grad")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Protocol("gradient response missing grad".into()))?;
        let bytes = BASE64
            .decode(encoded)
            .map_err(|e| Error::Protocol(format!("grad is not valid base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Protocol(format!(
                "grad byte length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let expected = image.shape().len();
        if bytes.len() / 4 != expected {
            return Err(Error::Protocol(format!(
                "grad holds {} elements, expected {expected}",
                bytes.len() / 4
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Protocol(format!("non-finite gradient element {v}")))
                }
            })
            .collect()
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
