//! Client side of the external predictor protocol: a pool of child
//! processes, each handling one request at a time.

use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{self, Frame, Header, ProtocolError, DTYPE, PROTOCOL_VERSION};
use super::{check_channels, Concurrency, Predictor, PredictorContract};
use crate::error::{Error, Result};
use crate::volume::{ProbMap, Volume};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

/// How to launch an external predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Number of child processes.
    #[serde(default = "one")]
    pub pool: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
}

fn one() -> usize {
    1
}

fn default_timeout_s() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

impl ExternalSpec {
    pub fn new(command: Vec<String>) -> Self {
        Self { command, pool: 1, timeout_s: default_timeout_s() }
    }
}

struct Worker {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    frames: Receiver<Result<Frame, ProtocolError>>,
    failed: Option<String>,
}

impl Worker {
    fn spawn(command: &[String]) -> Result<Self, ProtocolError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ProtocolError::Handshake("empty predictor command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ProtocolError::Spawn { command: command.join(" "), source })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take().map(BufWriter::new);
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = protocol::read_frame(&mut reader);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, frames: rx, failed: None })
    }

    fn exit_status(&mut self) -> String {
        // the reader saw EOF; give the process a moment to be reaped
        for _ in 0..50 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return status.to_string();
            }
            thread::sleep(Duration::from_millis(10));
        }
        "closed its output".into()
    }

    fn receive(&mut self, timeout: Duration) -> Result<Frame, ProtocolError> {
        match self.frames.recv_timeout(timeout) {
            Ok(Ok(frame)) => Ok(frame),
            Ok(Err(ProtocolError::Closed)) | Err(RecvTimeoutError::Disconnected) => {
                Err(ProtocolError::ChildDied(self.exit_status()))
            }
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                Err(ProtocolError::Timeout { secs: timeout.as_secs_f64() })
            }
        }
    }

    fn handshake(&mut self, timeout: Duration) -> Result<(usize, usize, String), ProtocolError> {
        let frame = match self.receive(timeout) {
            Ok(frame) => frame,
            Err(ProtocolError::ChildDied(status)) => {
                return Err(ProtocolError::Handshake(format!("child exited before hello ({status})")))
            }
            Err(e) => return Err(e),
        };
        match frame.header {
            Header::Hello { protocol, classes, channels, name } => {
                if protocol != PROTOCOL_VERSION {
                    return Err(ProtocolError::VersionMismatch { expected: PROTOCOL_VERSION, actual: protocol });
                }
                if classes < 2 || channels == 0 {
                    return Err(ProtocolError::Handshake(format!("declared {classes} classes, {channels} channels")));
                }
                Ok((classes, channels, name))
            }
            other => Err(ProtocolError::Handshake(format!("expected hello, got {} frame", other.kind()))),
        }
    }

    fn request(&mut self, v: &Volume, classes: usize, timeout: Duration) -> Result<ProbMap, ProtocolError> {
        if let Some(reason) = &self.failed {
            return Err(ProtocolError::ChildDied(reason.clone()));
        }
        let result = self.exchange(v, classes, timeout);
        if let Err(e) = &result {
            // the stream position is unknown after these; retire the worker
            if matches!(
                e,
                ProtocolError::ChildDied(_) | ProtocolError::Timeout { .. } | ProtocolError::MalformedPayload(_) | ProtocolError::Io(_)
            ) {
                self.failed = Some(e.to_string());
            }
        }
        result
    }

    fn exchange(&mut self, v: &Volume, classes: usize, timeout: Duration) -> Result<ProbMap, ProtocolError> {
        let header = Header::Predict {
            dims: v.dims(),
            channels: v.channels(),
            spacing: v.spacing(),
            dtype: DTYPE.into(),
        };
        let stdin = self.stdin.as_mut().ok_or_else(|| ProtocolError::ChildDied("stdin closed".into()))?;
        if let Err(e) = protocol::write_frame(stdin, &header, &protocol::encode_f32(v.data())) {
            return Err(match self.child.try_wait() {
                Ok(Some(status)) => ProtocolError::ChildDied(status.to_string()),
                _ => ProtocolError::Io(e.to_string()),
            });
        }
        let frame = self.receive(timeout)?;
        match frame.header {
            Header::Probs { dims, classes: k, .. } => {
                if dims != v.dims() || k != classes {
                    return Err(ProtocolError::MalformedPayload(format!(
                        "response shape {dims:?} x {k} classes, expected {:?} x {classes}",
                        v.dims()
                    )));
                }
                let probs = protocol::decode_f32(&frame.payload)?;
                let grid = *v.grid();
                ProbMap::check(&grid, classes, &probs).map_err(|bad| ProtocolError::Validation {
                    voxel: grid.coords(bad.voxel),
                    reason: bad.reason,
                })?;
                Ok(ProbMap::from_parts(grid, classes, probs))
            }
            Header::Error { message } => Err(ProtocolError::Remote(message)),
            other => Err(ProtocolError::Unexpected(other.kind())),
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        // closing stdin asks a well-behaved child to exit
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Predictor backed by one or more child processes speaking the frame
/// protocol. Call `i` is served by worker `i % pool`.
pub struct ExternalPredictor {
    contract: PredictorContract,
    workers: Vec<Mutex<Worker>>,
    timeout: Duration,
}

impl ExternalPredictor {
    pub fn launch(spec: &ExternalSpec) -> Result<Self> {
        if spec.pool == 0 {
            return Err(Error::InvalidPredictor("external pool size must be at least 1".into()));
        }
        if !(spec.timeout_s.is_finite() && spec.timeout_s > 0.0) {
            return Err(Error::InvalidPredictor(format!("timeout {} s", spec.timeout_s)));
        }
        let timeout = Duration::from_secs_f64(spec.timeout_s);
        let mut workers = Vec::with_capacity(spec.pool);
        let mut declared: Option<(usize, usize, String)> = None;
        for _ in 0..spec.pool {
            let mut worker = Worker::spawn(&spec.command)?;
            let hello = worker.handshake(timeout)?;
            if let Some(first) = &declared {
                if (first.0, first.1) != (hello.0, hello.1) {
                    return Err(ProtocolError::Handshake("pool members disagree on classes/channels".into()).into());
                }
            } else {
                declared = Some(hello);
            }
            workers.push(Mutex::new(worker));
        }
        let (classes, channels, name) = declared.expect("pool is non-empty");
        let concurrency = if workers.len() > 1 { Concurrency::ConcurrentSafe } else { Concurrency::Serial };
        Ok(Self {
            contract: PredictorContract { name, classes, channels, concurrency },
            workers,
            timeout,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.workers.len()
    }
}

impl Predictor for ExternalPredictor {
    fn contract(&self) -> &PredictorContract {
        &self.contract
    }

    fn predict(&self, v: &Volume, call: u64) -> Result<ProbMap> {
        check_channels(&self.contract, v)?;
        let slot = (call % self.workers.len() as u64) as usize;
        let mut worker = self.workers[slot].lock().unwrap_or_else(|poisoned| poisoned.into_inner());
        Ok(worker.request(v, self.contract.classes, self.timeout)?)
    }
}
