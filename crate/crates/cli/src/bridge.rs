//! Environment server for out-of-process clients.
//!
//! Every message is a UTF-8 JSON document preceded by its byte length as a
//! 4-byte big-endian integer. Each connection owns one environment and is
//! served on its own thread; requests and responses strictly alternate.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};
use surgisim::envs::{EnvSpec, Observation, StepInfo, TaskConfig, TaskEnv};
use surgisim::SimError;

/// Frames larger than this are discarded unread.
pub const MAX_FRAME: u32 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Spec,
    Reset { seed: u64 },
    Step { action: Vec<f64> },
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not valid JSON or not a known request.
    BadRequest,
    /// Request not allowed in the current episode state.
    BadState,
    /// Wrong action length or non-finite values.
    BadAction,
    FrameTooLarge,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Spec {
        spec: EnvSpec,
    },
    Reset {
        obs: Observation,
    },
    Step {
        obs: Observation,
        reward: f64,
        done: bool,
        info: StepInfo,
    },
    Ack,
    Error {
        code: ErrorCode,
        msg: String,
    },
}

impl Response {
    fn error(code: ErrorCode, msg: impl Into<String>) -> Self {
        Response::Error { code, msg: msg.into() }
    }
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|n| *n <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Next frame from `r`. `Ok(None)` on a clean end of stream, `Err(len)` in
/// the inner result when an oversized frame was skipped.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Result<Vec<u8>, u32>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        io::copy(&mut r.take(len as u64), &mut io::sink())?;
        return Ok(Some(Err(len)));
    }
    let mut body = vec![0; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(Ok(body)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Running,
    Finished,
}

/// One environment behind a connection.
pub struct Session {
    env: TaskEnv,
    phase: Phase,
}

impl Session {
    pub fn new(config: TaskConfig) -> surgisim::Result<Self> {
        Ok(Self {
            env: TaskEnv::new(config)?,
            phase: Phase::Idle,
        })
    }

    /// Handles one decoded request. `Close` is answered by the caller.
    pub fn handle(&mut self, req: Request) -> Response {
        match req {
            Request::Spec => Response::Spec { spec: self.env.spec() },
            Request::Reset { seed } => match self.env.reset(seed) {
                Ok(obs) => {
                    self.phase = Phase::Running;
                    Response::Reset { obs }
                }
                Err(e) => Response::error(ErrorCode::Internal, e.to_string()),
            },
            Request::Step { action } => {
                match self.phase {
                    Phase::Idle => return Response::error(ErrorCode::BadState, "step before reset"),
                    Phase::Finished => return Response::error(ErrorCode::BadState, "episode is over; reset first"),
                    Phase::Running => {}
                }
                let dim = self.env.spec().action_dim;
                if action.len() != dim {
                    return Response::error(
                        ErrorCode::BadAction,
                        format!("action has {} values, expected {dim}", action.len()),
                    );
                }
                if action.iter().any(|a| !a.is_finite()) {
                    return Response::error(ErrorCode::BadAction, "non-finite action");
                }
                match self.env.step(&action) {
                    Ok(s) => {
                        if s.done {
                            self.phase = Phase::Finished;
                        }
                        Response::Step {
                            obs: s.obs,
                            reward: s.reward,
                            done: s.done,
                            info: s.info,
                        }
                    }
                    Err(e @ SimError::DimensionMismatch { .. }) => Response::error(ErrorCode::BadAction, e.to_string()),
                    Err(e) => {
                        self.phase = Phase::Idle;
                        Response::error(ErrorCode::Internal, e.to_string())
                    }
                }
            }
            Request::Close => Response::Ack,
        }
    }
}

fn send<W: Write>(w: &mut W, resp: &Response) -> io::Result<()> {
    let body = serde_json::to_vec(resp).map_err(io::Error::other)?;
    write_frame(w, &body)
}

/// Serves requests on `stream` until the peer closes or sends `close`.
pub fn handle_connection<S: Read + Write>(stream: &mut S, config: TaskConfig) -> io::Result<()> {
    let mut session = match Session::new(config) {
        Ok(s) => s,
        Err(e) => return send(stream, &Response::error(ErrorCode::Internal, e.to_string())),
    };
    while let Some(frame) = read_frame(stream)? {
        let body = match frame {
            Ok(b) => b,
            Err(len) => {
                send(stream, &Response::error(ErrorCode::FrameTooLarge, format!("{len} byte frame exceeds {MAX_FRAME}")))?;
                continue;
            }
        };
        let req = match serde_json::from_slice::<Request>(&body) {
            Ok(r) => r,
            Err(e) => {
                send(stream, &Response::error(ErrorCode::BadRequest, e.to_string()))?;
                continue;
            }
        };
        let closing = req == Request::Close;
        send(stream, &session.handle(req))?;
        if closing {
            break;
        }
    }
    Ok(())
}

/// Accepts connections forever, one thread and one environment each.
pub fn serve(listener: TcpListener, config: TaskConfig) -> io::Result<()> {
    for stream in listener.incoming() {
        let mut stream = stream?;
        let config = config.clone();
        std::thread::spawn(move || {
            let _ = stream.set_nodelay(true);
            if let Err(e) = handle_connection(&mut stream, config) {
                eprintln!("connection error: {e}");
            }
        });
    }
    Ok(())
}

/// Minimal blocking client, mainly for tests and tooling written in Rust.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    /// Sends raw bytes as one frame and waits for the reply.
    pub fn raw(&mut self, body: &[u8]) -> io::Result<Response> {
        write_frame(&mut self.stream, body)?;
        let frame = read_frame(&mut self.stream)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"))?
            .map_err(|len| io::Error::new(io::ErrorKind::InvalidData, format!("{len} byte reply")))?;
        serde_json::from_slice(&frame).map_err(io::Error::other)
    }

    pub fn request(&mut self, req: &Request) -> io::Result<Response> {
        self.raw(&serde_json::to_vec(req).map_err(io::Error::other)?)
    }

    pub fn stream(&mut self) -> &mut TcpStream {
        &mut self.stream
    }
}
