//! The honest-but-curious coordinator: one inference endpoint over the
//! pre-trained backbone, plus a distribution endpoint for obfuscator bundles.
//!
//! Both endpoints are plain TCP. Each inference connection may carry any
//! number of request/response exchanges; the bundle endpoint writes the
//! encoded bundle once and closes.

pub mod wire;

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, PoisonError};
use std::thread::{self, JoinHandle};

use crate::error::{Error, Result};
use crate::models::{declared_body_len, header_len, ObfNetBundle};
use crate::nn::{argmax, softmax, Network, Tensor, NUM_CLASSES};

use wire::{Incoming, Prediction, STATUS_MALFORMED};

pub use wire::{encode_request, read_response, PAYLOAD_BYTES, PROTOCOL_VERSION};

/// Refuse bundles above this size when downloading.
const MAX_BUNDLE_BYTES: u64 = 1 << 30;

/// Append-only record of received payloads, kept when the coordinator is
/// curious.
#[derive(Debug, Default)]
pub struct RequestLog {
    inner: Mutex<LogInner>,
}

#[derive(Debug, Default)]
struct LogInner {
    payloads: Vec<Vec<f32>>,
    sink: Option<BufWriter<File>>,
}

impl RequestLog {
    /// Also appends every payload (784 little-endian `f32`) to `path`.
    pub fn with_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(LogInner {
                payloads: Vec::new(),
                sink: Some(BufWriter::new(file)),
            }),
        })
    }

    fn record(&self, payload: &[f32]) {
        let mut inner = self.inner.lock().unwrap_or_else(PoisonError::into_inner);
        if let Some(sink) = inner.sink.as_mut() {
            let bytes: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
            if let Err(e) = sink.write_all(&bytes).and_then(|_| sink.flush()) {
                log::warn!("request log write failed: {e}");
            }
        }
        inner.payloads.push(payload.to_vec());
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(PoisonError::into_inner).payloads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All logged payloads as an `(N, 784)` tensor.
    pub fn snapshot(&self) -> Tensor {
        let inner = self.inner.lock().unwrap_or_else(PoisonError::into_inner);
        let n = inner.payloads.len();
        let data = inner.payloads.concat();
        Tensor::new(vec![n, PAYLOAD_BYTES / 4], data).expect("payloads have fixed length")
    }
}

/// Softmax over the backbone logits for one 784-value payload.
pub fn classify(backbone: &Network, payload: &[f32]) -> Result<Prediction> {
    let input = Tensor::new(vec![1, payload.len()], payload.to_vec())?;
    let probs = softmax(&backbone.predict(&input)?);
    let mut probabilities = [0.0f32; NUM_CLASSES];
    probabilities.copy_from_slice(probs.data());
    Ok(Prediction {
        label: argmax(&probabilities) as u8,
        probabilities,
    })
}

/// A background accept loop. Dropping it stops accepting new connections.
#[derive(Debug)]
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    fn spawn<F>(listener: TcpListener, handler: F) -> Result<Self>
    where
        F: Fn(TcpStream) + Send + Sync + 'static,
    {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handler = Arc::new(handler);
        let handle = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let handler = handler.clone();
                        thread::spawn(move || handler(stream));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits (it only does after `shutdown`).
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Running inference endpoint.
#[derive(Debug)]
pub struct InferenceService {
    server: Server,
    log: Option<Arc<RequestLog>>,
}

impl InferenceService {
    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    /// Present only for a curious coordinator.
    pub fn request_log(&self) -> Option<&Arc<RequestLog>> {
        self.log.as_ref()
    }

    pub fn wait(self) {
        self.server.wait();
    }

    pub fn shutdown(mut self) {
        self.server.shutdown();
    }
}

fn handle_inference(stream: TcpStream, backbone: &Network, log: Option<&RequestLog>) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let reply = match wire::read_request(&mut reader) {
            Incoming::Sample(payload) => {
                if let Some(log) = log {
                    log.record(&payload);
                }
                match classify(backbone, &payload) {
                    Ok(p) => wire::encode_response(&p),
                    Err(_) => vec![STATUS_MALFORMED],
                }
            }
            Incoming::Malformed => vec![STATUS_MALFORMED],
            Incoming::Oversized | Incoming::Closed => return,
        };
        if writer.write_all(&reply).and_then(|_| writer.flush()).is_err() {
            return;
        }
    }
}

/// Serves `softmax(backbone(payload))` for every valid request. Raw and
/// obfuscated payloads take the identical code path.
pub fn serve_inference<A: ToSocketAddrs>(
    backbone: Arc<Network>,
    bind: A,
    log: Option<Arc<RequestLog>>,
) -> Result<InferenceService> {
    let listener = TcpListener::bind(bind)?;
    let handler_log = log.clone();
    let server = Server::spawn(listener, move |stream| {
        handle_inference(stream, &backbone, handler_log.as_deref());
    })?;
    Ok(InferenceService { server, log })
}

/// Serves the encoded bundle to every connecting participant. The bundle
/// must have been trained against `backbone`.
pub fn serve_bundle<A: ToSocketAddrs>(bundle: &ObfNetBundle, backbone: &Network, bind: A) -> Result<Server> {
    if bundle.is_empty() {
        return Err(Error::EmptyBundle);
    }
    bundle.verify_backbone(backbone)?;
    let bytes: Arc<[u8]> = bundle.encode().into();
    let listener = TcpListener::bind(bind)?;
    Server::spawn(listener, move |mut stream| {
        if let Err(e) = stream.write_all(&bytes).and_then(|_| stream.flush()) {
            log::warn!("bundle transfer failed: {e}");
        }
    })
}

/// Downloads and verifies a bundle. When `expected_backbone` is given the
/// bundle must be bound to that fingerprint.
pub fn fetch_bundle<A: ToSocketAddrs>(addr: A, expected_backbone: Option<u64>) -> Result<(ObfNetBundle, Vec<u8>)> {
    let mut stream = TcpStream::connect(addr)?;
    let mut bytes = vec![0u8; header_len()];
    stream.read_exact(&mut bytes)?;
    let body_len = declared_body_len(&bytes)?;
    if body_len > MAX_BUNDLE_BYTES {
        return Err(Error::Protocol(format!("bundle of {body_len} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; body_len as usize];
    stream.read_exact(&mut body)?;
    bytes.extend_from_slice(&body);
    let bundle = ObfNetBundle::decode(&bytes)?;
    if let Some(expected) = expected_backbone {
        if bundle.backbone_fingerprint() != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: bundle.backbone_fingerprint(),
            });
        }
    }
    Ok((bundle, bytes))
}

/// Blocking client for the inference endpoint; one connection, many requests.
#[derive(Debug)]
pub struct InferenceClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl InferenceClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn infer(&mut self, sample: &[f32]) -> Result<Prediction> {
        let frame = encode_request(sample)?;
        self.send_raw(&frame)?;
        read_response(&mut self.reader)
    }

    /// Writes arbitrary bytes; pair with [`InferenceClient::read_prediction`].
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read_prediction(&mut self) -> Result<Prediction> {
        read_response(&mut self.reader)
    }
}

/// Endpoints and flags for [`Coordinator::start`].
#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub inference_bind: String,
    pub bundle_bind: Option<String>,
    pub curious: bool,
}

/// Both services over one immutable backbone.
#[derive(Debug)]
pub struct Coordinator {
    pub inference: InferenceService,
    pub distribution: Option<Server>,
    backbone: Arc<Network>,
}

impl Coordinator {
    /// Refuses to start when the bundle was trained against another backbone.
    pub fn start(
        backbone: Network,
        bundle: Option<&ObfNetBundle>,
        config: &CoordinatorConfig,
        log: Option<Arc<RequestLog>>,
    ) -> Result<Self> {
        if let Some(bundle) = bundle {
            bundle.verify_backbone(&backbone)?;
        }
        let log = match (config.curious, log) {
            (true, Some(log)) => Some(log),
            (true, None) => Some(Arc::new(RequestLog::default())),
            (false, _) => None,
        };
        let distribution = match (bundle, &config.bundle_bind) {
            (Some(bundle), Some(bind)) => Some(serve_bundle(bundle, &backbone, bind.as_str())?),
            _ => None,
        };
        let backbone = Arc::new(backbone);
        let inference = serve_inference(backbone.clone(), config.inference_bind.as_str(), log)?;
        Ok(Self {
            inference,
            distribution,
            backbone,
        })
    }

    pub fn backbone(&self) -> &Network {
        &self.backbone
    }
}
