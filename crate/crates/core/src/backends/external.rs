//! Client side of the wire protocol: an out-of-process adapter reached over
//! child-process stdio or a local socket.

use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::protocol::{read_frame, write_frame, Frame, Request, Response};
use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, BackendResult, ClassifierOutput,
    LabeledImage, ModelBlob, SegmenterSample,
};
use crate::grid::{Grid2, Mask2D, Mask3D};
use crate::prompting::PromptSet;
use crate::volume::Volume;

type Reader = BufReader<Box<dyn Read + Send>>;
type Writer = Box<dyn Write + Send>;

struct Connection {
    reader: Reader,
    writer: Option<Writer>,
    child: Option<Child>,
}

impl Connection {
    fn exchange(&mut self, body: &[u8]) -> std::io::Result<Option<Vec<u8>>> {
        let w = self.writer.as_mut().expect("writer lives until drop");
        write_frame(w, body)?;
        read_frame(&mut self.reader)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // closing our end lets the adapter see EOF and exit on its own
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
    }
}

pub struct ExternalBackend {
    conns: Vec<Mutex<Connection>>,
    next: AtomicUsize,
    ids: AtomicU64,
    descriptor: BackendDescriptor,
}

impl ExternalBackend {
    /// Launches `connections` copies of `program`, each serving one stdio
    /// connection.
    pub fn spawn(program: &str, args: &[String], connections: usize) -> BackendResult<Self> {
        let mut conns = Vec::new();
        for _ in 0..connections.max(1) {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| BackendError::protocol(format!("cannot launch `{program}`: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            conns.push(Connection {
                reader: BufReader::new(Box::new(stdout)),
                writer: Some(Box::new(stdin)),
                child: Some(child),
            });
        }
        Self::from_connections(conns)
    }

    #[cfg(unix)]
    pub fn connect_unix(path: &Path, connections: usize) -> BackendResult<Self> {
        use std::os::unix::net::UnixStream;
        let mut streams = Vec::new();
        for _ in 0..connections.max(1) {
            let s = UnixStream::connect(path).map_err(|e| {
                BackendError::protocol(format!("cannot connect to {}: {e}", path.display()))
            })?;
            let r = s
                .try_clone()
                .map_err(|e| BackendError::protocol(e.to_string()))?;
            streams.push((Box::new(r) as Box<dyn Read + Send>, Box::new(s) as Writer));
        }
        Self::from_streams(streams)
    }

    /// Wraps already-open reader/writer pairs, one per connection.
    pub fn from_streams(streams: Vec<(Box<dyn Read + Send>, Writer)>) -> BackendResult<Self> {
        let conns = streams
            .into_iter()
            .map(|(r, w)| Connection {
                reader: BufReader::new(r),
                writer: Some(w),
                child: None,
            })
            .collect();
        Self::from_connections(conns)
    }

    fn from_connections(conns: Vec<Connection>) -> BackendResult<Self> {
        if conns.is_empty() {
            return Err(BackendError::protocol("no connections"));
        }
        let mut backend = Self {
            conns: conns.into_iter().map(Mutex::new).collect(),
            next: AtomicUsize::new(0),
            ids: AtomicU64::new(1),
            descriptor: BackendDescriptor {
                kind: BackendKind::External,
                capabilities: Default::default(),
                layer_ids: Vec::new(),
            },
        };
        match backend.call(Request::Describe)? {
            Response::Descriptor(mut d) => {
                d.kind = BackendKind::External;
                backend.descriptor = d;
                Ok(backend)
            }
            other => Err(unexpected("describe", &other)),
        }
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    /// Sends one request on an idle connection, or waits for one.
    pub fn call(&self, req: Request) -> BackendResult<Response> {
        let id = self.ids.fetch_add(1, Ordering::Relaxed);
        let reply = self.exchange_raw(&req.to_frame(id).encode())?;
        let frame = Frame::decode(&reply)?;
        if frame.request_id() != Some(id) {
            return Err(BackendError::protocol(format!(
                "response id {:?} does not match request {id}",
                frame.request_id()
            )));
        }
        match Response::from_frame(req.op(), frame)? {
            Response::Error(e) => Err(e),
            r => Ok(r),
        }
    }

    /// Sends a prebuilt request body and returns the response body as is.
    pub fn exchange_raw(&self, body: &[u8]) -> BackendResult<Vec<u8>> {
        let n = self.conns.len();
        let start = self.next.fetch_add(1, Ordering::Relaxed) % n;
        let mut guard = (0..n)
            .find_map(|i| self.conns[(start + i) % n].try_lock().ok())
            .unwrap_or_else(|| {
                self.conns[start]
                    .lock()
                    .unwrap_or_else(|poisoned| poisoned.into_inner())
            });
        guard
            .exchange(body)
            .map_err(|e| BackendError::protocol(format!("connection failed: {e}")))?
            .ok_or_else(|| BackendError::protocol("adapter closed the connection"))
    }
}

fn unexpected(op: &str, r: &Response) -> BackendError {
    BackendError::protocol(format!("unexpected response to `{op}`: {r:?}"))
}

impl Backend for ExternalBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor.clone()
    }

    fn embed_image(&self, image: &Grid2<f32>) -> BackendResult<Vec<f64>> {
        match self.call(Request::EmbedImage(image.clone()))? {
            Response::Embedding(v) => Ok(v),
            r => Err(unexpected("embed_image", &r)),
        }
    }

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        match self.call(Request::EmbedText(text.to_string()))? {
            Response::Embedding(v) => Ok(v),
            r => Err(unexpected("embed_text", &r)),
        }
    }

    fn train_classifier(&self, samples: &[LabeledImage]) -> BackendResult<ModelBlob> {
        match self.call(Request::TrainClassifier(samples.to_vec()))? {
            Response::Model(m) => Ok(m),
            r => Err(unexpected("train_classifier", &r)),
        }
    }

    fn classify_with_maps(
        &self,
        model: &ModelBlob,
        image: &Grid2<f32>,
    ) -> BackendResult<ClassifierOutput> {
        let req = Request::ClassifyWithMaps {
            model: model.clone(),
            image: image.clone(),
        };
        match self.call(req)? {
            Response::Classified(out) => Ok(out),
            r => Err(unexpected("classify_with_maps", &r)),
        }
    }

    fn segment_prompted(&self, image: &Grid2<f32>, prompts: &PromptSet) -> BackendResult<Mask2D> {
        let req = Request::SegmentPrompted {
            image: image.clone(),
            prompts: prompts.clone(),
        };
        match self.call(req)? {
            Response::Mask2(m) if m.shape() == image.shape() => Ok(m),
            Response::Mask2(m) => Err(BackendError::protocol(format!(
                "mask shape {:?} differs from image {:?}",
                m.shape(),
                image.shape()
            ))),
            r => Err(unexpected("segment_prompted", &r)),
        }
    }

    fn train_segmenter(&self, pool: &[SegmenterSample]) -> BackendResult<ModelBlob> {
        match self.call(Request::TrainSegmenter(pool.to_vec()))? {
            Response::Model(m) => Ok(m),
            r => Err(unexpected("train_segmenter", &r)),
        }
    }

    fn predict_volume(&self, model: &ModelBlob, volume: &Volume) -> BackendResult<Mask3D> {
        let req = Request::PredictVolume {
            model: model.clone(),
            volume: volume.clone(),
        };
        match self.call(req)? {
            Response::Mask3(m) if m.shape() == volume.shape() => Ok(m),
            Response::Mask3(m) => Err(BackendError::protocol(format!(
                "mask shape {:?} differs from volume {:?}",
                m.shape(),
                volume.shape()
            ))),
            r => Err(unexpected("predict_volume", &r)),
        }
    }
}
