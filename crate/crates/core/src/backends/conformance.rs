//! Golden transcripts: recorded request/response frame pairs that any
//! protocol implementation can be replayed against.
//!
//! ```text
//! "CASCTRSC\n" | (u32 LE len | request body | u32 LE len | response body)*
//! ```

use std::io::{self, Read, Write};

use serde_json::{json, Value};

use super::analytic::AnalyticBackend;
use super::protocol::{handle_body, read_frame, write_frame, Frame, Request};
use super::{Backend, BackendResult, LabeledImage, ModelBlob, SegmenterSample};
use crate::grid::{Grid2, Grid3};
use crate::prompting::{build_prompts, PointLabel, PromptPoint, PromptSet};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const TRANSCRIPT_MAGIC: &[u8; 9] = b"CASCTRSC\n";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub exchanges: Vec<(Vec<u8>, Vec<u8>)>,
}

impl Transcript {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(TRANSCRIPT_MAGIC)?;
        for (req, resp) in &self.exchanges {
            write_frame(w, req)?;
            write_frame(w, resp)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if &magic != TRANSCRIPT_MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not a transcript"));
        }
        let mut exchanges = Vec::new();
        while let Some(req) = read_frame(r)? {
            let resp = read_frame(r)?.ok_or_else(|| {
                io::Error::new(io::ErrorKind::UnexpectedEof, "request without response")
            })?;
            exchanges.push((req, resp));
        }
        Ok(Self { exchanges })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Responses must match byte for byte.
    Strict,
    /// Responses must agree on header keys, error codes and tensor
    /// dtypes/shapes; values may differ.
    Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub op: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub total: usize,
    pub mismatches: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn brain_slice() -> Grid2<f32> {
    Grid2::from_fn(16, 16, |r, c| {
        let (y, x) = (r as f32 - 7.5, c as f32 - 7.5);
        if y * y + x * x > 49.0 {
            0.0
        } else if (y - 1.0).powi(2) + (x + 2.0).powi(2) <= 5.0 {
            3.0
        } else {
            -0.25 + 0.05 * ((r * 3 + c) % 4) as f32
        }
    })
}

fn golden_volume(id: &str) -> (Volume, crate::Mask3D) {
    let shape = (6, 12, 12);
    let inside = |d: usize, r: usize, c: usize| {
        let (z, y, x) = (d as f32 - 2.5, r as f32 - 6.0, c as f32 - 5.0);
        z * z / 4.0 + y * y / 6.0 + x * x / 9.0 <= 1.0
    };
    let vox = Grid3::from_fn(shape, |d, r, c| {
        if r == 0 || c == 0 {
            0.0
        } else if inside(d, r, c) {
            2.5
        } else {
            -0.4 + 0.1 * ((d + r * 2 + c) % 3) as f32
        }
    });
    let label = Grid3::from_fn(shape, inside);
    (Volume::new(id, vox, [2.0, 1.0, 1.0]).expect("valid volume"), label)
}

/// The fixed request bodies of the golden session. Model blobs inside are
/// the analytic backend's, so model-dependent requests only match strictly
/// against an analytic server.
pub fn golden_requests() -> Vec<Vec<u8>> {
    let analytic = AnalyticBackend::default();
    let slice = brain_slice();
    let roi = Grid2::from_fn(16, 16, |r, c| slice[(r, c)] > 1.0);
    let prompts = build_prompts(&roi).expect("golden roi is nonempty");
    let samples = vec![
        LabeledImage { image: slice.clone(), label: 1 },
        LabeledImage { image: slice.map(|&v| v.min(0.0)), label: 0 },
    ];
    let classifier = analytic.train_classifier(&samples).expect("analytic trains");
    let (volume, label) = golden_volume("golden_000");
    let pool = vec![SegmenterSample { volume: volume.clone(), label }];
    let segmenter = analytic.train_segmenter(&pool).expect("analytic trains");

    let echo_tensors = vec![
        Tensor::from_volume(&volume),
        Tensor::u8(vec![2, 3], vec![0, 1, 2, 3, 254, 255]).expect("shape"),
        Tensor::f32(vec![4], vec![f32::MIN_POSITIVE, -0.0, 1e-30, f32::MAX]).expect("shape"),
    ];
    let requests = vec![
        Request::Describe,
        Request::Echo { params: json!({"note": "round trip", "n": [1, 2.5, -3]}), tensors: echo_tensors },
        Request::EmbedText(crate::labeling::DEFAULT_NORMAL_PROMPT.into()),
        Request::EmbedText(crate::labeling::DEFAULT_TUMOR_PROMPT.into()),
        Request::EmbedImage(slice.clone()),
        Request::EmbedImage(Grid2::filled(16, 16, 0.0)),
        Request::TrainClassifier(samples),
        Request::ClassifyWithMaps { model: classifier.clone(), image: slice.clone() },
        Request::SegmentPrompted { image: slice.clone(), prompts },
        Request::TrainSegmenter(pool),
        Request::PredictVolume { model: segmenter, volume: volume.clone() },
        // lifecycle and validation errors
        Request::PredictVolume { model: ModelBlob(Vec::new()), volume },
        Request::SegmentPrompted {
            image: slice,
            prompts: PromptSet {
                bbox: [0, 0, 20, 20],
                points: vec![PromptPoint { rc: [20, 20], label: PointLabel::Fg }],
            },
        },
    ];
    let mut bodies: Vec<Vec<u8>> = requests
        .iter()
        .zip(1u64..)
        .map(|(r, id)| r.to_frame(id).encode())
        .collect();
    bodies.push(b"this is not a frame".to_vec());
    bodies.push(b"{\"op\":\"teleport\",\"request_id\":99}\n".to_vec());
    bodies
}

/// Records `requests` against an in-process backend.
pub fn record(backend: &dyn Backend, requests: &[Vec<u8>]) -> Transcript {
    Transcript {
        exchanges: requests
            .iter()
            .map(|req| (req.clone(), handle_body(backend, req)))
            .collect(),
    }
}

pub fn golden_transcript() -> Transcript {
    record(&AnalyticBackend::default(), &golden_requests())
}

fn op_of(body: &[u8]) -> String {
    Frame::decode(body)
        .ok()
        .and_then(|f| f.header.get("op").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| "<malformed>".into())
}

fn signature(body: &[u8]) -> Result<(Vec<String>, Option<Value>, Vec<String>), String> {
    let f = Frame::decode(body).map_err(|e| e.to_string())?;
    let keys = f.header.keys().cloned().collect();
    let code = f.header.get("error").and_then(|e| e.get("code")).cloned();
    let tensors = f
        .tensors
        .iter()
        .map(|t| {
            let h = t.header();
            // blobs are opaque, only their rank matters
            if h.shape.len() == 1 && t.dtype() == crate::tensor::DType::U8 {
                "blob".to_string()
            } else {
                format!("{:?}{:?}", h.dtype, h.shape)
            }
        })
        .collect();
    Ok((keys, code, tensors))
}

/// Replays every request through `exchange` and compares the responses.
pub fn replay(
    transcript: &Transcript,
    mode: Mode,
    mut exchange: impl FnMut(&[u8]) -> BackendResult<Vec<u8>>,
) -> Report {
    let mut report = Report {
        total: transcript.exchanges.len(),
        mismatches: Vec::new(),
    };
    for (index, (req, want)) in transcript.exchanges.iter().enumerate() {
        let op = op_of(req);
        let reason = match exchange(req) {
            Err(e) => Some(format!("exchange failed: {e}")),
            Ok(got) => match mode {
                Mode::Strict if &got == want => None,
                Mode::Strict => Some(format!(
                    "response differs ({} bytes, expected {})",
                    got.len(),
                    want.len()
                )),
                Mode::Shape => match (signature(&got), signature(want)) {
                    (Ok(a), Ok(b)) if a == b => None,
                    (Ok(a), Ok(b)) => Some(format!("got {a:?}, expected {b:?}")),
                    (Err(e), _) => Some(format!("undecodable response: {e}")),
                    (_, Err(e)) => Some(format!("undecodable golden response: {e}")),
                },
            },
        };
        if let Some(reason) = reason {
            report.mismatches.push(Mismatch { index, op, reason });
        }
    }
    report
}
