//! Wire format for out-of-process backends.
//!
//! ```text
//! frame  = u32 LE body length | body
//! body   = JSON header line '\n' | tensor* (tensor file format, back to back)
//! header = {"op": .., "request_id": n, params..}            request
//!        | {"request_id": n, results..}                     success
//!        | {"request_id": n, "error": {"code", "message"}}  failure
//! ```
//!
//! Header keys are written in sorted order, so equal messages encode to
//! identical bytes. One request is in flight per connection.

use std::io::{self, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    Backend, BackendDescriptor, BackendError, BackendResult, Capability, ClassifierOutput,
    LabeledImage, LayerMaps, ModelBlob, SegmenterSample,
};
use crate::grid::{Grid2, Mask2D, Mask3D};
use crate::prompting::PromptSet;
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Frame {
    pub fn new(header: Map<String, Value>, tensors: Vec<Tensor>) -> Self {
        Self { header, tensors }
    }

    /// Body bytes, without the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = serde_json::to_vec(&self.header).expect("json map serializes");
        body.push(b'\n');
        for t in &self.tensors {
            t.write_to(&mut body).expect("writing to a Vec cannot fail");
        }
        body
    }

    pub fn decode(body: &[u8]) -> BackendResult<Self> {
        let nl = body
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| BackendError::protocol("frame has no header line"))?;
        let header: Map<String, Value> = serde_json::from_slice(&body[..nl])
            .map_err(|e| BackendError::protocol(format!("bad frame header: {e}")))?;
        let tensors = Tensor::read_all(&body[nl + 1..])
            .map_err(|e| BackendError::protocol(format!("bad frame payload: {e}")))?;
        Ok(Self { header, tensors })
    }

    pub fn request_id(&self) -> Option<u64> {
        self.header.get("request_id").and_then(Value::as_u64)
    }

    fn take_tensor(&mut self, what: &str) -> BackendResult<Tensor> {
        if self.tensors.is_empty() {
            return Err(BackendError::protocol(format!("missing tensor `{what}`")));
        }
        Ok(self.tensors.remove(0))
    }

    fn param<T: for<'de> Deserialize<'de>>(&self, key: &str) -> BackendResult<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| BackendError::protocol(format!("missing field `{key}`")))?;
        T::deserialize(v).map_err(|e| BackendError::protocol(format!("field `{key}`: {e}")))
    }
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// `None` on a clean end of stream before a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

fn tensor_err(e: crate::Error) -> BackendError {
    BackendError::protocol(e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Request {
    Describe,
    /// Returns its params and tensors unchanged.
    Echo {
        params: Value,
        tensors: Vec<Tensor>,
    },
    EmbedImage(Grid2<f32>),
    EmbedText(String),
    TrainClassifier(Vec<LabeledImage>),
    ClassifyWithMaps {
        model: ModelBlob,
        image: Grid2<f32>,
    },
    SegmentPrompted {
        image: Grid2<f32>,
        prompts: PromptSet,
    },
    TrainSegmenter(Vec<SegmenterSample>),
    PredictVolume {
        model: ModelBlob,
        volume: Volume,
    },
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Describe => "describe",
            Request::Echo { .. } => "echo",
            Request::EmbedImage(_) => "embed_image",
            Request::EmbedText(_) => "embed_text",
            Request::TrainClassifier(_) => "train_classifier",
            Request::ClassifyWithMaps { .. } => "classify_with_maps",
            Request::SegmentPrompted { .. } => "segment_prompted",
            Request::TrainSegmenter(_) => "train_segmenter",
            Request::PredictVolume { .. } => "predict_volume",
        }
    }

    pub fn capability(&self) -> Option<Capability> {
        match self {
            Request::Describe | Request::Echo { .. } => None,
            Request::EmbedImage(_) => Some(Capability::EmbedImage),
            Request::EmbedText(_) => Some(Capability::EmbedText),
            Request::TrainClassifier(_) => Some(Capability::TrainClassifier),
            Request::ClassifyWithMaps { .. } => Some(Capability::GradientMaps),
            Request::SegmentPrompted { .. } => Some(Capability::SegmentPrompted),
            Request::TrainSegmenter(_) => Some(Capability::TrainSegmenter),
            Request::PredictVolume { .. } => Some(Capability::PredictVolume),
        }
    }

    pub fn to_frame(&self, request_id: u64) -> Frame {
        let mut header = Map::new();
        header.insert("op".into(), json!(self.op()));
        header.insert("request_id".into(), json!(request_id));
        let mut tensors = Vec::new();
        match self {
            Request::Describe => {}
            Request::Echo { params, tensors: t } => {
                header.insert("params".into(), params.clone());
                tensors.extend(t.iter().cloned());
            }
            Request::EmbedImage(image) => tensors.push(Tensor::from_image(image)),
            Request::EmbedText(text) => {
                header.insert("text".into(), json!(text));
            }
            Request::TrainClassifier(samples) => {
                let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
                header.insert("labels".into(), json!(labels));
                tensors.extend(samples.iter().map(|s| Tensor::from_image(&s.image)));
            }
            Request::ClassifyWithMaps { model, image } => {
                tensors.push(Tensor::from_blob(&model.0));
                tensors.push(Tensor::from_image(image));
            }
            Request::SegmentPrompted { image, prompts } => {
                header.insert("prompts".into(), serde_json::to_value(prompts).expect("prompts"));
                tensors.push(Tensor::from_image(image));
            }
            Request::TrainSegmenter(pool) => {
                for s in pool {
                    tensors.push(Tensor::from_volume(&s.volume));
                    tensors.push(Tensor::from_mask3(&s.label));
                }
            }
            Request::PredictVolume { model, volume } => {
                tensors.push(Tensor::from_blob(&model.0));
                tensors.push(Tensor::from_volume(volume));
            }
        }
        Frame { header, tensors }
    }

    pub fn from_frame(mut frame: Frame) -> BackendResult<Self> {
        let op: String = frame.param("op")?;
        let req = match op.as_str() {
            "describe" => Request::Describe,
            "echo" => Request::Echo {
                params: frame.header.get("params").cloned().unwrap_or(Value::Null),
                tensors: std::mem::take(&mut frame.tensors),
            },
            "embed_image" => {
                Request::EmbedImage(frame.take_tensor("image")?.into_image().map_err(tensor_err)?)
            }
            "embed_text" => Request::EmbedText(frame.param("text")?),
            "train_classifier" => {
                let labels: Vec<u8> = frame.param("labels")?;
                if labels.len() != frame.tensors.len() {
                    return Err(BackendError::protocol(format!(
                        "{} labels for {} images",
                        labels.len(),
                        frame.tensors.len()
                    )));
                }
                let samples = labels
                    .into_iter()
                    .zip(std::mem::take(&mut frame.tensors))
                    .map(|(label, t)| {
                        Ok(LabeledImage {
                            image: t.into_image().map_err(tensor_err)?,
                            label,
                        })
                    })
                    .collect::<BackendResult<_>>()?;
                Request::TrainClassifier(samples)
            }
            "classify_with_maps" => {
                let model = ModelBlob(frame.take_tensor("model")?.into_blob().map_err(tensor_err)?);
                let image = frame.take_tensor("image")?.into_image().map_err(tensor_err)?;
                Request::ClassifyWithMaps { model, image }
            }
            "segment_prompted" => {
                let prompts = frame.param("prompts")?;
                let image = frame.take_tensor("image")?.into_image().map_err(tensor_err)?;
                Request::SegmentPrompted { image, prompts }
            }
            "train_segmenter" => {
                if !frame.tensors.len().is_multiple_of(2) {
                    return Err(BackendError::protocol("volume/label tensors must pair up"));
                }
                let mut pool = Vec::new();
                let mut it = std::mem::take(&mut frame.tensors).into_iter();
                while let (Some(v), Some(m)) = (it.next(), it.next()) {
                    let n = pool.len();
                    pool.push(SegmenterSample {
                        volume: v.into_volume(&format!("sample_{n}")).map_err(tensor_err)?,
                        label: m.into_mask3().map_err(tensor_err)?,
                    });
                }
                Request::TrainSegmenter(pool)
            }
            "predict_volume" => {
                let model = ModelBlob(frame.take_tensor("model")?.into_blob().map_err(tensor_err)?);
                let volume = frame
                    .take_tensor("volume")?
                    .into_volume("volume")
                    .map_err(tensor_err)?;
                Request::PredictVolume { model, volume }
            }
            other => return Err(BackendError::protocol(format!("unknown op `{other}`"))),
        };
        if !frame.tensors.is_empty() {
            return Err(BackendError::protocol(format!(
                "{} unexpected trailing tensors",
                frame.tensors.len()
            )));
        }
        Ok(req)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    id: String,
    activations: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Response {
    Descriptor(BackendDescriptor),
    Echo {
        params: Value,
        tensors: Vec<Tensor>,
    },
    Embedding(Vec<f64>),
    Model(ModelBlob),
    Classified(ClassifierOutput),
    Mask2(Mask2D),
    Mask3(Mask3D),
    Error(BackendError),
}

impl Response {
    pub fn to_frame(&self, request_id: Option<u64>) -> Frame {
        let mut header = Map::new();
        header.insert("request_id".into(), json!(request_id));
        let mut tensors = Vec::new();
        match self {
            Response::Descriptor(d) => {
                header.insert("descriptor".into(), serde_json::to_value(d).expect("descriptor"));
            }
            Response::Echo { params, tensors: t } => {
                header.insert("params".into(), params.clone());
                tensors.extend(t.iter().cloned());
            }
            Response::Embedding(v) => {
                header.insert("embedding".into(), json!(v));
            }
            Response::Model(m) => tensors.push(Tensor::from_blob(&m.0)),
            Response::Classified(out) => {
                header.insert("probability".into(), json!(out.probability));
                let layers: Vec<LayerHeader> = out
                    .layers
                    .iter()
                    .map(|l| LayerHeader {
                        id: l.id.clone(),
                        activations: l.activations.is_some(),
                    })
                    .collect();
                header.insert("layers".into(), serde_json::to_value(layers).expect("layers"));
                header.insert("cam".into(), json!(out.cam.is_some()));
                for l in &out.layers {
                    tensors.push(channels(&l.gradients));
                    if let Some(a) = &l.activations {
                        tensors.push(channels(a));
                    }
                }
                if let Some(cam) = &out.cam {
                    tensors.push(Tensor::from_image(cam));
                }
            }
            Response::Mask2(m) => tensors.push(Tensor::from_mask2(m)),
            Response::Mask3(m) => tensors.push(Tensor::from_mask3(m)),
            Response::Error(e) => {
                header.insert("error".into(), serde_json::to_value(e).expect("error"));
            }
        }
        Frame { header, tensors }
    }

    /// Interprets a response to a request of kind `op`.
    pub fn from_frame(op: &str, mut frame: Frame) -> BackendResult<Self> {
        if let Some(e) = frame.header.get("error") {
            let e = BackendError::deserialize(e)
                .map_err(|e| BackendError::protocol(format!("bad error frame: {e}")))?;
            return Ok(Response::Error(e));
        }
        let resp = match op {
            "describe" => Response::Descriptor(frame.param("descriptor")?),
            "echo" => Response::Echo {
                params: frame.header.get("params").cloned().unwrap_or(Value::Null),
                tensors: std::mem::take(&mut frame.tensors),
            },
            "embed_image" | "embed_text" => Response::Embedding(frame.param("embedding")?),
            "train_classifier" | "train_segmenter" => Response::Model(ModelBlob(
                frame.take_tensor("model")?.into_blob().map_err(tensor_err)?,
            )),
            "classify_with_maps" => {
                let probability: f64 = frame.param("probability")?;
                let layer_heads: Vec<LayerHeader> = frame.param("layers")?;
                let has_cam: bool = frame.param("cam")?;
                let mut layers = Vec::new();
                for l in layer_heads {
                    let gradients = frame.take_tensor("gradients")?.into_channels().map_err(tensor_err)?;
                    let activations = if l.activations {
                        Some(frame.take_tensor("activations")?.into_channels().map_err(tensor_err)?)
                    } else {
                        None
                    };
                    layers.push(LayerMaps {
                        id: l.id,
                        gradients,
                        activations,
                    });
                }
                let cam = if has_cam {
                    Some(frame.take_tensor("cam")?.into_image().map_err(tensor_err)?)
                } else {
                    None
                };
                Response::Classified(ClassifierOutput {
                    probability,
                    layers,
                    cam,
                })
            }
            "segment_prompted" => {
                Response::Mask2(frame.take_tensor("mask")?.into_mask2().map_err(tensor_err)?)
            }
            "predict_volume" => {
                Response::Mask3(frame.take_tensor("mask")?.into_mask3().map_err(tensor_err)?)
            }
            other => return Err(BackendError::protocol(format!("unknown op `{other}`"))),
        };
        if !frame.tensors.is_empty() {
            return Err(BackendError::protocol("unexpected trailing tensors"));
        }
        Ok(resp)
    }
}

fn channels(grids: &[Grid2<f32>]) -> Tensor {
    Tensor::from_channels(grids).unwrap_or_else(|_| Tensor::f32(vec![0, 0, 0], Vec::new()).expect("empty"))
}

/// Runs one decoded request against `backend`.
pub fn dispatch(backend: &dyn Backend, req: Request) -> Response {
    let descriptor = backend.descriptor();
    if let Some(cap) = req.capability() {
        if let Err(e) = descriptor.require(cap) {
            return Response::Error(e);
        }
    }
    let out = match req {
        Request::Describe => Ok(Response::Descriptor(descriptor)),
        Request::Echo { params, tensors } => Ok(Response::Echo { params, tensors }),
        Request::EmbedImage(image) => backend.embed_image(&image).map(Response::Embedding),
        Request::EmbedText(text) => backend.embed_text(&text).map(Response::Embedding),
        Request::TrainClassifier(samples) => backend.train_classifier(&samples).map(Response::Model),
        Request::ClassifyWithMaps { model, image } => {
            backend.classify_with_maps(&model, &image).map(Response::Classified)
        }
        Request::SegmentPrompted { image, prompts } => {
            backend.segment_prompted(&image, &prompts).map(Response::Mask2)
        }
        Request::TrainSegmenter(pool) => backend.train_segmenter(&pool).map(Response::Model),
        Request::PredictVolume { model, volume } => {
            backend.predict_volume(&model, &volume).map(Response::Mask3)
        }
    };
    out.unwrap_or_else(Response::Error)
}

/// Maps a request body to a response body. Malformed requests produce an
/// error frame rather than failing.
pub fn handle_body(backend: &dyn Backend, body: &[u8]) -> Vec<u8> {
    let (id, resp) = match Frame::decode(body) {
        Err(e) => (None, Response::Error(e)),
        Ok(frame) => {
            let id = frame.request_id();
            match Request::from_frame(frame) {
                Ok(req) => (id, dispatch(backend, req)),
                Err(e) => (id, Response::Error(e)),
            }
        }
    };
    resp.to_frame(id).encode()
}

/// Answers frames until the peer closes the stream.
pub fn serve<R: Read, W: Write>(backend: &dyn Backend, reader: R, mut writer: W) -> io::Result<()> {
    let mut reader = BufReader::new(reader);
    while let Some(body) = read_frame(&mut reader)? {
        write_frame(&mut writer, &handle_body(backend, &body))?;
    }
    Ok(())
}
