//! Versioned binary checkpoints.
//!
//! Layout: the 8 magic bytes `GWSDCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model
//! config, head description, tensor names and shapes), then every tensor as
//! little-endian `f64` in declaration order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    DownstreamHead, EncoderParams, GlossHead, HeadSpec, Model, ModelConfig, ModelError, Parameters,
};

pub const MAGIC: &[u8; 8] = b"GWSDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported checkpoint format (found {found})")]
    VersionMismatch { found: String },
    #[error("tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Gloss(GlossHead),
    Downstream(DownstreamHead),
}

impl HeadParams {
    fn tensors(&self) -> Vec<super::TensorRef<'_>> {
        match self {
            HeadParams::Gloss(h) => h.tensors(),
            HeadParams::Downstream(h) => h.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<super::TensorMut<'_>> {
        match self {
            HeadParams::Gloss(h) => h.tensors_mut(),
            HeadParams::Downstream(h) => h.tensors_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl From<Model<GlossHead>> for Checkpoint {
    fn from(m: Model<GlossHead>) -> Self {
        Checkpoint {
            encoder: m.encoder,
            head: HeadParams::Gloss(m.head),
        }
    }
}

impl From<Model<DownstreamHead>> for Checkpoint {
    fn from(m: Model<DownstreamHead>) -> Self {
        Checkpoint {
            encoder: m.encoder,
            head: HeadParams::Downstream(m.head),
        }
    }
}

impl Checkpoint {
    pub fn into_lmgc(self) -> Option<Model<GlossHead>> {
        match self.head {
            HeadParams::Gloss(head) => Some(Model {
                encoder: self.encoder,
                head,
            }),
            HeadParams::Downstream(_) => None,
        }
    }

    pub fn into_downstream(self) -> Option<Model<DownstreamHead>> {
        match self.head {
            HeadParams::Downstream(head) => Some(Model {
                encoder: self.encoder,
                head,
            }),
            HeadParams::Gloss(_) => None,
        }
    }

    fn all_tensors(&self) -> Vec<super::TensorRef<'_>> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum HeadHeader {
    Gloss,
    Downstream { spec: HeadSpec },
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    head: HeadHeader,
    tensors: Vec<TensorHeader>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> io::Result<()> {
    let tensors = ckpt.all_tensors();
    let header = Header {
        config: ckpt.encoder.config.clone(),
        head: match &ckpt.head {
            HeadParams::Gloss(_) => HeadHeader::Gloss,
            HeadParams::Downstream(h) => HeadHeader::Downstream { spec: h.spec },
        },
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in &tensors {
        for x in t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, CheckpointError> {
    let format = |e: io::Error| CheckpointError::Format(e.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(format)?;
    if &magic != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            found: format!("magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf).map_err(format)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: format!("version {version}"),
        });
    }
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf).map_err(format)?;
    let len = usize::try_from(u64::from_le_bytes(u64buf))
        .map_err(|_| CheckpointError::Format("header length overflows".into()))?;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(format)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let encoder = EncoderParams::init(&header.config)?;
    let head = match header.head {
        HeadHeader::Gloss => HeadParams::Gloss(GlossHead::init(&header.config)),
        HeadHeader::Downstream { spec } => {
            HeadParams::Downstream(DownstreamHead::init(&header.config, spec)?)
        }
    };
    let mut ckpt = Checkpoint { encoder, head };

    let expected: Vec<(String, Vec<usize>)> = ckpt
        .all_tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(CheckpointError::Format(format!(
            "{} tensors declared, {} expected",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), declared) in expected.iter().zip(&header.tensors) {
        if *name != declared.name || *shape != declared.shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: declared.name.clone(),
                expected: shape.clone(),
                found: declared.shape.clone(),
            });
        }
    }
    let mut buf = [0u8; 8];
    let mut tensors = ckpt.encoder.tensors_mut();
    tensors.extend(ckpt.head.tensors_mut());
    for t in tensors {
        for x in t.data.iter_mut() {
            input.read_exact(&mut buf).map_err(format)?;
            *x = f64::from_le_bytes(buf);
        }
    }
    if input.read(&mut buf).map_err(format)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after tensors".into()));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    write_checkpoint(ckpt, &mut out).and_then(|_| out.flush()).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = File::open(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_checkpoint(BufReader::new(file))
}

/// Loads a checkpoint and requires its tensor shapes to match `config`.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    check_shapes(&ckpt.encoder, config)?;
    Ok(ckpt)
}

pub fn check_shapes(encoder: &EncoderParams, config: &ModelConfig) -> Result<(), CheckpointError> {
    let template = EncoderParams::init(config)?;
    for (want, have) in template.tensors().iter().zip(encoder.tensors()) {
        if want.name != have.name || want.shape != have.shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: want.name.clone(),
                expected: want.shape.clone(),
                found: have.shape.clone(),
            });
        }
    }
    if template.layers.len() != encoder.layers.len() {
        return Err(CheckpointError::ShapeMismatch {
            tensor: "layers".into(),
            expected: vec![template.layers.len()],
            found: vec![encoder.layers.len()],
        });
    }
    Ok(())
}
