//! Model files.
//!
//! Binary container, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   "ADBN"
//! version      u16       MODEL_FORMAT_VERSION
//! n_sizes      u16       number of entries in the layer-size list
//! sizes        u32 * n_sizes   [input, n_1, ..., n_L, classes]
//! params       f64 * ...       per hidden layer: weights (row-major n_in x n_out),
//!                              hidden bias, visible bias; then class weights
//!                              (row-major n_L x classes) and class bias
//! has_map      u8        0 or 1
//! map          (if has_map) weight template (signed u8, int u8, frac u8),
//!                          activation template (same), class frac bits u8,
//!                          then one u8 fractional budget per hidden neuron
//! meta_len     u32
//! meta         meta_len bytes of JSON (training metadata)
//! crc32        u32       CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::Serialize;
use thiserror::Error;

use super::model::{DdbnModel, HiddenLayer, ModelError, ModelMeta};
use super::precision::{NeuronId, PrecisionMap};
use crate::fixedpoint::FixedPointFormat;

pub const MODEL_MAGIC: &[u8; 4] = b"ADBN";
pub const MODEL_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("model file truncated at byte {0}")]
    Truncated(usize),
    #[error("model file is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn format(&mut self, f: FixedPointFormat) {
        self.u8(f.is_signed() as u8);
        self.u8(f.int_bits() as u8);
        self.u8(f.frac_bits() as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelFileError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(n.checked_mul(8).ok_or(ModelFileError::Truncated(self.pos))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, ModelFileError> {
        let v = self.f64s(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length matches shape"))
    }
    fn format(&mut self) -> Result<FixedPointFormat, ModelFileError> {
        let (s, m, n) = (self.u8()?, self.u8()?, self.u8()?);
        FixedPointFormat::new(s != 0, m as u32, n as u32).map_err(|e| ModelFileError::Malformed(e.to_string()))
    }
}

/// Serializes a model (and optionally its precision map) to bytes.
pub fn encode_model(model: &DdbnModel, map: Option<&PrecisionMap>) -> Result<Vec<u8>, ModelFileError> {
    if let Some(map) = map {
        model.check_precision_shape(map)?;
    }
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u16(MODEL_FORMAT_VERSION);
    w.u16(model.layer_sizes().len() as u16);
    for &s in model.layer_sizes() {
        w.u32(s as u32);
    }
    for layer in model.layers() {
        w.f64s(layer.weights.iter());
        w.f64s(layer.hidden_bias.iter());
        w.f64s(layer.visible_bias.iter());
    }
    w.f64s(model.class_weights().iter());
    w.f64s(model.class_bias().iter());
    match map {
        None => w.u8(0),
        Some(map) => {
            w.u8(1);
            w.format(map.global_format_weights);
            w.format(map.global_format_activations);
            w.u8(map.class_bits() as u8);
            for id in map.neurons() {
                w.u8(map.neuron_bits(id.layer, id.index) as u8);
            }
        }
    }
    let meta = serde_json::to_vec(&model.meta).map_err(|e| ModelFileError::Malformed(e.to_string()))?;
    w.u32(meta.len() as u32);
    w.0.extend_from_slice(&meta);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    Ok(w.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<(DdbnModel, Option<PrecisionMap>), ModelFileError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| ModelFileError::BadMagic)? != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = r.u16()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelFileError::VersionMismatch {
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    if bytes.len() < 10 {
        return Err(ModelFileError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelFileError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 6 };
    let n_sizes = r.u16()? as usize;
    let sizes: Vec<usize> = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
    if sizes.len() < 3 || sizes.contains(&0) {
        return Err(ModelError::BadLayerSizes(sizes).into());
    }
    let n = sizes.len();
    let mut hidden = Vec::new();
    for w in sizes[..n - 1].windows(2) {
        let weights = r.matrix(w[0], w[1])?;
        let hidden_bias = Array1::from(r.f64s(w[1])?);
        let visible_bias = Array1::from(r.f64s(w[0])?);
        hidden.push(HiddenLayer {
            weights,
            hidden_bias,
            visible_bias,
        });
    }
    let class_weights = r.matrix(sizes[n - 2], sizes[n - 1])?;
    let class_bias = Array1::from(r.f64s(sizes[n - 1])?);
    let mut model = DdbnModel::from_parts(hidden, class_weights, class_bias)?;
    let map = match r.u8()? {
        0 => None,
        1 => {
            let wf = r.format()?;
            let af = r.format()?;
            let class_bits = r.u8()? as u32;
            let mut map = PrecisionMap::uniform(model.hidden_sizes(), u32::MAX);
            map.global_format_weights = wf;
            map.global_format_activations = af;
            map.lower_class(class_bits).expect("lowering from max");
            for (l, &size) in model.hidden_sizes().iter().enumerate() {
                for j in 0..size {
                    map.lower_neuron(NeuronId::new(l, j), r.u8()? as u32)
                        .expect("lowering from max");
                }
            }
            Some(map)
        }
        other => return Err(ModelFileError::Malformed(format!("precision flag {other}"))),
    };
    let meta_len = r.u32()? as usize;
    model.meta = serde_json::from_slice::<ModelMeta>(r.take(meta_len)?)
        .map_err(|e| ModelFileError::Malformed(format!("metadata: {e}")))?;
    if r.pos != body.len() {
        return Err(ModelFileError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok((model, map))
}

pub fn save_model(path: &Path, model: &DdbnModel, map: Option<&PrecisionMap>) -> Result<(), ModelFileError> {
    let bytes = encode_model(model, map)?;
    fs::write(path, bytes).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<(DdbnModel, Option<PrecisionMap>), ModelFileError> {
    let bytes = fs::read(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}

#[derive(Serialize)]
struct LayerExport<'a> {
    weights: Vec<Vec<f64>>,
    hidden_bias: &'a [f64],
    visible_bias: &'a [f64],
}

#[derive(Serialize)]
struct ModelExport<'a> {
    format_version: u16,
    layer_sizes: &'a [usize],
    layers: Vec<LayerExport<'a>>,
    class_weights: Vec<Vec<f64>>,
    class_bias: &'a [f64],
    precision: Option<&'a PrecisionMap>,
    meta: &'a ModelMeta,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Human-readable JSON dump of parameters and precision map.
pub fn export_json(model: &DdbnModel, map: Option<&PrecisionMap>) -> String {
    let export = ModelExport {
        format_version: MODEL_FORMAT_VERSION,
        layer_sizes: model.layer_sizes(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerExport {
                weights: rows(&l.weights),
                hidden_bias: l.hidden_bias.as_slice().unwrap(),
                visible_bias: l.visible_bias.as_slice().unwrap(),
            })
            .collect(),
        class_weights: rows(model.class_weights()),
        class_bias: model.class_bias().as_slice().unwrap(),
        precision: map,
        meta: &model.meta,
    };
    serde_json::to_string_pretty(&export).expect("serializable")
}
