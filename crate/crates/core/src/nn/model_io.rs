//! Model file layout (all integers and floats little-endian):
//!
//! ```text
//! hazenet joint-t-A-estimator rev1\n       human-readable header line
//! u32  format version (1)
//! u32  layer count
//! per layer: u8 kind (0 = conv, 1 = dense), u32 kernel (0 for dense),
//!            u32 input channels/units, u32 output channels/units
//! u8   1 if optimizer state follows, else 0
//! per layer: f64 weights[...], f64 biases[...]
//! if optimizer state: the same arrays for squared-gradient averages,
//!                     then for squared-update averages
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::network::{Gradients, LayerKind, LayerSpec, LayerTensors, NetworkParams, OptimizerState, ARCHITECTURE};

pub const HEADER: &str = "hazenet joint-t-A-estimator rev1\n";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_model(params: &NetworkParams) -> Vec<u8> {
    let mut out = HEADER.as_bytes().to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ARCHITECTURE.len() as u32).to_le_bytes());
    for spec in &ARCHITECTURE {
        let (kind, kernel) = match spec.kind {
            LayerKind::Conv { kernel } => (0u8, kernel as u32),
            LayerKind::Dense => (1u8, 0),
        };
        out.push(kind);
        out.extend_from_slice(&kernel.to_le_bytes());
        out.extend_from_slice(&(spec.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(spec.outputs as u32).to_le_bytes());
    }
    out.push(1);
    let sections = [params.layers(), &params.optimizer.sq_grad.layers, &params.optimizer.sq_update.layers];
    for layers in sections {
        for v in layers.iter().flat_map(|l| l.values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<NetworkParams> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    if !bytes.starts_with(HEADER.as_bytes()) {
        let line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("unrecognized model header {:?}", String::from_utf8_lossy(line)),
        });
    }
    let mut r = Reader {
        bytes,
        pos: HEADER.len(),
    };
    let version = r.u32("format version").map_err(corrupt)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("model format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let count = r.u32("layer count").map_err(corrupt)? as usize;
    let mut specs = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let what = format!("descriptor of layer {i}");
        let kind = r.u8(&what).map_err(corrupt)?;
        let kernel = r.u32(&what).map_err(corrupt)? as usize;
        let inputs = r.u32(&what).map_err(corrupt)? as usize;
        let outputs = r.u32(&what).map_err(corrupt)? as usize;
        let kind = match kind {
            0 => LayerKind::Conv { kernel },
            1 => LayerKind::Dense,
            k => return Err(corrupt(format!("unknown kind {k} for layer {i}"))),
        };
        specs.push(LayerSpec { kind, inputs, outputs });
    }
    for (i, (found, expected)) in specs.iter().zip(&ARCHITECTURE).enumerate() {
        if found != expected {
            return Err(Error::LayerMismatch {
                layer: i,
                reason: format!("file has {found:?}, architecture expects {expected:?}"),
            });
        }
    }
    if count != ARCHITECTURE.len() {
        return Err(Error::LayerMismatch {
            layer: count.min(ARCHITECTURE.len()),
            reason: format!("file has {count} layers, architecture has {}", ARCHITECTURE.len()),
        });
    }
    let has_state = match r.u8("optimizer flag").map_err(corrupt)? {
        0 => false,
        1 => true,
        f => return Err(corrupt(format!("invalid optimizer flag {f}"))),
    };
    let mut read_section = |name: &str| -> Result<Vec<LayerTensors>> {
        ARCHITECTURE
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let weights = r.f64s(spec.weight_count(), &format!("{name} weights of layer {i}")).map_err(corrupt)?;
                let biases = r.f64s(spec.outputs, &format!("{name} biases of layer {i}")).map_err(corrupt)?;
                Ok(LayerTensors { weights, biases })
            })
            .collect()
    };
    let layers = read_section("parameter")?;
    let optimizer = if has_state {
        OptimizerState {
            sq_grad: Gradients {
                layers: read_section("squared-gradient")?,
            },
            sq_update: Gradients {
                layers: read_section("squared-update")?,
            },
        }
    } else {
        OptimizerState::fresh()
    };
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if layers.iter().flat_map(|l| l.values()).any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite weight".into()));
    }
    NetworkParams::from_parts(layers, optimizer).map_err(|e| match e {
        Error::InvalidValue(reason) => corrupt(reason),
        other => other,
    })
}

pub fn save_model(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(params)).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes, path)
}
