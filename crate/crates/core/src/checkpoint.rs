//! Single-file checkpoints: a text header naming every parameter block and
//! tensor shape, followed by the tensors as little-endian `f32`.
//!
//! ```text
//! # csri-checkpoint v1
//! config_hash 3f2a...
//! step 400
//! seed 7
//! variant csri
//! stage 2
//! model {"sr":{...},"fr":{...}}
//! block trunk
//! tensor conv0.weight 8 9
//! ...
//! end
//! <payload>
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CsriModel, ModelConfig};
use crate::scalar::Scalar;
use crate::trainer::{Centers, TrainState, Variant};

const MAGIC: &str = "# csri-checkpoint v1";
const OPTIM_PREFIX: &str = "optim.";
const CENTERS_BLOCK: &str = "centers";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub variant: Variant,
    /// 1 after the first stage of a schedule, 2 after the second.
    pub stage: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parsed header, without the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub blocks: Vec<(String, Vec<TensorEntry>)>,
}

impl CheckpointHeader {
    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _)| n.as_str()).collect()
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn entries<F>(tensors: &[(String, ArrayViewD<'_, F>)]) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Serializes a training state; the bytes depend only on the state and meta.
pub fn to_bytes<F: Scalar>(state: &TrainState<F>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blocks: Vec<(String, Vec<(String, ArrayViewD<'_, F>)>)> = state
        .model
        .blocks()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    for (n, t) in state.velocity.blocks() {
        blocks.push((format!("{OPTIM_PREFIX}{n}"), t));
    }
    if let Some(c) = &state.centers {
        blocks.push((
            CENTERS_BLOCK.to_string(),
            vec![
                ("synthetic".to_string(), c.synthetic.view().into_dyn()),
                ("native".to_string(), c.native.view().into_dyn()),
            ],
        ));
    }

    let model_json = serde_json::to_string(&state.model.config).map_err(|e| bad(e.to_string()))?;
    let mut head = format!(
        "{MAGIC}\nconfig_hash {}\nstep {}\nseed {}\nvariant {}\nstage {}\nmodel {model_json}\n",
        meta.config_hash, state.step, state.seed, meta.variant, meta.stage
    );
    for (name, tensors) in &blocks {
        head.push_str(&format!("block {name}\n"));
        for e in entries(tensors) {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {} {}\n", e.name, dims.join(" ")));
        }
    }
    head.push_str("end\n");

    let mut out = head.into_bytes();
    for (_, tensors) in &blocks {
        for (_, t) in tensors {
            for &v in t.iter() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Scalar>(path: &Path, state: &TrainState<F>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(state, meta)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| bad(format!("header ends before {key:?}")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected {key:?}, found {line:?}")))
}

fn number<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("{key} is not a number: {s:?}")))
}

/// Splits `bytes` into the parsed header and the payload.
pub fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("header terminator not found"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[end + marker.len()..];

    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let config_hash = field(&mut lines, "config_hash")?.to_string();
    let step = number(field(&mut lines, "step")?, "step")?;
    let seed = number(field(&mut lines, "seed")?, "seed")?;
    let variant: Variant = field(&mut lines, "variant")?.parse().map_err(|e: Error| bad(e.to_string()))?;
    let stage = number(field(&mut lines, "stage")?, "stage")?;
    let model: ModelConfig =
        serde_json::from_str(field(&mut lines, "model")?).map_err(|e| bad(format!("model config: {e}")))?;

    let mut blocks: Vec<(String, Vec<TensorEntry>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for line in lines {
        if let Some(name) = line.strip_prefix("block ") {
            if !seen.insert(name.to_string()) {
                return Err(bad(format!("duplicate block {name:?}")));
            }
            blocks.push((name.to_string(), Vec::new()));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts.map(|d| number(d, "dimension")).collect::<Result<Vec<usize>>>()?;
            let block = blocks.last_mut().ok_or_else(|| bad("tensor before any block"))?;
            block.1.push(TensorEntry { name, shape });
        } else {
            return Err(bad(format!("unexpected header line {line:?}")));
        }
    }
    let header = CheckpointHeader {
        meta: CheckpointMeta {
            config_hash,
            variant,
            stage,
        },
        step,
        seed,
        model,
        blocks,
    };
    Ok((header, payload))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = read(path)?;
    Ok(parse_header(&bytes)?.0)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

struct Payload<'a> {
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn fill<F: Scalar>(&mut self, entry: &TensorEntry, mut dst: ArrayViewMutD<'_, F>) -> Result<()> {
        if dst.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                dst.shape()
            )));
        }
        let n = dst.len() * 4;
        if self.bytes.len() < n {
            return Err(bad(format!("payload truncated in tensor {}", entry.name)));
        }
        let (chunk, rest) = self.bytes.split_at(n);
        for (d, b) in dst.iter_mut().zip(chunk.chunks_exact(4)) {
            *d = F::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        }
        self.bytes = rest;
        Ok(())
    }
}

fn fill_model<F: Scalar>(
    model: &mut CsriModel<F>,
    prefix: &str,
    header: &CheckpointHeader,
    payload: &mut Payload<'_>,
) -> Result<()> {
    for (name, tensors) in model.blocks_mut() {
        let full = format!("{prefix}{name}");
        let entries = &header
            .blocks
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| bad(format!("missing block {full:?}")))?
            .1;
        if entries.len() != tensors.len() {
            return Err(bad(format!("block {full:?} has {} tensors, model expects {}", entries.len(), tensors.len())));
        }
        for (e, (tname, t)) in entries.iter().zip(tensors) {
            if e.name != tname {
                return Err(bad(format!("block {full:?}: expected tensor {tname}, found {}", e.name)));
            }
            payload.fill(e, t)?;
        }
    }
    Ok(())
}

/// Rebuilds a training state from checkpoint bytes.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<(CheckpointMeta, TrainState<F>)> {
    let (header, payload) = parse_header(bytes)?;
    header.model.validate()?;
    let mut model = CsriModel::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut velocity = model.zeros_like();

    let expected: Vec<String> = model
        .blocks()
        .iter()
        .map(|(n, _)| n.to_string())
        .chain(model.blocks().iter().map(|(n, _)| format!("{OPTIM_PREFIX}{n}")))
        .collect();
    let has_centers = header.blocks.iter().any(|(n, _)| n == CENTERS_BLOCK);
    let names: Vec<String> = header.blocks.iter().map(|(n, _)| n.clone()).collect();
    let mut want = expected;
    if has_centers {
        want.push(CENTERS_BLOCK.to_string());
    }
    if names != want {
        return Err(bad(format!("block list {names:?} does not match the model's {want:?}")));
    }

    // Blocks are laid out in header order: model, optimizer, centers.
    let mut payload = Payload { bytes: payload };
    fill_model(&mut model, "", &header, &mut payload)?;
    fill_model(&mut velocity, OPTIM_PREFIX, &header, &mut payload)?;
    let centers = if has_centers {
        let d = header.model.fr.embedding_dim;
        let mut c = Centers {
            synthetic: Array2::zeros((header.model.fr.synthetic_classes, d)),
            native: Array2::zeros((header.model.fr.native_classes, d)),
        };
        let entries = &header.blocks.last().expect("centers block").1;
        if entries.len() != 2 {
            return Err(bad("centers block must hold two tensors"));
        }
        payload.fill(&entries[0], c.synthetic.view_mut().into_dyn())?;
        payload.fill(&entries[1], c.native.view_mut().into_dyn())?;
        Some(c)
    } else {
        None
    };
    if !payload.bytes.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.bytes.len())));
    }
    let state = TrainState {
        model,
        velocity,
        centers,
        step: header.step,
        seed: header.seed,
    };
    Ok((header.meta, state))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointMeta, TrainState<F>)> {
    from_bytes(&read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
