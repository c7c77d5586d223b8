//! Binary checkpoints. Little-endian throughout:
//!
//! ```text
//! header:  magic "ASGE" | version u32 | arch hash (32 bytes, SHA-256)
//! records: name (u32 len + utf8) | kind u8 | payload len u64 | payload
//! ```
//!
//! Record kinds: `0` = f32 tensor (`u32 ndim`, `u32` dims, f32 data),
//! `1` = raw bytes. Projection heads are stored as
//! `(seed: u64, in_dim: u32, n_classes: u32)` only and regenerated on load;
//! run-position metadata travels as one JSON record. A checkpoint restores a
//! bit-identical training continuation in deterministic mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_network, ArchSpec, Network};
use crate::supervision::make_projection;
use crate::tensor::Tensor;
use crate::trainer::opt::{OptimizerHyper, ParamState, Schedule};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ASGE";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;

/// Run-position and hyperparameter metadata embedded in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Epoch the run is positioned in (0-based).
    pub epoch: u64,
    /// Next batch index within the epoch; 0 means an epoch boundary.
    pub batch_idx: u64,
    /// 0-based best-validating layer, once recorded.
    pub best_layer: Option<usize>,
    pub best_val_acc: f64,
    /// Per-layer training-loss sums accumulated so far this epoch.
    pub loss_sums: Vec<f64>,
    pub classifier_loss_sum: f64,
    pub optimizer: OptimizerHyper,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub augmentation: crate::data::AugmentationPolicy,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub meta: CheckpointMeta,
    pub layer_weights: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub layer_heads: Vec<(u64, u32, u32)>,
    pub layer_opt: Vec<(ParamState, ParamState)>,
    pub classifier: Option<ClassifierSnapshot>,
}

#[derive(Clone, Debug)]
pub struct ClassifierSnapshot {
    pub weights: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub w_state: ParamState,
    pub b_state: ParamState,
}

impl Checkpoint {
    /// Snapshots a network plus run metadata.
    pub fn capture(network: &Network, meta: CheckpointMeta) -> Self {
        let layer_weights = network
            .layers
            .iter()
            .map(|l| (l.conv.weights.clone(), l.conv.bias.clone()))
            .collect();
        let layer_heads = network
            .layers
            .iter()
            .map(|l| (l.head.seed(), l.head.in_dim() as u32, l.head.n_classes() as u32))
            .collect();
        let layer_opt = network
            .layers
            .iter()
            .map(|l| (l.w_state.clone(), l.b_state.clone()))
            .collect();
        let classifier = network.classifier.as_ref().map(|c| ClassifierSnapshot {
            weights: c.weights.clone(),
            bias: c.bias.clone(),
            w_state: c.w_state.clone(),
            b_state: c.b_state.clone(),
        });
        Checkpoint {
            arch: network.spec.clone(),
            meta,
            layer_weights,
            layer_heads,
            layer_opt,
            classifier,
        }
    }

    /// Rebuilds the network this checkpoint describes. Heads are regenerated
    /// from their stored seeds and verified against the stored dimensions.
    pub fn restore_network(&self) -> Result<Network> {
        let mut network = build_network(&self.arch, self.meta.seed, self.meta.optimizer)?;
        if network.layers.len() != self.layer_weights.len() {
            return Err(Error::format(format!(
                "checkpoint has {} layers, arch builds {}",
                self.layer_weights.len(),
                network.layers.len()
            )));
        }
        for (i, layer) in network.layers.iter_mut().enumerate() {
            let (w, b) = &self.layer_weights[i];
            if w.shape() != layer.conv.weights.shape() || b.shape() != layer.conv.bias.shape() {
                return Err(Error::format(format!(
                    "layer {} tensor shapes do not match the architecture",
                    i + 1
                )));
            }
            layer.conv.weights = w.clone();
            layer.conv.bias = b.clone();
            let (seed, in_dim, n) = self.layer_heads[i];
            let head = make_projection(seed, in_dim as usize, n as usize);
            if head.in_dim() != layer.head.in_dim() || head.n_classes() != layer.head.n_classes() {
                return Err(Error::format(format!(
                    "layer {} head dimensions do not match the architecture",
                    i + 1
                )));
            }
            layer.head = head;
            layer.w_state = self.layer_opt[i].0.clone();
            layer.b_state = self.layer_opt[i].1.clone();
        }
        match (&mut network.classifier, &self.classifier) {
            (Some(dst), Some(src)) => {
                if dst.weights.shape() != src.weights.shape() {
                    return Err(Error::format(
                        "classifier shape does not match the architecture",
                    ));
                }
                dst.weights = src.weights.clone();
                dst.bias = src.bias.clone();
                dst.w_state = src.w_state.clone();
                dst.b_state = src.b_state.clone();
            }
            (None, None) => {}
            _ => {
                return Err(Error::format(
                    "checkpoint and architecture disagree about the classifier",
                ))
            }
        }
        network.best_layer = self.meta.best_layer;
        Ok(network)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(arch_hash: &[u8; 32]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(arch_hash);
        Writer { buf }
    }

    fn record_header(&mut self, name: &str, kind: u8, payload_len: usize) {
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        let payload = 4 + 4 * t.shape().len() + 4 * t.len();
        self.record_header(name, KIND_TENSOR, payload);
        self.buf
            .extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, name: &str, payload: &[u8]) {
        self.record_header(name, KIND_BYTES, payload.len());
        self.buf.extend_from_slice(payload);
    }
}

fn encode_param_state(state: &ParamState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * (state.m.len() + state.v.len()));
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
    for v in &state.m {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(state.v.len() as u32).to_le_bytes());
    for v in &state.v {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_param_state(bytes: &[u8], hyper: OptimizerHyper) -> Result<ParamState> {
    let err = || Error::format("truncated optimizer state record");
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = bytes.get(*pos..*pos + n).ok_or_else(err)?;
        *pos += n;
        Ok(slice)
    };
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let m_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut m = Vec::with_capacity(m_len);
    for _ in 0..m_len {
        m.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
    }
    let v_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut v = Vec::with_capacity(v_len);
    for _ in 0..v_len {
        v.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
    }
    Ok(ParamState { hyper, m, v, step })
}

/// Serializes a checkpoint to its binary file format.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = Writer::new(&checkpoint.arch.hash());
    w.bytes(
        "arch/json",
        &serde_json::to_vec(&checkpoint.arch).expect("arch serializes"),
    );
    w.bytes(
        "meta/json",
        &serde_json::to_vec(&checkpoint.meta).expect("meta serializes"),
    );
    for (i, (weights, bias)) in checkpoint.layer_weights.iter().enumerate() {
        w.tensor(&format!("layer{i}/weights"), weights);
        w.tensor(&format!("layer{i}/bias"), bias);
        let (seed, in_dim, n) = checkpoint.layer_heads[i];
        let mut head = Vec::with_capacity(16);
        head.extend_from_slice(&seed.to_le_bytes());
        head.extend_from_slice(&in_dim.to_le_bytes());
        head.extend_from_slice(&n.to_le_bytes());
        w.bytes(&format!("layer{i}/head"), &head);
        let (ws, bs) = &checkpoint.layer_opt[i];
        w.bytes(&format!("layer{i}/opt_w"), &encode_param_state(ws));
        w.bytes(&format!("layer{i}/opt_b"), &encode_param_state(bs));
    }
    if let Some(classifier) = &checkpoint.classifier {
        w.tensor("classifier/weights", &classifier.weights);
        w.tensor("classifier/bias", &classifier.bias);
        w.bytes("classifier/opt_w", &encode_param_state(&classifier.w_state));
        w.bytes("classifier/opt_b", &encode_param_state(&classifier.b_state));
    }
    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

enum Record {
    Tensor(Tensor<f32>),
    Bytes(Vec<u8>),
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Record>> {
    let err = |what: &str| Error::format(format!("{}: {what}", path.display()));
    if bytes.len() < 40 {
        return Err(err("file shorter than the checkpoint header"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(&format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut records = BTreeMap::new();
    let mut pos = 40usize;
    while pos < bytes.len() {
        let name_len =
            u32::from_le_bytes(bytes.get(pos..pos + 4).ok_or_else(|| err("truncated record"))?.try_into().unwrap())
                as usize;
        pos += 4;
        let name = String::from_utf8(
            bytes
                .get(pos..pos + name_len)
                .ok_or_else(|| err("truncated record name"))?
                .to_vec(),
        )
        .map_err(|_| err("record name is not utf-8"))?;
        pos += name_len;
        let kind = *bytes.get(pos).ok_or_else(|| err("truncated record kind"))?;
        pos += 1;
        let payload_len = u64::from_le_bytes(
            bytes
                .get(pos..pos + 8)
                .ok_or_else(|| err("truncated record length"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 8;
        let payload = bytes
            .get(pos..pos + payload_len)
            .ok_or_else(|| err("truncated record payload"))?;
        pos += payload_len;
        let record = match kind {
            KIND_TENSOR => {
                if payload.len() < 4 {
                    return Err(err("truncated tensor record"));
                }
                let ndim = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
                let mut p = 4;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    let d = u32::from_le_bytes(
                        payload
                            .get(p..p + 4)
                            .ok_or_else(|| err("truncated tensor dims"))?
                            .try_into()
                            .unwrap(),
                    ) as usize;
                    shape.push(d);
                    p += 4;
                }
                let count: usize = shape.iter().product();
                if payload.len() != p + 4 * count {
                    return Err(err("tensor payload does not match its shape"));
                }
                let data = payload[p..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Record::Tensor(Tensor::from_vec(&shape, data)?)
            }
            KIND_BYTES => Record::Bytes(payload.to_vec()),
            other => return Err(err(&format!("unknown record kind {other}"))),
        };
        records.insert(name, record);
    }
    Ok(records)
}

/// Reads a checkpoint file back.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut records = parse_records(&bytes, path)?;
    let err = |what: String| Error::format(format!("{}: {what}", path.display()));

    let mut take_bytes = |name: &str| -> Result<Vec<u8>> {
        match records.remove(name) {
            Some(Record::Bytes(b)) => Ok(b),
            Some(_) => Err(err(format!("record {name} has the wrong kind"))),
            None => Err(err(format!("missing record {name}"))),
        }
    };
    let arch: ArchSpec = serde_json::from_slice(&take_bytes("arch/json")?)
        .map_err(|e| err(format!("arch record: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_slice(&take_bytes("meta/json")?)
        .map_err(|e| err(format!("meta record: {e}")))?;
    let stored_hash: [u8; 32] = bytes[8..40].try_into().unwrap();
    if stored_hash != arch.hash() {
        return Err(err("architecture hash does not match embedded spec".into()));
    }

    let n_layers = arch.layers.len();
    let mut layer_weights = Vec::with_capacity(n_layers);
    let mut layer_heads = Vec::with_capacity(n_layers);
    let mut layer_opt = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let take_tensor = |records: &mut BTreeMap<String, Record>, name: String| match records
            .remove(&name)
        {
            Some(Record::Tensor(t)) => Ok(t),
            Some(_) => Err(err(format!("record {name} has the wrong kind"))),
            None => Err(err(format!("missing record {name}"))),
        };
        let weights = take_tensor(&mut records, format!("layer{i}/weights"))?;
        let bias = take_tensor(&mut records, format!("layer{i}/bias"))?;
        let head = match records.remove(&format!("layer{i}/head")) {
            Some(Record::Bytes(b)) if b.len() == 16 => {
                let seed = u64::from_le_bytes(b[..8].try_into().unwrap());
                let in_dim = u32::from_le_bytes(b[8..12].try_into().unwrap());
                let n = u32::from_le_bytes(b[12..16].try_into().unwrap());
                (seed, in_dim, n)
            }
            _ => return Err(err(format!("missing or malformed record layer{i}/head"))),
        };
        let opt_w = match records.remove(&format!("layer{i}/opt_w")) {
            Some(Record::Bytes(b)) => decode_param_state(&b, meta.optimizer)?,
            _ => return Err(err(format!("missing record layer{i}/opt_w"))),
        };
        let opt_b = match records.remove(&format!("layer{i}/opt_b")) {
            Some(Record::Bytes(b)) => decode_param_state(&b, meta.optimizer)?,
            _ => return Err(err(format!("missing record layer{i}/opt_b"))),
        };
        layer_weights.push((weights, bias));
        layer_heads.push(head);
        layer_opt.push((opt_w, opt_b));
    }
    let classifier = if records.contains_key("classifier/weights") {
        let mut take_tensor = |name: &str| match records.remove(name) {
            Some(Record::Tensor(t)) => Ok(t),
            _ => Err(err(format!("missing tensor record {name}"))),
        };
        let weights = take_tensor("classifier/weights")?;
        let bias = take_tensor("classifier/bias")?;
        let w_state = match records.remove("classifier/opt_w") {
            Some(Record::Bytes(b)) => decode_param_state(&b, meta.optimizer)?,
            _ => return Err(err("missing record classifier/opt_w".into())),
        };
        let b_state = match records.remove("classifier/opt_b") {
            Some(Record::Bytes(b)) => decode_param_state(&b, meta.optimizer)?,
            _ => return Err(err("missing record classifier/opt_b".into())),
        };
        Some(ClassifierSnapshot {
            weights,
            bias,
            w_state,
            b_state,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        arch,
        meta,
        layer_weights,
        layer_heads,
        layer_opt,
        classifier,
    })
}
