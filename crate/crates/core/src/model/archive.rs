//! Tensor archives, checkpoints and backbone import.
//!
//! Archive layout:
//!
//! ```text
//! RULARCH 1
//! key=value                       header, zero or more lines
//! [tensors]
//! <name> <f32|f64> <dim>x<dim>... [frozen|tunable]
//! [data]
//! <payloads in index order, little-endian, row-major>
//! ```
//!
//! `.safetensors` files are also readable, so a stock GPT-2 export can be
//! imported without conversion.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState, PcaProjector, Stage};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &str = "RULARCH 1";
const TENSORS_MARK: &str = "[tensors]";
const DATA_MARK: &str = "[data]\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "F32" => Some(Dtype::F32),
            "f64" | "F64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Widened to `f64` on read.
    pub data: Vec<f64>,
    pub frozen: Option<bool>,
}

impl ArchiveTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix, frozen: Option<bool>) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
            frozen,
        }
    }

    /// Interprets the tensor as `rows×cols`; a 1-D tensor of length `cols`
    /// counts as `1×cols`.
    fn as_matrix(&self, rows: usize, cols: usize) -> Result<Matrix> {
        let ok = self.shape == [rows, cols] || (rows == 1 && self.shape == [cols]);
        if !ok {
            return Err(Error::TensorShape {
                name: self.name.clone(),
                expected: vec![rows, cols],
                found: self.shape.clone(),
            });
        }
        Ok(Matrix::from_vec(rows, cols, self.data.clone()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<ArchiveTensor>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self, dtype: Dtype) -> Vec<u8> {
        let mut text = format!("{MAGIC}\n");
        for (k, v) in &self.header {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(TENSORS_MARK);
        text.push('\n');
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            text.push_str(&format!("{} {} {}", t.name, dtype.name(), dims.join("x")));
            match t.frozen {
                Some(true) => text.push_str(" frozen"),
                Some(false) => text.push_str(" tunable"),
                None => {}
            }
            text.push('\n');
        }
        text.push_str(DATA_MARK);
        let mut out = text.into_bytes();
        for t in &self.tensors {
            for v in &t.data {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(MAGIC.as_bytes()) {
            decode_native(bytes)
        } else if bytes.len() >= 9 && bytes[8] == b'{' {
            decode_safetensors(bytes)
        } else {
            Err(Error::Archive("unrecognised archive format".into()))
        }
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn decode_native(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: String| Error::Archive(m);
    let split = find(bytes, format!("\n{DATA_MARK}").as_bytes()).ok_or_else(|| bad("missing [data] marker".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("index is not UTF-8".into()))?;
    let mut payload = &bytes[split + 1 + DATA_MARK.len()..];
    let mut lines = text.lines().skip(1);
    let mut header = Vec::new();
    for line in lines.by_ref() {
        if line == TENSORS_MARK {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        header.push((k.to_string(), v.to_string()));
    }
    let mut tensors = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(bad(format!("malformed index line `{line}`")));
        }
        let dtype = Dtype::parse(parts[1]).ok_or_else(|| bad(format!("unknown dtype `{}`", parts[1])))?;
        let shape = parts[2]
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape `{}`", parts[2])))?;
        let frozen = match parts.get(3) {
            None => None,
            Some(&"frozen") => Some(true),
            Some(&"tunable") => Some(false),
            Some(f) => return Err(bad(format!("unknown flag `{f}`"))),
        };
        let count: usize = shape.iter().product();
        let nbytes = count * dtype.size();
        if payload.len() < nbytes {
            return Err(bad(format!("payload of `{}` is truncated", parts[0])));
        }
        let data = widen(&payload[..nbytes], dtype);
        payload = &payload[nbytes..];
        tensors.push(ArchiveTensor {
            name: parts[0].to_string(),
            shape,
            data,
            frozen,
        });
    }
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing payload bytes", payload.len())));
    }
    Ok(Archive { header, tensors })
}

fn widen(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

fn decode_safetensors(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: String| Error::Archive(format!("safetensors: {m}"));
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header length out of range".into()))?;
    let header: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| bad(e.to_string()))?;
    let body = &bytes[body_start..];
    let mut tensors = Vec::new();
    let mut meta = Vec::new();
    for (name, info) in &header {
        if name == "__metadata__" {
            if let Some(obj) = info.as_object() {
                meta.extend(obj.iter().map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string())));
            }
            continue;
        }
        let dtype = info["dtype"]
            .as_str()
            .and_then(Dtype::parse)
            .ok_or_else(|| bad(format!("`{name}` has an unsupported dtype {}", info["dtype"])))?;
        let shape: Vec<usize> = info["shape"]
            .as_array()
            .ok_or_else(|| bad(format!("`{name}` has no shape")))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(format!("`{name}` has a bad shape")))?;
        let offs = info["data_offsets"]
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
            .ok_or_else(|| bad(format!("`{name}` has bad data offsets")))?;
        let count: usize = shape.iter().product();
        if offs.1 > body.len() || offs.0 > offs.1 || offs.1 - offs.0 != count * dtype.size() {
            return Err(bad(format!("`{name}` payload does not match its shape")));
        }
        tensors.push((
            offs.0,
            ArchiveTensor {
                name: name.clone(),
                shape,
                data: widen(&body[offs.0..offs.1], dtype),
                frozen: None,
            },
        ));
    }
    tensors.sort_by_key(|(o, _)| *o);
    Ok(Archive {
        header: meta,
        tensors: tensors.into_iter().map(|(_, t)| t).collect(),
    })
}

/// One row of the backbone name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingEntry {
    pub source: String,
    /// Our tensor names filled from `source`, split along columns.
    pub targets: Vec<String>,
}

/// Translates GPT-2 tensor names into our slots.
///
/// | source (block `b`)            | shape      | slots                      |
/// |-------------------------------|------------|----------------------------|
/// | `h.b.attn.c_attn.weight`      | `d × 3d`   | `attn.wq`, `attn.wk`, `attn.wv` |
/// | `h.b.attn.c_attn.bias`        | `3d`       | `attn.bq`, `attn.bk`, `attn.bv` |
/// | `h.b.attn.c_proj.weight/bias` | `d × d`, `d` | `attn.wo`, `attn.bo`     |
/// | `h.b.mlp.c_fc.weight/bias`    | `d × 4d`, `4d` | `ffn.w1`, `ffn.b1`     |
/// | `h.b.mlp.c_proj.weight/bias`  | `4d × d`, `d` | `ffn.w2`, `ffn.b2`      |
/// | `h.b.ln_1.weight/bias`        | `d`        | `ln1.gamma`, `ln1.beta`    |
/// | `h.b.ln_2.weight/bias`        | `d`        | `ln2.gamma`, `ln2.beta`    |
/// | `ln_f.weight/bias`            | `d`        | `final_ln.gamma`, `final_ln.beta` |
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BackboneMapping {
    /// Prefix in front of every source name, e.g. `transformer.`.
    pub prefix: String,
}

impl BackboneMapping {
    pub fn gpt2() -> Self {
        Self::default()
    }

    /// Picks `transformer.` when the archive uses the prefixed layout.
    pub fn detect(archive: &Archive) -> Self {
        let prefixed = archive.tensors.iter().any(|t| t.name.starts_with("transformer.h."));
        Self {
            prefix: if prefixed { "transformer.".into() } else { String::new() },
        }
    }

    pub fn block_entries(&self, b: usize) -> Vec<MappingEntry> {
        let p = &self.prefix;
        let e = |src: &str, targets: &[&str]| MappingEntry {
            source: format!("{p}h.{b}.{src}"),
            targets: targets.iter().map(|t| format!("block.{b}.{t}")).collect(),
        };
        vec![
            e("attn.c_attn.weight", &["attn.wq", "attn.wk", "attn.wv"]),
            e("attn.c_attn.bias", &["attn.bq", "attn.bk", "attn.bv"]),
            e("attn.c_proj.weight", &["attn.wo"]),
            e("attn.c_proj.bias", &["attn.bo"]),
            e("mlp.c_fc.weight", &["ffn.w1"]),
            e("mlp.c_fc.bias", &["ffn.b1"]),
            e("mlp.c_proj.weight", &["ffn.w2"]),
            e("mlp.c_proj.bias", &["ffn.b2"]),
            e("ln_1.weight", &["ln1.gamma"]),
            e("ln_1.bias", &["ln1.beta"]),
            e("ln_2.weight", &["ln2.gamma"]),
            e("ln_2.bias", &["ln2.beta"]),
        ]
    }

    pub fn final_entries(&self) -> Vec<MappingEntry> {
        let p = &self.prefix;
        vec![
            MappingEntry {
                source: format!("{p}ln_f.weight"),
                targets: vec!["final_ln.gamma".into()],
            },
            MappingEntry {
                source: format!("{p}ln_f.bias"),
                targets: vec!["final_ln.beta".into()],
            },
        ]
    }
}

/// Copies backbone tensors of blocks `0..B` into `state`. Attention and
/// feed-forward slots become frozen; embeddings, RIN and the head are not
/// touched. The final layer norm is taken when present.
pub fn import_pretrained(archive: &Archive, state: &ModelState, mapping: &BackboneMapping) -> Result<ModelState> {
    let mut out = state.clone();
    let mut entries: Vec<MappingEntry> = (0..state.config.blocks).flat_map(|b| mapping.block_entries(b)).collect();
    let finals = mapping.final_entries();
    if finals.iter().all(|e| archive.get(&e.source).is_some()) {
        entries.extend(finals);
    }
    for entry in &entries {
        let src = archive
            .get(&entry.source)
            .ok_or_else(|| Error::MissingTensor(entry.source.clone()))?;
        let shapes: Vec<(usize, usize)> = entry
            .targets
            .iter()
            .map(|t| out.tensor(t).map(Matrix::shape).expect("mapping names a real slot"))
            .collect();
        let rows = shapes[0].0;
        let cols: usize = shapes.iter().map(|s| s.1).sum();
        let whole = src.as_matrix(rows, cols)?;
        let mut offset = 0;
        for (target, (r, c)) in entry.targets.iter().zip(shapes) {
            let mut part = Matrix::zeros(r, c);
            for i in 0..r {
                part.row_mut(i).copy_from_slice(&whole.row(i)[offset..offset + c]);
            }
            offset += c;
            let idx = out.index_of(target).expect("slot exists");
            *out.values_mut()[idx] = part;
            out.freeze_mask[idx] = super::backbone_group(out.names()[idx].1);
        }
    }
    log::info!("imported {} backbone tensors for {} blocks", entries.len(), state.config.blocks);
    Ok(out)
}

/// Exports the blocks of `state` under GPT-2 names (inverse of
/// [`import_pretrained`]).
pub fn write_backbone_archive(path: &Path, state: &ModelState, dtype: Dtype) -> Result<()> {
    let mapping = BackboneMapping::gpt2();
    let mut archive = Archive {
        header: vec![("n_layer".into(), state.config.blocks.to_string()), ("n_embd".into(), state.config.hidden.to_string())],
        tensors: Vec::new(),
    };
    let entries = (0..state.config.blocks)
        .flat_map(|b| mapping.block_entries(b))
        .chain(mapping.final_entries());
    for entry in entries {
        let parts: Vec<&Matrix> = entry.targets.iter().map(|t| state.tensor(t).expect("slot exists")).collect();
        let rows = parts[0].rows();
        let cols: usize = parts.iter().map(|m| m.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in &parts {
                data.extend_from_slice(m.row(r));
            }
        }
        let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
        archive.tensors.push(ArchiveTensor {
            name: entry.source,
            shape,
            data,
            frozen: None,
        });
    }
    archive.write(path, dtype)
}

fn config_header(config: &ModelConfig) -> Vec<(String, String)> {
    let value = serde_json::to_value(config).expect("config serialises");
    value
        .as_object()
        .expect("config is a struct")
        .iter()
        .map(|(k, v)| (format!("config.{k}"), v.to_string()))
        .collect()
}

fn config_from_header(archive: &Archive) -> Result<ModelConfig> {
    let mut obj = serde_json::Map::new();
    for (k, v) in &archive.header {
        if let Some(field) = k.strip_prefix("config.") {
            let value = serde_json::from_str(v).map_err(|e| Error::Archive(format!("header `{k}`: {e}")))?;
            obj.insert(field.to_string(), value);
        }
    }
    serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::Archive(format!("model config: {e}")))
}

/// Checkpoint = archive of every tensor with freeze flags, the config and
/// the stage tag in the header, plus any PCA stand-ins.
pub fn checkpoint_archive(state: &ModelState, extra_header: &[(String, String)]) -> Archive {
    let mut header = vec![("kind".to_string(), "checkpoint".to_string()), ("stage".into(), state.stage.name().into())];
    header.extend(config_header(&state.config));
    header.extend(extra_header.iter().cloned());
    let mut tensors: Vec<ArchiveTensor> = state
        .tensors()
        .into_iter()
        .map(|t| ArchiveTensor::from_matrix(t.name, t.value, Some(t.frozen)))
        .collect();
    for (b, block) in state.blocks.iter().enumerate() {
        if let Some(pca) = &block.pca {
            tensors.push(ArchiveTensor::from_matrix(format!("block.{b}.pca.mean"), &pca.mean, Some(true)));
            tensors.push(ArchiveTensor::from_matrix(format!("block.{b}.pca.basis"), &pca.basis, Some(true)));
            tensors.push(ArchiveTensor::from_matrix(
                format!("block.{b}.pca.eigenvalues"),
                &Matrix::row_vector(pca.eigenvalues.clone()),
                Some(true),
            ));
        }
    }
    Archive { header, tensors }
}

pub fn write_checkpoint(path: &Path, state: &ModelState, extra_header: &[(String, String)]) -> Result<()> {
    checkpoint_archive(state, extra_header).write(path, Dtype::F64)
}

pub fn state_from_checkpoint(archive: &Archive) -> Result<ModelState> {
    if archive.header_value("kind") != Some("checkpoint") {
        return Err(Error::Archive("not a checkpoint".into()));
    }
    let config = config_from_header(archive)?;
    let mut state = ModelState::zeroed(config.clone())?;
    state.stage = archive
        .header_value("stage")
        .and_then(Stage::parse)
        .ok_or_else(|| Error::Archive("missing or unknown stage tag".into()))?;
    let shapes = ModelState::expected_shapes(&config);
    for i in 0..state.tensor_count() {
        let name = state.names()[i].0.clone();
        let t = archive.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let (r, c) = shapes[i];
        *state.values_mut()[i] = t.as_matrix(r, c)?;
        state.freeze_mask[i] = t.frozen.unwrap_or_else(|| super::backbone_group(state.names()[i].1));
    }
    for b in 0..config.blocks {
        let Some(mean) = archive.get(&format!("block.{b}.pca.mean")) else {
            continue;
        };
        let basis = archive
            .get(&format!("block.{b}.pca.basis"))
            .ok_or_else(|| Error::MissingTensor(format!("block.{b}.pca.basis")))?;
        let eig = archive
            .get(&format!("block.{b}.pca.eigenvalues"))
            .ok_or_else(|| Error::MissingTensor(format!("block.{b}.pca.eigenvalues")))?;
        let k = eig.data.len();
        state.blocks[b].pca = Some(PcaProjector {
            mean: mean.as_matrix(1, config.hidden)?,
            basis: basis.as_matrix(config.hidden, k)?,
            eigenvalues: eig.data.clone(),
        });
    }
    Ok(state)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    state_from_checkpoint(&Archive::read(path)?)
}
