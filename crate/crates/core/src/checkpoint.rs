//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header,
//! then every tensor's `f64` values (row-major, little-endian) in manifest
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrefixParams, Seq2Seq, Site, OUTPUT_BIAS, OUTPUT_WEIGHT};
use crate::params::ParamSet;

const MAGIC: &[u8; 8] = b"MPFXCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Base,
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Base,
    Mlp,
    Embedding,
    Cached,
    Output,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    project: Option<String>,
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: Kind,
    model_config: ModelConfig,
    tensors: Vec<Entry>,
    projects: Vec<String>,
}

/// A pretrained backbone and its trainable tags.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCheckpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub trainable: BTreeSet<String>,
}

/// Prefix stack plus any per-project output layers trained alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCheckpoint {
    pub prefix: PrefixParams,
    pub output_layers: BTreeMap<String, ParamSet>,
}

impl PrefixCheckpoint {
    pub fn new(prefix: PrefixParams) -> Self {
        PrefixCheckpoint { prefix, output_layers: BTreeMap::new() }
    }

    /// `theta` with `project`'s output layer swapped in, when one was trained.
    pub fn backbone_for(&self, theta: &ParamSet, project: &str) -> ParamSet {
        let mut t = theta.clone();
        if let Some(o) = self.output_layers.get(project) {
            t.update_from(o);
        }
        t
    }
}

fn write_file(path: &Path, header: &Header, tensors: &[&Array2<f64>]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in tensors {
            for x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<(Header, Vec<Array2<f64>>)> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {} unsupported", header.format_version)));
    }
    let total: usize = header.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if bytes.len() != hend + total * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 8, bytes.len() - hend)));
    }
    let mut off = hend;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape[0] * e.shape[1];
        let data: Vec<f64> = bytes[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += n * 8;
        tensors.push(Array2::from_shape_vec((e.shape[0], e.shape[1]), data).expect("shape matches length"));
    }
    Ok((header, tensors))
}

fn entry(group: Group, project: Option<&str>, name: &str, t: &Array2<f64>, trainable: bool) -> Entry {
    Entry { group, project: project.map(str::to_string), name: name.to_string(), shape: [t.nrows(), t.ncols()], trainable }
}

pub fn save_base(path: &Path, ckpt: &BaseCheckpoint) -> Result<()> {
    Seq2Seq::new(ckpt.config.clone())?.check_params(&ckpt.params)?;
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (n, t) in ckpt.params.iter() {
        entries.push(entry(Group::Base, None, n, t, ckpt.trainable.contains(n)));
        data.push(t);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: Kind::Base,
        model_config: ckpt.config.clone(),
        tensors: entries,
        projects: Vec::new(),
    };
    write_file(path, &header, &data)
}

pub fn load_base(path: &Path) -> Result<BaseCheckpoint> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let (header, tensors) = read_file(path)?;
    if header.kind != Kind::Base {
        return Err(bad("expected a base checkpoint, found a prefix checkpoint".into()));
    }
    let mut params = ParamSet::new();
    let mut trainable = BTreeSet::new();
    for (e, t) in header.tensors.into_iter().zip(tensors) {
        if e.trainable {
            trainable.insert(e.name.clone());
        }
        params.insert(e.name, t);
    }
    let model = Seq2Seq::new(header.model_config.clone()).map_err(|e| bad(e.to_string()))?;
    model.check_params(&params).map_err(|e| bad(e.to_string()))?;
    Ok(BaseCheckpoint { config: header.model_config, params, trainable })
}

pub fn save_prefix(path: &Path, ckpt: &PrefixCheckpoint) -> Result<()> {
    let (mlp, embeddings, cached) = ckpt.prefix.parts();
    let mut entries = Vec::new();
    let mut data = Vec::new();
    if let Some(m) = mlp {
        for (n, t) in m.iter() {
            entries.push(entry(Group::Mlp, None, n, t, true));
            data.push(t);
        }
    }
    for (group, map) in [(Group::Embedding, embeddings), (Group::Cached, cached), (Group::Output, &ckpt.output_layers)] {
        for (project, set) in map {
            for (n, t) in set.iter() {
                entries.push(entry(group, Some(project), n, t, true));
                data.push(t);
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: Kind::Prefix,
        model_config: ckpt.prefix.config().clone(),
        tensors: entries,
        projects: ckpt.prefix.projects(),
    };
    write_file(path, &header, &data)
}

/// Expected shape of a prefix-file tensor, from its name.
fn prefix_shape(cfg: &ModelConfig, group: Group, name: &str) -> Option<(usize, usize)> {
    let (d, h, v) = (cfg.d_model, cfg.prefix_mlp_hidden, cfg.summary_vocab_size);
    if group == Group::Output {
        return match name {
            OUTPUT_WEIGHT => Some((d, v)),
            OUTPUT_BIAS => Some((1, v)),
            _ => None,
        };
    }
    let mut parts = name.split('.');
    let site: Site = parts.next()?.parse().ok()?;
    let layer: usize = parts.next()?.parse().ok()?;
    let leaf = parts.next()?;
    if parts.next().is_some() || layer >= cfg.n_layers || !cfg.enabled_sites().contains(&site) {
        return None;
    }
    match (group, leaf) {
        (Group::Mlp, "w1") => Some((d, h)),
        (Group::Mlp, "b1") => Some((1, h)),
        (Group::Mlp, "w2") => Some((h, d)),
        (Group::Mlp, "b2") => Some((1, d)),
        (Group::Embedding, "emb") | (Group::Cached, "p") => Some((cfg.prefix_len, d)),
        _ => None,
    }
}

pub fn load_prefix(path: &Path) -> Result<PrefixCheckpoint> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    let (header, tensors) = read_file(path)?;
    if header.kind != Kind::Prefix {
        return Err(bad("expected a prefix checkpoint, found a base checkpoint".into()));
    }
    let cfg = header.model_config;
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let mut mlp: Option<ParamSet> = None;
    let mut groups: BTreeMap<(u8, String), ParamSet> = BTreeMap::new();
    for (e, t) in header.tensors.into_iter().zip(tensors) {
        let expected = prefix_shape(&cfg, e.group, &e.name)
            .ok_or_else(|| bad(format!("unexpected tensor `{}` in {:?} group", e.name, e.group)))?;
        if t.dim() != expected {
            return Err(bad(format!("`{}` has shape {:?}, config says {expected:?}", e.name, t.dim())));
        }
        let key = match (e.group, e.project) {
            (Group::Mlp, _) => {
                mlp.get_or_insert_with(ParamSet::new).insert(e.name, t);
                continue;
            }
            (Group::Embedding, Some(p)) => (0, p),
            (Group::Cached, Some(p)) => (1, p),
            (Group::Output, Some(p)) => (2, p),
            (g, _) => return Err(bad(format!("{g:?} tensor `{}` has no project", e.name))),
        };
        groups.entry(key).or_default().insert(e.name, t);
    }
    let mut embeddings = BTreeMap::new();
    let mut cached = BTreeMap::new();
    let mut output_layers = BTreeMap::new();
    for ((g, p), set) in groups {
        match g {
            0 => embeddings.insert(p, set),
            1 => cached.insert(p, set),
            _ => output_layers.insert(p, set),
        };
    }
    if mlp.is_none() && !embeddings.is_empty() {
        return Err(bad("project embeddings present without the prefix MLP".into()));
    }
    if mlp.is_none() && cached.is_empty() && cfg.prefix_len > 0 {
        mlp = Some(ParamSet::new());
    }
    Ok(PrefixCheckpoint { prefix: PrefixParams::from_parts(cfg, mlp, embeddings, cached), output_layers })
}
