//! `TMF1` binary checkpoints, little-endian throughout.
//!
//! Layout: magic, u32 version, u8 modality tag, six u32 geometry fields,
//! u32 tensor count and the network tensors, then a u32 count and the
//! normalization tensors in the same encoding. A tensor is a u16 name
//! length, the UTF-8 name, a u8 rank, rank u32 dims and the f32 values.

use std::fs;
use std::path::Path;

use super::normalize::NormalizationStats;
use super::DatasetGeometry;
use crate::error::{Error, LoadError, Result};
use crate::modalities::{build_for, InputGeometry, Modality, ModelSpec};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"TMF1";
pub const VERSION: u32 = 1;

const SEED_TENSOR: &str = "meta.training_seed";
const STATS_PREFIX: &str = "stats.";
const STATS_FIELDS: [(Modality, &str); 3] =
    [(Modality::Image, "image"), (Modality::Cognitive, "cognitive"), (Modality::Biomarker, "biomarker")];

/// Trained network plus everything needed to reproduce its predictions.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub geometry: DatasetGeometry,
    pub training_seed: u64,
    pub stats: NormalizationStats,
}

fn overflow(what: String) -> Error {
    LoadError::Overflow(what).into()
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| overflow(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| overflow(format!("tensor name of {} bytes", name.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.rank()).map_err(|_| overflow(format!("rank {} of {name}", t.rank())))?;
    out.push(rank);
    for &d in t.shape() {
        put_u32(out, d, "dimension")?;
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn stats_tensors(cp: &Checkpoint) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (m, label) in STATS_FIELDS {
        let (mean, std) = cp.stats.moments(m);
        out.push((format!("{STATS_PREFIX}{label}_mean"), Tensor::vector(mean)));
        out.push((format!("{STATS_PREFIX}{label}_std"), Tensor::vector(std)));
    }
    // 16-bit chunks are exact in f32
    let chunks = (0..4).map(|k| ((cp.training_seed >> (16 * k)) & 0xffff) as f64).collect::<Vec<_>>();
    out.push((SEED_TENSOR.to_owned(), Tensor::vector(&chunks)));
    out
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cp.spec.modality.index() as u8);
    for g in cp.geometry.as_array() {
        put_u32(&mut out, g, "geometry field")?;
    }
    let tensors = cp.spec.network.named_tensors();
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t)?;
    }
    let stats = stats_tensors(cp);
    put_u32(&mut out, stats.len(), "stats count")?;
    for (name, t) in &stats {
        put_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(cp)?;
    fs::write(path, bytes).map_err(|source| LoadError::Io { path: path.to_owned(), source }.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| overflow(format!("{what} length {n}")))?;
        let slice = self.bytes.get(self.pos..end).ok_or(LoadError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?
            .to_owned();
        let rank = self.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("tensor dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
        let (n, byte_len) = count.ok_or_else(|| overflow(format!("dims {dims:?} of {name}")))?;
        let raw = self.take(byte_len, "tensor values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect::<Vec<_>>();
        debug_assert_eq!(values.len(), n);
        let t = Tensor::new(dims, values).map_err(|e| malformed(&format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

fn malformed(detail: &str) -> Error {
    LoadError::Malformed { context: "checkpoint".into(), detail: detail.to_owned() }.into()
}

fn decode_stats(entries: Vec<(String, Tensor)>, geometry: &DatasetGeometry) -> Result<(NormalizationStats, u64)> {
    let mut stats = NormalizationStats::identity(geometry);
    stats.fitted_on = "checkpoint".into();
    let mut seed = None;
    let mut seen = 0;
    for (name, t) in entries {
        if name == SEED_TENSOR {
            if t.len() != 4 {
                return Err(malformed("training seed must have 4 chunks"));
            }
            seed = Some(t.data().iter().enumerate().fold(0u64, |acc, (k, &c)| acc | ((c as u64) << (16 * k))));
            continue;
        }
        let field = name.strip_prefix(STATS_PREFIX).ok_or_else(|| malformed(&format!("unexpected tensor {name}")))?;
        let (m, kind) = STATS_FIELDS
            .iter()
            .find_map(|&(m, label)| field.strip_prefix(label).map(|rest| (m, rest)))
            .ok_or_else(|| malformed(&format!("unexpected tensor {name}")))?;
        let (mut mean, mut std) = {
            let (a, b) = stats.moments(m);
            (a.to_vec(), b.to_vec())
        };
        match kind {
            "_mean" => mean = t.into_data(),
            "_std" => std = t.into_data(),
            _ => return Err(malformed(&format!("unexpected tensor {name}"))),
        }
        stats.set_moments(m, mean, std);
        seen += 1;
    }
    match seed {
        Some(s) if seen == 2 * STATS_FIELDS.len() => Ok((stats, s)),
        _ => Err(malformed("normalization section is incomplete")),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(LoadError::BadMagic { context: "checkpoint".into() }.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LoadError::UnknownVersion(version).into());
    }
    let tag = r.u8("modality tag")?;
    let modality = Modality::from_index(tag as usize).ok_or_else(|| malformed(&format!("modality tag {tag}")))?;
    let mut g = [0usize; 6];
    for v in &mut g {
        *v = r.u32("geometry")? as usize;
    }
    let geometry = DatasetGeometry::from_array(g);
    geometry.validate()?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let stats_count = r.u32("stats count")? as usize;
    let mut stats_entries = Vec::new();
    for _ in 0..stats_count {
        stats_entries.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(malformed(&format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let input = match (modality, geometry.input(modality)) {
        (Modality::Image, InputGeometry::Image { side, .. }) => {
            let kernel = tensors
                .iter()
                .find(|(n, _)| n.ends_with(".weight"))
                .ok_or_else(|| malformed("image network has no convolution kernel"))?;
            let channels = *kernel.1.shape().last().expect("rank >= 1");
            InputGeometry::Image { side, channels }
        }
        (_, g) => g,
    };
    let mut spec = build_for(modality, input, 0)?;
    let expected = spec.network.named_tensors().len();
    if expected != tensors.len() {
        return Err(malformed(&format!("{} tensors stored, network has {expected}", tensors.len())));
    }
    for (name, t) in tensors {
        let slot = spec
            .network
            .tensor_mut(&name)
            .ok_or_else(|| malformed(&format!("network has no tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::dim("checkpoint tensor", t.shape(), slot.shape()));
        }
        *slot = t;
    }
    let (stats, training_seed) = decode_stats(stats_entries, &geometry)?;
    Ok(Checkpoint { spec, geometry, training_seed, stats })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| -> Error {
        match e.kind() {
            std::io::ErrorKind::NotFound => {
                LoadError::MissingFile { context: "checkpoint".into(), path: path.to_owned() }.into()
            }
            _ => LoadError::Io { path: path.to_owned(), source: e }.into(),
        }
    })?;
    decode_checkpoint(&bytes)
}
