//! Binary adapter checkpoints.
//!
//! Layout: `b"LMINI1"`, manifest length (u64 LE), JSON manifest, payload of
//! row-major little-endian floats in manifest order, CRC32 of the payload
//! (u32 LE).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, Adapter, FactorRole, LoraAdapter, LoraMiniAdapter};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 6] = b"LMINI1";
const HEADER_LEN: usize = MAGIC.len() + 8;
const TRAILER_LEN: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryMethod {
    Lora,
    LoraMini,
    /// A plain weight and bias (trained head, or merged module).
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSlot {
    pub factor: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub module_name: String,
    pub method: EntryMethod,
    pub d: usize,
    pub k: usize,
    pub r: Option<usize>,
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub scale: Option<f64>,
    pub offsets: Vec<FactorSlot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: Dtype,
    pub payload_len: usize,
    pub modules: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Adapter(Adapter),
    Full {
        module_name: String,
        weight: Matrix,
        bias: Matrix,
    },
}

impl Entry {
    pub fn module_name(&self) -> &str {
        match self {
            Entry::Adapter(a) => a.base_ref(),
            Entry::Full { module_name, .. } => module_name,
        }
    }

    fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Entry::Adapter(a) => a
                .factors()
                .into_iter()
                .map(|f| (f.role.name(), f.value))
                .collect(),
            Entry::Full { weight, bias, .. } => vec![("weight", weight), ("bias", bias)],
        }
    }

    fn manifest(&self, offset: &mut usize, dtype: Dtype) -> ManifestEntry {
        let offsets = self
            .matrices()
            .into_iter()
            .map(|(name, m)| {
                let slot = FactorSlot {
                    factor: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    offset: *offset,
                };
                *offset += m.len() * dtype.size();
                slot
            })
            .collect();
        match self {
            Entry::Adapter(a) => {
                let (d, k) = a.dims();
                let aux = a.aux_dims();
                ManifestEntry {
                    module_name: a.base_ref().to_string(),
                    method: match a {
                        Adapter::Lora(_) => EntryMethod::Lora,
                        Adapter::LoraMini(_) => EntryMethod::LoraMini,
                    },
                    d,
                    k,
                    r: Some(a.rank()),
                    a: aux.map(|x| x.0),
                    b: aux.map(|x| x.1),
                    scale: Some(a.scale()),
                    offsets,
                }
            }
            Entry::Full {
                module_name,
                weight,
                ..
            } => ManifestEntry {
                module_name: module_name.clone(),
                method: EntryMethod::Full,
                d: weight.rows(),
                k: weight.cols(),
                r: None,
                a: None,
                b: None,
                scale: None,
                offsets,
            },
        }
    }
}

/// Every adapter of a run plus any directly trained modules, in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Adapters plus every module whose base is trainable.
    pub fn from_model(model: &Model) -> Self {
        let mut entries = Vec::new();
        for m in model.modules() {
            push_linear(&mut entries, &m.linear);
        }
        Self {
            dtype: Dtype::F32,
            entries,
        }
    }

    pub fn from_linear(layer: &AdaptedLinear) -> Self {
        let mut entries = Vec::new();
        push_linear(&mut entries, layer);
        Self {
            dtype: Dtype::F32,
            entries,
        }
    }

    /// Every module as a plain weight and bias.
    pub fn full_weights(model: &Model, dtype: Dtype) -> Self {
        let entries = model
            .modules()
            .iter()
            .map(|m| Entry::Full {
                module_name: m.linear.name().to_string(),
                weight: m.linear.weight().clone(),
                bias: m.linear.bias().clone(),
            })
            .collect();
        Self { dtype, entries }
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Adapter(a) => Some(a),
            Entry::Full { .. } => None,
        })
    }

    /// Installs every entry into `model`. Full entries replace the module's
    /// weight and bias and drop any adapter it carried.
    pub fn apply_to_model(&self, model: &mut Model) -> Result<()> {
        for e in &self.entries {
            if model.module(e.module_name()).is_none() {
                return Err(Error::Config(format!(
                    "checkpoint module {} not in model",
                    e.module_name()
                )));
            }
        }
        let adapters: Vec<Adapter> = self.adapters().cloned().collect();
        if !adapters.is_empty() {
            model.install_adapters(adapters)?;
        }
        for e in &self.entries {
            if let Entry::Full {
                module_name,
                weight,
                bias,
            } = e
            {
                let module = model.module_mut(module_name).expect("checked above");
                module.linear.take_adapter();
                module.linear.set_base(weight.clone(), bias.clone())?;
            }
        }
        Ok(())
    }

    pub fn apply_to_linear(&self, layer: &mut AdaptedLinear) -> Result<()> {
        for e in &self.entries {
            if e.module_name() != layer.name() {
                return Err(Error::Config(format!(
                    "checkpoint module {} does not match {}",
                    e.module_name(),
                    layer.name()
                )));
            }
            match e {
                Entry::Adapter(a) => layer.set_adapter(a.clone())?,
                Entry::Full { weight, bias, .. } => {
                    layer.take_adapter();
                    layer.set_base(weight.clone(), bias.clone())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let modules: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| e.manifest(&mut offset, self.dtype))
            .collect();
        let manifest = Manifest {
            dtype: self.dtype,
            payload_len: offset,
            modules,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut payload = Vec::with_capacity(offset);
        for e in &self.entries {
            for (_, m) in e.matrices() {
                for &v in m.as_slice() {
                    match self.dtype {
                        Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                        Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        debug_assert_eq!(payload.len(), offset);
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic(
                bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Length(format!(
                "file is {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        let manifest_len =
            u64::from_le_bytes(bytes[MAGIC.len()..HEADER_LEN].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(manifest_len)
            .ok()
            .and_then(|n| n.checked_add(HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                CheckpointError::Length(format!(
                    "manifest length {manifest_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        validate_manifest(&manifest)?;
        let expected = manifest_end + manifest.payload_len + TRAILER_LEN;
        if bytes.len() != expected {
            return Err(CheckpointError::Length(format!(
                "manifest implies {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let payload = &bytes[manifest_end..manifest_end + manifest.payload_len];
        let stored =
            u32::from_le_bytes(bytes[expected - TRAILER_LEN..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let entries = manifest
            .modules
            .iter()
            .map(|e| decode_entry(e, payload, manifest.dtype))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dtype: manifest.dtype,
            entries,
        })
    }
}

fn push_linear(entries: &mut Vec<Entry>, linear: &AdaptedLinear) {
    if let Some(a) = linear.adapter() {
        entries.push(Entry::Adapter(a.clone()));
    }
    if linear.base_trainable() {
        entries.push(Entry::Full {
            module_name: linear.name().to_string(),
            weight: linear.weight().clone(),
            bias: linear.bias().clone(),
        });
    }
}

fn expected_factors(
    e: &ManifestEntry,
) -> Result<Vec<(&'static str, usize, usize)>, CheckpointError> {
    let need = |v: Option<usize>, what: &str| {
        v.filter(|&x| x > 0).ok_or_else(|| {
            CheckpointError::Manifest(format!("module {}: missing or zero {what}", e.module_name))
        })
    };
    Ok(match e.method {
        EntryMethod::Lora => {
            let r = need(e.r, "r")?;
            vec![
                (FactorRole::A.name(), e.d, r),
                (FactorRole::B.name(), r, e.k),
            ]
        }
        EntryMethod::LoraMini => {
            let (r, a, b) = (need(e.r, "r")?, need(e.a, "a")?, need(e.b, "b")?);
            vec![
                (FactorRole::AAux.name(), e.d, a),
                (FactorRole::ATrain.name(), a, r),
                (FactorRole::BTrain.name(), r, b),
                (FactorRole::BAux.name(), b, e.k),
            ]
        }
        EntryMethod::Full => vec![("weight", e.d, e.k), ("bias", 1, e.k)],
    })
}

/// Checks that every slot has the shape its method implies and that the
/// slots tile the payload exactly.
fn validate_manifest(m: &Manifest) -> Result<(), CheckpointError> {
    let mut cursor = 0usize;
    for e in &m.modules {
        if e.d == 0 || e.k == 0 {
            return Err(CheckpointError::Manifest(format!(
                "module {}: zero dimension",
                e.module_name
            )));
        }
        if e.method != EntryMethod::Full && !e.scale.is_some_and(f64::is_finite) {
            return Err(CheckpointError::Manifest(format!(
                "module {}: missing scale",
                e.module_name
            )));
        }
        let expected = expected_factors(e)?;
        if expected.len() != e.offsets.len() {
            return Err(CheckpointError::Manifest(format!(
                "module {}: expected {} factors, manifest lists {}",
                e.module_name,
                expected.len(),
                e.offsets.len()
            )));
        }
        for ((name, rows, cols), slot) in expected.iter().zip(&e.offsets) {
            if slot.factor != *name || slot.rows != *rows || slot.cols != *cols {
                return Err(CheckpointError::Length(format!(
                    "module {}: factor {} is {}x{}, expected {name} {rows}x{cols}",
                    e.module_name, slot.factor, slot.rows, slot.cols
                )));
            }
            if slot.offset != cursor {
                return Err(CheckpointError::Length(format!(
                    "module {}: factor {} at offset {}, expected {cursor}",
                    e.module_name, slot.factor, slot.offset
                )));
            }
            cursor = rows
                .checked_mul(*cols)
                .and_then(|n| n.checked_mul(m.dtype.size()))
                .and_then(|n| n.checked_add(cursor))
                .ok_or_else(|| CheckpointError::Length("factor size overflows".into()))?;
        }
    }
    if cursor != m.payload_len {
        return Err(CheckpointError::Length(format!(
            "factors cover {cursor} bytes, manifest payload_len is {}",
            m.payload_len
        )));
    }
    Ok(())
}

fn read_matrix(slot: &FactorSlot, payload: &[u8], dtype: Dtype) -> Result<Matrix, CheckpointError> {
    let n = slot.rows * slot.cols;
    let bytes = &payload[slot.offset..slot.offset + n * dtype.size()];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Matrix::from_vec(slot.rows, slot.cols, data)
        .map_err(|e| CheckpointError::Manifest(format!("factor {}: {e}", slot.factor)))
}

fn decode_entry(e: &ManifestEntry, payload: &[u8], dtype: Dtype) -> Result<Entry, CheckpointError> {
    let mut ms = e
        .offsets
        .iter()
        .map(|s| read_matrix(s, payload, dtype))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter();
    let mut next = || ms.next().expect("validated factor count");
    let bad = |err: Error| CheckpointError::Manifest(format!("module {}: {err}", e.module_name));
    let scale = e.scale.unwrap_or(1.0);
    Ok(match e.method {
        EntryMethod::Lora => {
            let (a, b) = (next(), next());
            Entry::Adapter(Adapter::Lora(
                LoraAdapter::from_factors(&e.module_name, a, b, scale).map_err(bad)?,
            ))
        }
        EntryMethod::LoraMini => {
            let (aa, at, bt, ba) = (next(), next(), next(), next());
            Entry::Adapter(Adapter::LoraMini(
                LoraMiniAdapter::from_factors(&e.module_name, aa, at, bt, ba, scale)
                    .map_err(bad)?,
            ))
        }
        EntryMethod::Full => {
            let (weight, bias) = (next(), next());
            Entry::Full {
                module_name: e.module_name.clone(),
                weight,
                bias,
            }
        }
    })
}

/// Writes to a sibling temp file, then renames it over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach, AdapterSpec};
    use crate::numerics::RngState;

    fn sample(d: usize, k: usize) -> Checkpoint {
        let rng = RngState::new(3, "ckpt");
        let w = Matrix::zeros(d, k);
        Checkpoint {
            dtype: Dtype::F32,
            entries: vec![
                Entry::Adapter(
                    attach(
                        "m0",
                        &w,
                        &AdapterSpec::lora_mini(2, 3, 3).with_scale(0.5),
                        &rng.fork("0"),
                    )
                    .unwrap(),
                ),
                Entry::Adapter(attach("m1", &w, &AdapterSpec::lora(2), &rng.fork("1")).unwrap()),
                Entry::Full {
                    module_name: "head".into(),
                    weight: Matrix::from_fn(d, 2, |i, j| (i * 2 + j) as f64 / 3.0),
                    bias: Matrix::filled(1, 2, 0.1),
                },
            ],
        }
    }

    fn quantized(c: &Checkpoint) -> Checkpoint {
        let q = |m: &Matrix| m.quantize_f32();
        let entries = c
            .entries
            .iter()
            .map(|e| match e {
                Entry::Adapter(Adapter::Lora(l)) => Entry::Adapter(Adapter::Lora(
                    LoraAdapter::from_factors(e.module_name(), q(l.a()), q(l.b()), l_scale(e))
                        .unwrap(),
                )),
                Entry::Adapter(Adapter::LoraMini(m)) => Entry::Adapter(Adapter::LoraMini(
                    LoraMiniAdapter::from_factors(
                        e.module_name(),
                        q(m.a_aux()),
                        q(m.a_train()),
                        q(m.b_train()),
                        q(m.b_aux()),
                        l_scale(e),
                    )
                    .unwrap(),
                )),
                Entry::Full {
                    module_name,
                    weight,
                    bias,
                } => Entry::Full {
                    module_name: module_name.clone(),
                    weight: q(weight),
                    bias: q(bias),
                },
            })
            .collect();
        Checkpoint {
            dtype: c.dtype,
            entries,
        }
    }

    fn l_scale(e: &Entry) -> f64 {
        match e {
            Entry::Adapter(a) => a.scale(),
            Entry::Full { .. } => 1.0,
        }
    }

    #[test]
    fn round_trip_at_32_bit() {
        let c = sample(6, 5);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, quantized(&c));
    }

    #[test]
    fn round_trip_at_64_bit_is_exact() {
        let mut c = sample(6, 5);
        c.dtype = Dtype::F64;
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn payload_size_for_one_module() {
        let rng = RngState::new(0, "x");
        let a = attach(
            "m",
            &Matrix::zeros(64, 64),
            &AdapterSpec::lora_mini(4, 8, 8),
            &rng,
        )
        .unwrap();
        let c = Checkpoint {
            dtype: Dtype::F32,
            entries: vec![Entry::Adapter(a)],
        };
        let bytes = c.to_bytes().unwrap();
        let manifest_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 14 - manifest_len - 4, 4352);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(4, 4).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::CrcMismatch { .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(CheckpointError::BadMagic(_))
        ));

        for cut in [3, 10, 20, n - 5, n - 1] {
            let r = Checkpoint::from_bytes(&bytes[..cut]);
            assert!(
                matches!(
                    r,
                    Err(CheckpointError::Length(_)) | Err(CheckpointError::BadMagic(_))
                ),
                "cut at {cut}: {r:?}"
            );
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..n - 1]),
            Err(CheckpointError::Length(_))
        ));

        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&longer),
            Err(CheckpointError::Length(_))
        ));
    }

    #[test]
    fn inconsistent_manifest_is_a_length_error() {
        let c = sample(4, 4);
        let bytes = c.to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[14..14 + mlen]).unwrap();
        manifest.modules[0].offsets[1].rows += 1;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[14 + mlen..]);
        assert!(matches!(
            Checkpoint::from_bytes(&forged),
            Err(CheckpointError::Length(_))
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample(5, 3);
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), quantized(&c));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
