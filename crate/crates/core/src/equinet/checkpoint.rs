//! Binary checkpoint container for named weight tensors.
//!
//! Layout: 8-byte magic, little-endian u32 section count, then each section
//! as a length-prefixed name and its tensors (name, rows, cols, row-major
//! f64 payload), followed by a 64-bit FNV-1a checksum over everything that
//! precedes it. The checksum turns silent bit flips into load errors.

use std::fs;
use std::path::Path;

use super::{EquinetError, ExtractorWeights, VnLayerParams};
use crate::mathcore::DenseMatrix;

const MAGIC: &[u8; 8] = b"C2FCKPT1";
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Caps on name length and tensor size so a corrupt header cannot trigger
/// an enormous allocation before the checksum is ever verified.
const MAX_NAME: usize = 4096;
const MAX_TENSOR_DIM: u32 = 1 << 20;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A named group of tensors, e.g. the extractor or a loss head.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, DenseMatrix)>,
}

impl Section {
    pub fn new(name: &str) -> Section {
        Section { name: name.to_string(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: DenseMatrix) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&DenseMatrix, EquinetError> {
        self.tensor(name).ok_or_else(|| {
            EquinetError::Checkpoint(format!("section '{}' is missing tensor '{name}'", self.name))
        })
    }
}

/// An ordered set of sections with a checksum-guarded binary encoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn push_section(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            write_str(&mut out, &s.name);
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                write_str(&mut out, name);
                out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, EquinetError> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(EquinetError::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let actual = fnv1a(body);
        if stored != actual {
            return Err(EquinetError::Checkpoint(format!(
                "checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(EquinetError::Checkpoint("bad magic".into()));
        }
        let nsec = r.u32()? as usize;
        let mut sections = Vec::new();
        for _ in 0..nsec {
            let name = r.string()?;
            let ntensors = r.u32()? as usize;
            let mut tensors = Vec::new();
            for _ in 0..ntensors {
                let tname = r.string()?;
                let rows = r.u32()?;
                let cols = r.u32()?;
                if rows == 0 || cols == 0 || rows > MAX_TENSOR_DIM || cols > MAX_TENSOR_DIM {
                    return Err(EquinetError::Checkpoint(format!(
                        "tensor '{tname}' has invalid shape {rows}x{cols}"
                    )));
                }
                let count = rows as usize * cols as usize;
                if count > r.remaining() / 8 {
                    return Err(EquinetError::Checkpoint(format!(
                        "tensor '{tname}' payload exceeds file size"
                    )));
                }
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8-byte word"));
                    if !v.is_finite() {
                        return Err(EquinetError::Checkpoint(format!(
                            "tensor '{tname}' contains a non-finite value"
                        )));
                    }
                    data.push(v);
                }
                tensors.push((tname, DenseMatrix::from_vec(rows as usize, cols as usize, data)));
            }
            sections.push(Section { name, tensors });
        }
        if r.remaining() != 0 {
            return Err(EquinetError::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(Checkpoint { sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), EquinetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, EquinetError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EquinetError> {
        if self.remaining() < n {
            return Err(EquinetError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EquinetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4-byte word")))
    }

    fn string(&mut self) -> Result<String, EquinetError> {
        let len = self.u32()? as usize;
        if len > MAX_NAME {
            return Err(EquinetError::Checkpoint(format!("name length {len} exceeds limit")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| EquinetError::Checkpoint("name is not valid UTF-8".into()))
    }
}

impl ExtractorWeights {
    /// Packs the extractor into a checkpoint section named `extractor`.
    pub fn to_section(&self) -> Section {
        let mut s = Section::new("extractor");
        for (i, l) in self.backbone.iter().enumerate() {
            s.push(&format!("layer{i}.linear"), l.linear.clone());
            s.push(&format!("layer{i}.direction"), l.direction.clone());
        }
        s.push("fusion.linear", self.fusion.linear.clone());
        s.push("fusion.direction", self.fusion.direction.clone());
        s.push("head", self.head.clone());
        s.push("knn", DenseMatrix::scalar(self.knn as f64));
        s
    }

    /// Restores an extractor from its checkpoint section and validates the
    /// layer shape chain.
    pub fn from_section(s: &Section) -> Result<ExtractorWeights, EquinetError> {
        let mut backbone = Vec::new();
        let mut i = 0;
        while let Some(linear) = s.tensor(&format!("layer{i}.linear")) {
            let direction = s.require(&format!("layer{i}.direction"))?;
            backbone.push(VnLayerParams { linear: linear.clone(), direction: direction.clone() });
            i += 1;
        }
        if backbone.is_empty() {
            return Err(EquinetError::Checkpoint(format!(
                "section '{}' holds no backbone layers",
                s.name
            )));
        }
        let fusion = VnLayerParams {
            linear: s.require("fusion.linear")?.clone(),
            direction: s.require("fusion.direction")?.clone(),
        };
        let head = s.require("head")?.clone();
        let knn_m = s.require("knn")?;
        if knn_m.rows() != 1 || knn_m.cols() != 1 {
            return Err(EquinetError::Checkpoint("knn tensor must be 1x1".into()));
        }
        let knn_f = knn_m.at(0, 0);
        if knn_f < 1.0 || knn_f.fract() != 0.0 || knn_f > MAX_TENSOR_DIM as f64 {
            return Err(EquinetError::Checkpoint(format!("invalid neighbor count {knn_f}")));
        }
        let w = ExtractorWeights { backbone, fusion, head, knn: knn_f as usize };
        w.validate()?;
        Ok(w)
    }

    /// Content fingerprint over the serialized weights; used to prove the
    /// extractor stayed frozen across a training stage.
    pub fn content_hash(&self) -> u64 {
        let mut ck = Checkpoint::new();
        ck.push_section(self.to_section());
        fnv1a(&ck.to_bytes())
    }
}

// === tests ===
