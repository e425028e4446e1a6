use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter groups (backbone, one per adapter) plus the fingerprint
/// of the model configuration they belong to.
///
/// Layout (little endian): magic, version `u32`, fingerprint, group count
/// `u32`, then per group its name, entry count `u32` and per entry
/// `name, frozen u8, ndim u32, dims u64.., values f64..`. Strings are a `u32`
/// length followed by UTF-8 bytes. A SHA-256 of everything before it ends
/// the file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub groups: BTreeMap<String, ParameterSet>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Validation(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Validation(format!("checkpoint string: {e}")))
    }
}

impl Checkpoint {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, name: impl Into<String>, params: ParameterSet) -> Self {
        self.groups.insert(name.into(), params);
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParameterSet> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no group '{name}'")))
    }

    /// All groups merged into one set.
    pub fn merged(&self) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for g in self.groups.values() {
            out.merge(g)?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut buf, &self.fingerprint);
        buf.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (gname, set) in &self.groups {
            put_str(&mut buf, gname);
            buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for (name, t) in set.iter() {
                put_str(&mut buf, name);
                buf.push(set.is_frozen(name) as u8);
                buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                for d in t.shape() {
                    buf.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Validation("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Validation("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { data: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut ck = Checkpoint::new(r.string()?);
        for _ in 0..r.u32()? {
            let gname = r.string()?;
            let mut set = ParameterSet::new();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let frozen = r.take(1)?[0] != 0;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let raw = r.take(numel * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                set.insert(name.clone(), Tensor::new(&shape, data)?)?;
                if frozen {
                    set.freeze(&name)?;
                }
            }
            ck.groups.insert(gname, set);
        }
        if r.pos != body.len() {
            return Err(Error::Validation("trailing bytes in checkpoint".into()));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the configuration fingerprint.
    pub fn load_expecting(path: &Path, fingerprint: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} not found", path.display())));
        }
        let ck = Self::load(path)?;
        if ck.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}
