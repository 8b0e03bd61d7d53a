use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ClassifierSpec, Generator, GeneratorSpec, Param};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NINV";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "spec", rename_all = "lowercase")]
pub enum ModelDescriptor {
    Classifier(ClassifierSpec),
    Generator(GeneratorSpec),
    /// A parameter-free placeholder.
    Empty,
}

/// Architecture, named parameters, seed, and free-form training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: ModelDescriptor,
    pub params: Vec<Param>,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelDescriptor,
    seed: u64,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn empty(seed: u64) -> Self {
        Checkpoint {
            descriptor: ModelDescriptor::Empty,
            params: Vec::new(),
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_classifier(clf: &Classifier, seed: u64) -> Self {
        Checkpoint {
            descriptor: ModelDescriptor::Classifier(clf.spec().clone()),
            params: clf.params().to_vec(),
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_generator(gen: &Generator, seed: u64) -> Self {
        Checkpoint {
            descriptor: ModelDescriptor::Generator(gen.spec().clone()),
            params: gen.params().to_vec(),
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn into_classifier(self) -> Result<Classifier> {
        match self.descriptor {
            ModelDescriptor::Classifier(spec) => Classifier::from_params(spec, self.params),
            other => Err(Error::Consistency(format!("checkpoint holds {other:?}, not a classifier"))),
        }
    }

    pub fn into_generator(self) -> Result<Generator> {
        match self.descriptor {
            ModelDescriptor::Generator(spec) => Generator::from_params(spec, self.params),
            other => Err(Error::Consistency(format!("checkpoint holds {other:?}, not a generator"))),
        }
    }

    /// Serialize to the binary layout (little-endian, trailing CRC32).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.descriptor.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format {
            context: "checkpoint descriptor".into(),
            detail: e.to_string(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &json)?;
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_str(&mut out, p.name())?;
            put_u32(&mut out, p.shape().len())?;
            for &d in p.shape() {
                put_u32(&mut out, d)?;
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let found = &bytes[..bytes.len().min(4)];
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC.to_vec(),
                found: found.to_vec(),
            });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(r.truncated());
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let json = r.string()?;
        let header: Header = serde_json::from_str(&json).map_err(|e| Error::Format {
            context: "checkpoint descriptor".into(),
            detail: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.truncated())?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Param::new(name, shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Format {
                context: "checkpoint".into(),
                detail: format!("{} trailing bytes after the last tensor", body.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            descriptor: header.model,
            params,
            seed: header.seed,
            metadata: header.metadata,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        context: "checkpoint".into(),
        detail: format!("{v} does not fit in 32 bits"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::Format {
            context: "checkpoint".into(),
            detail: format!("unexpected end of data at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.truncated())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Format {
            context: "checkpoint".into(),
            detail: format!("invalid UTF-8: {e}"),
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CondMode;
    use crate::seed;

    #[test]
    fn classifier_round_trip_bit_exact() {
        let clf = Classifier::new(ClassifierSpec::cnn([1, 12, 12], 4), &mut seed::from_seed(3)).unwrap();
        let ck = Checkpoint::from_classifier(&clf, 3).with_meta("epochs", 7);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let clf2 = back.into_classifier().unwrap();
        for (a, b) in clf.params().iter().zip(clf2.params()) {
            let bits = |p: &Param| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn generator_round_trip() {
        let spec = crate::model::GeneratorSpec::new(3, [1, 8, 8], CondMode::Hidden { dim: 16, seed: 9 });
        let gen = Generator::new(spec, &mut seed::from_seed(1)).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::from_generator(&gen, 1).to_bytes().unwrap())
            .unwrap()
            .into_generator()
            .unwrap();
        assert_eq!(back, gen);
    }

    #[test]
    fn empty_model_is_valid() {
        let ck = Checkpoint::empty(0);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NINV");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let clf = Classifier::new(ClassifierSpec::mlp([1, 4, 4], 2), &mut seed::from_seed(0)).unwrap();
        let bytes = Checkpoint::from_classifier(&clf, 0).to_bytes().unwrap();

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic { .. })));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnsupportedVersion(9))));

        assert!(Checkpoint::from_bytes(&bytes[..6]).is_err());
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checksum { .. })));
    }
}
