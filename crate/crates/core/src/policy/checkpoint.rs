//! Binary checkpoint format.
//!
//! ```text
//! magic "INCSQLCK" | u32 version | u64 len + header JSON (config, vocabulary)
//! | u32 param count | per param: u32 name len, name, u64 rows, u64 cols, f64 data
//! ```
//! All integers and floats are little-endian. Loading rebuilds the model
//! from the stored config and then checks every parameter's name and shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Policy, PolicyConfig};
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"INCSQLCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    vocab_min_count: usize,
    vocab: Vec<String>,
}

pub fn to_bytes(policy: &Policy) -> Result<Vec<u8>> {
    let header = Header {
        config: policy.config.clone(),
        vocab_min_count: policy.vocab.min_count,
        vocab: policy.vocab.tokens().to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * policy.params.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(policy.params.len() as u32).to_le_bytes());
    for (name, t) in policy.params.names.iter().zip(&policy.params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(policy: &Policy, path: &Path) -> Result<()> {
    crate::util::write_atomic(path, &to_bytes(policy)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Policy> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let vocab = Vocabulary::from_tokens(header.vocab, header.vocab_min_count);
    // Never re-read external embeddings: the stored weights are authoritative.
    let config = PolicyConfig {
        embedding_file: None,
        ..header.config.clone()
    };
    let mut policy = Policy::new(config, vocab)?;
    policy.config = header.config;
    let count = r.u32()? as usize;
    if count != policy.params.len() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: checkpoint has {count} parameter groups, model expects {}",
            policy.params.len()
        )));
    }
    for k in 0..count {
        let nl = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nl)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = r.len()?;
        let cols = r.len()?;
        let expected = &policy.params.tensors[k];
        if name != policy.params.names[k] || (rows, cols) != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch at {name}: stored {rows}x{cols}, expected {} {}x{}",
                policy.params.names[k], expected.rows, expected.cols
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let t = &mut policy.params.tensors[k];
        for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(policy)
}

pub fn load(path: &Path) -> Result<Policy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and additionally requires the stored architecture to match `expected`.
pub fn load_checked(path: &Path, expected: &PolicyConfig) -> Result<Policy> {
    let p = load(path)?;
    let dims = |c: &PolicyConfig| {
        (
            c.word_emb_dim,
            c.action_emb_dim,
            c.type_emb_dim,
            c.encoder_hidden,
            c.decoder_layers,
            c.decoder_hidden,
            c.anycol,
        )
    };
    if dims(&p.config) != dims(expected) {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: checkpoint architecture {:?} differs from configured {:?}",
            dims(&p.config),
            dims(expected)
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Vocabulary;

    fn small() -> Policy {
        let cfg = PolicyConfig {
            word_emb_dim: 4,
            action_emb_dim: 3,
            type_emb_dim: 2,
            encoder_hidden: 4,
            decoder_hidden: 4,
            ..PolicyConfig::default()
        };
        Policy::new(cfg, Vocabulary::from_tokens(vec!["a".into(), "b".into()], 1)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let bytes = to_bytes(&p).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.vocab, p.vocab);
        assert_eq!(q.params, p.params);
        assert_eq!(to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let bytes = to_bytes(&small()).unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = small();
        save(&p, &path).unwrap();
        assert!(load_checked(&path, &p.config).is_ok());
        let other = PolicyConfig {
            encoder_hidden: 6,
            decoder_hidden: 6,
            ..p.config.clone()
        };
        let err = load_checked(&path, &other).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }
}
