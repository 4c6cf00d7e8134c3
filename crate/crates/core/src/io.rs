//! TSR1 tensor files and checkpoint directories.
//!
//! A TSR1 file is the magic `TSR1`, a u8 dtype code (0 = f32, 1 = f64), a u8
//! rank, `rank` little-endian u32 extents, then the row-major little-endian
//! payload.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TSR1";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} too large for TSR1", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Contract(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes a TSR1 buffer, converting the payload to `S` when the stored
/// dtype differs. `path` only labels errors.
pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<S>> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "missing TSR1 magic".into()));
    }
    let dtype = *bytes.get(4).ok_or_else(|| fail(4, "truncated before dtype".into()))?;
    let dtype = DType::from_code(dtype).ok_or_else(|| fail(4, format!("unknown dtype code {dtype}")))?;
    let rank = *bytes.get(5).ok_or_else(|| fail(5, "truncated before rank".into()))? as usize;
    let mut off = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(off..off + 4)
            .ok_or_else(|| fail(bytes.len(), format!("truncated extents, rank {rank}")))?;
        shape.push(u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as usize);
        off += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail(6, "extent product overflows".into()))?;
    let size = dtype.size();
    let expected = numel
        .checked_mul(size)
        .and_then(|n| n.checked_add(off))
        .ok_or_else(|| fail(6, "payload size overflows".into()))?;
    if bytes.len() != expected {
        let at = bytes.len().min(expected);
        return Err(fail(
            at,
            format!("payload holds {} bytes, shape {shape:?} needs {}", bytes.len() - off, expected - off),
        ));
    }
    let payload = &bytes[off..];
    let data: Vec<S> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Stored dtype of a TSR1 file without decoding the payload.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "missing TSR1 magic".into(),
        });
    }
    DType::from_code(bytes[4]).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 4,
        msg: format!("unknown dtype code {}", bytes[4]),
    })
}

const MANIFEST: &str = "manifest.txt";

/// Named tensors plus free-form metadata persisted as a directory of TSR1
/// files and a `manifest.txt` (`tensor <name> <file> <shape>` / `meta <key> <value>`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub tensors: Vec<(String, Tensor<S>)>,
    pub meta: Vec<(String, String)>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(vec![]);
    }
    s.split('x').map(|p| p.parse().ok()).collect()
}

impl<S: Scalar> Checkpoint<S> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# teethseg checkpoint\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Contract(format!("bad checkpoint meta entry {k:?}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '/') {
                return Err(Error::Contract(format!("bad tensor name {name:?}")));
            }
            let file = format!("{name}.tsr");
            write_tensor(&dir.join(&file), t)?;
            manifest.push_str(&format!("tensor {name} {file} {}\n", shape_text(t.shape())));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut ck = Checkpoint {
            tensors: Vec::new(),
            meta: Vec::new(),
        };
        let mut offset = 0u64;
        for line in text.lines() {
            let here = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Format {
                path: path.clone(),
                offset: here,
                msg: format!("{msg}: {line:?}"),
            };
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().ok_or_else(|| bad("meta without key"))?;
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.next().unwrap_or("").split_whitespace().collect();
                    let [name, file, shape] = fields[..] else {
                        return Err(bad("tensor entry needs name, file, shape"));
                    };
                    let shape = parse_shape(shape).ok_or_else(|| bad("unparseable shape"))?;
                    let t: Tensor<S> = read_tensor(&dir.join(file))?;
                    if t.shape() != shape {
                        return Err(bad("shape disagrees with tensor file"));
                    }
                    ck.tensors.push((name.to_string(), t));
                }
                _ => return Err(bad("unknown manifest entry")),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tsr1_roundtrip_is_bitwise(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_f64([2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"TSR1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn corrupt_inputs_give_format_errors_with_offsets() {
        let t = Tensor::<f64>::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let good = encode(&t).unwrap();
        let p = Path::new("x.tsr");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode::<f64>(&bad_magic, p), Err(Error::Format { offset: 0, .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[4] = 9;
        assert!(matches!(decode::<f64>(&bad_dtype, p), Err(Error::Format { offset: 4, .. })));

        let truncated = &good[..good.len() - 3];
        match decode::<f64>(truncated, p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, truncated.len()),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(decode::<f64>(&good[..7], p).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            tensors: vec![
                ("a.w".to_string(), Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 0.1]).unwrap()),
                ("s".to_string(), Tensor::scalar(7.0)),
            ],
            meta: vec![("step".into(), "12".into()), ("note".into(), "two words".into())],
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("note"), Some("two words"));
    }
}
