//! Tensor containers: a single file of length-prefixed, CRC32-checked chunks,
//! or a directory holding `manifest.json` and one `.bin` blob per tensor.
//!
//! Single-file layout (all integers little-endian):
//!
//! ```text
//! magic "FACEFIT\0" | version: u32 | chunk*
//! chunk = name_len: u32 | name | data_len: u64 | data | crc32(name ++ data): u32
//! ```
//!
//! The last chunk is `manifest`, a JSON [`AssetManifest`] whose tensor
//! offsets are absolute file offsets of each chunk's data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FACEFIT\0";
const MANIFEST: &str = "manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U64,
}

impl DType {
    pub fn size(self) -> usize {
        8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset of the data (absolute in the single-file form, 0 for
    /// per-tensor blobs).
    pub offset: u64,
    pub length: u64,
    pub endianness: Endianness,
    pub crc32: u32,
}

impl TensorEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Table of contents of a container plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub version: u32,
    /// What the container holds, e.g. `model` or `decoder`.
    pub kind: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: serde_json::Value,
}

/// One named array ready to be stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, values: &[f64]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            dtype: DType::F64,
            shape,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn u64(shape: Vec<usize>, values: impl IntoIterator<Item = u64>) -> Self {
        let bytes: Vec<u8> = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
        debug_assert_eq!(shape.iter().product::<usize>() * 8, bytes.len());
        Self {
            dtype: DType::U64,
            shape,
            bytes,
        }
    }
}

/// Named tensors read back from a container.
#[derive(Debug, Clone)]
pub struct Tensors {
    pub manifest: AssetManifest,
    blobs: BTreeMap<String, Vec<u8>>,
}

impl Tensors {
    fn entry(&self, name: &str, dtype: DType) -> Result<(&TensorEntry, &[u8])> {
        let e = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::format("asset", format!("missing tensor `{name}`")))?;
        if e.dtype != dtype {
            return Err(Error::format(
                "asset",
                format!("tensor `{name}` has dtype {:?}", e.dtype),
            ));
        }
        Ok((e, &self.blobs[name]))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.manifest
            .tensors
            .get(name)
            .map(|e| e.shape.as_slice())
            .ok_or_else(|| Error::format("asset", format!("missing tensor `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<Vec<f64>> {
        let (_, b) = self.entry(name, DType::F64)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn u64(&self, name: &str) -> Result<Vec<u64>> {
        let (_, b) = self.entry(name, DType::U64)?;
        Ok(b.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn entry_for(t: &Tensor, offset: u64) -> TensorEntry {
    TensorEntry {
        dtype: t.dtype,
        shape: t.shape.clone(),
        offset,
        length: t.bytes.len() as u64,
        endianness: Endianness::Little,
        crc32: crc32fast::hash(&t.bytes),
    }
}

fn chunk_crc(name: &[u8], data: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(name);
    h.update(data);
    h.finalize()
}

fn push_chunk(out: &mut Vec<u8>, name: &str, data: &[u8]) -> u64 {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    let offset = out.len() as u64;
    out.extend_from_slice(data);
    out.extend_from_slice(&chunk_crc(name.as_bytes(), data).to_le_bytes());
    offset
}

/// Serializes tensors into the single-file form.
pub fn encode_container(
    kind: &str,
    metadata: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        if name == MANIFEST || entries.contains_key(name) {
            return Err(Error::format(
                "asset",
                format!("duplicate or reserved tensor name `{name}`"),
            ));
        }
        let offset = push_chunk(&mut out, name, &t.bytes);
        entries.insert(name.clone(), entry_for(t, offset));
    }
    let manifest = AssetManifest {
        version: FORMAT_VERSION,
        kind: kind.into(),
        tensors: entries,
        metadata,
    };
    push_chunk(&mut out, MANIFEST, &serde_json::to_vec(&manifest)?);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                what: what.into(),
                expected: n,
                found: left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Checks every manifest entry against its blob.
fn check_entries(
    manifest: &AssetManifest,
    blobs: &BTreeMap<String, Vec<u8>>,
    offsets: Option<&BTreeMap<String, u64>>,
) -> Result<()> {
    check_version(manifest.version)?;
    for (name, e) in &manifest.tensors {
        let Some(blob) = blobs.get(name) else {
            return Err(Error::Truncated {
                what: name.clone(),
                expected: e.length as usize,
                found: 0,
            });
        };
        let declared = e.element_count() * e.dtype.size();
        if e.length as usize != blob.len() || declared != blob.len() {
            return Err(Error::Truncated {
                what: name.clone(),
                expected: declared.max(e.length as usize),
                found: blob.len(),
            });
        }
        if let Some(off) = offsets.and_then(|o| o.get(name)) {
            if *off != e.offset {
                return Err(Error::format(
                    "asset",
                    format!("tensor `{name}` is not at its declared offset"),
                ));
            }
        }
        if crc32fast::hash(blob) != e.crc32 {
            return Err(Error::Checksum {
                chunk: name.clone(),
            });
        }
    }
    Ok(())
}

/// Parses and verifies the single-file form.
pub fn decode_container(bytes: &[u8]) -> Result<Tensors> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(Error::format("asset", "not an asset container (bad magic)"));
    }
    check_version(r.u32("header")?)?;
    let mut blobs = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    let mut manifest = None;
    while r.pos < bytes.len() {
        let name_len = r.u32("chunk header")? as usize;
        let name = String::from_utf8(r.take(name_len, "chunk name")?.to_vec())
            .map_err(|_| Error::format("asset", "chunk name is not UTF-8"))?;
        let len = r.u64(&name)? as usize;
        let offset = r.pos as u64;
        let data = r.take(len, &name)?;
        let crc = r.u32(&name)?;
        if crc != chunk_crc(name.as_bytes(), data) {
            return Err(Error::Checksum { chunk: name });
        }
        if name == MANIFEST {
            manifest = Some(serde_json::from_slice::<AssetManifest>(data)?);
        } else {
            offsets.insert(name.clone(), offset);
            blobs.insert(name, data.to_vec());
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Truncated {
        what: MANIFEST.into(),
        expected: 1,
        found: 0,
    })?;
    check_entries(&manifest, &blobs, Some(&offsets))?;
    Ok(Tensors { manifest, blobs })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_container(
    path: &Path,
    kind: &str,
    metadata: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    write_file(path, &encode_container(kind, metadata, tensors)?)
}

/// Writes `dir/manifest.json` and `dir/<name>.bin` per tensor.
pub fn write_container_dir(
    dir: &Path,
    kind: &str,
    metadata: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        if name.contains(['/', '\\']) || name.starts_with('.') || entries.contains_key(name) {
            return Err(Error::format(
                "asset",
                format!("invalid tensor name `{name}`"),
            ));
        }
        write_file(&dir.join(format!("{name}.bin")), &t.bytes)?;
        entries.insert(name.clone(), entry_for(t, 0));
    }
    let manifest = AssetManifest {
        version: FORMAT_VERSION,
        kind: kind.into(),
        tensors: entries,
        metadata,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )
}

/// Reads either form, chosen by whether `path` is a directory.
pub fn read_container(path: &Path) -> Result<Tensors> {
    if !path.is_dir() {
        return decode_container(&read_file(path)?);
    }
    let manifest: AssetManifest = serde_json::from_slice(&read_file(&path.join(MANIFEST_FILE))?)?;
    check_version(manifest.version)?;
    let mut blobs = BTreeMap::new();
    for name in manifest.tensors.keys() {
        let p = path.join(format!("{name}.bin"));
        if p.exists() {
            blobs.insert(name.clone(), read_file(&p)?);
        }
    }
    check_entries(&manifest, &blobs, None)?;
    Ok(Tensors { manifest, blobs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let tensors = vec![
            (
                "a".to_string(),
                Tensor::f64(vec![2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 0.1 + 0.2]),
            ),
            ("b".to_string(), Tensor::u64(vec![3], [1, 2, u64::MAX])),
        ];
        encode_container("test", serde_json::json!({"k": 1}), &tensors).unwrap()
    }

    #[test]
    fn round_trip() {
        let t = decode_container(&sample()).unwrap();
        assert_eq!(t.manifest.kind, "test");
        let a = t.f64("a").unwrap();
        assert_eq!(a[3].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(a[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(t.u64("b").unwrap(), vec![1, 2, u64::MAX]);
        assert!(t.f64("b").is_err());
        assert!(t.f64("c").is_err());
    }

    #[test]
    fn corruption_is_detected_distinctly() {
        let good = sample();
        // flipped data byte inside tensor `a`
        let mut bad = good.clone();
        bad[8 + 4 + 4 + 1 + 8 + 3] ^= 0x40;
        assert!(matches!(
            decode_container(&bad),
            Err(Error::Checksum { .. })
        ));
        // cut short
        assert!(matches!(
            decode_container(&good[..good.len() - 5]),
            Err(Error::Truncated { .. })
        ));
        // inflated length field of the first chunk
        let mut bad = good.clone();
        let at = 8 + 4 + 4 + 1;
        bad[at..at + 8].copy_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(matches!(
            decode_container(&bad),
            Err(Error::Truncated { .. })
        ));
        // future version
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_container(&bad),
            Err(Error::VersionMismatch {
                found: 7,
                supported: 1
            })
        ));
        let mut bad = good;
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_lengths_must_match_blobs() {
        let tensors = vec![("a".to_string(), Tensor::f64(vec![2], &[1.0, 2.0]))];
        let dir = tempfile::tempdir().unwrap();
        write_container_dir(dir.path(), "t", serde_json::Value::Null, &tensors).unwrap();
        assert_eq!(
            read_container(dir.path()).unwrap().f64("a").unwrap(),
            vec![1.0, 2.0]
        );
        fs::write(dir.path().join("a.bin"), [0u8; 8]).unwrap();
        assert!(matches!(
            read_container(dir.path()),
            Err(Error::Truncated { .. })
        ));
        fs::write(dir.path().join("a.bin"), [0u8; 16]).unwrap();
        assert!(matches!(
            read_container(dir.path()),
            Err(Error::Checksum { .. })
        ));
    }
}
