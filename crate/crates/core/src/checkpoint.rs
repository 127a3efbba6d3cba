//! Checkpoint formats.
//!
//! A tensor record is: magic `STTS`, format version u16, precision flag u8,
//! rank u8, dims as u64 little-endian, then raw row-major IEEE-754
//! little-endian values. Round-trips are bit-exact.
//!
//! A model checkpoint is a text manifest followed by the concatenated
//! records: the first line is `STTS-MANIFEST <n>`, then `n` lines of
//! `name<TAB>offset<TAB>len` (byte offsets into the data section), then the
//! data section itself.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

const MAGIC: &[u8; 4] = b"STTS";
const FORMAT_VERSION: u16 = 1;

pub fn write_tensor_record<R: Real>(t: &Tensor<R>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(R::PRECISION.flag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn read_tensor_record<R: Real>(bytes: &[u8], path: &str) -> Result<(Tensor<R>, usize)> {
    let fail = |reason: &str| Error::format(path, reason);
    if bytes.len() < 8 {
        return Err(fail("record truncated before header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (expected STTS)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let precision =
        Precision::from_flag(bytes[6]).ok_or_else(|| fail("unknown precision flag"))?;
    if precision != R::PRECISION {
        return Err(fail(&format!(
            "precision mismatch: file holds {precision}, expected {}",
            R::PRECISION
        )));
    }
    let rank = bytes[7] as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < pos + 8 {
            return Err(fail("record truncated in dims"));
        }
        shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let numel: usize = shape.iter().product();
    let width = precision.bytes();
    if bytes.len() < pos + numel * width {
        return Err(fail("record truncated in data"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(R::read_le(&bytes[pos + i * width..pos + (i + 1) * width]));
    }
    pos += numel * width;
    let tensor = Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))?;
    Ok((tensor, pos))
}

/// Peeks the precision flag of a raw tensor record without decoding it.
pub fn peek_record_precision(bytes: &[u8], path: &str) -> Result<Precision> {
    if bytes.len() < 7 || &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected STTS)"));
    }
    Precision::from_flag(bytes[6]).ok_or_else(|| Error::format(path, "unknown precision flag"))
}

/// Named tensors in a deterministic order, ready for manifest serialization.
pub struct NamedTensors<R> {
    entries: Vec<(String, Tensor<R>)>,
}

impl<R: Real> Default for NamedTensors<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> NamedTensors<R> {
    pub fn new() -> Self {
        NamedTensors {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut manifest = format!("STTS-MANIFEST {}\n", self.entries.len());
        for (name, t) in &self.entries {
            let offset = data.len();
            write_tensor_record(t, &mut data);
            manifest.push_str(&format!("{name}\t{offset}\t{}\n", data.len() - offset));
        }
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let (entries, data) = parse_manifest(bytes, path)?;
        let mut result = NamedTensors::new();
        for (name, offset, len) in entries {
            if offset + len > data.len() {
                return Err(Error::format(path, "manifest entry exceeds data section"));
            }
            let (tensor, used) = read_tensor_record(&data[offset..offset + len], path)?;
            if used != len {
                return Err(Error::format(path, "manifest length disagrees with record"));
            }
            result.push(name, tensor);
        }
        Ok(result)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Parses the manifest header, returning entries and the data section.
fn parse_manifest<'a>(
    bytes: &'a [u8],
    path: &str,
) -> Result<(Vec<(String, usize, usize)>, &'a [u8])> {
    let fail = |reason: &str| Error::format(path, reason);
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<&'a str> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(fail("truncated manifest"));
        }
        let line = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| fail("manifest is not UTF-8"))?;
        *pos += 1;
        Ok(line)
    };
    let header = next_line(&mut pos)?;
    let count: usize = header
        .strip_prefix("STTS-MANIFEST ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| fail("missing STTS-MANIFEST header"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let mut cols = line.split('\t');
        let name = cols.next().ok_or_else(|| fail("manifest line missing name"))?;
        let offset: usize = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("manifest line missing offset"))?;
        let len: usize = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fail("manifest line missing len"))?;
        entries.push((name.to_string(), offset, len));
    }
    Ok((entries, &bytes[pos..]))
}

/// Reads just enough of a model checkpoint to report its precision.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    let (entries, data) = parse_manifest(&bytes, &display)?;
    let (_, offset, _) = entries
        .first()
        .ok_or_else(|| Error::format(&display, "empty checkpoint"))?;
    if *offset >= data.len() {
        return Err(Error::format(&display, "manifest entry exceeds data section"));
    }
    peek_record_precision(&data[*offset..], &display)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_record_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = Tensor::<f64>::randn(vec![3, 4, 5], 1.0, &mut rng);
        let mut bytes = Vec::new();
        write_tensor_record(&t, &mut bytes);
        let (back, used) = read_tensor_record::<f64>(&bytes, "mem").unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t = Tensor::<f32>::randn(vec![7], 0.5, &mut rng);
        let mut bytes = Vec::new();
        write_tensor_record(&t, &mut bytes);
        let (back, _) = read_tensor_record::<f32>(&bytes, "mem").unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn corrupted_magic_is_a_structured_error() {
        let t = Tensor::<f64>::zeros(vec![2, 2]);
        let mut bytes = Vec::new();
        write_tensor_record(&t, &mut bytes);
        bytes[0] = b'X';
        match read_tensor_record::<f64>(&bytes, "bad.ckpt") {
            Err(Error::Format { path, reason }) => {
                assert_eq!(path, "bad.ckpt");
                assert!(reason.contains("magic"));
            }
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let t = Tensor::<f32>::zeros(vec![2]);
        let mut bytes = Vec::new();
        write_tensor_record(&t, &mut bytes);
        assert!(read_tensor_record::<f64>(&bytes, "mem").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut named = NamedTensors::<f64>::new();
        named.push("embed.w", Tensor::randn(vec![4, 8], 1.0, &mut rng));
        named.push("layers.0.wq", Tensor::randn(vec![8, 8], 1.0, &mut rng));
        named.push("head.b", Tensor::zeros(vec![4]));
        let bytes = named.to_bytes();
        let back = NamedTensors::<f64>::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.len(), 3);
        for (name, t) in named.iter() {
            let other = back.get(name).unwrap();
            assert_eq!(other.shape(), t.shape());
            for (a, b) in other.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_precision_peek() {
        let mut named = NamedTensors::<f32>::new();
        named.push("w", Tensor::zeros(vec![2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        named.save(&path).unwrap();
        assert_eq!(checkpoint_precision(&path).unwrap(), Precision::F32);
    }
}
