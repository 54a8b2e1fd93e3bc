//! Parameter files.
//!
//! ```text
//! "TDNW"  u16 version  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, u64 offset }
//! data: little-endian f32, row-major, `offset` in bytes from the start of data
//! ```
//!
//! All integers are little-endian. Tensors appear in
//! [`TedNetParams::visit`] order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_manifest, TedNet, TedNetParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDNW";
pub const VERSION: u16 = 1;

/// One named tensor as stored in a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode_params(params: &TedNetParams) -> Vec<u8> {
    let mut entries = Vec::new();
    params.visit("", &mut |name, t| entries.push((name, t)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses a parameter file into its entries without interpreting names.
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter format version {version}, expected {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;

    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let offset = u64::from_le_bytes(r.array()?);
        headers.push((name, shape, offset));
    }

    let data_start = r.pos as u64;
    let mut expected_offset = 0u64;
    let mut entries = Vec::with_capacity(headers.len());
    for (name, shape, offset) in headers {
        if offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor `{name}` at byte offset {offset}, expected {expected_offset}"
            )));
        }
        let n: usize = shape.iter().product();
        expected_offset += 4 * n as u64;
        let raw = r.take(4 * n).map_err(|e| match e {
            Error::Truncated { actual, .. } => Error::Truncated {
                expected: data_start + expected_offset,
                actual,
            },
            e => e,
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        entries.push(Entry { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Decodes a file and checks it against the tensors `net` expects.
pub fn decode_params(bytes: &[u8], net: &TedNet) -> Result<TedNetParams> {
    let entries = decode_entries(bytes)?;
    let mut params = net.init_params(0);
    let found: Vec<_> = entries
        .iter()
        .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
        .collect();
    check_manifest(&params.manifest(), &found)?;
    let mut it = entries.into_iter();
    params.visit_mut("", &mut |_, t| *t = it.next().expect("manifest checked").tensor);
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &TedNetParams) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>, net: &TedNet) -> Result<TedNetParams> {
    decode_params(&std::fs::read(path)?, net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn net() -> TedNet {
        TedNet::new(ModelConfig::gradcheck()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = net();
        let p = net.init_params(9);
        let bytes = encode_params(&p);
        let q = decode_params(&bytes, &net).unwrap();
        let bits = |p: &TedNetParams| {
            p.clone()
                .into_vec()
                .into_iter()
                .flat_map(|t| t.into_data().into_iter().map(f32::to_bits))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(encode_params(&q), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_params(&net().init_params(0));
        assert_eq!(&bytes[..4], b"TDNW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"embed.0.weight");
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_params(&net().init_params(0));
        bytes[0] = b'X';
        assert!(matches!(decode_entries(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_params(&net().init_params(0));
        bytes[4] = 7;
        assert!(matches!(decode_entries(&bytes), Err(Error::Format(m)) if m.contains("version 7")));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let bytes = encode_params(&net().init_params(0));
        let cut = &bytes[..bytes.len() - 10];
        match decode_entries(cut) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_entries(&bytes[..7]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn incompatible_config_names_first_mismatch() {
        let a = net();
        let b = TedNet::new(ModelConfig {
            embed_dim: 8,
            ..ModelConfig::gradcheck()
        })
        .unwrap();
        let bytes = encode_params(&a.init_params(0));
        match decode_params(&bytes, &b) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "embed.0.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tdnw");
        let net = net();
        let p = net.init_params(3);
        save_params(&path, &p).unwrap();
        assert_eq!(load_params(&path, &net).unwrap(), p);
    }
}
