//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LWDNA1"
//! u32 len, arch JSON
//! u32 count, u64 × count      channel config
//! u64 count, f64 × count      parameters in canonical order
//! u64 count, f64 × count      BN running means then variances, node order
//! ```

use std::path::Path;

use lwdna_core::{ArchSpec, ChannelConfig, Network};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"LWDNA1";

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let arch = serde_json::to_vec(&net.arch).map_err(|e| Error::json("architecture", e))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(net.config.len() as u32).to_le_bytes());
    for &c in net.config.values() {
        out.extend_from_slice(&(c as u64).to_le_bytes());
    }
    let params: Vec<f64> = net.param_tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    push_f64s(&mut out, &params);
    let stats: Vec<f64> = net.bn_stats().flat_map(|(_, s)| s.mean.iter().chain(&s.var).copied().collect::<Vec<_>>()).collect();
    push_f64s(&mut out, &stats);
    Ok(out)
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            offset: self.at as u64,
            detail: format!("truncated {}", what),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.at;
        let n = self.u64(what)? as usize;
        if n != expected {
            return Err(Error::Format { what: "checkpoint", offset: at as u64, detail: format!("{} {} values, expected {}", n, what, expected) });
        }
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format { what: "checkpoint", offset: 0, detail: "bad magic".into() });
    }
    let len = r.u32("architecture length")?;
    let at = r.at;
    let arch: ArchSpec = serde_json::from_slice(r.take(len, "architecture")?)
        .map_err(|e| Error::Format { what: "checkpoint", offset: at as u64, detail: format!("architecture JSON: {}", e) })?;
    let n = r.u32("config length")?;
    let config = (0..n).map(|_| r.u64("config").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut net = Network::init(&arch, &ChannelConfig::new(config)?, 0)?;
    let total: usize = net.param_tensors().iter().map(|t| t.len()).sum();
    let params = r.f64s(total, "parameter")?;
    let mut it = params.into_iter();
    for t in net.param_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = it.next().expect("length checked"));
    }
    let stat_len: usize = net.bn_stats().map(|(_, s)| 2 * s.mean.len()).sum();
    let stats = r.f64s(stat_len, "statistic")?;
    let mut it = stats.into_iter();
    for s in net.stats.iter_mut().flatten() {
        s.mean.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        s.var.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
    }
    if r.at != bytes.len() {
        return Err(Error::Format { what: "checkpoint", offset: r.at as u64, detail: "trailing bytes".into() });
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lwdna_core::zoo;

    #[test]
    fn round_trip_and_truncation() {
        let arch = zoo::build("resnet-tiny", 4, 3, (8, 8)).unwrap();
        let mut net = Network::init(&arch, &arch.default_config(), 3).unwrap();
        net.stats.iter_mut().flatten().for_each(|s| s.mean[0] = 0.25);
        let bytes = encode(&net).unwrap();
        assert_eq!(&bytes[..6], b"LWDNA1");
        assert_eq!(decode(&bytes).unwrap(), net);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
