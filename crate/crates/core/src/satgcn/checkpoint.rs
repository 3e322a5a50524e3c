//! Flat binary parameter container.
//!
//! ```text
//! "SATG" | version u32 | layers u32 | (m_in u32, m_out u32) * layers
//! then per layer, f32: Theta (row-major) | Phi | alpha | beta | theta_s
//! ```
//! All integers and reals are little-endian.

use std::path::Path;

use super::{FeStackParams, SatGcnError, SatGcnLayerParams};

pub const MAGIC: &[u8; 4] = b"SATG";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> SatGcnError {
    SatGcnError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(stack: &FeStackParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(stack.layers.len() as u32).to_le_bytes());
    for l in &stack.layers {
        out.extend_from_slice(&(l.m_in() as u32).to_le_bytes());
        out.extend_from_slice(&(l.m_out() as u32).to_le_bytes());
    }
    for l in &stack.layers {
        for v in l.flatten() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take4(&mut self, what: &str) -> Result<[u8; 4], SatGcnError> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos += 4;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32, SatGcnError> {
        Ok(u32::from_le_bytes(self.take4(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32, SatGcnError> {
        Ok(f32::from_le_bytes(self.take4(what)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FeStackParams, SatGcnError> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take4("magic")? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut dims = Vec::with_capacity(count.min(1024));
    for l in 0..count {
        let m_in = r.u32("m_in")? as usize;
        let m_out = r.u32("m_out")? as usize;
        if m_in == 0 || m_out == 0 {
            return Err(err(format!("layer {l} has a zero dimension")));
        }
        dims.push((m_in, m_out));
    }
    let mut layers = Vec::with_capacity(count);
    for (l, &(m_in, m_out)) in dims.iter().enumerate() {
        let n = 2 * m_in * m_out + 2 * m_out + 1;
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.f32("parameters")?;
            if !v.is_finite() {
                return Err(err(format!("layer {l} holds a non-finite value")));
            }
            flat.push(v as f64);
        }
        layers.push(SatGcnLayerParams::from_flat(m_in, m_out, &flat)?);
    }
    if r.pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let stack = FeStackParams { layers };
    if let Some(first) = stack.layers.first() {
        stack.validate(first.m_in())?;
    }
    Ok(stack)
}

pub fn write_checkpoint(stack: &FeStackParams, path: impl AsRef<Path>) -> Result<(), SatGcnError> {
    std::fs::write(path, encode_checkpoint(stack)).map_err(|e| err(e.to_string()))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<FeStackParams, SatGcnError> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| err(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let stack = FeStackParams::init(&[2, 3], 0);
        let bytes = encode_checkpoint(&stack);
        assert_eq!(&bytes[..4], b"SATG");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 4 * (2 * 6 + 2 * 3 + 1));
        let theta_s = f32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(theta_s, 1.0);
    }

    #[test]
    fn rejects_malformed() {
        let good = encode_checkpoint(&FeStackParams::init(&[2, 2, 2], 1));
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
        let mut nan = good.clone();
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
        // chain mismatch: 2->2 followed by 3->2
        let mut chain = good;
        chain[20..24].copy_from_slice(&3u32.to_le_bytes());
        assert!(decode_checkpoint(&chain).is_err());
    }

    proptest! {
        #[test]
        fn valid_files_round_trip(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let mut chain = vec![dims[0]];
            chain.extend(dims.iter().copied());
            let mut rng = crate::numerics::Rng::new(seed);
            let mut bytes = Vec::new();
            bytes.extend_from_slice(b"SATG");
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&((chain.len() - 1) as u32).to_le_bytes());
            for w in chain.windows(2) {
                bytes.extend_from_slice(&(w[0] as u32).to_le_bytes());
                bytes.extend_from_slice(&(w[1] as u32).to_le_bytes());
            }
            for w in chain.windows(2) {
                for _ in 0..(2 * w[0] * w[1] + 2 * w[1] + 1) {
                    // arbitrary finite bit patterns, subnormals and signed zeros included
                    let v = loop {
                        let v = f32::from_bits(rng.next_u64() as u32);
                        if v.is_finite() { break v; }
                    };
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let stack = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(encode_checkpoint(&stack), bytes);
        }
    }
}
