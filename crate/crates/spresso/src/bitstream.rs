//! Bit-exact .spz serialization: a fixed 42-byte little-endian header
//! followed by fixed-length codes packed MSB-first in frame-major order.

use crate::error::{Error, Result};
use crate::quantizer::CodeGrid;

pub const SPZ_MAGIC: &[u8; 4] = b"SPZ1";
pub const SPZ_VERSION: u8 = 1;
pub const SPZ_HEADER_LEN: usize = 42;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpzHeader {
    pub sample_rate: u32,
    pub hop: u16,
    pub window_len: u16,
    pub channels: u16,
    pub c: u8,
    pub t: u16,
    pub d: u16,
    pub m: u8,
    pub log2k: u8,
    pub num_frames: u32,
    pub seed: u64,
}

impl SpzHeader {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.channels % self.c as u16 != 0 {
            return Err(Error::Format("c must divide C".into()));
        }
        if self.d != self.channels / self.c as u16 {
            return Err(Error::Format(format!(
                "header D = {} inconsistent with C/c = {}",
                self.d,
                self.channels / self.c as u16
            )));
        }
        if self.m == 0 || self.log2k == 0 {
            return Err(Error::Format("m and log2k must be positive".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(SPZ_HEADER_LEN);
        b.extend_from_slice(SPZ_MAGIC);
        b.push(SPZ_VERSION);
        b.extend_from_slice(&self.sample_rate.to_le_bytes());
        b.extend_from_slice(&self.hop.to_le_bytes());
        b.extend_from_slice(&self.window_len.to_le_bytes());
        b.extend_from_slice(&self.channels.to_le_bytes());
        b.push(self.c);
        b.extend_from_slice(&self.t.to_le_bytes());
        b.extend_from_slice(&self.d.to_le_bytes());
        b.push(self.m);
        b.push(self.log2k);
        b.extend_from_slice(&self.num_frames.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&[0u8; 8]); // reserved
        debug_assert_eq!(b.len(), SPZ_HEADER_LEN);
        b
    }

    pub fn parse(data: &[u8]) -> Result<Self> {
        if data.len() < SPZ_HEADER_LEN {
            return Err(Error::CorruptStream("spz header truncated".into()));
        }
        if &data[0..4] != SPZ_MAGIC {
            return Err(Error::Format("bad spz magic".into()));
        }
        if data[4] != SPZ_VERSION {
            return Err(Error::Format(format!("unsupported spz version {}", data[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes(data[i..i + 2].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
        let h = SpzHeader {
            sample_rate: u32_at(5),
            hop: u16_at(9),
            window_len: u16_at(11),
            channels: u16_at(13),
            c: data[15],
            t: u16_at(16),
            d: u16_at(18),
            m: data[20],
            log2k: data[21],
            num_frames: u32_at(22),
            seed: u64::from_le_bytes(data[26..34].try_into().unwrap()),
        };
        h.validate()?;
        Ok(h)
    }
}

/// Pack codes MSB-first, frame-major, `log2k` bits each; zero-padded to a
/// byte boundary.
pub fn pack_codes(codes: &CodeGrid, log2k: u8) -> Result<Vec<u8>> {
    let bits_per = log2k as usize;
    if bits_per == 0 || bits_per > 16 {
        return Err(Error::invalid("log2k must be in 1..=16"));
    }
    let limit = 1u32 << bits_per;
    let total_bits = codes.codes.len() * bits_per;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &code in &codes.codes {
        if code >= limit {
            return Err(Error::invalid(format!(
                "code {code} does not fit in {bits_per} bits"
            )));
        }
        for i in (0..bits_per).rev() {
            if (code >> i) & 1 == 1 {
                out[bit / 8] |= 1 << (7 - bit % 8);
            }
            bit += 1;
        }
    }
    Ok(out)
}

/// Exact inverse of `pack_codes`; rejects wrong lengths and nonzero pad bits.
pub fn unpack_codes(bytes: &[u8], m: usize, log2k: u8, num_frames: usize) -> Result<CodeGrid> {
    let bits_per = log2k as usize;
    if bits_per == 0 || bits_per > 16 || m == 0 {
        return Err(Error::invalid("bad code geometry"));
    }
    let total_bits = m * bits_per * num_frames;
    let expect = total_bits.div_ceil(8);
    if bytes.len() != expect {
        return Err(Error::CorruptStream(format!(
            "payload is {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut codes = Vec::with_capacity(m * num_frames);
    let mut bit = 0usize;
    for _ in 0..m * num_frames {
        let mut v = 0u32;
        for _ in 0..bits_per {
            let b = (bytes[bit / 8] >> (7 - bit % 8)) & 1;
            v = (v << 1) | b as u32;
            bit += 1;
        }
        codes.push(v);
    }
    for pad in bit..bytes.len() * 8 {
        if (bytes[pad / 8] >> (7 - pad % 8)) & 1 != 0 {
            return Err(Error::CorruptStream("nonzero pad bits".into()));
        }
    }
    Ok(CodeGrid {
        m,
        k: 1 << bits_per,
        frames: num_frames,
        codes,
    })
}

/// Serialize header + packed payload.
pub fn write_spz(header: &SpzHeader, codes: &CodeGrid) -> Result<Vec<u8>> {
    header.validate()?;
    if codes.m != header.m as usize || codes.frames != header.num_frames as usize {
        return Err(Error::invalid("code grid does not match header"));
    }
    let mut out = header.to_bytes();
    out.extend_from_slice(&pack_codes(codes, header.log2k)?);
    Ok(out)
}

/// Parse header + payload; returns both.
pub fn read_spz(data: &[u8]) -> Result<(SpzHeader, CodeGrid)> {
    let header = SpzHeader::parse(data)?;
    let codes = unpack_codes(
        &data[SPZ_HEADER_LEN..],
        header.m as usize,
        header.log2k,
        header.num_frames as usize,
    )?;
    Ok((header, codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(m: usize, log2k: u8, frames: usize, codes: Vec<u32>) -> CodeGrid {
        CodeGrid {
            m,
            k: 1 << log2k,
            frames,
            codes,
        }
    }

    #[test]
    fn hand_packed_byte() {
        // [3, 1, 2] at 2 bits: 11 01 10 -> 0b1101_1000 = 0xD8
        let g = grid(3, 2, 1, vec![3, 1, 2]);
        assert_eq!(pack_codes(&g, 2).unwrap(), vec![0xD8]);
        let back = unpack_codes(&[0xD8], 3, 2, 1).unwrap();
        assert_eq!(back.codes, vec![3, 1, 2]);
    }

    #[test]
    fn published_payload_size_for_96_bits() {
        let g = grid(8, 12, 1, vec![0; 8]);
        let bytes = pack_codes(&g, 12).unwrap();
        assert_eq!(bytes, vec![0u8; 12]);
    }

    #[test]
    fn round_trip_fuzz() {
        let mut rng = crate::rng::substream(0, "corpus", &[999]);
        for _ in 0..1000 {
            let m = rng.gen_range(1..=32usize);
            let log2k = rng.gen_range(1..=16u8);
            let frames = rng.gen_range(1..=512usize);
            let codes: Vec<u32> = (0..m * frames)
                .map(|_| rng.gen_range(0..(1u32 << log2k)))
                .collect();
            let g = grid(m, log2k, frames, codes.clone());
            let packed = pack_codes(&g, log2k).unwrap();
            let back = unpack_codes(&packed, m, log2k, frames).unwrap();
            assert_eq!(back.codes, codes);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let g = grid(4, 8, 3, vec![7; 12]);
        let packed = pack_codes(&g, 8).unwrap();
        let err = unpack_codes(&packed[..packed.len() - 1], 4, 8, 3).unwrap_err();
        assert!(matches!(err, Error::CorruptStream(_)));
    }

    #[test]
    fn nonzero_pad_bits_rejected() {
        let g = grid(3, 2, 1, vec![3, 1, 2]);
        let mut packed = pack_codes(&g, 2).unwrap();
        packed[0] |= 0x01; // flip a pad bit
        let err = unpack_codes(&packed, 3, 2, 1).unwrap_err();
        assert!(matches!(err, Error::CorruptStream(_)));
    }

    #[test]
    fn out_of_range_code_rejected() {
        let g = grid(1, 2, 1, vec![4]);
        assert!(pack_codes(&g, 2).is_err());
    }

    fn header() -> SpzHeader {
        SpzHeader {
            sample_rate: 12800,
            hop: 128,
            window_len: 256,
            channels: 128,
            c: 2,
            t: 4,
            d: 64,
            m: 4,
            log2k: 10,
            num_frames: 25,
            seed: 42,
        }
    }

    #[test]
    fn header_and_file_round_trip() {
        let h = header();
        let bytes = h.to_bytes();
        assert_eq!(bytes.len(), SPZ_HEADER_LEN);
        assert_eq!(SpzHeader::parse(&bytes).unwrap(), h);

        let mut rng = crate::rng::substream(0, "corpus", &[1000]);
        let codes: Vec<u32> = (0..4 * 25).map(|_| rng.gen_range(0..1024)).collect();
        let g = grid(4, 10, 25, codes);
        let file = write_spz(&h, &g).unwrap();
        let (h2, g2) = read_spz(&file).unwrap();
        assert_eq!(h2, h);
        assert_eq!(g2, g);
    }

    #[test]
    fn bad_magic_and_geometry_rejected() {
        let mut bytes = header().to_bytes();
        bytes[0] = b'X';
        assert!(SpzHeader::parse(&bytes).is_err());

        let mut h = header();
        h.d = 63; // not C / c
        assert!(h.validate().is_err());
    }
}
