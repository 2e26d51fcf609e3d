use std::fmt;

use rand::Rng;

use super::CodecError;

/// Payload bits, each 0 or 1. Hex form is big-endian: bit 0 is the most
/// significant bit of the first hex digit; unused trailing bits of the last
/// digit must be zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitString(Vec<u8>);

impl BitString {
    pub fn new(bits: Vec<u8>) -> Result<Self, CodecError> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(CodecError::InvalidBits(format!("bit value {b}")));
        }
        Ok(Self(bits))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    /// Uniform random bits.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        Self((0..n).map(|_| rng.gen_range(0..2u8)).collect())
    }

    /// Uniform over all non-zero strings; the all-zero code is reserved
    /// since it always maps to the nominal drawing.
    pub fn random_nonzero(n: usize, rng: &mut impl Rng) -> Self {
        loop {
            let b = Self::random(n, rng);
            if n == 0 || b.0.contains(&1) {
                return b;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| b as f32).collect()
    }

    pub fn hamming(&self, other: &BitString) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    pub fn to_hex(&self) -> String {
        self.0
            .chunks(4)
            .map(|c| {
                let v = c
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (i, &b)| acc | (b as u32) << (3 - i));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    /// Parses `n_bits` bits from hex (optional `0x` prefix). The digit count
    /// must be exactly `ceil(n_bits / 4)`.
    pub fn from_hex(text: &str, n_bits: usize) -> Result<Self, CodecError> {
        let s = text.trim();
        let s = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .unwrap_or(s);
        let digits = n_bits.div_ceil(4);
        if s.len() != digits {
            return Err(CodecError::InvalidBits(format!(
                "{text:?} has {} hex digits, {n_bits} bits need {digits}",
                s.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for ch in s.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| CodecError::InvalidBits(format!("{text:?} is not hex")))?;
            bits.extend((0..4).map(|i| ((v >> (3 - i)) & 1) as u8));
        }
        if bits[n_bits..].iter().any(|&b| b != 0) {
            return Err(CodecError::InvalidBits(format!(
                "{text:?} sets bits beyond {n_bits}"
            )));
        }
        bits.truncate(n_bits);
        Ok(Self(bits))
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_is_big_endian() {
        let b = BitString::from_hex("0x8", 4).unwrap();
        assert_eq!(b.bits(), &[1, 0, 0, 0]);
        let b = BitString::from_hex("a5", 8).unwrap();
        assert_eq!(b.bits(), &[1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(b.to_hex(), "a5");
        assert_eq!(
            BitString::from_hex("0xFFFFFF", 24).unwrap().bits(),
            &[1; 24][..]
        );
    }

    #[test]
    fn hex_length_is_checked() {
        assert!(BitString::from_hex("0xF", 24).is_err());
        assert!(BitString::from_hex("0x1FFFFFF", 24).is_err());
        assert!(BitString::from_hex("zz", 8).is_err());
        // 6 bits in two digits: trailing pad bits must be zero
        assert_eq!(BitString::from_hex("fc", 6).unwrap().bits(), &[1; 6][..]);
        assert!(BitString::from_hex("fd", 6).is_err());
        assert_eq!(BitString::from_hex("fc", 6).unwrap().to_hex(), "fc");
    }
}
