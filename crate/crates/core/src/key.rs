use std::fmt::Debug;
use std::hash::Hash;

use num_traits::PrimInt;

/// Keys stored in the dictionary: fixed-size, totally ordered integers.
pub trait Key: PrimInt + Hash + Debug + Send + Sync + 'static {
    /// Encoded width in bytes.
    const WIDTH: usize = std::mem::size_of::<Self>();

    fn encode_le(self, out: &mut Vec<u8>) {
        let v = self.to_i128().unwrap_or_else(|| {
            // u128 above i128::MAX: keep the raw bit pattern
            self.to_u128().map(|u| u as i128).unwrap_or(0)
        });
        out.extend_from_slice(&v.to_le_bytes()[..Self::WIDTH]);
    }

    fn decode_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 16];
        buf[..Self::WIDTH].copy_from_slice(&bytes[..Self::WIDTH]);
        let signed = Self::min_value() < Self::zero();
        if signed && bytes[Self::WIDTH - 1] & 0x80 != 0 {
            for b in &mut buf[Self::WIDTH..] {
                *b = 0xff;
            }
        }
        let v = i128::from_le_bytes(buf);
        Self::from(v).or_else(|| Self::from(v as u128)).expect("key width")
    }
}

impl<T: PrimInt + Hash + Debug + Send + Sync + 'static> Key for T {}

/// A key extended with sentinels below every real key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ext<K> {
    NegInf(usize),
    Key(K),
}

impl<K> Ext<K> {
    pub fn key(self) -> Option<K> {
        match self {
            Ext::Key(k) => Some(k),
            Ext::NegInf(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_round_trips_signed_and_unsigned() {
        for k in [0i32, -1, i32::MIN, i32::MAX, 12345] {
            let mut out = Vec::new();
            k.encode_le(&mut out);
            assert_eq!(out.len(), 4);
            assert_eq!(i32::decode_le(&out), k);
        }
        for k in [0u64, u64::MAX, 1 << 40] {
            let mut out = Vec::new();
            k.encode_le(&mut out);
            assert_eq!(u64::decode_le(&out), k);
        }
    }

    #[test]
    fn sentinels_sort_below_keys() {
        assert!(Ext::NegInf(7) < Ext::Key(u64::MIN));
        assert!(Ext::<u64>::NegInf(0) < Ext::NegInf(1));
    }
}
