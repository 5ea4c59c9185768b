//! Binary genomes for enumerable integer parameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::digest::CanonicalWriter;

/// Declared integer range of one tunable parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

/// `ceil(log2(hi - lo + 1))`; zero for a single-valued range.
pub fn bit_width(lo: i64, hi: i64) -> usize {
    let span = (hi as i128 - lo as i128 + 1).max(1) as u128;
    if span <= 1 {
        0
    } else {
        (128 - (span - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenomeEntry {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
    #[serde(serialize_with = "bits_to_str", deserialize_with = "bits_from_str")]
    pub bits: Vec<bool>,
}

impl GenomeEntry {
    pub fn width(&self) -> usize {
        bit_width(self.lo, self.hi)
    }
}

/// Decodes bits (most significant first) as `lo + raw`, clamped to `hi`.
pub fn decode_param(entry: &GenomeEntry) -> i64 {
    debug_assert_eq!(entry.bits.len(), entry.width());
    let raw = entry.bits.iter().fold(0u128, |acc, &b| (acc << 1) | b as u128);
    let value = entry.lo as i128 + raw as i128;
    value.min(entry.hi as i128) as i64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterGenome {
    pub params: Vec<GenomeEntry>,
}

impl ParameterGenome {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn random<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let params = specs
            .iter()
            .map(|s| GenomeEntry {
                name: s.name.clone(),
                lo: s.lo,
                hi: s.hi,
                bits: (0..bit_width(s.lo, s.hi)).map(|_| rng.random_bool(0.5)).collect(),
            })
            .collect();
        ParameterGenome { params }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bit_len(&self) -> usize {
        self.params.iter().map(|p| p.bits.len()).sum()
    }

    pub fn values(&self) -> BTreeMap<String, i64> {
        self.params.iter().map(|p| (p.name.clone(), decode_param(p))).collect()
    }

    pub(crate) fn write_canonical(&self, w: &mut CanonicalWriter) {
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name).i64(p.lo).i64(p.hi).u32(p.bits.len() as u32);
            for &b in &p.bits {
                w.u8(b as u8);
            }
        }
    }
}

fn bits_to_str<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
    let text: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
    s.serialize_str(&text)
}

fn bits_from_str<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
    let text = String::deserialize(d)?;
    text.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(serde::de::Error::custom("bits must be 0/1")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(lo: i64, hi: i64, bits: &str) -> GenomeEntry {
        GenomeEntry { name: "p".into(), lo, hi, bits: bits.chars().map(|c| c == '1').collect() }
    }

    #[test]
    fn widths() {
        assert_eq!(bit_width(1, 16), 4);
        assert_eq!(bit_width(1, 10), 4);
        assert_eq!(bit_width(0, 1), 1);
        assert_eq!(bit_width(5, 5), 0);
        assert_eq!(bit_width(0, 16), 5);
    }

    #[test]
    fn decode_endpoints_and_clamp() {
        assert_eq!(decode_param(&entry(1, 16, "0000")), 1);
        assert_eq!(decode_param(&entry(1, 16, "1111")), 16);
        assert_eq!(decode_param(&entry(1, 10, "1111")), 10);
        assert_eq!(decode_param(&entry(1, 10, "0101")), 6);
        assert_eq!(decode_param(&entry(5, 5, "")), 5);
    }

    #[test]
    fn serde_bits_as_string() {
        let g = ParameterGenome { params: vec![entry(1, 16, "1010")] };
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains(r#""bits":"1010""#));
        assert_eq!(serde_json::from_str::<ParameterGenome>(&json).unwrap(), g);
    }

    proptest::proptest! {
        #[test]
        fn decoded_value_always_in_range(lo in -1000i64..1000, span in 0i64..5000, seed in 0u64..u64::MAX) {
            use rand::SeedableRng;
            let hi = lo + span;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = ParameterGenome::random(&[ParamSpec { name: "x".into(), lo, hi }], &mut rng);
            let v = decode_param(&g.params[0]);
            proptest::prop_assert!(v >= lo && v <= hi);
        }
    }
}
