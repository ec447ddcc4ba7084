//! From leaked bits to per-weight projected code ranges.
//!
//! Only the run of known bits starting at the sign bit narrows a weight's
//! range; known bits below the first unknown one are discarded.

use std::fmt::Write as _;

use crate::hammerleak::LeakLedger;

/// Bit 7 of both fields is the sign bit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WeightLeakMask {
    pub known: u8,
    pub values: u8,
}

impl WeightLeakMask {
    pub fn full(code: i8) -> Self {
        WeightLeakMask {
            known: 0xff,
            values: code as u8,
        }
    }
}

/// Length of the known prefix, counted from the sign bit down.
pub fn filter_prefix(mask: WeightLeakMask) -> u8 {
    mask.known.leading_ones() as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedRange {
    pub code_min: i8,
    pub code_max: i8,
    /// Dequantized midpoint, `scale * (code_min + code_max) / 2`.
    pub mean: f64,
}

impl ProjectedRange {
    /// Number of codes in the range.
    pub fn width(&self) -> u32 {
        (self.code_max as i32 - self.code_min as i32 + 1) as u32
    }

    pub fn contains(&self, code: i8) -> bool {
        (self.code_min..=self.code_max).contains(&code)
    }
}

/// Range of codes whose top `k` bits equal those of `prefix_bits`. With no
/// known bits the sign is open and the range is the full `[-128, 127]`.
pub fn projected_range(prefix_bits: u8, k: u8, scale: f64) -> ProjectedRange {
    let (code_min, code_max) = if k == 0 {
        (i8::MIN, i8::MAX)
    } else {
        let high = if k >= 8 { 0xff } else { !(0xffu8 >> k) };
        let p = prefix_bits & high;
        (p as i8, (p | !high) as i8)
    };
    ProjectedRange {
        code_min,
        code_max,
        mean: scale * ((code_min as i32 + code_max as i32) as f64 / 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSetClass {
    /// All eight bits known: the exact value is recovered and frozen.
    Full,
    /// Sign plus `n - 1` further bits known, `n` in 1..=7.
    Partial(u8),
    None,
}

pub fn classify(prefix_len: u8) -> WeightSetClass {
    match prefix_len {
        0 => WeightSetClass::None,
        8.. => WeightSetClass::Full,
        k => WeightSetClass::Partial(k),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    /// Row-major, one entry per weight.
    pub prefix: Vec<u8>,
    pub ranges: Vec<ProjectedRange>,
}

impl LayerProfile {
    pub fn class(&self, i: usize) -> WeightSetClass {
        classify(self.prefix[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakProfile {
    pub layers: Vec<LayerProfile>,
}

impl LeakProfile {
    pub fn from_ledger(ledger: &LeakLedger, scales: &[f64]) -> Self {
        let layers = (0..ledger.num_layers())
            .map(|l| {
                let (rows, cols) = ledger.layer_dims(l);
                let scale = scales[l];
                let mut prefix = Vec::with_capacity(rows * cols);
                let mut ranges = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let mask = ledger.mask(l, r, c);
                        let k = filter_prefix(mask);
                        prefix.push(k);
                        ranges.push(projected_range(mask.values, k, scale));
                    }
                }
                LayerProfile {
                    rows,
                    cols,
                    scale,
                    prefix,
                    ranges,
                }
            })
            .collect();
        LeakProfile { layers }
    }

    /// `layer,row,col,prefix_len,code_min,code_max`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,row,col,prefix_len,code_min,code_max\n");
        for (l, lp) in self.layers.iter().enumerate() {
            for r in 0..lp.rows {
                for c in 0..lp.cols {
                    let i = r * lp.cols + c;
                    let rg = lp.ranges[i];
                    let _ = writeln!(
                        s,
                        "{l},{r},{c},{},{},{}",
                        lp.prefix[i], rg.code_min, rg.code_max
                    );
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_prefix(known: u8) -> u8 {
        let mut k = 0;
        for bit in (0..8).rev() {
            if known & (1 << bit) == 0 {
                break;
            }
            k += 1;
        }
        k
    }

    #[test]
    fn prefix_matches_loop_reference_for_all_masks() {
        for known in 0..=255u8 {
            let m = WeightLeakMask { known, values: 0 };
            assert_eq!(filter_prefix(m), loop_prefix(known), "mask {known:08b}");
        }
    }

    #[test]
    fn prefix_examples() {
        let k = |known| filter_prefix(WeightLeakMask { known, values: 0 });
        assert_eq!(k(0xff), 8);
        assert_eq!(k(0x7f), 0);
        assert_eq!(k(0b1101_0000), 2);
    }

    #[test]
    fn range_examples() {
        let r = projected_range(0, 0, 1.0);
        assert_eq!((r.code_min, r.code_max), (-128, 127));
        assert_eq!(r.mean, -0.5);

        let r = projected_range(0x81, 8, 0.25);
        assert_eq!((r.code_min, r.code_max), (-127, -127));
        assert_eq!(r.mean, -127.0 * 0.25);
    }

    #[test]
    fn positive_sign_range_matches_enumeration() {
        // every code whose sign bit is 0
        let codes: Vec<i32> = (-128..=127i32).filter(|c| (*c as i8 as u8) & 0x80 == 0).collect();
        assert_eq!(codes.len(), 128);
        let lo = *codes.iter().min().unwrap();
        let hi = *codes.iter().max().unwrap();
        let mean = codes.iter().sum::<i32>() as f64 / codes.len() as f64;
        let r = projected_range(0x00, 1, 2.0);
        assert_eq!((r.code_min as i32, r.code_max as i32), (lo, hi));
        assert_eq!(mean, 63.5);
        assert_eq!(r.mean, 63.5 * 2.0);
    }

    #[test]
    fn classes() {
        assert_eq!(classify(8), WeightSetClass::Full);
        assert_eq!(classify(0), WeightSetClass::None);
        assert_eq!(classify(3), WeightSetClass::Partial(3));
    }
}
