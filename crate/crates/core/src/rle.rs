//! Run-length mask codec compatible with the COCO counts-string convention.
//!
//! Pixels are scanned in column-major order.  Runs alternate between
//! background and foreground, always starting with background (a leading zero
//! run marks a mask whose first pixel is foreground).  The string form packs
//! each count into 5-bit groups, low bits first, with bit 5 as a continuation
//! flag and everything offset by 48 into printable ASCII; counts after the
//! second are stored as deltas against the count two positions back.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Run counts for one mask, column-major, starting with a background run.
pub fn mask_to_counts(mask: &BinaryMask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let v = mask.get(y, x);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

/// Rebuild a mask from column-major run counts.
pub fn counts_to_mask(counts: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("mask must have positive dimensions".into()));
    }
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (height * width) as u64 {
        return Err(Error::Format(format!(
            "run counts cover {total} pixels, mask has {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::zeros(height, width);
    let mut idx = 0usize;
    let mut value = false;
    for &count in counts {
        for _ in 0..count {
            let x = idx / height;
            let y = idx % height;
            mask.set(y, x, value);
            idx += 1;
        }
        value = !value;
    }
    Ok(mask)
}

/// Pack run counts into the printable-ASCII delta encoding.
pub fn counts_to_string(counts: &[u32]) -> String {
    let mut s = String::new();
    for (i, &count) in counts.iter().enumerate() {
        let mut x = count as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            s.push(char::from(c + 48));
            if !more {
                break;
            }
        }
    }
    s
}

/// Unpack a counts string back into run counts.
pub fn string_to_counts(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut p = 0usize;
    while p < bytes.len() {
        let mut x = 0i64;
        let mut k = 0u32;
        loop {
            if p >= bytes.len() {
                return Err(Error::Format("truncated run-length string".into()));
            }
            let raw = bytes[p];
            if !(48..=111).contains(&raw) {
                return Err(Error::Format(format!(
                    "byte {raw} is not a run-length character"
                )));
            }
            let c = raw - 48;
            x |= i64::from(c & 0x1f) << (5 * k);
            p += 1;
            let more = c & 0x20 != 0;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * (k + 1));
                }
                break;
            }
            k += 1;
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2] as i64;
        }
        if x < 0 || x > u32::MAX as i64 {
            return Err(Error::Format(format!("run count {x} out of range")));
        }
        counts.push(x as u32);
    }
    Ok(counts)
}

/// Encode a mask straight to its counts string.
pub fn encode(mask: &BinaryMask) -> String {
    counts_to_string(&mask_to_counts(mask))
}

/// Decode a counts string into a mask of the given shape.
pub fn decode(s: &str, height: usize, width: usize) -> Result<BinaryMask> {
    counts_to_mask(&string_to_counts(s)?, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_scan_column_major_starting_with_background() {
        // Columns read (1,0), (0,0), (1,1): first pixel is foreground, so the
        // leading background run has length zero.
        let m = BinaryMask::from_rows(&[vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        assert_eq!(mask_to_counts(&m), vec![0, 1, 3, 2]);
    }

    #[test]
    fn all_background_is_a_single_run() {
        let m = BinaryMask::zeros(3, 4);
        assert_eq!(mask_to_counts(&m), vec![12]);
    }

    #[test]
    fn decode_rejects_wrong_pixel_total() {
        assert!(matches!(
            counts_to_mask(&[3, 2], 2, 2),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn string_encoding_of_small_counts_is_printable_and_invertible() {
        let counts = vec![0, 1, 3, 2];
        let s = counts_to_string(&counts);
        assert!(s.bytes().all(|b| (48..=111).contains(&b)));
        assert_eq!(string_to_counts(&s).unwrap(), counts);
    }

    #[test]
    fn string_encoding_handles_counts_above_one_chunk() {
        // 40 does not fit in 5 bits, so it needs a continuation character.
        let counts = vec![40, 1000, 7, 40, 1000];
        let s = counts_to_string(&counts);
        assert_eq!(string_to_counts(&s).unwrap(), counts);
    }

    #[test]
    fn deltas_can_be_negative() {
        // Fourth count is smaller than the second, producing a negative delta.
        let counts = vec![5, 100, 5, 3];
        let s = counts_to_string(&counts);
        assert_eq!(string_to_counts(&s).unwrap(), counts);
    }

    #[test]
    fn string_to_counts_rejects_garbage() {
        assert!(matches!(string_to_counts("\u{7f}"), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn mask_roundtrips_through_string(
            h in 1usize..12,
            w in 1usize..12,
            bits in proptest::collection::vec(proptest::bool::ANY, 1..144),
        ) {
            let mut mask = BinaryMask::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    mask.set(y, x, bits[(y * w + x) % bits.len()]);
                }
            }
            let decoded = decode(&encode(&mask), h, w).unwrap();
            prop_assert_eq!(decoded, mask);
        }

        #[test]
        fn counts_roundtrip_through_string(
            counts in proptest::collection::vec(0u32..2_000_000, 1..24),
        ) {
            let s = counts_to_string(&counts);
            prop_assert_eq!(string_to_counts(&s).unwrap(), counts);
        }
    }
}
