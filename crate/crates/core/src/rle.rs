//! Run-length codec for binary masks.
//!
//! A mask flattens row-major into alternating run counts, background
//! first. The first count may be zero (mask starts with foreground); all
//! other counts are positive and the counts sum to `H·W`.

use crate::error::{Error, Result};
use crate::mask::Mask;

pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0u32;
    for &px in mask.data() {
        if px == current {
            run += 1;
        } else {
            counts.push(run);
            current = px;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(h: usize, w: usize, counts: &[u32]) -> Result<Mask> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::InvalidArgument {
            op: "rle_decode",
            msg: format!("run counts sum to {total}, expected {}x{}={}", h, w, h * w),
        });
    }
    let mut data = Vec::with_capacity(h * w);
    let mut value = 0u8;
    for &c in counts {
        data.extend(std::iter::repeat(value).take(c as usize));
        value ^= 1;
    }
    Mask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn degenerate_masks_use_the_canonical_counts() {
        let empty = Mask::empty(4, 4);
        assert_eq!(rle_encode(&empty), vec![16]);
        let full = Mask::new(4, 4, vec![1; 16]).unwrap();
        assert_eq!(rle_encode(&full), vec![0, 16]);
        let lead = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(rle_encode(&lead), vec![0, 1, 3]);
    }

    #[test]
    fn bad_sums_are_rejected() {
        assert!(rle_decode(2, 2, &[3]).is_err());
        assert!(rle_decode(2, 2, &[5]).is_err());
        assert!(rle_decode(2, 2, &[2, 1, 1]).is_ok());
    }

    #[test]
    fn a_thousand_random_masks_round_trip_bitwise() {
        let mut r = ChaCha12Rng::seed_from_u64(80);
        for _ in 0..1000 {
            let h = r.gen_range(1..20);
            let w = r.gen_range(1..20);
            let mask =
                Mask::new(h, w, (0..h * w).map(|_| r.gen_range(0..2) as u8).collect()).unwrap();
            let counts = rle_encode(&mask);
            assert_eq!(rle_decode(h, w, &counts).unwrap(), mask);
            // Canonical form: only the leading count may be zero.
            assert!(counts.iter().skip(1).all(|&c| c > 0));
            assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), h * w);
        }
    }

    proptest! {
        #[test]
        fn any_bit_pattern_round_trips(bits in proptest::collection::vec(0u8..2, 1..256)) {
            let mask = Mask::new(1, bits.len(), bits).unwrap();
            let counts = rle_encode(&mask);
            prop_assert_eq!(rle_decode(1, mask.w, &counts).unwrap(), mask);
        }
    }
}
