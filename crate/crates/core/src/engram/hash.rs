use crate::error::{Error, Result};

/// The last `order` elements of `p` (the whole sequence when it is shorter).
pub fn suffix_key<T: Clone>(p: &[T], order: usize) -> Result<Vec<T>> {
    if p.is_empty() {
        return Err(Error::EmptySequence);
    }
    if order == 0 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    Ok(p[p.len().saturating_sub(order)..].to_vec())
}

/// XOR of wrapped products, reduced modulo the bucket count.
pub fn hash_key(key: &[u64], multipliers: &[u64], buckets: u64) -> u64 {
    debug_assert!(multipliers.len() >= key.len());
    let folded = key.iter().zip(multipliers).fold(0u64, |acc, (&x, &m)| acc ^ x.wrapping_mul(m));
    folded % buckets
}

/// Positional base-`C` integer for a code prefix, reduced modulo `d_max`.
/// The reduction is a no-op whenever `C^len <= d_max`.
pub fn encode_unit(codes: &[u32], codebook_size: usize, d_max: u64) -> u64 {
    let m = d_max as u128;
    let c = codebook_size as u128 % m;
    let mut value = 0u128;
    let mut place = 1u128 % m;
    for &code in codes {
        value = (value + code as u128 % m * place) % m;
        place = place * c % m;
    }
    value as u64
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Odd multipliers for the `count` key positions of one hash head.
pub fn multipliers(seed: u64, kind_tag: u64, level: usize, order: usize, head: usize, count: usize) -> Vec<u64> {
    let mut state = seed;
    for x in [kind_tag, level as u64, order as u64, head as u64] {
        state ^= x;
        splitmix64(&mut state);
    }
    (0..count).map(|_| splitmix64(&mut state) | 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn suffix_examples() {
        assert_eq!(suffix_key(&['a', 'b', 'c'], 2).unwrap(), vec!['b', 'c']);
        assert_eq!(suffix_key(&['a'], 3).unwrap(), vec!['a']);
        assert_eq!(suffix_key(&[7, 4, 9, 1], 3).unwrap(), vec![4, 9, 1]);
        assert!(matches!(suffix_key::<u8>(&[], 1), Err(Error::EmptySequence)));
    }

    #[test]
    fn hash_examples() {
        assert_eq!(hash_key(&[5], &[3], 7), 1);
        assert_eq!(hash_key(&[2, 3], &[5, 9], 13), 4);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_unit(&[0], 128, 2_097_152), 0);
        assert_eq!(encode_unit(&[1, 2], 128, 2_097_152), 257);
        assert_eq!(encode_unit(&[127, 127, 127], 128, 2_097_152), 2_097_151);
        // 4 codes of base 128 exceed the cap and wrap.
        let full = 5 + 6 * 128 + 7 * 128 * 128 + 8 * 128u64.pow(3);
        assert_eq!(encode_unit(&[5, 6, 7, 8], 128, 2_097_152), full % 2_097_152);
    }

    #[test]
    fn multipliers_are_odd_and_seeded() {
        let a = multipliers(42, 1, 2, 3, 0, 3);
        assert!(a.iter().all(|m| m % 2 == 1));
        assert_eq!(a, multipliers(42, 1, 2, 3, 0, 3));
        assert_ne!(a, multipliers(43, 1, 2, 3, 0, 3));
        assert_ne!(a, multipliers(42, 1, 2, 3, 1, 3));
    }

    proptest! {
        #[test]
        fn hash_is_in_range(key in prop::collection::vec(any::<u64>(), 1..4), seed in any::<u64>(), h in 2u64..1_000_000) {
            let m = multipliers(seed, 0, 1, key.len(), 0, key.len());
            prop_assert!(hash_key(&key, &m, h) < h);
        }

        #[test]
        fn encoding_is_injective_below_the_cap(a in prop::collection::vec(0u32..16, 3), b in prop::collection::vec(0u32..16, 3)) {
            prop_assert_eq!(encode_unit(&a, 16, 1 << 20) == encode_unit(&b, 16, 1 << 20), a == b);
        }
    }
}
