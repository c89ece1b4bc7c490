//! N-bit password domain: centered encoding, additive-inverse recovery
//! semantics, spatial password planes, and the 4-bit chunk view used by the
//! auxiliary classifier heads.
//!
//! The "additive inverse" of a password is its bitwise complement: centering
//! maps bits to ±0.5, so negating the centered vector is exactly
//! complementation and the inverse is itself a valid password.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};

/// Smallest and largest supported password widths. N must be a multiple of 4
/// so the password splits into 4-bit chunks (one classifier head each).
pub const MIN_BITS: usize = 4;
pub const MAX_BITS: usize = 64;

/// Validates a password width at config time.
pub fn validate_bits(n: usize) -> Result<()> {
    if n < MIN_BITS || n > MAX_BITS || n % 4 != 0 {
        return Err(Error::Config(format!(
            "password_bits must be a multiple of 4 in [{MIN_BITS}, {MAX_BITS}], got {n}"
        )));
    }
    Ok(())
}

/// An N-bit password. Bits are stored most-significant first; every element
/// is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Password {
    bits: Vec<u8>,
}

impl Password {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        validate_bits(bits.len())?;
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("password bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    /// All-zero password of width `n`.
    pub fn zeros(n: usize) -> Result<Self> {
        validate_bits(n)?;
        Ok(Self { bits: vec![0; n] })
    }

    /// Uniform sample over {0,1}^N. Reproducible under a fixed-seed rng.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Self> {
        validate_bits(n)?;
        let bits = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
        Ok(Self { bits })
    }

    pub fn n_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bitwise complement: the unique q with centered(q) == -centered(p).
    pub fn inverse(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Centered encoding: bit b maps to b - 0.5, so channels are zero-mean.
    pub fn centered(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32 - 0.5).collect()
    }

    /// Constant spatial plane, laid out channel-first `[N, h, w]`; channel c
    /// is everywhere equal to `centered()[c]`.
    pub fn to_plane(&self, h: usize, w: usize) -> Array3<f32> {
        let c = self.centered();
        Array3::from_shape_fn((self.bits.len(), h, w), |(ch, _, _)| c[ch])
    }

    /// Big-endian 4-bit chunks, each in [0, 16). Chunk i covers bits
    /// [4i, 4i+4), most significant first.
    pub fn chunks(&self) -> Vec<u8> {
        self.bits
            .chunks(4)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b))
            .collect()
    }

    /// Rebuilds a password from its chunk vector.
    pub fn from_chunks(chunks: &[u8]) -> Result<Self> {
        if chunks.iter().any(|&c| c > 15) {
            return Err(Error::Data("password chunks must be in [0, 16)".into()));
        }
        let bits = chunks
            .iter()
            .flat_map(|&c| (0..4).rev().map(move |i| (c >> i) & 1))
            .collect();
        Self::from_bits(bits)
    }

    /// Big-endian integer value of the whole bit string.
    pub fn index(&self) -> u64 {
        self.bits.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
    }

    /// Password of width `n` whose big-endian integer value is `index`.
    pub fn from_index(n: usize, index: u64) -> Result<Self> {
        validate_bits(n)?;
        if n < 64 && index >= 1u64 << n {
            return Err(Error::Data(format!("password index {index} out of range for {n} bits")));
        }
        let bits = (0..n).rev().map(|i| ((index >> i) & 1) as u8).collect();
        Ok(Self { bits })
    }

    /// Lowercase hex, one digit per 4-bit chunk (N/4 digits).
    pub fn to_hex(&self) -> String {
        self.chunks().iter().map(|&c| char::from_digit(c as u32, 16).unwrap()).collect()
    }

    pub fn from_hex(n: usize, s: &str) -> Result<Self> {
        validate_bits(n)?;
        if s.len() != n / 4 {
            return Err(Error::Data(format!(
                "password must be {} hex digits for {} bits, got {:?} ({} digits)",
                n / 4,
                n,
                s,
                s.len()
            )));
        }
        let chunks = s
            .chars()
            .map(|ch| {
                ch.to_digit(16)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::Data(format!("invalid hex digit {ch:?} in password")))
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_chunks(&chunks)
    }
}

/// Uniform sample over all passwords except `exclude`. Rejection sampling;
/// needs |P| >= 2.
fn sample_excluding<R: Rng + ?Sized>(rng: &mut R, n: usize, exclude: &Password) -> Result<Password> {
    loop {
        let q = Password::sample(rng, n)?;
        if q != *exclude {
            return Ok(q);
        }
    }
}

/// Uniform over P \ {inverse(p)}: a wrong recovery password never equals the
/// correct inverse.
pub fn sample_wrong_recovery<R: Rng + ?Sized>(rng: &mut R, p: &Password) -> Result<Password> {
    sample_excluding(rng, p.n_bits(), &p.inverse())
}

/// Two different passwords, uniform over ordered distinct pairs.
pub fn sample_distinct_pair<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<(Password, Password)> {
    let p1 = Password::sample(rng, n)?;
    let p2 = sample_excluding(rng, n, &p1)?;
    Ok((p1, p2))
}

/// All 2^N passwords in index order. Only sensible for small N (the sweep).
pub fn enumerate_all(n: usize) -> Result<Vec<Password>> {
    validate_bits(n)?;
    if n > 16 {
        return Err(Error::Config(format!("refusing to enumerate 2^{n} passwords")));
    }
    (0..1u64 << n).map(|i| Password::from_index(n, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn p(bits: &[u8]) -> Password {
        Password::from_bits(bits.to_vec()).unwrap()
    }

    #[test]
    fn inverse_of_zeros_is_ones() {
        let z = Password::zeros(16).unwrap();
        assert_eq!(z.inverse().bits(), &[1u8; 16]);
    }

    #[test]
    fn involution_without_fixed_point_exhaustive_n8() {
        for idx in 0..256u64 {
            let pw = Password::from_index(8, idx).unwrap();
            let inv = pw.inverse();
            assert_ne!(pw, inv, "fixed point at {idx}");
            assert_eq!(pw, inv.inverse(), "involution broken at {idx}");
        }
    }

    #[test]
    fn centered_is_additive_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pw = Password::sample(&mut rng, 16).unwrap();
            let a = pw.centered();
            let b = pw.inverse().centered();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x + y, 0.0);
                assert!(*x == 0.5 || *x == -0.5);
            }
        }
    }

    #[test]
    fn centered_examples() {
        assert_eq!(p(&[1, 0, 1, 0]).centered(), vec![0.5, -0.5, 0.5, -0.5]);
        assert_eq!(p(&[1, 1, 1, 1]).centered(), vec![0.5; 4]);
    }

    #[test]
    fn centered_mean_over_all_passwords_is_zero_n8() {
        // Exhaustive oracle: every coordinate is 0/1 equally often.
        let mut sums = [0.0f64; 8];
        for idx in 0..256u64 {
            let pw = Password::from_index(8, idx).unwrap();
            for (s, v) in sums.iter_mut().zip(pw.centered()) {
                *s += v as f64;
            }
        }
        for s in sums {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn centered_injective_exhaustive_n8() {
        let mut seen = std::collections::HashSet::new();
        for idx in 0..256u64 {
            let c = Password::from_index(8, idx).unwrap().centered();
            let key: Vec<i8> = c.iter().map(|&x| if x > 0.0 { 1 } else { -1 }).collect();
            assert!(seen.insert(key), "centered not injective at {idx}");
        }
    }

    #[test]
    fn chunk_examples_and_roundtrip() {
        let pw = p(&[1, 1, 1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(pw.chunks(), vec![15, 0, 10, 5]);
        assert_eq!(pw.to_hex(), "f0a5");
        assert_eq!(Password::zeros(8).unwrap().chunks(), vec![0, 0]);
        for idx in 0..256u64 {
            let pw = Password::from_index(8, idx).unwrap();
            assert_eq!(Password::from_chunks(&pw.chunks()).unwrap(), pw);
            assert_eq!(Password::from_hex(8, &pw.to_hex()).unwrap(), pw);
        }
    }

    #[test]
    fn plane_has_constant_channels() {
        let pw = p(&[1, 0, 0, 1]);
        let plane = pw.to_plane(5, 7);
        assert_eq!(plane.shape(), &[4, 5, 7]);
        let c = pw.centered();
        for ch in 0..4 {
            for v in plane.index_axis(ndarray::Axis(0), ch).iter() {
                assert_eq!(*v, c[ch]);
            }
        }
        let tiny = pw.to_plane(1, 1);
        assert_eq!(tiny.as_slice().unwrap(), c.as_slice());
    }

    #[test]
    fn plane_at_paper_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pw = Password::sample(&mut rng, 16).unwrap();
        assert_eq!(pw.to_plane(128, 128).shape(), &[16, 128, 128]);
    }

    #[test]
    fn sampling_is_deterministic_and_uniform() {
        let a = Password::sample(&mut ChaCha12Rng::seed_from_u64(7), 16).unwrap();
        let b = Password::sample(&mut ChaCha12Rng::seed_from_u64(7), 16).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut counts = [0u32; 16];
        let draws = 10_000;
        for _ in 0..draws {
            let pw = Password::sample(&mut rng, 16).unwrap();
            for (c, &b) in counts.iter_mut().zip(pw.bits()) {
                *c += b as u32;
            }
        }
        for c in counts {
            let mean = c as f64 / draws as f64;
            assert!((0.45..=0.55).contains(&mean), "bit mean {mean} outside [0.45, 0.55]");
        }
    }

    #[test]
    fn wrong_recovery_never_hits_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pw = Password::sample(&mut rng, 8).unwrap();
        let inv = pw.inverse();
        for _ in 0..10_000 {
            assert_ne!(sample_wrong_recovery(&mut rng, &pw).unwrap(), inv);
        }
    }

    #[test]
    fn distinct_pair_is_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let (a, b) = sample_distinct_pair(&mut rng, 8).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn password_space_size() {
        assert_eq!(enumerate_all(8).unwrap().len(), 256);
        // N=16 has 65,536 passwords; checked via the index range rather than
        // materializing them all.
        assert!(Password::from_index(16, 65_535).is_ok());
        assert!(Password::from_index(16, 65_536).is_err());
    }

    #[test]
    fn rejects_bad_widths_and_hex() {
        assert!(validate_bits(6).is_err());
        assert!(validate_bits(0).is_err());
        assert!(Password::from_hex(16, "zzzz").is_err());
        assert!(Password::from_hex(16, "abc").is_err());
        assert!(Password::from_hex(16, "abcde").is_err());
    }

    proptest! {
        #[test]
        fn prop_involution_and_centering(seed in 0u64..1_000_000, n in prop::sample::select(vec![4usize, 8, 12, 16])) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let pw = Password::sample(&mut rng, n).unwrap();
            prop_assert_eq!(pw.inverse().inverse(), pw.clone());
            prop_assert_ne!(pw.inverse(), pw.clone());
            let wrong = sample_wrong_recovery(&mut rng, &pw).unwrap();
            prop_assert_ne!(wrong, pw.inverse());
            prop_assert_eq!(Password::from_hex(n, &pw.to_hex()).unwrap(), pw);
        }
    }
}
