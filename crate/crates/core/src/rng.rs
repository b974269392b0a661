use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent sub-seed for `(seed, salt)` via the splitmix64 finalizer.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 generator on stream `stream` of the sub-seed `(seed, salt)`.
pub fn stream_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, salt));
    rng.set_stream(stream);
    rng
}

pub(crate) const SALT_INIT: u64 = 1;
pub(crate) const SALT_NOISE: u64 = 2;
pub(crate) const SALT_BATCHES: u64 = 3;
pub(crate) const SALT_VALID: u64 = 4;
pub(crate) const SALT_EVAL: u64 = 5;
pub(crate) const SALT_SAMPLE: u64 = 6;
