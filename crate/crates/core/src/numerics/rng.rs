use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// Position in a family of independent ChaCha20 streams.
///
/// `(seed, stream)` selects the key and nonce; `counter` is the number of
/// normal deviates already consumed. Reads are random-access, so a stream can
/// be resumed anywhere without replaying earlier draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    /// A child stream whose id mixes the parent id with `id`.
    pub fn split(&self, id: u64) -> Self {
        let mixed = splitmix(self.stream ^ splitmix(id.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::new(self.seed, mixed)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` standard normal draws by Box–Muller; advances the counter past them.
pub fn sample_normal(stream: &mut RngStream, n: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(stream.seed);
    rng.set_stream(stream.stream);
    // every Box–Muller pair consumes two u64 = four 32-bit words
    let first_pair = stream.counter / 2;
    rng.set_word_pos(u128::from(first_pair) * 4);
    let skip = (stream.counter % 2) as usize;
    let mut out = Vec::with_capacity(n + 2);
    while out.len() < n + skip {
        let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        // pure-Rust libm keeps the draws identical across builds; the system
        // `sin_cos` may be lowered to a fused `sincos` call in some builds
        let r = (-2.0 * libm::log(u1)).sqrt();
        let (s, c) = libm::sincos(std::f64::consts::TAU * u2);
        out.push(r * c);
        out.push(r * s);
    }
    out.drain(..skip);
    out.truncate(n);
    stream.counter += n as u64;
    out
}
