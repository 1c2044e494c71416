//! Seeded random streams.
//!
//! All randomness of a run derives from one `u64` seed through separate
//! ChaCha20 streams: minibatch sampling, clip-count noise, and one fresh
//! generator per `(step, group)` for gradient noise. Deriving gradient noise
//! per group lets a pipeline device draw its own noise from local state and
//! still match a single-device run draw for draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

const SAMPLER_STREAM: u64 = 0;
const COUNT_STREAM: u64 = 1;
const GRADIENT_STREAM_BASE: u64 = 2;
/// Words of keystream reserved per step on a gradient stream.
const WORDS_PER_STEP: u32 = 40;

#[derive(Clone, Debug)]
pub struct RandomStreams {
    seed: u64,
    sampler: ChaCha20Rng,
    counts: ChaCha20Rng,
    gradient_draws: u64,
    count_draws: u64,
}

/// Serializable position of a [`RandomStreams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamsSnapshot {
    pub seed: u64,
    pub sampler_word_pos: u128,
    pub count_word_pos: u128,
    pub gradient_draws: u64,
    pub count_draws: u64,
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RandomStreams {
    pub fn new(seed: u64) -> Self {
        RandomStreams {
            seed,
            sampler: stream(seed, SAMPLER_STREAM),
            counts: stream(seed, COUNT_STREAM),
            gradient_draws: 0,
            count_draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sampler(&mut self) -> &mut ChaCha20Rng {
        &mut self.sampler
    }

    /// Generator for the gradient noise of `group` at `step`; independent of
    /// every other stream and of call order.
    pub fn gradient_rng(&self, step: u64, group: usize) -> ChaCha20Rng {
        gradient_rng(self.seed, step, group)
    }

    /// Records that one full gradient-noise vector was drawn.
    pub fn note_gradient_draw(&mut self) {
        self.gradient_draws += 1;
    }

    /// One clip-count noise draw with the given std.
    pub fn count_noise(&mut self, std: f64) -> f64 {
        self.count_draws += 1;
        let z: f64 = self.counts.sample(StandardNormal);
        std * z
    }

    pub fn gradient_draws(&self) -> u64 {
        self.gradient_draws
    }

    pub fn count_draws(&self) -> u64 {
        self.count_draws
    }

    pub fn snapshot(&self) -> StreamsSnapshot {
        StreamsSnapshot {
            seed: self.seed,
            sampler_word_pos: self.sampler.get_word_pos(),
            count_word_pos: self.counts.get_word_pos(),
            gradient_draws: self.gradient_draws,
            count_draws: self.count_draws,
        }
    }

    pub fn restore(s: &StreamsSnapshot) -> Self {
        let mut r = RandomStreams::new(s.seed);
        r.sampler.set_word_pos(s.sampler_word_pos);
        r.counts.set_word_pos(s.count_word_pos);
        r.gradient_draws = s.gradient_draws;
        r.count_draws = s.count_draws;
        r
    }
}

/// See [`RandomStreams::gradient_rng`].
pub fn gradient_rng(seed: u64, step: u64, group: usize) -> ChaCha20Rng {
    let mut rng = stream(seed, GRADIENT_STREAM_BASE + group as u64);
    rng.set_word_pos((step as u128) << WORDS_PER_STEP);
    rng
}
