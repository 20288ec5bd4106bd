//! The single seeded random stream shared by initialization, shuffling,
//! dropout, unknown-word masking and step dropout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type SanRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SanRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact position of a stream, enough to resume it bit-for-bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: String,
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SanRng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<SanRng> {
        let bytes = hex::decode(&self.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Some(rng)
    }
}
