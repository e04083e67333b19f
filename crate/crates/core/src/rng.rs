//! Seeded, splittable pseudorandom streams.
//!
//! Every consumer gets its own ChaCha8 stream derived from the run seed, so
//! adding a consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator name recorded in run manifests.
pub const GENERATOR: &str = "chacha8";

/// Stream ids. Player noise channels use `PLAYER_NOISE + player index`.
pub const PLAYER_NOISE: u64 = 1;
pub const SELF_ORGANIZATION: u64 = 1 << 32;
pub const CALIBRATION: u64 = 1 << 33;

/// Noise stream of player `player` in game `game` of a multi-system run.
pub fn player_noise(game: u64, player: usize) -> u64 {
    PLAYER_NOISE + (game << 40) + player as u64
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
