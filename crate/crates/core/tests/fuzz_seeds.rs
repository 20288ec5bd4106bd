//! Replays the checked-in fuzz corpora through every parser and decoder,
//! then a fixed set of byte-level mutations of each seed, so the fuzz entry
//! points stay panic-free on a stable toolchain.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use joint_san::fuzzing::{run, TARGETS};

const MUTATIONS_PER_SEED: usize = 200;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut v = seed.to_vec();
    for _ in 0..rng.gen_range(1..4) {
        let at = if v.is_empty() { 0 } else { rng.gen_range(0..v.len()) };
        match rng.gen_range(0..5) {
            0 => v.truncate(at),
            1 if !v.is_empty() => v[at] ^= 1 << rng.gen_range(0..8),
            2 => v.insert(at, rng.gen()),
            3 if !v.is_empty() => {
                v.remove(at);
            }
            _ => {
                // Splice in a token that parsers treat specially.
                let tokens: [&[u8]; 6] = [b"\"", b"9999999999", b"-1", b"\n", b"\t", b"{}"];
                let t = tokens[rng.gen_range(0..tokens.len())];
                v.splice(at..at, t.iter().copied());
            }
        }
    }
    v
}

#[test]
fn every_target_accepts_some_seed() {
    for t in TARGETS {
        let seeds = seeds(t);
        assert!(!seeds.is_empty(), "no seeds for {t}");
        assert!(seeds.iter().any(|s| run(t, s)), "{t} rejects every seed");
    }
}

#[test]
fn seeds_and_mutations_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in TARGETS {
        for seed in seeds(t) {
            let _ = run(t, &seed);
            for _ in 0..MUTATIONS_PER_SEED {
                let _ = run(t, &mutate(&seed, &mut rng));
            }
        }
    }
}
