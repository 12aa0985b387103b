//! Deterministic toy translation tasks over ids `4..vocab_size`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::Pair;
use super::vocab::RESERVED;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Cipher,
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "cipher" => Ok(Self::Cipher),
            other => Err(config_err!("unknown synthetic task {other:?}")),
        }
    }
}

fn check(vocab_size: usize, len_range: (usize, usize)) -> Result<()> {
    if vocab_size <= RESERVED as usize {
        return Err(config_err!("vocab_size must exceed {RESERVED}, got {vocab_size}"));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(config_err!("invalid length range {lo}..={hi}"));
    }
    Ok(())
}

fn sources(n: usize, len_range: (usize, usize), vocab_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(len_range.0..=len_range.1);
            (0..len).map(|_| rng.gen_range(RESERVED..vocab_size as u32)).collect()
        })
        .collect()
}

/// Fixed bijection over the ordinary ids; reserved ids map to themselves.
pub fn cipher_permutation(vocab_size: usize, seed: u64) -> Result<Vec<u32>> {
    check(vocab_size, (1, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1f3);
    let mut table: Vec<u32> = (0..vocab_size as u32).collect();
    table[RESERVED as usize..].shuffle(&mut rng);
    Ok(table)
}

pub fn invert_permutation(table: &[u32]) -> Vec<u32> {
    let mut inv = vec![0; table.len()];
    for (i, &t) in table.iter().enumerate() {
        inv[t as usize] = i as u32;
    }
    inv
}

pub fn gen_task(
    kind: TaskKind,
    n: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    check(vocab_size, len_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = match kind {
        TaskKind::Cipher => Some(cipher_permutation(vocab_size, seed)?),
        _ => None,
    };
    Ok(sources(n, len_range, vocab_size, &mut rng)
        .into_iter()
        .map(|src| {
            let tgt = match kind {
                TaskKind::Copy => src.clone(),
                TaskKind::Reverse => src.iter().rev().copied().collect(),
                TaskKind::Cipher => {
                    let table = table.as_ref().expect("cipher table");
                    src.iter().map(|&t| table[t as usize]).collect()
                }
            };
            Pair::new(src, tgt)
        })
        .collect())
}

pub fn gen_copy_task(n: usize, len_range: (usize, usize), vocab_size: usize, seed: u64) -> Result<Vec<Pair>> {
    gen_task(TaskKind::Copy, n, len_range, vocab_size, seed)
}

pub fn gen_reverse_task(n: usize, len_range: (usize, usize), vocab_size: usize, seed: u64) -> Result<Vec<Pair>> {
    gen_task(TaskKind::Reverse, n, len_range, vocab_size, seed)
}

pub fn gen_cipher_task(n: usize, len_range: (usize, usize), vocab_size: usize, seed: u64) -> Result<Vec<Pair>> {
    gen_task(TaskKind::Cipher, n, len_range, vocab_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_and_reverse() {
        for p in gen_copy_task(20, (1, 6), 12, 3).unwrap() {
            assert_eq!(p.source, p.target);
        }
        for p in gen_reverse_task(20, (1, 6), 12, 3).unwrap() {
            let mut r = p.source.clone();
            r.reverse();
            assert_eq!(r, p.target);
        }
    }

    #[test]
    fn cipher_is_a_bijection() {
        let table = cipher_permutation(30, 7).unwrap();
        let inv = invert_permutation(&table);
        for p in gen_cipher_task(50, (4, 12), 30, 7).unwrap() {
            let back: Vec<u32> = p.target.iter().map(|&t| inv[t as usize]).collect();
            assert_eq!(back, p.source);
        }
        assert_eq!(&table[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn generators_are_pure_functions_of_the_seed() {
        assert_eq!(
            gen_cipher_task(30, (4, 12), 30, 1).unwrap(),
            gen_cipher_task(30, (4, 12), 30, 1).unwrap()
        );
        assert_ne!(
            gen_cipher_task(30, (4, 12), 30, 1).unwrap(),
            gen_cipher_task(30, (4, 12), 30, 2).unwrap()
        );
    }

    #[test]
    fn lengths_and_ids_in_range() {
        for p in gen_copy_task(200, (4, 12), 30, 5).unwrap() {
            assert!((4..=12).contains(&p.source.len()));
            assert!(p.source.iter().all(|&t| (4..30).contains(&t)));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert_eq!(gen_copy_task(1, (5, 4), 30, 0).unwrap_err().code(), "E_CONFIG");
        assert_eq!(gen_copy_task(1, (1, 4), 4, 0).unwrap_err().code(), "E_CONFIG");
    }
}
