use std::time::Instant;

use ath_core::hash_index::{float_search_oracle, HashCode, HashIndex, IndexError};
use ath_core::network::binarize;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_code(k: usize, rng: &mut ChaCha8Rng) -> HashCode {
    HashCode::from_bits(&(0..k).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>())
}

/// Per-bit comparison loop followed by a sort on `(distance, id)`.
fn naive_search(codes: &[Vec<bool>], ids: &[u32], query: &[bool], topn: usize) -> Vec<(u32, u32)> {
    let mut all: Vec<(u32, u32)> = codes
        .iter()
        .zip(ids)
        .map(|(c, &id)| {
            let mut d = 0;
            for i in 0..query.len() {
                if c[i] != query[i] {
                    d += 1;
                }
            }
            (d, id)
        })
        .collect();
    all.sort();
    all.into_iter().take(topn).map(|(d, id)| (id, d)).collect()
}

#[test]
fn build_examples() {
    let empty = HashIndex::build_with_k(12, &[], &[], &[]).unwrap();
    assert!(empty.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let codes: Vec<_> = (0..5).map(|_| random_code(12, &mut rng)).collect();
    let idx = HashIndex::build(&codes, &[4, 2, 9, 1, 0], &[0; 5]).unwrap();
    assert_eq!(idx.len(), 5);
    assert!(matches!(HashIndex::build(&codes, &[1, 2, 3, 1, 5], &[0; 5]), Err(IndexError::DuplicateId(1))));
    let mut mixed = codes.clone();
    mixed[2] = random_code(13, &mut rng);
    assert!(matches!(HashIndex::build(&mixed, &[0, 1, 2, 3, 4], &[0; 5]), Err(IndexError::KMismatch { .. })));
    assert!(HashIndex::build(&codes, &[0, 1, 2], &[0; 5]).is_err());
}

#[test]
fn search_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let codes: Vec<_> = (0..20).map(|_| random_code(36, &mut rng)).collect();
    let ids: Vec<u32> = (100..120).collect();
    let idx = HashIndex::build(&codes, &ids, &[3; 20]).unwrap();
    let hits = idx.search(&codes[7], 5).unwrap();
    assert_eq!((hits[0].id, hits[0].distance, hits[0].label), (107, 0, 3));
    assert_eq!(idx.search(&codes[7], 50).unwrap().len(), 20);
    assert!(matches!(idx.search(&random_code(12, &mut rng), 5), Err(IndexError::KMismatch { .. })));
    assert!(matches!(idx.search(&codes[0], 0), Err(IndexError::ZeroTopN)));
    let without = idx.search_excluding(&codes[7], 5, Some(107)).unwrap();
    assert!(without.iter().all(|h| h.id != 107));
    assert_eq!(without.len(), 5);
}

#[test]
fn search_matches_bit_loop_oracle_on_random_indexes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for round in 0..100 {
        let k = if round % 2 == 0 { 12 } else { 36 };
        let n = rng.gen_range(1..=500);
        let bits: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let mut ids: Vec<u32> = (0..n as u32 * 3).collect();
        ids.shuffle(&mut rng);
        ids.truncate(n);
        let codes: Vec<HashCode> = bits.iter().map(|b| HashCode::from_bits(b)).collect();
        let idx = HashIndex::build(&codes, &ids, &vec![0; n]).unwrap();
        let q: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        let topn = rng.gen_range(1..=n + 5);
        let got: Vec<(u32, u32)> = idx.search(&HashCode::from_bits(&q), topn).unwrap().iter().map(|h| (h.id, h.distance)).collect();
        assert_eq!(got, naive_search(&bits, &ids, &q, topn), "round {round}");
    }
}

#[test]
fn file_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let codes: Vec<_> = (0..30).map(|_| random_code(36, &mut rng)).collect();
    let ids: Vec<u32> = (0..30).collect();
    let labels: Vec<u16> = (0..30).map(|i| (i % 4) as u16).collect();
    let idx = HashIndex::build(&codes, &ids, &labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codes.athx");
    idx.save(&path).unwrap();
    let back = HashIndex::load(&path).unwrap();
    assert_eq!(back, idx);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(back.search(&codes[3], 10).unwrap(), idx.search(&codes[3], 10).unwrap());

    let bytes = idx.to_bytes();
    for cut in [0, 3, 5, 10, 14, 15, 20, bytes.len() - 1] {
        assert!(HashIndex::from_bytes(&bytes[..cut], "mem").is_err(), "cut {cut}");
    }
    let mut v = bytes.clone();
    v[4] = 2;
    assert!(matches!(HashIndex::from_bytes(&v, "mem"), Err(IndexError::UnsupportedVersion { .. })));
    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(HashIndex::from_bytes(&m, "mem"), Err(IndexError::BadMagic { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(HashIndex::from_bytes(&extra, "mem").is_err());
    // a set padding bit in the last code byte
    let mut pad = bytes.clone();
    let last = pad.len() - 1;
    pad[last] |= 0x80;
    assert!(HashIndex::from_bytes(&pad, "mem").is_err());
    assert!(matches!(HashIndex::load(&dir.path().join("missing.athx")), Err(IndexError::Io { .. })));
}

fn pm1(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
}

#[test]
fn plus_minus_one_identity_exhaustive_small_k() {
    for k in 1..=8usize {
        let all: Vec<Vec<bool>> = (0..1u32 << k).map(|m| (0..k).map(|i| m >> i & 1 == 1).collect()).collect();
        let vecs: Vec<Vec<f64>> = all.iter().map(|b| pm1(b)).collect();
        let ids: Vec<u32> = (0..all.len() as u32).collect();
        let codes: Vec<HashCode> = vecs.iter().map(|v| binarize(v)).collect();
        let idx = HashIndex::build(&codes, &ids, &vec![0; all.len()]).unwrap();
        for (qi, q) in vecs.iter().enumerate() {
            for (ci, c) in vecs.iter().enumerate() {
                let sq: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                assert_eq!(sq, 4.0 * codes[qi].hamming(&codes[ci]) as f64);
            }
            let float: Vec<u32> = float_search_oracle(&vecs, &ids, q, all.len()).iter().map(|p| p.0).collect();
            let ham: Vec<u32> = idx.search(&codes[qi], all.len()).unwrap().iter().map(|h| h.id).collect();
            assert_eq!(float, ham);
        }
    }
}

#[test]
fn scan_throughput_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let codes: Vec<_> = (0..n).map(|_| random_code(36, &mut rng)).collect();
    let ids: Vec<u32> = (0..n as u32).collect();
    let idx = HashIndex::build(&codes, &ids, &vec![0; n]).unwrap();
    let q = random_code(36, &mut rng);
    idx.search(&q, 10).unwrap();
    let best = (0..5)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(idx.search(&q, 10).unwrap());
            t.elapsed()
        })
        .min()
        .unwrap();
    println!("100k x 36-bit scan: {best:?}");
    assert!(best.as_millis() < 50, "scan took {best:?}");
}

proptest! {
    #[test]
    fn hamming_is_a_metric(seed in 0u64..100_000, k in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (random_code(k, &mut rng), random_code(k, &mut rng), random_code(k, &mut rng));
        prop_assert_eq!(a.hamming(&a), 0);
        prop_assert_eq!(a.hamming(&b), b.hamming(&a));
        prop_assert!(a.hamming(&c) <= a.hamming(&b) + b.hamming(&c));
        if a != b {
            prop_assert!(a.hamming(&b) > 0);
        }
    }

    #[test]
    fn packing_round_trips_and_pads_with_zero(bits in prop::collection::vec(any::<bool>(), 1..70)) {
        let code = HashCode::from_bits(&bits);
        prop_assert_eq!(code.to_bits(), bits.clone());
        prop_assert_eq!(code.bytes().len(), bits.len().div_ceil(8));
        let spare = code.bytes().len() * 8 - bits.len();
        if spare > 0 {
            prop_assert_eq!(code.bytes().last().unwrap() >> (8 - spare), 0);
        }
        for (i, &b) in bits.iter().enumerate() {
            prop_assert_eq!(code.bytes()[i / 8] >> (i % 8) & 1 == 1, b);
        }
    }

    #[test]
    fn sign_ranking_matches_float_ranking(seed in 0u64..10_000, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 36;
        let bits: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let vecs: Vec<Vec<f64>> = bits.iter().map(|b| pm1(b)).collect();
        let ids: Vec<u32> = (0..n as u32).rev().collect();
        let codes: Vec<HashCode> = vecs.iter().map(|v| binarize(v)).collect();
        let idx = HashIndex::build(&codes, &ids, &vec![0; n]).unwrap();
        let q = pm1(&(0..k).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>());
        let float: Vec<(u32, f64)> = float_search_oracle(&vecs, &ids, &q, n);
        let ham = idx.search(&binarize(&q), n).unwrap();
        prop_assert_eq!(float.len(), ham.len());
        for (f, h) in float.iter().zip(&ham) {
            prop_assert_eq!(f.0, h.id);
            prop_assert_eq!(f.1, 4.0 * h.distance as f64);
        }
    }
}
