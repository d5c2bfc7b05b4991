use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::coder::tables::{scale_table, MAX_SYMBOLS};
use terracodec::coder::*;
use terracodec::Error;

/// Inverse-CDF sample from a table's regular symbols and escape.
fn sample(t: &CdfTable, rng: &mut ChaCha8Rng) -> i32 {
    let u = rng.gen_range(0..65536u32);
    let i = t.cdf().partition_point(|&c| c <= u) - 1;
    if i < t.num_regular() {
        t.offset() + i as i32
    } else {
        t.range().1 + 1000
    }
}

fn ideal_bits(t: &CdfTable, v: i32) -> f64 {
    t.bits(v)
}

#[test]
fn empty_stream_is_flush_only() {
    let bytes = range_encode(&[], &[]).unwrap();
    assert_eq!(bytes.len(), 4);
    assert!(range_decode(&bytes, &[]).unwrap().is_empty());
}

#[test]
fn single_symbol_roundtrip() {
    let t = cdf_from_gaussian(0.3, 2.0).unwrap();
    for v in [-5, 0, 1, 7, 1_000_000, -77_777] {
        let b = range_encode(&[v], &[&t]).unwrap();
        assert_eq!(range_decode(&b, &[&t]).unwrap(), vec![v]);
    }
}

#[test]
fn rate_is_near_ideal_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cache = GaussianTables::new();
    let mut syms = Vec::new();
    let mut tabs = Vec::new();
    for _ in 0..10_000 {
        let (t, _) = cache.lookup(rng.gen_range(-3.0..3.0), rng.gen_range(0.11..20.0)).unwrap();
        syms.push(sample(&t, &mut rng));
        tabs.push(t);
    }
    let refs: Vec<&CdfTable> = tabs.iter().map(|t| t.as_ref()).collect();
    let a = range_encode(&syms, &refs).unwrap();
    let b = range_encode(&syms, &refs).unwrap();
    assert_eq!(a, b);
    let ideal: f64 = syms.iter().zip(&refs).map(|(&s, t)| ideal_bits(t, s)).sum();
    assert!((a.len() * 8) as f64 <= 1.01 * ideal + 64.0, "{} vs {ideal}", a.len() * 8);
    assert!(a.len() <= (ideal / 8.0).ceil() as usize + 8);
    assert_eq!(range_decode(&a, &refs).unwrap(), syms);
}

#[test]
fn truncated_stream_reports_exhaustion() {
    let t = cdf_from_gaussian(0.0, 8.0).unwrap();
    let syms: Vec<i32> = (0..200).map(|i| (i % 17) - 8).collect();
    let refs = vec![&t; syms.len()];
    let b = range_encode(&syms, &refs).unwrap();
    let err = range_decode(&b[..b.len() / 2], &refs).unwrap_err();
    assert!(matches!(err, Error::StreamExhausted));
}

#[test]
fn tables_floor_and_normalize() {
    let scales = scale_table();
    assert_eq!(scales.len(), 64);
    assert!((scales[0] - SIGMA_MIN).abs() < 1e-12 && (scales[63] - 64.0).abs() < 1e-9);
    let mut cache = GaussianTables::new();
    for frac in [0, 17, 63] {
        for si in [0, 20, 63] {
            let t = cache.by_index(frac, si).unwrap();
            assert_eq!(*t.cdf().last().unwrap(), 1 << 16);
            assert!((0..=t.num_regular()).all(|i| t.freq(i) >= 1));
        }
    }
}

#[test]
fn widest_table_is_near_uniform_in_center() {
    let t = cdf_from_gaussian(0.0, 64.0).unwrap();
    let f: Vec<u32> = (-8..=8).map(|v| t.freq((v - t.offset()) as usize)).collect();
    let (mx, mn) = (*f.iter().max().unwrap(), *f.iter().min().unwrap());
    assert!((mx as f64) / (mn as f64) < 4.0);
    // oracle: direct integration of the density by midpoint rule
    let dens = |k: f64| {
        let n = 2000;
        (0..n).map(|i| {
            let x = (k - 0.5 + (i as f64 + 0.5) / n as f64) / 64.0;
            (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() / 64.0 / n as f64
        }).sum::<f64>()
    };
    for v in [-8, 0, 8] {
        let p = t.freq((v - t.offset()) as usize) as f64 / 65536.0;
        assert!((p - dens(v as f64)).abs() < 2e-4, "{v}: {p} vs {}", dens(v as f64));
    }
}

#[test]
fn mean_shift_translates_table() {
    let a = cdf_from_gaussian(0.25, 1.5).unwrap();
    let b = cdf_from_gaussian(1.25, 1.5).unwrap();
    assert_eq!(a.offset() + 1, b.offset());
    assert_eq!(a.cdf(), b.cdf());
}

#[test]
fn oversized_alphabet_rejected() {
    assert!(CdfTable::from_probs(0, &vec![0.0; MAX_SYMBOLS]).is_err());
    assert!(cdf_from_gaussian(0.0, 1e5).is_err());
}

fn header() -> Header {
    Header {
        family: Family::Flex,
        flags: Flags { context: 2, fill: FillMode::Mean, repeat_single: true },
        budget: K_ALL,
        h: 64,
        w: 64,
        c: 12,
        frames: 2,
        d_lat: 32,
        lambda_preset: 3,
    }
}

#[test]
fn container_roundtrip_and_validation() {
    let c = Container { header: header(), segments: vec![vec![1, 2, 3], vec![]] };
    let b = pack_container(&c).unwrap();
    assert_eq!(b.len(), 24 + 4 + 3 + 4);
    assert_eq!(unpack_container(&b).unwrap(), c);
    assert_eq!(c.header.tokens_kept(16).unwrap(), 16);

    let mut t = b.clone();
    t[24] = 9;
    assert!(unpack_container(&t).unwrap_err().to_string().contains("segment length mismatch"));
    let mut m = b.clone();
    m[0] = b'X';
    assert!(matches!(unpack_container(&m), Err(Error::BadMagic { .. })));
    let mut v = b;
    v[4] = 2;
    assert!(matches!(unpack_container(&v), Err(Error::UnsupportedVersion(2))));
}

#[test]
fn budget_semantics() {
    let mut h = header();
    h.budget = 4;
    assert_eq!(h.tokens_kept(16).unwrap(), 4);
    h.budget = 17;
    assert!(h.tokens_kept(16).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_tables_are_lossless(seed: u64, n in 1usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tabs: Vec<CdfTable> = (0..n).map(|_| {
            let len = rng.gen_range(1..50);
            let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = w.iter().sum::<f64>() * rng.gen_range(1.0..1.2);
            CdfTable::from_probs(rng.gen_range(-100..100), &w.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
        }).collect();
        let syms: Vec<i32> = tabs.iter().map(|t| {
            let (lo, hi) = t.range();
            if rng.gen_bool(0.05) { rng.gen() } else { rng.gen_range(lo..=hi) }
        }).collect();
        let refs: Vec<&CdfTable> = tabs.iter().collect();
        let b = range_encode(&syms, &refs).unwrap();
        prop_assert_eq!(range_decode(&b, &refs).unwrap(), syms);
    }

    #[test]
    fn flags_roundtrip(ctx in 0u8..3, mask: bool, rep: bool) {
        let f = Flags { context: ctx, fill: if mask { FillMode::Mask } else { FillMode::Mean }, repeat_single: rep };
        prop_assert_eq!(Flags::from_byte(f.to_byte()).unwrap(), f);
    }
}
