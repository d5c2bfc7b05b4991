use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::dataio::*;
use terracodec::Error;

fn random_seq(seed: u64, t: usize, c: usize, h: usize, w: usize) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..t)
        .map(|_| ImageCube::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    Sequence::new(frames, (0..t as i64).collect()).unwrap()
}

#[test]
fn standardize_examples() {
    let stats = BandStats::new(vec![2000.0], vec![1000.0]).unwrap();
    let cube = ImageCube::new(1, 2, 1, vec![1000, 3000]).unwrap();
    assert_eq!(standardize(&cube, &stats).unwrap().data, vec![-1.0, 1.0]);
    let constant = ImageCube::new(2, 2, 1, vec![2000; 4]).unwrap();
    assert!(standardize(&constant, &stats).unwrap().data.iter().all(|&v| v == 0.0));
    let id = BandStats::identity(1);
    assert_eq!(standardize(&cube, &id).unwrap().data, vec![1000.0, 3000.0]);
    let wrong = BandStats::identity(2);
    assert!(standardize(&cube, &wrong).unwrap_err().to_string().contains("band"));
}

#[test]
fn destandardize_examples() {
    let stats = BandStats::new(vec![2000.0], vec![1.0]).unwrap();
    let z = StdCube { h: 2, w: 2, c: 1, data: vec![0.0; 4] };
    assert_eq!(destandardize(&z, &stats).unwrap().data, vec![2000; 4]);
    let stats = BandStats::new(vec![100.0], vec![50.0]).unwrap();
    let neg = StdCube { h: 1, w: 1, c: 1, data: vec![-10.0] };
    assert_eq!(destandardize(&neg, &stats).unwrap().data, vec![0]);
}

#[test]
fn standardize_roundtrip_within_half_unit() {
    let seq = random_seq(3, 2, 12, 16, 16);
    let stats = BandStats::compute(&seq.frames).unwrap();
    for f in &seq.frames {
        let s = standardize(f, &stats).unwrap();
        let back = destandardize_f64(&s, &stats).unwrap();
        for (a, b) in f.data.iter().zip(back) {
            assert!((*a as f64 - b).abs() <= 0.5);
        }
        assert_eq!(&destandardize(&s, &stats).unwrap(), f);
    }
}

#[test]
fn nearest_upsample_examples() {
    assert_eq!(nearest_upsample(&[1, 2, 3, 4], 2, 2, 1).unwrap(), vec![1, 2, 3, 4]);
    assert_eq!(nearest_upsample(&[7], 1, 1, 2).unwrap(), vec![7; 4]);
    assert_eq!(
        nearest_upsample(&[1, 2, 3, 4], 2, 2, 2).unwrap(),
        vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
    );
    assert!(nearest_upsample(&[1], 1, 1, 0).is_err());
}

#[test]
fn crop_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_seq(1, 1, 2, 96, 96);
    let f = &seq.frames[0];
    assert_eq!(crop_window(96, 96, 64, CropMode::Center, &mut rng).unwrap(), (16, 16));
    let c = crop(f, CropMode::Center, 64, &mut rng).unwrap();
    assert_eq!(c.get(1, 0, 0), f.get(1, 16, 16));
    assert_eq!(c.get(0, 63, 63), f.get(0, 79, 79));
    let g = random_seq(2, 1, 1, 64, 64);
    assert_eq!(crop(&g.frames[0], CropMode::Center, 64, &mut rng).unwrap(), g.frames[0]);
    let a = crop(f, CropMode::Random, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = crop(f, CropMode::Random, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(crop(f, CropMode::Center, 112, &mut rng).is_err());
    assert!(crop(f, CropMode::Center, 40, &mut rng).is_err());
}

#[test]
fn cube_file_roundtrip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.tecr");
    let seq = random_seq(4, 4, 12, 64, 64);
    save_cube(&p, &seq).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 4 * 12 * 64 * 64 * 2);
    assert_eq!(HEADER_LEN, 16);
    assert_eq!(&bytes[..4], b"TECR");
    assert_eq!(load_cube(&p).unwrap(), seq);
}

#[test]
fn cube_file_errors() {
    let seq = random_seq(5, 1, 2, 16, 16);
    let bytes = write_cube(&seq).unwrap();
    let err = read_cube(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(err.to_string().contains("truncated payload"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_cube(&bad), Err(Error::BadMagic { .. })));
    let mut dt = bytes.clone();
    dt[5] = 3;
    assert!(matches!(read_cube(&dt), Err(Error::UnsupportedDtype(3))));
}

#[test]
fn stats_sidecar_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = stats_path(&dir.path().join("a.tecr"));
    assert!(p.to_string_lossy().ends_with("a.tecr.stats.json"));
    let s = BandStats::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
    save_stats(&p, &s).unwrap();
    assert_eq!(load_stats(&p).unwrap(), s);
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let a = synth_sequence(11, 64, 64, 12, 4, 0.5);
    let b = synth_sequence(11, 64, 64, 12, 4, 0.5);
    let c = synth_sequence(12, 64, 64, 12, 4, 0.5);
    assert_eq!(a, b);
    assert_ne!(a.seq, c.seq);
}

#[test]
fn synth_without_clouds_has_empty_masks() {
    for seed in 0..10 {
        let s = synth_sequence(seed, 32, 32, 4, 4, 0.0);
        assert!(s.masks.iter().all(|m| m.is_empty()));
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn synth_inter_frame_correlation_of_clear_pixels() {
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..100 {
        let s = synth_sequence(seed, 64, 64, 12, 4, 0.3);
        for k in 1..4 {
            let (fa, fb) = (&s.seq.frames[k - 1], &s.seq.frames[k]);
            let clear: Vec<usize> = (0..64 * 64).filter(|&p| !s.masks[k - 1].data[p] && !s.masks[k].data[p]).collect();
            if clear.len() < 100 {
                continue;
            }
            for b in 0..12 {
                let xa: Vec<f64> = clear.iter().map(|&p| fa.band(b)[p] as f64).collect();
                let xb: Vec<f64> = clear.iter().map(|&p| fb.band(b)[p] as f64).collect();
                total += correlation(&xa, &xb);
                count += 1;
            }
        }
    }
    let mean = total / count as f64;
    assert!(mean > 0.9, "mean correlation {mean}");
}

#[test]
fn synth_clouds_are_brighter() {
    let s = synth_sequence(21, 64, 64, 12, 4, 1.0);
    for (f, m) in s.seq.frames.iter().zip(&s.masks) {
        assert!(!m.is_empty());
        let core: Vec<usize> = (0..64 * 64).filter(|&p| m.data[p]).collect();
        let clear: Vec<usize> = (0..64 * 64).filter(|&p| !m.data[p]).collect();
        if clear.is_empty() {
            continue;
        }
        let mean = |idx: &[usize]| idx.iter().map(|&p| f.band(0)[p] as f64).sum::<f64>() / idx.len() as f64;
        assert!(mean(&core) > mean(&clear));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn crop_never_out_of_bounds(h16 in 1usize..8, w16 in 1usize..8, s16 in 1usize..8, seed: u64) {
        let (h, w, size) = (h16 * 16, w16 * 16, s16 * 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match crop_window(h, w, size, CropMode::Random, &mut rng) {
            Ok((t, l)) => prop_assert!(t + size <= h && l + size <= w),
            Err(_) => prop_assert!(size > h.min(w)),
        }
    }

    #[test]
    fn file_roundtrip_exact(seed: u64, t in 1usize..4, c in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let seq = random_seq(seed, t, c, h, w);
        prop_assert_eq!(read_cube(&write_cube(&seq).unwrap()).unwrap(), seq);
    }
}
