use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::codec::{CodingOptions, Model, ModelConfig};
use terracodec::coder::Family;
use terracodec::dataio::{synth_sequence, BandStats, ImageCube};
use terracodec::metrics::{
    bppbf, evaluate_frames, evaluate_sequence, fmt_f64, ms_ssim, ms_ssim_levels, mse, psnr, ssim, FrameClass, PsnrMode, RDRecord, CSV_HEADER,
};

fn cube(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize) -> u16) -> ImageCube {
    let data = (0..c * h * w).map(|i| f(i / (h * w), i % (h * w))).collect();
    ImageCube::new(h, w, c, data).unwrap()
}

fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageCube {
    let data = (0..c * h * w).map(|_| rng.gen_range(0..60000)).collect();
    ImageCube::new(h, w, c, data).unwrap()
}

fn permute_bands(x: &ImageCube, perm: &[usize]) -> ImageCube {
    let data = perm.iter().flat_map(|&b| x.band(b).to_vec()).collect();
    ImageCube::new(x.h, x.w, x.c, data).unwrap()
}

#[test]
fn bppbf_cases() {
    assert_eq!(bppbf(786432.0, 256, 256, 12, 1).unwrap(), 1.0);
    assert_eq!(bppbf(393216.0, 256, 256, 12, 1).unwrap(), 0.5);
    assert_eq!(bppbf((16 * 32 * 3 * 5) as f64, 16, 32, 3, 5).unwrap(), 1.0);
    assert!(bppbf(1.0, 0, 4, 4, 1).is_err());
}

#[test]
fn psnr_constructed_cases() {
    let zero = cube(8, 8, 2, |_, _| 0);
    assert_eq!(psnr(&zero, &zero, PsnrMode::Full).unwrap(), f64::INFINITY);
    // MSE equals range squared in every band.
    let full = cube(8, 8, 2, |_, _| 65535);
    assert_eq!(psnr(&zero, &full, PsnrMode::Full).unwrap(), 0.0);
    // MSE equals range squared / 100.
    let tenth = cube(8, 8, 2, |_, _| 1000);
    assert!((psnr(&zero, &tenth, PsnrMode::TenK).unwrap() - 20.0).abs() < 1e-12);
    // Auto range of a 0..=500 ramp is 500; an error of 50 gives 20 dB.
    let ramp = cube(8, 8, 1, |_, i| if i == 0 { 0 } else if i == 1 { 500 } else { 250 });
    let off = cube(8, 8, 1, |_, i| [0u16, 500, 250][i.min(2)] + 50);
    assert!((psnr(&ramp, &off, PsnrMode::Auto).unwrap() - 20.0).abs() < 1e-12);
    assert!(psnr(&zero, &cube(8, 4, 2, |_, _| 0), PsnrMode::Full).is_err());
    assert_eq!(fmt_f64(f64::INFINITY), "inf");
}

#[test]
fn psnr_modes_are_ordered_by_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = cube(16, 16, 3, |_, _| rng.gen_range(2000..6000));
    let b = cube(16, 16, 3, |b, i| a.band(b)[i].saturating_add((i % 7) as u16 * 20));
    let (full, ten, auto) = (
        psnr(&a, &b, PsnrMode::Full).unwrap(),
        psnr(&a, &b, PsnrMode::TenK).unwrap(),
        psnr(&a, &b, PsnrMode::Auto).unwrap(),
    );
    assert!(full >= ten && ten >= auto, "{full} {ten} {auto}");
}

#[test]
fn ssim_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = noise(&mut rng, 32, 32, 2);
    assert_eq!(ssim(&x, &x, PsnrMode::Full).unwrap(), 1.0);
    assert_eq!(ms_ssim(&x, &x, PsnrMode::Full).unwrap(), 1.0);
    let flat = cube(32, 32, 2, |_, _| 30000);
    assert!(ssim(&x, &flat, PsnrMode::Full).unwrap() < 0.1);
    let y = noise(&mut rng, 32, 32, 2);
    assert_eq!(ssim(&x, &y, PsnrMode::Full).unwrap(), ssim(&y, &x, PsnrMode::Full).unwrap());
    assert!(ssim(&cube(8, 8, 1, |_, _| 0), &cube(8, 8, 1, |_, _| 0), PsnrMode::Full).is_err());
}

#[test]
fn ms_ssim_level_count_shrinks() {
    assert_eq!(ms_ssim_levels(256, 256), 5);
    assert_eq!(ms_ssim_levels(176, 176), 5);
    assert_eq!(ms_ssim_levels(64, 64), 3);
    assert_eq!(ms_ssim_levels(11, 40), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn metrics_ignore_band_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = noise(&mut rng, 24, 24, 4);
        let b = noise(&mut rng, 24, 24, 4);
        let mut perm = vec![0, 1, 2, 3];
        for i in (1..4).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let (pa, pb) = (permute_bands(&a, &perm), permute_bands(&b, &perm));
        for m in PsnrMode::ALL {
            prop_assert_eq!(psnr(&a, &b, m).unwrap(), psnr(&pa, &pb, m).unwrap());
            prop_assert_eq!(ssim(&a, &b, m).unwrap(), ssim(&pa, &pb, m).unwrap());
            prop_assert_eq!(ms_ssim(&a, &b, m).unwrap(), ms_ssim(&pa, &pb, m).unwrap());
        }
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&pa, &pb).unwrap());
    }
}

#[test]
fn frame_classes() {
    let p: Vec<usize> = (0..4).filter(|&f| FrameClass::PFrames.contains(f)).collect();
    assert_eq!(p, vec![2, 3]);
    let b: Vec<usize> = (0..4).filter(|&f| FrameClass::Bootstrap.contains(f)).collect();
    assert_eq!(b, vec![0, 1]);
}

#[test]
fn sequence_records_use_payload_bits() {
    let s = synth_sequence(5, 64, 64, 4, 4, 0.0);
    let stats = BandStats::compute(&s.seq.frames).unwrap();
    let model = Model::new(ModelConfig::small(Family::Tt, 4)).unwrap();
    let opts = CodingOptions::default();
    let frames = evaluate_frames(&model, &s.seq.frames, &stats, &opts).unwrap();
    let std: Vec<_> = s.seq.frames.iter().map(|f| terracodec::dataio::standardize(f, &stats).unwrap()).collect();
    let enc = model.encode_sequence(&std, &opts).unwrap();
    for (f, seg) in frames.iter().zip(&enc.container.segments) {
        assert_eq!(f.bits, seg.len() as f64 * 8.0);
        assert!(f.bits <= 1.01 * f.est_bits + 64.0);
    }
    let recs = evaluate_sequence(&model, "tt", "c2", &s.seq.frames, &stats, &opts).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].class, FrameClass::All);
    assert_eq!(recs[1].frames, 2);
    let payload: usize = enc.container.segments.iter().map(Vec::len).sum();
    assert_eq!(recs[0].bppbf, payload as f64 * 8.0 / (64 * 64 * 4 * 4) as f64);
    assert_eq!(CSV_HEADER.split(',').count(), recs[0].csv_row().split(',').count());
}

#[test]
fn image_codec_frame_classes_agree_per_frame() {
    let s = synth_sequence(6, 32, 32, 4, 4, 0.0);
    let stats = BandStats::compute(&s.seq.frames).unwrap();
    let model = Model::new(ModelConfig::small(Family::Fp, 4)).unwrap();
    let m = evaluate_frames(&model, &s.seq.frames, &stats, &CodingOptions::default()).unwrap();
    let all = RDRecord::aggregate("fp", "4", FrameClass::All, (32, 32, 4), &m).unwrap().unwrap();
    let pf = RDRecord::aggregate("fp", "4", FrameClass::PFrames, (32, 32, 4), &m).unwrap().unwrap();
    // Every frame is coded alone, so equal frames would cost equal bits; the
    // per-frame rate of each class is the mean of its members.
    let per = |idx: &[usize]| idx.iter().map(|&i| m[i].bits).sum::<f64>() / (idx.len() * 32 * 32 * 4) as f64;
    assert_eq!(all.bppbf, per(&[0, 1, 2, 3]));
    assert_eq!(pf.bppbf, per(&[2, 3]));
    let again = evaluate_frames(&model, &s.seq.frames[2..], &stats, &CodingOptions::default()).unwrap();
    assert_eq!(again[0].bits, m[2].bits);
}
