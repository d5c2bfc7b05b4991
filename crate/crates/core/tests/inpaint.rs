use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::codec::{CodingOptions, Model, ModelConfig};
use terracodec::coder::Family;
use terracodec::dataio::{destandardize, standardize, synth_sequence, BandStats, CloudMask, ImageCube};
use terracodec::grad::Array;
use terracodec::inpaint::{
    copy_least_cloudy, inpaint_cube, kept_tokens, masked_psnr, mu_forecast, pool_mask, predict_latent, reorder_context, LatentMask, Policy, SoftMask,
};
use terracodec::metrics::PsnrMode;
use terracodec::temporal::TOKENS;

fn tt() -> Model {
    Model::new(ModelConfig::small(Family::Tt, 4)).unwrap()
}

fn random_latent(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array<f32> {
    Array::new(&[1, 32, h, w], (0..32 * h * w).map(|_| rng.gen_range(-3..=3) as f32).collect()).unwrap()
}

fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> SoftMask {
    SoftMask::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
}

#[test]
fn pooling_cases() {
    let clear = pool_mask(&mask(64, 64, |_, _| 0.0)).unwrap();
    assert!(clear.token_flags(0.0).unwrap().iter().all(|b| b.iter().all(|&c| !c)));
    let cloudy = pool_mask(&mask(64, 64, |_, _| 1.0)).unwrap();
    assert!(cloudy.token_flags(0.0).unwrap().iter().all(|b| b.iter().all(|&c| c)));
    // Left half of the first 16x16 window covered.
    let half = pool_mask(&mask(64, 64, |y, x| if y < 16 && x < 8 { 1.0 } else { 0.0 })).unwrap();
    assert_eq!(half.fraction[0], 0.5);
    assert!(half.cloudy(0.49)[0]);
    assert!(!half.cloudy(0.5)[0]);
    assert!(pool_mask(&mask(40, 64, |_, _| 0.0)).is_err());
}

#[test]
fn soft_mask_conversions() {
    assert!(SoftMask::new(2, 2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
    let m = SoftMask::new(2, 2, vec![0.0, 1.0, 0.25, 0.0]).unwrap();
    assert_eq!(m.binarize(0.0), vec![false, true, true, false]);
    assert_eq!(m.binarize(0.5), vec![false, true, false, false]);
    let back = SoftMask::from_cube(&m.to_cube()).unwrap();
    assert!(back.data.iter().zip(&m.data).all(|(a, b)| (a - b).abs() < 1e-4));
    let c = CloudMask { h: 1, w: 2, data: vec![true, false] };
    assert_eq!(SoftMask::from(&c).data, vec![1.0, 0.0]);
}

#[test]
fn token_flags_follow_block_layout() {
    let mut fraction = vec![0.0; 8 * 4];
    fraction[1 * 4 + 2] = 0.3; // row 1, column 2 of the top block
    let lm = LatentMask { h: 8, w: 4, fraction };
    let flags = lm.token_flags(0.0).unwrap();
    assert_eq!(flags.len(), 2);
    assert!(flags[0][4 + 2]);
    assert_eq!(flags[0].iter().filter(|&&c| c).count(), 1);
    assert!(flags[1].iter().all(|&c| !c));
}

#[test]
fn context_selection() {
    // Only frame 1 is usable: it is duplicated.
    assert_eq!(reorder_context(&[0.9, 0.1, 0.5], 2).unwrap(), (1, 1));
    // All clear: first two by index, target excluded.
    assert_eq!(reorder_context(&[0.0, 0.0, 0.0, 0.0], 0).unwrap(), (1, 2));
    assert_eq!(reorder_context(&[0.3, 0.0, 0.2, 0.6], 3).unwrap(), (1, 2));
    // Returned in temporal order.
    assert_eq!(reorder_context(&[0.2, 0.4, 0.1, 0.9], 1).unwrap(), (0, 2));
    // Nothing usable still picks the least cloudy.
    assert_eq!(reorder_context(&[0.8, 0.7, 0.9], 0).unwrap(), (1, 1));
    assert!(reorder_context(&[0.1], 0).is_err());
    assert!(reorder_context(&[0.1, 0.2], 5).is_err());
}

proptest! {
    #[test]
    fn interleave_transmits_at_least_propagate(bits in any::<u16>()) {
        let flags: [bool; TOKENS] = std::array::from_fn(|t| bits >> t & 1 == 1);
        let il = kept_tokens(&[flags], Policy::Interleave)[0];
        let pr = kept_tokens(&[flags], Policy::Propagate)[0];
        let count = |k: [bool; TOKENS]| k.iter().filter(|&&x| x).count();
        prop_assert!(count(il) >= count(pr));
        let first = flags.iter().position(|&c| c).unwrap_or(TOKENS);
        prop_assert_eq!(count(pr), first);
        for t in 0..TOKENS {
            prop_assert!(!pr[t] || il[t]);
        }
    }
}

#[test]
fn degenerate_policies() {
    let m = tt();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b, y) = (random_latent(&mut rng, 8, 4), random_latent(&mut rng, 8, 4), random_latent(&mut rng, 8, 4));
    let clear = LatentMask { h: 8, w: 4, fraction: vec![0.0; 32] };
    let cloudy = LatentMask { h: 8, w: 4, fraction: vec![1.0; 32] };
    for p in [Policy::Interleave, Policy::Propagate] {
        let keep = kept_tokens(&clear.token_flags(0.0).unwrap(), p);
        assert_eq!(predict_latent(&m, Some(&y), &keep, (&a, &b), None).unwrap(), y);
        // A threshold of 1 marks nothing cloudy.
        let keep = kept_tokens(&cloudy.token_flags(1.0).unwrap(), p);
        assert_eq!(predict_latent(&m, Some(&y), &keep, (&a, &b), None).unwrap(), y);
    }
    let keep = kept_tokens(&cloudy.token_flags(0.0).unwrap(), Policy::Interleave);
    let forecast = mu_forecast(&m, (&a, &b), None).unwrap();
    assert_eq!(predict_latent(&m, Some(&y), &keep, (&a, &b), None).unwrap(), forecast);
}

#[test]
fn clear_blocks_are_preserved() {
    let m = tt();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b, y) = (random_latent(&mut rng, 8, 4), random_latent(&mut rng, 8, 4), random_latent(&mut rng, 8, 4));
    // Bottom block partly cloudy, top block clear.
    let mut fraction = vec![0.0; 32];
    fraction[5 * 4 + 1] = 0.6;
    fraction[7 * 4 + 3] = 0.2;
    let lm = LatentMask { h: 8, w: 4, fraction };
    let keep = kept_tokens(&lm.token_flags(0.0).unwrap(), Policy::Interleave);
    let out = predict_latent(&m, Some(&y), &keep, (&a, &b), None).unwrap();
    let tok = |l: &Array<f32>| m.tokens_of(l).unwrap();
    let (o, t) = (tok(&out), tok(&y));
    let per = TOKENS * 32;
    assert_eq!(o.data()[..per], t.data()[..per]);
    for u in 0..TOKENS {
        let r = per + u * 32..per + (u + 1) * 32;
        if keep[1][u] {
            assert_eq!(o.data()[r.clone()], t.data()[r]);
        }
    }
    assert_ne!(o.data()[per..], t.data()[per..]);
}

#[test]
fn forecast_modes_are_reproducible() {
    let m = tt();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_latent(&mut rng, 4, 4), random_latent(&mut rng, 4, 4));
    assert_eq!(mu_forecast(&m, (&a, &b), None).unwrap(), mu_forecast(&m, (&a, &b), None).unwrap());
    let s1 = mu_forecast(&m, (&a, &b), Some(9)).unwrap();
    assert_eq!(s1, mu_forecast(&m, (&a, &b), Some(9)).unwrap());
    assert_ne!(s1, mu_forecast(&m, (&a, &b), Some(10)).unwrap());
}

#[test]
fn non_tt_models_are_rejected() {
    let m = Model::new(ModelConfig::small(Family::Flex, 4)).unwrap();
    let z = Array::zeros(&[1, 32, 4, 4]);
    let err = mu_forecast(&m, (&z, &z), None).unwrap_err();
    assert!(err.to_string().contains("TT"), "{err}");
}

#[test]
fn masked_psnr_scores_only_the_region() {
    let r = ImageCube::new(2, 2, 1, vec![0, 0, 0, 0]).unwrap();
    let x = ImageCube::new(2, 2, 1, vec![6554, 0, 0, 30000]).unwrap();
    // Region holds one pixel with error 6554 (about 65535 / 10).
    let p = masked_psnr(&r, &x, &[true, false, false, false], PsnrMode::Full).unwrap();
    assert!((p - 20.0).abs() < 1e-3, "{p}");
    assert_eq!(masked_psnr(&r, &x, &[false, true, true, false], PsnrMode::Full).unwrap(), f64::INFINITY);
    assert!(masked_psnr(&r, &x, &[false; 4], PsnrMode::Full).is_err());
}

#[test]
fn clear_sequence_inpaints_to_plain_decode() {
    let m = tt();
    let s = synth_sequence(8, 64, 64, 4, 4, 0.0);
    let stats = BandStats::compute(&s.seq.frames).unwrap();
    let masks: Vec<SoftMask> = s.masks.iter().map(SoftMask::from).collect();
    let std: Vec<_> = s.seq.frames.iter().map(|f| standardize(f, &stats).unwrap()).collect();
    let enc = m.encode_sequence(&std, &CodingOptions::default()).unwrap();
    for policy in [Policy::Interleave, Policy::Propagate] {
        let r = inpaint_cube(&m, &s.seq.frames, &masks, &stats, 2, 0.0, policy).unwrap();
        assert_eq!(r.predicted_tokens, 0);
        assert_eq!(r.recon, destandardize(&enc.recon[2], &stats).unwrap());
    }
    let copy = copy_least_cloudy(&s.seq.frames, &masks, 0).unwrap();
    assert_eq!(copy, s.seq.frames[1]);
}

/// Trains a desk TT model (about 15 minutes) and compares its clear-sky
/// forecast of frame 3 from frames 1 and 2 with simply repeating frame 2.
/// Known to fail at desk scale: the forecast is limited by coding
/// distortion (about 54 dB against 61 dB for the repeat).
#[test]
#[ignore = "trains a model; fails at desk scale"]
fn forecast_beats_repeating_last_frame() {
    use terracodec::metrics::psnr;
    use terracodec::trainer::{Corpus, Schedule, TrainConfig, TrainMode, Trainer};
    use terracodec::transforms::array_to_cube;
    let synth = terracodec::dataio::SynthConfig { cloud_prob: 0.1, ..Default::default() };
    let model = Model::new(ModelConfig::small(Family::Tt, synth.c)).unwrap();
    let s1 = TrainConfig { family: Family::Tt, mode: TrainMode::Image, steps: 1500, lambda: 32.0, synth: synth.clone(), ..Default::default() };
    let mut t1 = Trainer::new(s1, model).unwrap();
    t1.run(|_| {}).unwrap();
    let s2 = TrainConfig { family: Family::Tt, mode: TrainMode::Temporal, steps: 1500, warmup: 0.15, schedule: Schedule::HalfCosine, synth: synth.clone(), ..Default::default() };
    let mut t = Trainer::with_corpus(s2, t1.model, t1.corpus).unwrap();
    t.run(|_| {}).unwrap();
    let test = Corpus::with_stats(terracodec::dataio::SynthConfig { cloud_prob: 0.0, ..synth }, 80, t.corpus.stats.clone());
    let (mut fc, mut rep) = (vec![], vec![]);
    for i in 0..20 {
        let s = test.held_out_sequence(i);
        let fr = &s.seq.frames;
        let a = t.model.quantized_latent(&standardize(&fr[1], &test.stats).unwrap()).unwrap();
        let b = t.model.quantized_latent(&standardize(&fr[2], &test.stats).unwrap()).unwrap();
        let y = mu_forecast(&t.model, (&a, &b), None).unwrap();
        let x = destandardize(&array_to_cube(&t.model.synthesize(&y).unwrap()).unwrap(), &test.stats).unwrap();
        fc.push(psnr(&fr[3], &x, PsnrMode::Full).unwrap());
        rep.push(psnr(&fr[3], &fr[2], PsnrMode::Full).unwrap());
    }
    fc.sort_by(f64::total_cmp);
    rep.sort_by(f64::total_cmp);
    assert!(fc[10] > rep[10], "forecast {:.2} dB, repeat {:.2} dB", fc[10], rep[10]);
}
