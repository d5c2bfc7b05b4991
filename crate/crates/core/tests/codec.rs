use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::codec::{past_pair, CodingOptions, Model, ModelConfig, PastLatents};
use terracodec::coder::{unpack_container, pack_container, Family, FillMode};
use terracodec::dataio::{standardize, synth_sequence, BandStats};
use terracodec::grad::Array;

fn random_latent(rng: &mut ChaCha8Rng, m: usize, h: usize, w: usize, spread: i32) -> Array<f32> {
    let d = (0..m * h * w).map(|_| rng.gen_range(-spread..=spread) as f32).collect();
    Array::new(&[1, m, h, w], d).unwrap()
}

fn model(family: Family) -> Model {
    Model::new(ModelConfig::small(family, 4)).unwrap()
}

#[test]
fn latents_round_trip_for_every_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for family in [Family::Fp, Family::Elic, Family::Tt, Family::Flex] {
        let m = model(family);
        for _ in 0..3 {
            let y = random_latent(&mut rng, 32, 4, 8, 6);
            let p1 = random_latent(&mut rng, 32, 4, 8, 3);
            let p2 = random_latent(&mut rng, 32, 4, 8, 3);
            let past = PastLatents::Two(&p1, &p2);
            let code = m.encode_latent(&y, past, None, FillMode::Mean).unwrap();
            let back = m.decode_latent(&code.bytes, 4, 8, past, None, FillMode::Mean).unwrap();
            assert_eq!(back, y, "{family}");
            assert_eq!(code.latent, y);
            let actual = code.bytes.len() as f64 * 8.0;
            assert!(actual <= 1.01 * code.est_bits + 64.0, "{family}: {actual} vs {}", code.est_bits);
        }
    }
}

#[test]
fn flex_budget_decodes_filled_latent_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = model(Family::Flex);
    let y = random_latent(&mut rng, 32, 4, 4, 4);
    for fill in [FillMode::Mean, FillMode::Mask] {
        for k in [0, 1, 4, 15] {
            let code = m.encode_latent(&y, PastLatents::None, Some(k), fill).unwrap();
            let back = m.decode_latent(&code.bytes, 4, 4, PastLatents::None, Some(k), fill).unwrap();
            assert_eq!(back, code.latent);
            // kept channels are exact
            let kk = 2 * k;
            for c in 0..kk {
                assert_eq!(&back.data()[c * 16..(c + 1) * 16], &y.data()[c * 16..(c + 1) * 16]);
            }
        }
    }
}

#[test]
fn tt_rejects_budget() {
    let m = model(Family::Tt);
    let y = Array::zeros(&[1, 32, 4, 4]);
    assert!(m.encode_latent(&y, PastLatents::None, Some(3), FillMode::Mean).is_err());
}

#[test]
fn past_pair_follows_context_count() {
    assert_eq!(past_pair(0, 2), None);
    assert_eq!(past_pair(1, 2), Some((0, 0)));
    assert_eq!(past_pair(3, 2), Some((1, 2)));
    assert_eq!(past_pair(3, 1), Some((2, 2)));
    assert_eq!(past_pair(3, 0), None);
}

#[test]
fn sequence_round_trip_through_container() {
    let s = synth_sequence(1, 64, 64, 4, 3, 0.0);
    let stats = BandStats::compute(&s.seq.frames).unwrap();
    let frames: Vec<_> = s.seq.frames.iter().map(|f| standardize(f, &stats).unwrap()).collect();
    for family in [Family::Fp, Family::Elic, Family::Tt, Family::Flex] {
        let m = model(family);
        let opts = CodingOptions { budget: (family == Family::Flex).then_some(6), ..Default::default() };
        let enc = m.encode_sequence(&frames, &opts).unwrap();
        let bytes = pack_container(&enc.container).unwrap();
        let c = unpack_container(&bytes).unwrap();
        let (lat, recon) = m.decode_sequence(&c).unwrap();
        assert_eq!(lat, enc.latents, "{family}");
        assert_eq!(recon, enc.recon, "{family}");
    }
}

#[test]
fn checkpoint_round_trip_and_family_check() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("elic");
    let m = model(Family::Elic);
    m.save(&stem, serde_json::json!({})).unwrap();
    let back = Model::load(&stem).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.store.to_bytes(), m.store.to_bytes());
    let s = synth_sequence(2, 64, 64, 4, 1, 0.0);
    let f = standardize(&s.seq.frames[0], &BandStats::identity(4)).unwrap();
    let enc = m.encode_sequence(&[f], &CodingOptions::default()).unwrap();
    let fp = model(Family::Fp);
    assert!(fp.decode_sequence(&enc.container).is_err());
}
