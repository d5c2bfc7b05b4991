use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::flexrate::{apply_mask, budget_probs, flex_loss, masked_rate, repack, sample_budget, budget_indicator};
use terracodec::grad::Array;

#[test]
fn second_token_of_small_block_is_channel_one() {
    // 2x2 block, 4 channels, value = 10 * position + channel.
    let block: Vec<u32> = (0..4).flat_map(|p| (0..4).map(move |c| 10 * p + c)).collect();
    let r = repack(&block, 4, 4, 4).unwrap();
    assert_eq!(r.k, 1);
    assert_eq!(r.token(1), &[1, 11, 21, 31]);
}

#[test]
fn repack_rejects_indivisible_channels() {
    let err = repack(&[0u8; 12], 4, 3, 2).unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn unpack_inverts_repack_and_prefix_is_channel_slice(
        positions in 1usize..17, t in 1usize..9, k in 1usize..5, keep in 0usize..9, seed in any::<u64>()
    ) {
        let d = t * k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block: Vec<f32> = (0..positions * d).map(|_| rng.gen()).collect();
        let r = repack(&block, positions, d, t).unwrap();
        prop_assert_eq!(r.unpack(), block.clone());
        let kk = keep.min(t);
        let kept: Vec<f32> = r.data[..kk * k * positions].to_vec();
        // Same values as channels 0..kk*k, grouped by token.
        let mut slice = Vec::new();
        for u in 0..kk {
            for p in 0..positions {
                slice.extend_from_slice(&block[p * d + u * k..p * d + (u + 1) * k]);
            }
        }
        prop_assert_eq!(kept, slice);
    }

    #[test]
    fn masked_rate_is_monotone_in_budget(bits in proptest::collection::vec(0.0f64..50.0, 16)) {
        let mut last = 0.0;
        for k in 0..=16 {
            let r = masked_rate(&bits, &budget_indicator(k, 16)).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
    }
}

#[test]
fn budget_probabilities() {
    let p = budget_probs(16);
    assert_eq!(p[15], 16.0 / 136.0);
    assert_eq!(p[0], 1.0 / 136.0);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn budget_sampler_passes_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = [0u64; 16];
    for _ in 0..n {
        let k = sample_budget(16, &mut rng);
        assert!((1..=16).contains(&k));
        counts[k - 1] += 1;
    }
    let chi: f64 = budget_probs(16)
        .iter()
        .zip(counts)
        .map(|(p, c)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 15 degrees of freedom, upper 1% point.
    assert!(chi < 30.578, "chi-square {chi}");
}

#[test]
fn mask_application() {
    let tokens = Array::new(&[2, 4, 3], (0..24).map(|v| v as f64).collect()).unwrap();
    let m = [-1.0, -2.0, -3.0];
    let (same, ind) = apply_mask(&tokens, 4, &m).unwrap();
    assert_eq!(same, tokens);
    assert_eq!(ind, vec![true; 4]);
    let (one, ind) = apply_mask(&tokens, 1, &m).unwrap();
    assert_eq!(ind, vec![true, false, false, false]);
    for b in 0..2 {
        assert_eq!(one.data()[b * 12..b * 12 + 3], tokens.data()[b * 12..b * 12 + 3]);
        for u in 1..4 {
            assert_eq!(&one.data()[b * 12 + u * 3..b * 12 + u * 3 + 3], &m);
        }
    }
    assert!(apply_mask(&tokens, 0, &m).is_err());
    assert!(apply_mask(&tokens, 5, &m).is_err());
}

#[test]
fn masked_rate_cases() {
    let bits: Vec<f64> = (1..=16).map(|v| v as f64 * 1.5).collect();
    assert_eq!(masked_rate(&bits, &[false; 16]).unwrap(), 0.0);
    assert_eq!(masked_rate(&bits, &[true; 16]).unwrap(), bits.iter().sum::<f64>());
    let mut direct = 0.0;
    for b in &bits[..8] {
        direct += b;
    }
    assert_eq!(masked_rate(&bits, &budget_indicator(8, 16)).unwrap(), direct);
}

#[test]
fn flex_loss_formula() {
    assert_eq!(flex_loss(10.0, 0.5, 4, 16, 2.0).unwrap(), 41.0);
    assert_eq!(flex_loss(10.0, 0.5, 16, 16, 2.0).unwrap(), 10.0 + 2.0 * 0.5);
    let full = flex_loss(3.0, 0.0, 8, 16, 1.0).unwrap();
    let half = flex_loss(3.0, 0.0, 4, 16, 1.0).unwrap();
    assert_eq!(half, 2.0 * full);
    assert!(flex_loss(1.0, 1.0, 0, 16, 1.0).is_err());
}
