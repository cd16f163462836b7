mod common;

use avau_core::audio::{LogMelSpectrogram, POWER_FLOOR};
use avau_core::views::*;
use avau_core::visual::FaceImage;
use avau_tensor::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mel(frames: usize, seed: u64) -> LogMelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LogMelSpectrogram::from_parts(
        frames,
        80,
        (0..frames * 80).map(|_| rng.random_range(-5.0..5.0)).collect(),
    )
    .unwrap()
}

fn frames(n: usize, size: usize, seed: u64) -> Vec<FaceImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FaceImage::new(size, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

/// Pearson statistic of `counts` against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

// 99.9th percentile of χ² with 9 degrees of freedom.
const CHI2_9_999: f64 = 27.877;

#[test]
fn audio_crop_starts_are_uniform() {
    let x = mel(400, 0);
    let mut bins = [0usize; 10];
    let span = 400 - LOCAL_AUDIO_FRAMES + 1;
    for seed in 0..20_000 {
        let v = audio_local_view(&x, seed).unwrap();
        assert!(v.start < span);
        bins[v.start * 10 / span] += 1;
    }
    let stat = chi_square(&bins);
    assert!(stat < CHI2_9_999, "χ² = {stat}, bins {bins:?}");
}

#[test]
fn video_crop_starts_are_uniform() {
    let f = frames(100, 4, 1);
    let span = 100 - 25 + 1;
    let mut counts = vec![0usize; span];
    for seed in 0..15_200 {
        counts[video_local_view(&f, 25.0, seed).unwrap().start] += 1;
    }
    // 76 starts folded into 4 equal bins of 19
    let bins: Vec<usize> = counts.chunks(19).map(|c| c.iter().sum()).collect();
    assert!(chi_square(&bins) < 16.27, "{bins:?}"); // χ²₃ at 99.9%
    assert!(counts.iter().all(|&c| c > 0));
}

#[test]
fn sampled_augmentations_respect_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let a = Augmentation::sample(&mut rng);
        assert!(a.crop_area() >= MIN_CROP_AREA - 1e-12 && a.crop_area() <= 1.0);
        assert!(a.crop_x >= 0.0 && a.crop_x + a.crop_side <= 1.0 + 1e-12);
        assert!(a.crop_y >= 0.0 && a.crop_y + a.crop_side <= 1.0 + 1e-12);
        assert!(a.rotation_deg.abs() <= MAX_ROTATION_DEG);
    }
}

#[test]
fn identity_augmentation_and_flip_involution() {
    let f = frames(1, 9, 2).remove(0);
    assert_eq!(Augmentation::IDENTITY.apply(&f), f);
    let flip = Augmentation {
        flip: true,
        ..Augmentation::IDENTITY
    };
    let once = flip.apply(&f);
    assert_ne!(once, f);
    assert_eq!(flip.apply(&once), f);
    let n = 9;
    assert_eq!(&once.pixels()[..3], &f.pixels()[(n - 1) * 3..n * 3]);
}

#[test]
fn local_video_view_shares_one_augmentation() {
    let f = frames(60, 8, 3);
    let v = video_local_view(&f, 25.0, 77).unwrap();
    let aug = v.augmentation.unwrap();
    assert_eq!(v.frames.len(), 25);
    for (i, out) in v.frames.iter().enumerate() {
        assert_eq!(*out, aug.apply(&f[v.start + i]));
    }
    assert_eq!(video_local_view(&f, 25.0, 77).unwrap(), v);
    let g = video_global_view(&f, 25.0).unwrap();
    assert_eq!((g.kind, g.frames.len(), g.augmentation), (ViewKind::Global, 60, None));
}

#[test]
fn short_inputs_are_rejected() {
    assert!(audio_local_view_at(&mel(99, 0), 0, vec![]).is_err());
    assert!(audio_local_view_at(&mel(150, 0), 51, vec![]).is_err());
    assert!(audio_local_view_at(&mel(150, 0), 0, vec![FrequencyMask { start: 75, width: 6 }]).is_err());
    assert!(video_local_view_at(&frames(10, 4, 0), 25.0, 0, Augmentation::IDENTITY).is_err());
}

proptest! {
    #[test]
    fn masks_zero_exactly_their_band(seed in any::<u64>(), len in 100usize..300) {
        let x = mel(len, seed);
        let v = audio_local_view(&x, seed).unwrap();
        prop_assert!((1..=2).contains(&v.masks.len()));
        prop_assert_eq!(v.matrix.frames(), LOCAL_AUDIO_FRAMES);
        for m in &v.masks {
            prop_assert!(m.width >= 1 && m.width <= MAX_MASK_WIDTH && m.start + m.width <= 80);
        }
        for t in 0..LOCAL_AUDIO_FRAMES {
            for f in 0..80 {
                let masked = v.masks.iter().any(|m| (m.start..m.start + m.width).contains(&f));
                let want = if masked { 0.0 } else { x.frame(v.start + t)[f] };
                prop_assert_eq!(v.matrix.frame(t)[f], want);
            }
        }
    }

    #[test]
    fn audio_tokens_round_trip(seed in any::<u64>(), frames in 1usize..60, pt in 1usize..7, pf_idx in 0usize..5) {
        let pf = [1, 5, 10, 16, 80][pf_idx];
        let v = audio_global_view(&mel(frames, seed));
        let seq = tokenize_audio_view(&v, pt, pf).unwrap();
        prop_assert_eq!(seq.len(), frames.div_ceil(pt) * (80 / pf));
        prop_assert_eq!(seq.width(), pt * pf);
        let back = untokenize_audio(&seq).unwrap();
        prop_assert_eq!(&back.data()[..frames * 80], v.matrix.data());
        prop_assert!(back.data()[frames * 80..].iter().all(|&p| p == POWER_FLOOR.ln()));
        let ts = seq.timestamps();
        prop_assert!(ts.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn video_tokens_round_trip(seed in any::<u64>(), n in 1usize..7, ct in 1usize..4, cp_idx in 0usize..3) {
        let cp = [1, 2, 4][cp_idx];
        let f = frames(n, 8, seed);
        let v = video_global_view(&f, 25.0).unwrap();
        let seq = tokenize_video_view(&v, ct, cp).unwrap();
        prop_assert_eq!(seq.len(), n.div_ceil(ct) * (8 / cp) * (8 / cp));
        let back = untokenize_video(&seq).unwrap();
        prop_assert_eq!(&back[..n], &f[..]);
        for extra in &back[n..] {
            prop_assert_eq!(extra, &f[n - 1]);
        }
    }
}

#[test]
fn projection_checks_width() {
    let mut store = ParamStore::<f64>::new();
    let p = Projection::new(
        &mut store,
        "p",
        Modality::Audio,
        80,
        16,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let v = audio_global_view(&mel(7, 1));
    let good = tokenize_audio_view(&v, 1, 80).unwrap();
    let e = project_to_embedding(&good, &p, &store).unwrap();
    assert_eq!((e.len, e.dim, e.vectors.len(), e.timestamps.len()), (7, 16, 7 * 16, 7));
    let bad = tokenize_audio_view(&v, 1, 16).unwrap();
    assert!(project_to_embedding(&bad, &p, &store).is_err());
}
