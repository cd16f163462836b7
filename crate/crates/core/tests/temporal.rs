mod common;

use avau_core::temporal::*;
use avau_tensor::{ParamStore, Tape, Tensor};
use common::{impulse_span, positive_tcn, rand_tensor, run_tcn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (2usize..5, prop::collection::btree_set(1usize..10, 1..4)).prop_map(|(k, d)| (k, d.into_iter().collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn impulse_reach_is_the_receptive_field((k, d) in schedule(), seed in any::<u64>()) {
        prop_assert_eq!(impulse_span(k, &d, seed), Some(receptive_field(k, &d)));
    }

    #[test]
    fn tcn_is_causal((k, d) in schedule(), seed in any::<u64>(), t in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = TcnConfig { kernel: k, dilations: d, channels: 4, residual: true };
        let tcn = Tcn::new(cfg, 3, &mut store, "tcn", &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[30, 3], 1.0);
        let mut moved = x.clone();
        for v in &mut moved.data_mut()[(t + 1) * 3..] {
            *v += rng.random_range(-10.0..10.0);
        }
        let (a, b) = (run_tcn(&store, &tcn, &x), run_tcn(&store, &tcn, &moved));
        prop_assert_eq!(&a[..(t + 1) * 4], &b[..(t + 1) * 4]);
    }
}

#[test]
fn default_receptive_field() {
    assert_eq!(TcnConfig::default().receptive_field(), 61);
    assert_eq!(impulse_span(3, &[1, 2, 4, 8], 0), Some(61));
}

#[test]
fn bad_schedules_are_rejected() {
    for d in [vec![], vec![0, 1], vec![2, 2], vec![4, 2]] {
        let cfg = TcnConfig {
            dilations: d,
            ..TcnConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

#[test]
fn zero_weights_make_the_tcn_an_identity() {
    let (mut store, tcn) = positive_tcn(3, &[1, 2, 4], 5, 1);
    store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[17, 5], 3.0);
    assert_eq!(run_tcn(&store, &tcn, &x), x.data());
}

#[test]
fn projection_skip_handles_width_change() {
    let mut store = ParamStore::<f64>::new();
    let cfg = TcnConfig {
        channels: 6,
        ..TcnConfig::default()
    };
    let tcn = Tcn::new(cfg, 4, &mut store, "tcn", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(tcn.blocks[0].projection.is_some());
    assert!(tcn.blocks[1..].iter().all(|b| b.projection.is_none()));
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[9, 4], 1.0);
    assert_eq!(run_tcn(&store, &tcn, &x).len(), 9 * 6);
}

fn loss_oracle(logits: &[f64], labels: &[u8]) -> f64 {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            lse - logits[2 * i + usize::from(labels[i])]
        })
        .sum::<f64>()
        / n as f64
}

fn loss(logits: &[f64], labels: &[u8]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![labels.len(), 2], logits.to_vec()).unwrap();
    let y = au_loss(&mut tape, l, labels).unwrap();
    tape.value(y)[0]
}

proptest! {
    #[test]
    fn loss_matches_oracle_and_ignores_au_order(seed in any::<u64>(), frames in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = frames * AU_COUNT;
        let logits: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let l = loss(&logits, &labels);
        prop_assert!((l - loss_oracle(&logits, &labels)).abs() < 1e-12);

        let mut perm: Vec<usize> = (0..AU_COUNT).collect();
        for i in (1..AU_COUNT).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut pl = vec![0.0; 2 * n];
        let mut pt = vec![0; n];
        for t in 0..frames {
            for (j, &pj) in perm.iter().enumerate() {
                let (src, dst) = (t * AU_COUNT + j, t * AU_COUNT + pj);
                pl[2 * dst..2 * dst + 2].copy_from_slice(&logits[2 * src..2 * src + 2]);
                pt[dst] = labels[src];
            }
        }
        prop_assert!((loss(&pl, &pt) - l).abs() < 1e-12);
    }

    #[test]
    fn prediction_thresholds_the_active_probability(a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let p = active_probability(a, b);
        prop_assert!((p - 1.0 / (1.0 + (a - b).exp())).abs() < 1e-12);
        let pred = predict(&AuLogits::new(1, [a, b].repeat(AU_COUNT)).unwrap());
        prop_assert_eq!(pred.get(0, 3), p >= THRESHOLD);
    }
}

#[test]
fn labels_outside_binary_are_rejected() {
    assert!(AuLabelMatrix::new(1, vec![2; AU_COUNT]).is_err());
    assert!(AuLabelMatrix::new(2, vec![0; AU_COUNT]).is_err());
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![AU_COUNT, 2], vec![0.0; 2 * AU_COUNT]).unwrap();
    let mut bad = vec![0u8; AU_COUNT];
    bad[5] = 3;
    assert!(au_loss(&mut tape, l, &bad).is_err());
    assert!(au_loss(&mut tape, l, &[0; 5]).is_err());
}

fn head(dropout: f64) -> (ParamStore<f64>, MlpHead) {
    let mut store = ParamStore::new();
    let h = MlpHead::new(6, 32, dropout, &mut store, "head", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    (store, h)
}

fn run_head(store: &ParamStore<f64>, h: &MlpHead, x: &Tensor<f64>, mode: Mode) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x);
    let y = h.forward(&mut tape, &bound, xv, mode).unwrap();
    assert_eq!(tape.shape(y), &[x.shape()[0] * AU_COUNT, 2]);
    tape.value(y).to_vec()
}

#[test]
fn eval_is_deterministic_and_dropout_is_seeded() {
    let (store, h) = head(DROPOUT_RATE);
    let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[5, 6], 1.0);
    let e = run_head(&store, &h, &x, Mode::Eval);
    assert_eq!(e, run_head(&store, &h, &x, Mode::Eval));
    let a = run_head(&store, &h, &x, Mode::Train { seed: 1 });
    assert_eq!(a, run_head(&store, &h, &x, Mode::Train { seed: 1 }));
    assert_ne!(a, run_head(&store, &h, &x, Mode::Train { seed: 2 }));
    assert_ne!(a, e);

    let (store0, h0) = head(0.0);
    assert_eq!(
        run_head(&store0, &h0, &x, Mode::Train { seed: 9 }),
        run_head(&store0, &h0, &x, Mode::Eval)
    );
    assert!(MlpHead::new(
        6,
        4,
        1.0,
        &mut ParamStore::<f64>::new(),
        "h",
        &mut ChaCha8Rng::seed_from_u64(0)
    )
    .is_err());
}

#[test]
fn dropout_keeps_expected_scale() {
    // with a unit-output head, train-mode logits average to eval-mode logits
    let (mut store, h) = head(DROPOUT_RATE);
    let w = store.get_mut(h.output.weight);
    w.data_mut().fill(1.0);
    let x = Tensor::full(vec![1, 6], 0.5).unwrap();
    let e = run_head(&store, &h, &x, Mode::Eval)[0];
    let runs = 4000;
    let mean = (0..runs)
        .map(|s| run_head(&store, &h, &x, Mode::Train { seed: s })[0])
        .sum::<f64>()
        / runs as f64;
    assert!((mean - e).abs() < 0.02 * e.abs().max(1.0), "{mean} vs {e}");
}
