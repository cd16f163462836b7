//! Finite-difference gradient cases for every learnable operation, each a
//! function of a seed so the suite can draw several random instances.

use avau_core::audio::LogMelSpectrogram;
use avau_core::audio::NUM_MELS;
use avau_core::fusion::{AlignedPair, FusionConfig, FusionModule, WindowedAttention};
use avau_core::layers::{LayerNorm, Linear};
use avau_core::model::{AuModel, ModelConfig};
use avau_core::temporal::{au_loss, MlpHead, Mode, Tcn, TcnConfig, AU_COUNT};
use avau_core::views::{audio_global_view, video_global_view, Modality, Projection};
use avau_core::visual::{EncoderConfig, FaceImage, VisualEncoder};
use avau_tensor::gradcheck::{check_gradients, check_param_gradients, GradCheck};
use avau_tensor::{Band, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::rand_tensor;

pub type Case = fn(u64) -> GradCheck;

pub const CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("linear", linear),
    ("causal conv", causal_conv),
    ("tcn", tcn),
    ("depthwise conv", depthwise),
    ("visual encoder", encoder),
    ("layer norm", layer_norm),
    ("causal attention", |s| attention(s, Band::Causal)),
    ("centered attention", |s| attention(s, Band::Centered)),
    ("fusion weights", fusion),
    ("mlp head (eval)", |s| head(s, Mode::Eval)),
    ("mlp head (train)", |s| head(s, Mode::Train { seed: s })),
    ("projection", projection),
    ("full model", full_model),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape, 1.0).with_grad()
}

/// Moves every parameter off its initial value so zero biases, unit gains
/// and equal fusion weights are not special points.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

/// Random projection to a scalar, so no output direction is privileged.
fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> avau_tensor::Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = (0..tape.value(y).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    tape.dot_const(y, w)
}

fn params(
    seed: u64,
    build: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> avau_core::Result<()>,
) -> (ParamStore<f64>, ChaCha8Rng) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    build(&mut store, &mut r).unwrap();
    jitter(&mut store, &mut r);
    (store, r)
}

fn matmul(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (a, b) = (input(&mut r, &[3, 4]), input(&mut r, &[4, 2]));
    check_gradients(&[a, b], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn linear(seed: u64) -> GradCheck {
    let mut lin = None;
    let (store, mut r) = params(seed, |s, r| {
        lin = Some(Linear::new(s, "l", 4, 3, r));
        Ok(())
    });
    let lin = lin.unwrap();
    let x = input(&mut r, &[5, 4]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = lin.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn causal_conv(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = input(&mut r, &[7, 2]);
    let w = input(&mut r, &[3, 2, 3]);
    let d = r.random_range(1..4);
    check_gradients(&[x, w], |tape, v| {
        let y = tape.conv1d_causal(v[0], v[1], d)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn tcn(seed: u64) -> GradCheck {
    let mut net = None;
    let (store, mut r) = params(seed, |s, r| {
        let cfg = TcnConfig {
            kernel: 2,
            dilations: vec![1, 2],
            channels: 3,
            residual: true,
        };
        net = Some(Tcn::new(cfg, 2, s, "tcn", r)?);
        Ok(())
    });
    let net = net.unwrap();
    let x = input(&mut r, &[6, 2]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = net.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn depthwise(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let x = input(&mut r, &[2, 4, 3, 2]);
    let w = input(&mut r, &[3, 3, 2]);
    check_gradients(&[x, w], |tape, v| {
        let y = tape.depthwise_conv2d(v[0], v[1])?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn encoder(seed: u64) -> GradCheck {
    let mut enc = None;
    let (store, mut r) = params(seed, |s, r| {
        let cfg = EncoderConfig {
            resolution: 8,
            widths: vec![2, 3],
            depths: vec![1, 1],
            kernel: 3,
            patch: 2,
        };
        enc = Some(VisualEncoder::new(cfg, s, "enc", r)?);
        Ok(())
    });
    let enc = enc.unwrap();
    let x = input(&mut r, &[1, 8, 8, 3]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = enc.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn layer_norm(seed: u64) -> GradCheck {
    let mut ln = None;
    let (store, mut r) = params(seed, |s, _| {
        ln = Some(LayerNorm::new(s, "ln", 5));
        Ok(())
    });
    let ln = ln.unwrap();
    let x = input(&mut r, &[4, 5]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = ln.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn attention(seed: u64, band: Band) -> GradCheck {
    let mut att = None;
    let (store, mut r) = params(seed, |s, r| {
        att = Some(WindowedAttention::new(s, "att", 4, 2, 3, band, r)?);
        Ok(())
    });
    let att = att.unwrap();
    let x = input(&mut r, &[6, 4]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = att.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn fusion(seed: u64) -> GradCheck {
    let mut module = None;
    let (store, mut r) = params(seed, |s, r| {
        let cfg = FusionConfig {
            dim: 3,
            factors: vec![1, 2],
            window: 2,
            heads: 1,
            band: Band::Causal,
        };
        module = Some(FusionModule::new(cfg, s, "fusion", r)?);
        Ok(())
    });
    let module = module.unwrap();
    let (a, b) = (input(&mut r, &[5, 3]), input(&mut r, &[5, 3]));
    check_param_gradients(&store, &[a, b], |tape, bound, v| {
        let pair = AlignedPair {
            audio: v[0],
            visual: v[1],
            frame_rate: 25.0,
            len: 5,
        };
        let y = module.forward(tape, bound, &pair).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn head(seed: u64, mode: Mode) -> GradCheck {
    let mut h = None;
    let (store, mut r) = params(seed, |s, r| {
        h = Some(MlpHead::new(3, 6, 0.3, s, "head", r)?);
        Ok(())
    });
    let h = h.unwrap();
    let x = input(&mut r, &[2, 3]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = h.forward(tape, bound, v[0], mode).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

fn projection(seed: u64) -> GradCheck {
    let mut p = None;
    let (store, mut r) = params(seed, |s, r| {
        p = Some(Projection::new(s, "p", Modality::Visual, 5, 3, r));
        Ok(())
    });
    let p = p.unwrap();
    let x = input(&mut r, &[4, 5]);
    check_param_gradients(&store, &[x], |tape, bound, v| {
        let y = p.forward(tape, bound, v[0]).map_err(to_tensor)?;
        reduce(tape, y, seed)
    })
    .unwrap()
}

/// Views through fusion, TCN, head and the loss of a tiny model.
fn full_model(seed: u64) -> GradCheck {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            resolution: 4,
            widths: vec![2],
            depths: vec![1],
            kernel: 3,
            patch: 2,
        },
        fusion: FusionConfig {
            dim: 2,
            factors: vec![1, 2],
            window: 2,
            heads: 1,
            band: Band::Causal,
        },
        tcn: TcnConfig {
            kernel: 2,
            dilations: vec![1],
            channels: 2,
            residual: true,
        },
        hidden: 3,
        ..ModelConfig::default()
    };
    let mut model = AuModel::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed);
    jitter(&mut model.params, &mut r);
    let frames = 3;
    let mel = LogMelSpectrogram::from_parts(
        4 * frames,
        NUM_MELS,
        (0..4 * frames * NUM_MELS).map(|_| r.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let audio = audio_global_view(&mel);
    let images: Vec<FaceImage> = (0..frames)
        .map(|_| FaceImage::new(4, (0..48).map(|_| r.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let video = video_global_view(&images, 25.0).unwrap();
    let labels: Vec<u8> = (0..frames * AU_COUNT).map(|_| r.random_range(0..2)).collect();
    check_param_gradients(&model.params, &[], |tape, bound, _| {
        let y = model
            .forward(tape, bound, &audio, &video, Mode::Train { seed })
            .map_err(to_tensor)?;
        au_loss(tape, y, &labels).map_err(to_tensor)
    })
    .unwrap()
}

fn to_tensor(e: avau_core::Error) -> avau_tensor::TensorError {
    match e {
        avau_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Worst relative error per operation over `instances` seeds.
pub fn gradient_suite(instances: u64) -> Vec<(&'static str, f64, usize)> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let (mut worst, mut checked) = (0.0f64, 0);
            for seed in 0..instances {
                let g = case(seed);
                worst = worst.max(g.max_rel_error);
                checked += g.checked;
            }
            (name, worst, checked)
        })
        .collect()
}
