//! Random multi-scale feature sets and a runner for `fuse_multiscale`.

use avau_core::fusion::{fuse_multiscale, ScaleSet};
use avau_tensor::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct RandomScales {
    pub factors: Vec<usize>,
    pub t_len: usize,
    pub dim: usize,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn random_scales(rng: &mut ChaCha8Rng) -> RandomScales {
    let n = rng.random_range(1..=4);
    let mut factors: Vec<usize> = (0..n)
        .map(|i| if i == 0 { 1 } else { rng.random_range(2..=6) })
        .collect();
    factors.dedup();
    let t_len = rng.random_range(*factors.iter().max().unwrap()..=40);
    let dim = rng.random_range(1..=6);
    let mut mk = |f: usize| {
        (0..t_len.div_ceil(f) * dim)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect::<Vec<f64>>()
    };
    let audio: Vec<_> = factors.iter().map(|&f| mk(f)).collect();
    let visual: Vec<_> = factors.iter().map(|&f| mk(f)).collect();
    let alpha = factors.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
    let beta = factors.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
    RandomScales {
        factors,
        t_len,
        dim,
        audio,
        visual,
        alpha,
        beta,
    }
}

pub fn run_fusion(s: &RandomScales) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let mk = |tape: &mut Tape<f64>, data: &[f64], f: usize| {
        tape.constant(vec![s.t_len.div_ceil(f), s.dim], data.to_vec()).unwrap()
    };
    let audio = s
        .factors
        .iter()
        .zip(&s.audio)
        .map(|(&f, a)| mk(&mut tape, a, f))
        .collect();
    let visual = s
        .factors
        .iter()
        .zip(&s.visual)
        .map(|(&f, v)| mk(&mut tape, v, f))
        .collect();
    let set = ScaleSet {
        factors: s.factors.clone(),
        audio,
        visual,
        base_len: s.t_len,
    };
    let alpha: Vec<Var> = s
        .alpha
        .iter()
        .map(|&a| tape.constant(vec![1], vec![a]).unwrap())
        .collect();
    let beta: Vec<Var> = s
        .beta
        .iter()
        .map(|&b| tape.constant(vec![1], vec![b]).unwrap())
        .collect();
    let y = fuse_multiscale(&mut tape, &set, &alpha, &beta).unwrap();
    assert_eq!(tape.shape(y), &[s.t_len, s.dim]);
    tape.value(y).to_vec()
}
