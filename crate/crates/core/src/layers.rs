//! Small parameter bundles shared by the pipeline stages.

use avau_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init;

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` over the trailing dimension of a 2-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_gain(store, name, inputs, outputs, init::LINEAR_GAIN, rng)
    }

    /// For maps feeding a ReLU or GELU.
    pub fn rectified<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_gain(store, name, inputs, outputs, init::RELU_GAIN, rng)
    }

    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, &[inputs, outputs], inputs, gain),
        );
        let bias = store.add(format!("{name}.bias"), init::zeros(&[outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        Ok(tape.add_row(y, bound[self.bias])?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), init::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), init::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, bound[self.gamma], bound[self.beta], LN_EPS)?)
    }
}

/// Flattens all leading dimensions: `[..., C] -> [N, C]`.
pub fn as_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let c = *s.last().expect("non-empty shape");
    let n = tape.value(x).len() / c;
    if s.len() == 2 {
        return Ok(x);
    }
    Ok(tape.reshape(x, vec![n, c])?)
}
