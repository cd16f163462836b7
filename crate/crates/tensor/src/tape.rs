//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. Nodes are only ever appended, so the tape is topologically ordered
//! and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::scalar::{lit, Scalar};
use crate::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which positions a query may attend to in [`Tape::band_softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    /// `[i - window + 1, i]`
    Causal,
    /// `[i - (window - 1) / 2, i + window / 2]`
    Centered,
}

impl Band {
    /// Inclusive column range allowed for row `i` of an `n`-wide score matrix.
    pub fn range(self, i: usize, window: usize, n: usize) -> (usize, usize) {
        match self {
            Band::Causal => ((i + 1).saturating_sub(window), i),
            Band::Centered => (i.saturating_sub((window - 1) / 2), (i + window / 2).min(n - 1)),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    MulConst {
        x: Var,
        mask: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
        th: Vec<T>,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    SliceRows {
        x: Var,
        offset: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        in_cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        t: usize,
        cin: usize,
        cout: usize,
        k: usize,
        dilation: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        dims: [usize; 4],
        k: usize,
    },
    Patchify {
        x: Var,
        dims: [usize; 4],
        p: usize,
    },
    PoolRows {
        x: Var,
        factor: usize,
        rows: usize,
    },
    RepeatRows {
        x: Var,
        factor: usize,
        rows: usize,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t`; trainable when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let c = *s.last().expect("non-empty shape");
        (self.value(v).len() / c, c)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[M×K] · [K×N] -> [M×N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    /// Adds a `[C]` bias to every row of a `[..., C]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return Err(TensorError::mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, rg))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::mismatch("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { x, s }, rg))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::mismatch("mul_const", self.shape(x), &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, mask }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu { x }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
        let two = lit::<T>(2.0);
        // tanh via exp: markedly cheaper than the libm tanh on this hot path
        let th: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| T::one() - two / ((two * c * (v + a * v * v * v)).exp() + T::one()))
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&th)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu { x, th }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = check_shape("reshape", &shape)?;
        if n != self.value(x).len() {
            return Err(TensorError::mismatch("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape { x }, rg))
    }

    /// Rows `start..start + len` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("rows {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let width = self.value(x).len() / s[0];
        let out = self.value(x)[start * width..(start + len) * width].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::SliceRows {
                x,
                offset: start * width,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("cols {start}..{} out of range for {s:?}", start + len),
            ));
        }
        let (rows, in_cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * in_cols + start..r * in_cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start, in_cols }, rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_cols", "no inputs"))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::mismatch("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts }, rg))
    }

    /// Softmax over the trailing dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x }, rg))
    }

    /// Row softmax of a square `[N×N]` score matrix restricted to a sliding
    /// band; entries outside the band are exactly zero.
    pub fn band_softmax(&mut self, x: Var, window: usize, band: Band) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::invalid(
                "band_softmax",
                format!("expected square, got {s:?}"),
            ));
        }
        if window == 0 {
            return Err(TensorError::invalid("band_softmax", "window must be positive"));
        }
        let n = s[0];
        let v = self.value(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let (lo, hi) = band.range(i, window, n);
            let dst = &mut out[i * n + lo..=i * n + hi];
            dst.copy_from_slice(&v[i * n + lo..=i * n + hi]);
            softmax_in_place(dst);
        }
        let rg = self.rg(x);
        // Same backward rule as softmax: zero outputs carry zero gradient.
        Ok(self.push(vec![n, n], out, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, c) = self.rows_cols(x);
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(TensorError::mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (g, b, v) = (self.value(gamma), self.value(beta), self.value(x));
        let inv_c = T::one() / lit::<T>(c as f64);
        let eps = lit::<T>(eps);
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &v[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Causal dilated convolution: `x [T×Cin]`, `w [k×Cin×Cout]`.
    ///
    /// Tap `j` reads `x[t - j·dilation]`; taps before the start read zero.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if dilation == 0 {
            return Err(TensorError::invalid("conv1d_causal", "dilation must be positive"));
        }
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(TensorError::mismatch("conv1d_causal", sx, sw));
        }
        let (t, cin, k, cout) = (sx[0], sx[1], sw[0], sw[2]);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); t * cout];
        for j in 0..k {
            let shift = j * dilation;
            if shift >= t {
                break;
            }
            let rows = t - shift;
            T::gemm(
                rows,
                cin,
                cout,
                &xv[..rows * cin],
                false,
                &wv[j * cin * cout..(j + 1) * cin * cout],
                false,
                &mut out[shift * cout..],
                T::one(),
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            vec![t, cout],
            out,
            Op::Conv1d {
                x,
                w,
                t,
                cin,
                cout,
                k,
                dilation,
            },
            rg,
        ))
    }

    /// Per-channel `k×k` convolution with zero "same" padding.
    ///
    /// `x` is `[H×W×C]` or `[B×H×W×C]`; `w` is `[k×k×C]` with odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let dims = image_dims("depthwise_conv2d", self.shape(x))?;
        let sw = self.shape(w);
        let [nb, h, wd, c] = dims;
        if sw.len() != 3 || sw[0] != sw[1] || sw[2] != c {
            return Err(TensorError::mismatch("depthwise_conv2d", self.shape(x), sw));
        }
        let k = sw[0];
        if k.is_multiple_of(2) {
            return Err(TensorError::invalid(
                "depthwise_conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        let pad = k / 2;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); nb * h * wd * c];
        for b in 0..nb {
            for y in 0..h {
                for xx in 0..wd {
                    let o = ((b * h + y) * wd + xx) * c;
                    let dst = &mut out[o..o + c];
                    for ky in 0..k {
                        let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < wd) else {
                                continue;
                            };
                            let src = &xv[((b * h + iy) * wd + ix) * c..][..c];
                            let ker = &wv[(ky * k + kx) * c..][..c];
                            for ch in 0..c {
                                dst[ch] += src[ch] * ker[ch];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Depthwise { x, w, dims, k }, rg))
    }

    /// Rearranges `[B×H×W×C]` (or `[H×W×C]`) into non-overlapping `p×p`
    /// patches: `[B·(H/p)·(W/p) × p·p·C]`, patch-major, inner order `(dy, dx, c)`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let dims = image_dims("patchify", self.shape(x))?;
        let [nb, h, w, c] = dims;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::invalid(
                "patchify",
                format!("spatial size {h}×{w} not divisible by patch {p}"),
            ));
        }
        let (ph, pw) = (h / p, w / p);
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len());
        for b in 0..nb {
            for py in 0..ph {
                for px in 0..pw {
                    for dy in 0..p {
                        let row = ((b * h + py * p + dy) * w + px * p) * c;
                        out.extend_from_slice(&v[row..row + p * c]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![nb * ph * pw, p * p * c], out, Op::Patchify { x, dims, p }, rg))
    }

    /// Non-overlapping mean over groups of `factor` leading rows; a trailing
    /// partial group is averaged over the rows it has.
    pub fn pool_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(TensorError::invalid("pool_rows", "factor must be positive"));
        }
        let (rows, c) = self.rows_cols(x);
        let groups = rows.div_ceil(factor);
        let v = self.value(x);
        let mut out = vec![T::zero(); groups * c];
        for g in 0..groups {
            let (lo, hi) = (g * factor, ((g + 1) * factor).min(rows));
            let inv = T::one() / lit::<T>((hi - lo) as f64);
            let dst = &mut out[g * c..(g + 1) * c];
            for r in lo..hi {
                dst.iter_mut().zip(&v[r * c..(r + 1) * c]).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![groups, c], out, Op::PoolRows { x, factor, rows }, rg))
    }

    /// Nearest-neighbour upsampling along rows: output row `t` copies input
    /// row `t / factor`.
    pub fn repeat_rows(&mut self, x: Var, factor: usize, rows: usize) -> Result<Var> {
        let (in_rows, c) = self.rows_cols(x);
        if factor == 0 || rows == 0 || rows.div_ceil(factor) > in_rows {
            return Err(TensorError::invalid(
                "repeat_rows",
                format!("cannot expand {in_rows} rows by {factor} to {rows}"),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * c);
        for t in 0..rows {
            let s = t / factor;
            out.extend_from_slice(&v[s * c..(s + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, c], out, Op::RepeatRows { x, factor, rows }, rg))
    }

    /// Mean softmax cross-entropy of `logits [N×K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.rows_cols(logits);
        if targets.len() != n {
            return Err(TensorError::mismatch(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= lit::<T>(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / lit::<T>(n as f64))
    }

    /// `Σ x ⊙ w` for a constant weight vector; a scalar probe.
    pub fn dot_const(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(TensorError::mismatch("dot_const", self.shape(x), &[w.len()]));
        }
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Dot { x, w }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            numel: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.buf(grads, *a) {
                    T::gemm(m, n, k, g, false, self.value(*b), true, ga, T::one());
                }
                if let Some(gb) = self.buf(grads, *b) {
                    T::gemm(k, m, n, self.value(*a), true, g, false, gb, T::one());
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.buf(grads, v) {
                        axpy(gv, g, T::one());
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.buf(grads, *a) {
                    axpy(ga, g, T::one());
                }
                if let Some(gb) = self.buf(grads, *b) {
                    axpy(gb, g, -T::one());
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, &gi), &bv) in ga.iter_mut().zip(g).zip(self.value(*b)) {
                        *d += gi * bv;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((d, &gi), &av) in gb.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += gi * av;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, T::one());
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s)[0];
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, c);
                }
                if let Some(gs) = self.buf(grads, *s) {
                    gs[0] += g.iter().zip(self.value(*x)).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
            Op::MulConst { x, mask } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((d, &gi), &xv) in gx.iter_mut().zip(g).zip(self.value(*x)) {
                        if xv > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gelu { x, th } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
                    let three = lit::<T>(3.0);
                    for (((d, &gi), &v), &t) in gx.iter_mut().zip(g).zip(self.value(*x)).zip(th) {
                        let dth = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *d += gi * (half * (T::one() + t) + half * v * dth);
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gx[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, g, T::one());
                }
            }
            Op::SliceRows { x, offset } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(&mut gx[*offset..*offset + g.len()], g, T::one());
                }
            }
            Op::SliceCols { x, start, in_cols } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let len = node.shape[1];
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        axpy(&mut gx[r * in_cols + start..][..len], row, T::one());
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let mut off = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.buf(grads, p) {
                        for (r, dst) in gp.chunks_exact_mut(w).enumerate() {
                            axpy(dst, &g[r * total + off..][..w], T::one());
                        }
                    }
                    off += w;
                }
            }
            Op::Softmax { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let k = *node.shape.last().expect("non-empty");
                    for ((dst, yr), gr) in gx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(g.chunks_exact(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &gi), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * h;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for gr in g.chunks_exact(c) {
                        axpy(gb, gr, T::one());
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let gamma = self.value(*gamma);
                    let cf = lit::<T>(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, dst) in gx.chunks_exact_mut(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..c {
                            dxhat[j] = gr[j] * gamma[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let scale = inv_std[r] / cf;
                        for j in 0..c {
                            dst[j] += scale * (cf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                t,
                cin,
                cout,
                k,
                dilation,
            } => {
                let (t, cin, cout) = (*t, *cin, *cout);
                let taps = (0..*k).map(|j| j * dilation).take_while(|&s| s < t);
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let gx = self.buf(grads, *x).expect("requires grad");
                    for (j, shift) in taps.clone().enumerate() {
                        let rows = t - shift;
                        T::gemm(
                            rows,
                            cout,
                            cin,
                            &g[shift * cout..],
                            false,
                            &wv[j * cin * cout..(j + 1) * cin * cout],
                            true,
                            &mut gx[..rows * cin],
                            T::one(),
                        );
                    }
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let gw = self.buf(grads, *w).expect("requires grad");
                    for (j, shift) in taps.enumerate() {
                        let rows = t - shift;
                        T::gemm(
                            cin,
                            rows,
                            cout,
                            &xv[..rows * cin],
                            true,
                            &g[shift * cout..],
                            false,
                            &mut gw[j * cin * cout..(j + 1) * cin * cout],
                            T::one(),
                        );
                    }
                }
            }
            Op::Depthwise { x, w, dims, k } => {
                let [nb, h, wd, c] = *dims;
                let (k, pad) = (*k, *k / 2);
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gx = if self.rg(*x) {
                    Some(vec![T::zero(); xv.len()])
                } else {
                    None
                };
                let mut gw = if self.rg(*w) {
                    Some(vec![T::zero(); wv.len()])
                } else {
                    None
                };
                for b in 0..nb {
                    for yy in 0..h {
                        for xx in 0..wd {
                            let go = &g[((b * h + yy) * wd + xx) * c..][..c];
                            for ky in 0..k {
                                let Some(iy) = (yy + ky).checked_sub(pad).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..k {
                                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < wd) else {
                                        continue;
                                    };
                                    let src = ((b * h + iy) * wd + ix) * c;
                                    let ker = (ky * k + kx) * c;
                                    if let Some(gx) = gx.as_mut() {
                                        let dst = &mut gx[src..src + c];
                                        let kr = &wv[ker..ker + c];
                                        for ch in 0..c {
                                            dst[ch] += go[ch] * kr[ch];
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let dst = &mut gw[ker..ker + c];
                                        let xr = &xv[src..src + c];
                                        for ch in 0..c {
                                            dst[ch] += go[ch] * xr[ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(d) = gx {
                    axpy(self.buf(grads, *x).expect("requires grad"), &d, T::one());
                }
                if let Some(d) = gw {
                    axpy(self.buf(grads, *w).expect("requires grad"), &d, T::one());
                }
            }
            Op::Patchify { x, dims, p } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let [nb, h, w, c] = *dims;
                    let p = *p;
                    let mut src = 0;
                    for b in 0..nb {
                        for py in 0..h / p {
                            for px in 0..w / p {
                                for dy in 0..p {
                                    let row = ((b * h + py * p + dy) * w + px * p) * c;
                                    axpy(&mut gx[row..row + p * c], &g[src..src + p * c], T::one());
                                    src += p * c;
                                }
                            }
                        }
                    }
                }
            }
            Op::PoolRows { x, factor, rows } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let c = *node.shape.last().expect("non-empty");
                    for (gi, gr) in g.chunks_exact(c).enumerate() {
                        let (lo, hi) = (gi * factor, ((gi + 1) * factor).min(*rows));
                        let inv = T::one() / lit::<T>((hi - lo) as f64);
                        for r in lo..hi {
                            axpy(&mut gx[r * c..(r + 1) * c], gr, inv);
                        }
                    }
                }
            }
            Op::RepeatRows { x, factor, rows } => {
                if let Some(gx) = self.buf(grads, *x) {
                    let c = *node.shape.last().expect("non-empty");
                    for t in 0..*rows {
                        let s = t / factor;
                        axpy(&mut gx[s * c..(s + 1) * c], &g[t * c..(t + 1) * c], T::one());
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, targets } => {
                if let Some(gl) = self.buf(grads, *logits) {
                    let n = targets.len();
                    let k = probs.len() / n;
                    let scale = g[0] / lit::<T>(n as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let dst = &mut gl[r * k..(r + 1) * k];
                        axpy(dst, &probs[r * k..(r + 1) * k], scale);
                        dst[t] -= scale;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dot { x, w } => {
                if let Some(gx) = self.buf(grads, *x) {
                    axpy(gx, w, g[0]);
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` for constants.
    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn image_dims(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [h, w, c] => Ok([1, h, w, c]),
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(TensorError::invalid(
            op,
            format!("expected [H,W,C] or [B,H,W,C], got {s:?}"),
        )),
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    numel: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is unreachable from the loss or not trainable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.numel[v.0]])
    }

    /// Stores the gradient of `v` on `t.grad`, zero-filled when unreachable.
    pub fn write_into(&self, v: Var, t: &mut Tensor<T>) {
        debug_assert_eq!(t.numel(), self.numel[v.0]);
        t.grad = Some(self.wrt(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn dead_branch_gets_exact_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(&t(&[2], &[5.0, 6.0]));
        let _ = tape.scale(unused, 3.0).unwrap();
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), vec![0.0, 0.0]);
        assert_eq!(g.wrt(x), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_reports_shapes_on_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn band_ranges() {
        assert_eq!(Band::Causal.range(0, 3, 10), (0, 0));
        assert_eq!(Band::Causal.range(5, 3, 10), (3, 5));
        assert_eq!(Band::Centered.range(5, 3, 10), (4, 6));
        assert_eq!(Band::Centered.range(9, 4, 10), (8, 9));
    }

    #[test]
    fn repeated_use_accumulates() {
        // f = sum(x + x + x) -> df/dx = 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x), vec![3.0; 3]);
    }
}
