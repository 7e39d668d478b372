//! Frequency-shared separator: two bidirectional LSTM layers followed by a
//! time-distributed linear layer.
//!
//! The same parameters process every frequency; a batch is simply a stack of
//! `(utterance, frequency)` sequences. Parameters live in one flat buffer so
//! optimizers and gradient checks can index every scalar.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar type the network can run in.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    fn sigmoid(self) -> Self;
    fn tanh_act(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Polynomial `exp` for f32 (Cephes coefficients), branch-free so loops vectorize.
#[inline(always)]
fn expf_poly(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0; // 1.5 * 2^23, rounds to nearest on add
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let p = ((((1.987_569_1e-4f32 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let e = p * r * r + r + 1.0;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits());
    e * f32::from_bits(k.wrapping_add(127) << 23)
}

impl Real for f32 {
    const BYTES: usize = 4;
    #[inline(always)]
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + expf_poly(-self))
    }
    #[inline(always)]
    fn tanh_act(self) -> Self {
        2.0 / (1.0 + expf_poly(-2.0 * self)) - 1.0
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn tanh_act(self) -> Self {
        self.tanh()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Layer widths of the separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    /// `2M`: real and imaginary part per microphone.
    pub n_inputs: usize,
    /// Hidden units per direction, first BiLSTM.
    pub hidden1: usize,
    /// Hidden units per direction, second BiLSTM.
    pub hidden2: usize,
    /// `2N`: real and imaginary part per speaker.
    pub n_outputs: usize,
}

impl ModelShape {
    /// 8 microphones, 2 speakers, 256/128 hidden units per direction.
    pub fn full(n_mics: usize, n_speakers: usize) -> Self {
        Self {
            n_inputs: 2 * n_mics,
            hidden1: 256,
            hidden2: 128,
            n_outputs: 2 * n_speakers,
        }
    }

    pub fn new(n_mics: usize, n_speakers: usize, hidden1: usize, hidden2: usize) -> Self {
        Self {
            n_inputs: 2 * n_mics,
            hidden1,
            hidden2,
            n_outputs: 2 * n_speakers,
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.n_outputs / 2
    }

    /// `(rows, cols)` of every tensor in storage order.
    ///
    /// Per layer and direction (forward first): input weights `4H x in`,
    /// recurrent weights `4H x H`, bias `4H x 1` with gates ordered
    /// input, forget, cell, output. Then the output layer `out x 2H2` and its bias.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(14);
        for (input, h) in [(self.n_inputs, self.hidden1), (2 * self.hidden1, self.hidden2)] {
            for _dir in 0..2 {
                v.push((4 * h, input));
                v.push((4 * h, h));
                v.push((4 * h, 1));
            }
        }
        v.push((self.n_outputs, 2 * self.hidden2));
        v.push((self.n_outputs, 1));
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.tensor_shapes()
            .iter()
            .map(|(r, c)| {
                let o = acc;
                acc += r * c;
                o
            })
            .collect()
    }
}

/// Tensor index of `(layer, direction)` LSTM weights: `w_ih`, `w_hh`, `b` follow.
fn lstm_index(layer: usize, dir: usize) -> usize {
    (layer * 2 + dir) * 3
}

const FC_W: usize = 12;
const FC_B: usize = 13;

/// Every trainable scalar of the separator in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub shape: ModelShape,
    pub data: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            data: vec![F::zero(); shape.n_params()],
            shape,
        }
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights per layer, forget-gate bias 1, other biases 0.
    /// The output layer uses its input width for `H`.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        let shapes = shape.tensor_shapes();
        let offsets = shape.offsets();
        for (k, (&(rows, cols), &off)) in shapes.iter().zip(&offsets).enumerate() {
            let is_bias = k % 3 == 2 && k < FC_W || k == FC_B;
            let h = if k < 6 {
                shape.hidden1
            } else if k < FC_W {
                shape.hidden2
            } else {
                2 * shape.hidden2
            };
            let slot = &mut p.data[off..off + rows * cols];
            if is_bias {
                if k < FC_W {
                    let hidden = rows / 4;
                    for v in &mut slot[hidden..2 * hidden] {
                        *v = F::one();
                    }
                }
            } else {
                let bound = 1.0 / (h as f64).sqrt();
                for v in slot.iter_mut() {
                    *v = cast(rng.random_range(-bound..bound));
                }
            }
        }
        p
    }

    pub fn tensor(&self, k: usize) -> ArrayView2<'_, F> {
        let (rows, cols) = self.shape.tensor_shapes()[k];
        let off = self.shape.offsets()[k];
        ArrayView2::from_shape((rows, cols), &self.data[off..off + rows * cols])
            .expect("tensor layout")
    }

    pub fn tensor_mut(&mut self, k: usize) -> ArrayViewMut2<'_, F> {
        let (rows, cols) = self.shape.tensor_shapes()[k];
        let off = self.shape.offsets()[k];
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[off..off + rows * cols])
            .expect("tensor layout")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            shape: self.shape,
            data: self.data.iter().map(|v| cast(v.to_f64().unwrap())).collect(),
        }
    }

    /// Serialized checkpoint (see [`checkpoint`] for the layout).
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self, None)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes).map(|(p, _)| p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = checkpoint::read_file(path.as_ref())?;
        Self::from_bytes(&bytes)
    }
}

/// Activations of one LSTM direction, time-major (`row = t * batch + item`).
#[derive(Debug, Clone)]
struct DirectionCache<F> {
    /// Post-activation gates `[i, f, g, o]`, `(T*B) x 4H`.
    gates: Array2<F>,
    /// Cell states, `(T*B) x H`.
    cell: Array2<F>,
    /// Hidden outputs, `(T*B) x H`.
    hidden: Array2<F>,
    reverse: bool,
}

/// Everything backpropagation needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    batch: usize,
    frames: usize,
    shape: ModelShape,
    /// Layer inputs, time-major: network input, then first BiLSTM output.
    layer_inputs: [Array2<F>; 2],
    /// Second BiLSTM output, `(T*B) x 2H2`.
    top: Array2<F>,
    dirs: [[DirectionCache<F>; 2]; 2],
}

impl<F> ForwardTrace<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
}

/// `[B][C][T]` -> `(T*B) x C`
fn to_time_major<F: Real>(x: ArrayView3<'_, F>) -> Array2<F> {
    let (b, c, t) = x.dim();
    let mut out = Array2::zeros((t * b, c));
    for item in 0..b {
        for ch in 0..c {
            for step in 0..t {
                out[[step * b + item, ch]] = x[[item, ch, step]];
            }
        }
    }
    out
}

/// `(T*B) x C` -> `[B][C][T]`
fn from_time_major<F: Real>(x: ArrayView2<'_, F>, b: usize, t: usize) -> Array3<F> {
    let c = x.ncols();
    let mut out = Array3::zeros((b, c, t));
    for step in 0..t {
        for item in 0..b {
            for ch in 0..c {
                out[[item, ch, step]] = x[[step * b + item, ch]];
            }
        }
    }
    out
}

fn step_rows(t: usize, b: usize) -> std::ops::Range<usize> {
    t * b..(t + 1) * b
}

fn lstm_forward<F: Real>(
    x: &Array2<F>,
    w_ih: ArrayView2<'_, F>,
    w_hh: ArrayView2<'_, F>,
    bias: ArrayView2<'_, F>,
    batch: usize,
    frames: usize,
    reverse: bool,
) -> DirectionCache<F> {
    let h = w_hh.ncols();
    let mut gates = x.dot(&w_ih.t());
    gates += &bias.t();
    let mut cell = Array2::zeros((frames * batch, h));
    let mut hidden = Array2::zeros((frames * batch, h));
    let order: Vec<usize> = if reverse {
        (0..frames).rev().collect()
    } else {
        (0..frames).collect()
    };
    let mut prev: Option<usize> = None;
    let mut c_new = Vec::with_capacity(h);
    for &t in &order {
        let rows = step_rows(t, batch);
        if let Some(p) = prev {
            let h_prev = hidden.slice(s![step_rows(p, batch), ..]).to_owned();
            let mut z = gates.slice_mut(s![rows.clone(), ..]);
            general_mat_mul(F::one(), &h_prev, &w_hh.t(), F::one(), &mut z);
        }
        let width = 4 * h;
        let gs = gates.as_slice_mut().expect("contiguous");
        let cs = cell.as_slice_mut().expect("contiguous");
        let hs = hidden.as_slice_mut().expect("contiguous");
        for row in gs[rows.start * width..rows.end * width].chunks_exact_mut(width) {
            let (ifg, o) = row.split_at_mut(3 * h);
            let (i_f, g) = ifg.split_at_mut(2 * h);
            for v in i_f.iter_mut() {
                *v = v.sigmoid();
            }
            for v in o.iter_mut() {
                *v = v.sigmoid();
            }
            for v in g.iter_mut() {
                *v = v.tanh_act();
            }
        }
        let z = &gs[rows.start * width..rows.end * width];
        for item in 0..batch {
            let r = t * batch + item;
            let zr = &z[item * width..(item + 1) * width];
            let (zi, rest) = zr.split_at(h);
            let (zf, rest) = rest.split_at(h);
            let (zg, zo) = rest.split_at(h);
            c_new.clear();
            match prev {
                Some(p) => {
                    let cp = &cs[(p * batch + item) * h..(p * batch + item + 1) * h];
                    c_new.extend((0..h).map(|j| zf[j] * cp[j] + zi[j] * zg[j]));
                }
                None => c_new.extend((0..h).map(|j| zi[j] * zg[j])),
            }
            cs[r * h..(r + 1) * h].copy_from_slice(&c_new);
            for ((hv, &c), &o) in hs[r * h..(r + 1) * h].iter_mut().zip(&c_new).zip(zo) {
                *hv = o * c.tanh_act();
            }
        }
        prev = Some(t);
    }
    DirectionCache {
        gates,
        cell,
        hidden,
        reverse,
    }
}

struct DirectionGrads<F> {
    w_ih: Array2<F>,
    w_hh: Array2<F>,
    bias: Array2<F>,
    input: Array2<F>,
}

fn lstm_backward<F: Real>(
    cache: &DirectionCache<F>,
    x: &Array2<F>,
    d_hidden: &Array2<F>,
    w_ih: ArrayView2<'_, F>,
    w_hh: ArrayView2<'_, F>,
    batch: usize,
    frames: usize,
) -> DirectionGrads<F> {
    let h = w_hh.ncols();
    let order: Vec<usize> = if cache.reverse {
        (0..frames).rev().collect()
    } else {
        (0..frames).collect()
    };
    let mut dz = Array2::<F>::zeros((frames * batch, 4 * h));
    let mut h_prev_all = Array2::<F>::zeros((frames * batch, h));
    let mut dh_next = Array2::<F>::zeros((batch, h));
    let mut dc_next = Array2::<F>::zeros((batch, h));
    let zero_row = vec![F::zero(); h];
    for (step, &t) in order.iter().enumerate().rev() {
        let prev = (step > 0).then(|| order[step - 1]);
        {
            let gs = cache.gates.as_slice().expect("contiguous");
            let cs = cache.cell.as_slice().expect("contiguous");
            let hs = cache.hidden.as_slice().expect("contiguous");
            let dhs = d_hidden.as_slice().expect("contiguous");
            let dzs = dz.as_slice_mut().expect("contiguous");
            let hp = h_prev_all.as_slice_mut().expect("contiguous");
            let dhn = dh_next.as_slice().expect("contiguous");
            let dcn = dc_next.as_slice_mut().expect("contiguous");
            let one = F::one();
            for item in 0..batch {
                let r = t * batch + item;
                let pr = prev.map(|p| (p * batch + item) * h);
                let z = &gs[r * 4 * h..(r + 1) * 4 * h];
                let (zi, rest) = z.split_at(h);
                let (zf, rest) = rest.split_at(h);
                let (zg, zo) = rest.split_at(h);
                let d = &mut dzs[r * 4 * h..(r + 1) * 4 * h];
                let (di, rest) = d.split_at_mut(h);
                let (df, rest) = rest.split_at_mut(h);
                let (dg, d_o) = rest.split_at_mut(h);
                let c = &cs[r * h..(r + 1) * h];
                let cp = pr.map_or(&zero_row[..], |p| &cs[p..p + h]);
                let dh_out = &dhs[r * h..(r + 1) * h];
                let dh_rec = &dhn[item * h..(item + 1) * h];
                let dc_rec = &mut dcn[item * h..(item + 1) * h];
                for j in 0..h {
                    let (i, f, g, o) = (zi[j], zf[j], zg[j], zo[j]);
                    let tc = c[j].tanh_act();
                    let dh = dh_out[j] + dh_rec[j];
                    let dc = dc_rec[j] + dh * o * (one - tc * tc);
                    di[j] = dc * g * i * (one - i);
                    df[j] = dc * cp[j] * f * (one - f);
                    dg[j] = dc * i * (one - g * g);
                    d_o[j] = dh * tc * o * (one - o);
                    dc_rec[j] = dc * f;
                }
                if let Some(p) = pr {
                    hp[r * h..(r + 1) * h].copy_from_slice(&hs[p..p + h]);
                }
            }
        }
        let dz_t = dz.slice(s![step_rows(t, batch), ..]);
        general_mat_mul(F::one(), &dz_t, &w_hh, F::zero(), &mut dh_next);
    }
    DirectionGrads {
        w_ih: dz.t().dot(x),
        w_hh: dz.t().dot(&h_prev_all),
        bias: dz.sum_axis(Axis(0)).insert_axis(Axis(1)),
        input: dz.dot(&w_ih),
    }
}

/// Runs the separator on `[B][2M][T]` inputs and returns `[B][2N][T]` outputs.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    input: ArrayView3<'_, F>,
) -> Result<(Array3<F>, ForwardTrace<F>)> {
    let shape = params.shape;
    let (batch, channels, frames) = input.dim();
    if channels != shape.n_inputs {
        return Err(Error::Shape(format!(
            "input has {channels} channels, model expects {}",
            shape.n_inputs
        )));
    }
    if frames == 0 || batch == 0 {
        return Err(Error::Shape("empty batch or sequence".into()));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input"));
    }
    let x0 = to_time_major(input);
    let run_layer = |x: &Array2<F>, layer: usize| {
        let caches: [DirectionCache<F>; 2] = [0, 1].map(|dir| {
            let k = lstm_index(layer, dir);
            lstm_forward(
                x,
                params.tensor(k),
                params.tensor(k + 1),
                params.tensor(k + 2),
                batch,
                frames,
                dir == 1,
            )
        });
        let h = caches[0].hidden.ncols();
        let mut out = Array2::zeros((frames * batch, 2 * h));
        out.slice_mut(s![.., ..h]).assign(&caches[0].hidden);
        out.slice_mut(s![.., h..]).assign(&caches[1].hidden);
        (out, caches)
    };
    let (x1, dirs0) = run_layer(&x0, 0);
    let (top, dirs1) = run_layer(&x1, 1);
    let mut y = top.dot(&params.tensor(FC_W).t());
    y += &params.tensor(FC_B).t();
    let out = from_time_major(y.view(), batch, frames);
    Ok((
        out,
        ForwardTrace {
            batch,
            frames,
            shape,
            layer_inputs: [x0, x1],
            top,
            dirs: [dirs0, dirs1],
        },
    ))
}

/// Gradients with respect to every parameter and to the network input, given
/// the gradient of a scalar loss with respect to the `[B][2N][T]` outputs.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    grad_outputs: ArrayView3<'_, F>,
) -> Result<(ModelParams<F>, Array3<F>)> {
    let shape = params.shape;
    if trace.shape != shape {
        return Err(Error::Shape("trace was produced by a different model shape".into()));
    }
    let (b, c, t) = grad_outputs.dim();
    if (b, c, t) != (trace.batch, shape.n_outputs, trace.frames) {
        return Err(Error::Shape(format!(
            "output gradient is {b}x{c}x{t}, trace expects {}x{}x{}",
            trace.batch, shape.n_outputs, trace.frames
        )));
    }
    let mut grads = ModelParams::zeros(shape);
    let dy = to_time_major(grad_outputs);
    grads.tensor_mut(FC_W).assign(&dy.t().dot(&trace.top));
    grads
        .tensor_mut(FC_B)
        .assign(&dy.sum_axis(Axis(0)).insert_axis(Axis(1)));
    let mut d_above = dy.dot(&params.tensor(FC_W));
    for layer in (0..2).rev() {
        let x = &trace.layer_inputs[layer];
        let mut d_input = Array2::<F>::zeros(x.raw_dim());
        for dir in 0..2 {
            let k = lstm_index(layer, dir);
            let cache = &trace.dirs[layer][dir];
            let h = cache.hidden.ncols();
            let d_hidden = d_above.slice(s![.., dir * h..(dir + 1) * h]).to_owned();
            let g = lstm_backward(
                cache,
                x,
                &d_hidden,
                params.tensor(k),
                params.tensor(k + 1),
                trace.batch,
                trace.frames,
            );
            grads.tensor_mut(k).assign(&g.w_ih);
            grads.tensor_mut(k + 1).assign(&g.w_hh);
            grads.tensor_mut(k + 2).assign(&g.bias);
            d_input += &g.input;
        }
        d_above = d_input;
    }
    let grad_input = from_time_major(d_above.view(), trace.batch, trace.frames);
    Ok((grads, grad_input))
}

/// Little-endian checkpoint layout:
///
/// ```text
/// magic    8 bytes  "NBSSCKPT"
/// version  u32      1
/// width    u32      bytes per scalar (4 or 8)
/// shape    4 x u32  n_inputs, hidden1, hidden2, n_outputs
/// ntensor  u32
/// table    ntensor x (rows u32, cols u32)
/// nparams  u64
/// params   nparams scalars
/// optim    u32 flag; when 1: step u64, epoch u64, lr f64, best f64,
///          since_improvement u64, then first and second moments (nparams scalars each)
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"NBSSCKPT";
    pub const VERSION: u32 = 1;

    /// Optimizer state stored after the parameters.
    #[derive(Debug, Clone, PartialEq)]
    pub struct OptimizerSection<F> {
        pub step: u64,
        pub epoch: u64,
        pub lr: f64,
        pub best_val: f64,
        pub since_improvement: u64,
        pub first_moment: Vec<F>,
        pub second_moment: Vec<F>,
    }

    pub fn encode<F: Real>(p: &ModelParams<F>, optim: Option<&OptimizerSection<F>>) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + p.data.len() * F::BYTES * 3);
        out.extend_from_slice(MAGIC);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, VERSION as usize);
        u32le(&mut out, F::BYTES);
        let s = p.shape;
        for v in [s.n_inputs, s.hidden1, s.hidden2, s.n_outputs] {
            u32le(&mut out, v);
        }
        let table = s.tensor_shapes();
        u32le(&mut out, table.len());
        for (r, c) in table {
            u32le(&mut out, r);
            u32le(&mut out, c);
        }
        out.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
        for &v in &p.data {
            v.write_le(&mut out);
        }
        match optim {
            None => u32le(&mut out, 0),
            Some(o) => {
                u32le(&mut out, 1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&o.epoch.to_le_bytes());
                out.extend_from_slice(&o.lr.to_le_bytes());
                out.extend_from_slice(&o.best_val.to_le_bytes());
                out.extend_from_slice(&o.since_improvement.to_le_bytes());
                for &v in o.first_moment.iter().chain(&o.second_moment) {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|&e| e <= self.bytes.len())
                .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn scalars<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
            let raw = self.take(n.checked_mul(F::BYTES).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            Ok(raw.chunks_exact(F::BYTES).map(F::read_le).collect())
        }
    }

    pub fn decode<F: Real>(bytes: &[u8]) -> Result<(ModelParams<F>, Option<OptimizerSection<F>>)> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = c.u32()?;
        if width != F::BYTES {
            return Err(Error::Checkpoint(format!(
                "stored with {width}-byte scalars, reading as {}-byte",
                F::BYTES
            )));
        }
        let shape = ModelShape {
            n_inputs: c.u32()?,
            hidden1: c.u32()?,
            hidden2: c.u32()?,
            n_outputs: c.u32()?,
        };
        let expected = shape.tensor_shapes();
        let n_tensors = c.u32()?;
        if n_tensors != expected.len() {
            return Err(Error::Checkpoint(format!("{n_tensors} tensors, expected {}", expected.len())));
        }
        for &(r, col) in &expected {
            let (rr, cc) = (c.u32()?, c.u32()?);
            if (rr, cc) != (r, col) {
                return Err(Error::Checkpoint(format!(
                    "tensor table entry {rr}x{cc} does not match {r}x{col}"
                )));
            }
        }
        let n = c.u64()? as usize;
        if n != shape.n_params() {
            return Err(Error::Checkpoint(format!("{n} parameters, expected {}", shape.n_params())));
        }
        let data = c.scalars::<F>(n)?;
        let params = ModelParams { shape, data };
        let optim = match c.u32()? {
            0 => None,
            1 => Some(OptimizerSection {
                step: c.u64()?,
                epoch: c.u64()?,
                lr: c.f64()?,
                best_val: c.f64()?,
                since_improvement: c.u64()?,
                first_moment: c.scalars(n)?,
                second_moment: c.scalars(n)?,
            }),
            other => return Err(Error::Checkpoint(format!("unknown optimizer flag {other}"))),
        };
        if c.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((params, optim))
    }

    pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelShape {
        ModelShape {
            n_inputs: 4,
            hidden1: 3,
            hidden2: 2,
            n_outputs: 4,
        }
    }

    fn random_input(b: usize, c: usize, t: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, c, t), |_| rng.random_range(-1.0..1.0))
    }

    fn randomize(p: &mut ModelParams<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.data {
            *v = rng.random_range(-0.8..0.8);
        }
    }

    /// Scalar, step-by-step LSTM written independently of the batched code.
    fn oracle_lstm(
        xs: &[Vec<f64>],
        w_ih: ArrayView2<'_, f64>,
        w_hh: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        let h = w_hh.ncols();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let t_n = xs.len();
        let mut out = vec![vec![0.0; h]; t_n];
        let mut hp = vec![0.0; h];
        let mut cp = vec![0.0; h];
        let idx: Vec<usize> = if reverse { (0..t_n).rev().collect() } else { (0..t_n).collect() };
        for t in idx {
            let mut z = vec![0.0; 4 * h];
            for (g, zg) in z.iter_mut().enumerate() {
                *zg = b[[g, 0]];
                for (k, xv) in xs[t].iter().enumerate() {
                    *zg += w_ih[[g, k]] * xv;
                }
                for (k, hv) in hp.iter().enumerate() {
                    *zg += w_hh[[g, k]] * hv;
                }
            }
            for j in 0..h {
                let c = sig(z[h + j]) * cp[j] + sig(z[j]) * z[2 * h + j].tanh();
                cp[j] = c;
                hp[j] = sig(z[3 * h + j]) * c.tanh();
            }
            out[t] = hp.clone();
        }
        out
    }

    fn oracle_forward(p: &ModelParams<f64>, x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
        let t_n = x.ncols();
        let mut seq: Vec<Vec<f64>> = (0..t_n).map(|t| x.column(t).to_vec()).collect();
        for layer in 0..2 {
            let outs: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|dir| {
                    let k = lstm_index(layer, dir);
                    oracle_lstm(&seq, p.tensor(k), p.tensor(k + 1), p.tensor(k + 2), dir == 1)
                })
                .collect();
            seq = (0..t_n).map(|t| [outs[0][t].clone(), outs[1][t].clone()].concat()).collect();
        }
        let w = p.tensor(FC_W);
        let b = p.tensor(FC_B);
        (0..w.nrows())
            .map(|o| {
                (0..t_n)
                    .map(|t| b[[o, 0]] + seq[t].iter().enumerate().map(|(k, v)| w[[o, k]] * v).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn f32_activations_track_libm() {
        let mut worst = 0.0f64;
        for k in -4000..=4000 {
            let x = k as f32 * 0.01;
            let s = 1.0 / (1.0 + (-(x as f64)).exp());
            worst = worst.max((x.sigmoid() as f64 - s).abs());
            worst = worst.max((x.tanh_act() as f64 - (x as f64).tanh()).abs());
        }
        assert!(worst < 1e-6, "{worst}");
        for x in [-1e4f32, -200.0, 200.0, 1e4] {
            assert!((0.0..=1.0).contains(&x.sigmoid()));
            assert!((-1.0..=1.0).contains(&x.tanh_act()));
        }
    }

    #[test]
    fn full_shape_matches_layer_widths() {
        let s = ModelShape::full(8, 2);
        let shapes = s.tensor_shapes();
        assert_eq!(shapes[0], (1024, 16));
        assert_eq!(shapes[1], (1024, 256));
        assert_eq!(shapes[6], (512, 512));
        assert_eq!(shapes[7], (512, 128));
        assert_eq!(shapes[FC_W], (4, 256));
        assert_eq!(shapes[FC_B], (4, 1));
    }

    #[test]
    fn init_is_deterministic_with_forget_bias() {
        let s = ModelShape::new(8, 2, 16, 8);
        let a = ModelParams::<f64>::init(s, 3);
        assert_eq!(a, ModelParams::<f64>::init(s, 3));
        assert_ne!(a, ModelParams::<f64>::init(s, 4));
        let b = a.tensor(2);
        assert!(b.slice(s![0..16, ..]).iter().all(|&v| v == 0.0));
        assert!(b.slice(s![16..32, ..]).iter().all(|&v| v == 1.0));
        assert!(b.slice(s![32.., ..]).iter().all(|&v| v == 0.0));
        assert!(a.tensor(FC_B).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weight_statistics() {
        let s = ModelShape::full(8, 2);
        let p = ModelParams::<f64>::init(s, 11);
        let w = p.tensor(1);
        let n = w.len() as f64;
        let bound = 1.0 / 16.0;
        let mean = w.sum() / n;
        let sigma = bound / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = ModelParams::<f64>::zeros(tiny());
        let (y, _) = forward(&p, random_input(3, 4, 5, 1).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_items_give_identical_rows() {
        let p = ModelParams::<f64>::init(tiny(), 1);
        let x = random_input(1, 4, 6, 2);
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let (y, _) = forward(&p, xx.view()).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), y.index_axis(Axis(0), 1));
    }

    #[test]
    fn batch_equals_itemwise() {
        let mut p = ModelParams::<f64>::zeros(tiny());
        randomize(&mut p, 5);
        let x = random_input(4, 4, 7, 3);
        let (y, _) = forward(&p, x.view()).unwrap();
        for b in 0..4 {
            let single = x.slice(s![b..b + 1, .., ..]);
            let (yb, _) = forward(&p, single).unwrap();
            let diff = (&y.slice(s![b..b + 1, .., ..]) - &yb).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        let mut p = ModelParams::<f64>::zeros(tiny());
        randomize(&mut p, 9);
        let x = random_input(2, 4, 4, 4);
        let (y, _) = forward(&p, x.view()).unwrap();
        for b in 0..2 {
            let expect = oracle_forward(&p, x.index_axis(Axis(0), b));
            for (o, row) in expect.iter().enumerate() {
                for (t, v) in row.iter().enumerate() {
                    assert!((y[[b, o, t]] - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn nan_input_rejected() {
        let p = ModelParams::<f64>::zeros(tiny());
        let mut x = random_input(1, 4, 3, 1);
        x[[0, 1, 1]] = f64::NAN;
        assert!(matches!(forward(&p, x.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let p = ModelParams::<f64>::init(tiny(), 2);
        let x = random_input(2, 4, 5, 6);
        let (y, trace) = forward(&p, x.view()).unwrap();
        let (g, gi) = backward(&p, &trace, Array3::zeros(y.raw_dim()).view()).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(gi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_trace_rejected() {
        let p = ModelParams::<f64>::init(tiny(), 2);
        let (_, trace) = forward(&p, random_input(2, 4, 5, 6).view()).unwrap();
        assert!(backward(&p, &trace, Array3::zeros((2, 4, 6)).view()).is_err());
        let other = ModelParams::<f64>::init(ModelShape { hidden1: 4, ..tiny() }, 2);
        assert!(backward(&other, &trace, Array3::zeros((2, 4, 5)).view()).is_err());
    }

    /// Loss = <probe, output>, so d loss / d output = probe.
    fn probe_loss(p: &ModelParams<f64>, x: &Array3<f64>, probe: &Array3<f64>) -> f64 {
        let (y, _) = forward(p, x.view()).unwrap();
        (&y * probe).sum()
    }

    #[test]
    fn parameter_gradient_matches_central_differences() {
        let mut p = ModelParams::<f64>::zeros(tiny());
        randomize(&mut p, 21);
        let x = random_input(2, 4, 5, 22);
        let probe = random_input(2, 4, 5, 23);
        let (_, trace) = forward(&p, x.view()).unwrap();
        let (g, _) = backward(&p, &trace, probe.view()).unwrap();
        let h = 1e-5;
        for k in 0..p.data.len() {
            let mut plus = p.clone();
            plus.data[k] += h;
            let mut minus = p.clone();
            minus.data[k] -= h;
            let fd = (probe_loss(&plus, &x, &probe) - probe_loss(&minus, &x, &probe)) / (2.0 * h);
            let denom = fd.abs().max(g.data[k].abs()).max(1e-6);
            assert!((fd - g.data[k]).abs() / denom < 1e-4, "param {k}: fd {fd} analytic {}", g.data[k]);
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut p = ModelParams::<f64>::zeros(tiny());
        randomize(&mut p, 31);
        let x = random_input(2, 4, 4, 32);
        let probe = random_input(2, 4, 4, 33);
        let (_, trace) = forward(&p, x.view()).unwrap();
        let (_, gi) = backward(&p, &trace, probe.view()).unwrap();
        let h = 1e-5;
        for idx in ndarray::indices(x.raw_dim()) {
            let mut plus = x.clone();
            plus[idx] += h;
            let mut minus = x.clone();
            minus[idx] -= h;
            let fd = (probe_loss(&p, &plus, &probe) - probe_loss(&p, &minus, &probe)) / (2.0 * h);
            let denom = fd.abs().max(gi[idx].abs()).max(1e-6);
            assert!((fd - gi[idx]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::<f32>::init(ModelShape::new(8, 2, 8, 4), 7);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], checkpoint::MAGIC);
        let back = ModelParams::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelParams::<f64>::from_bytes(&bytes).is_err());
        assert!(ModelParams::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn output_shape_for_any_length() {
        let p = ModelParams::<f32>::init(ModelShape::new(2, 2, 3, 2), 1);
        for t in [1usize, 2, 9] {
            let x = Array3::<f32>::zeros((3, 4, t));
            let (y, _) = forward(&p, x.view()).unwrap();
            assert_eq!(y.dim(), (3, 4, t));
        }
    }
}
