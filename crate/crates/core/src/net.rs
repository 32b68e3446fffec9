//! Small anatomy-conditioned noise-prediction network with hand-written
//! backpropagation.
//!
//! A two-level encoder-decoder on the noisy model-space image: stem conv,
//! residual block, strided downsample (128 -> 64 -> 32 for the default
//! grid), two bottleneck residual blocks around a single-head cross-attention
//! block whose queries come from the image branch and keys/values from a
//! small condition encoder on the anatomy image, then the mirrored decoder
//! with additive skips. The timestep enters through a sinusoidal embedding
//! and a per-resblock channel bias. The `Concat` variant instead feeds the
//! condition as a second input channel and skips the attention and condition
//! branch entirely.
//!
//! The implementation is generic over `f32`/`f64`: training runs in single
//! precision (parameters serialise as f32 bit-exactly) while tests
//! instantiate the identical code in double precision to compare analytic
//! parameter gradients against central finite differences.
//!
//! Parameter layout (one flat vector, offsets in this order; weights before
//! biases within each layer):
//! temb_lin1, temb_lin2, stem, enc1{conv1,tproj,conv2}, down1,
//! enc2{..}, down2, mid1{..}, [wq, wk, wv, wo], mid2{..}, up1, dec1{..},
//! up2, dec2{..}, head, [cond0, cond1, cond2].
//! Bracketed segments exist only in cross-attention mode.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::SplitMix64;
use num_traits::{Float, FromPrimitive};

/// Scalar type the network computes in.
pub trait Scalar:
    Float
    + FromPrimitive
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::iter::Sum
    + core::fmt::Debug
    + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant conversion")
}

/// How the anatomy image conditions the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    /// Bottleneck cross-attention over a separate condition encoder.
    CrossAttention,
    /// Condition concatenated as a second input channel.
    Concat,
}

impl CondMode {
    pub fn tag(&self) -> u32 {
        match self {
            CondMode::CrossAttention => 0,
            CondMode::Concat => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self, Error> {
        match tag {
            0 => Ok(CondMode::CrossAttention),
            1 => Ok(CondMode::Concat),
            other => Err(Error::Config(format!("unknown conditioning tag {other}"))),
        }
    }
}

/// Fixed architecture summary. Channel widths are `base`, `2*base`,
/// `4*base` at the three resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub cond_mode: CondMode,
    pub base_channels: usize,
}

pub const SIN_DIM: usize = 32;
pub const TEMB_DIM: usize = 64;

impl ArchDescriptor {
    pub fn channels(&self) -> (usize, usize, usize) {
        (self.base_channels, 2 * self.base_channels, 4 * self.base_channels)
    }

    pub fn param_count(&self) -> usize {
        Layout::build(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Res {
    conv1: Conv,
    tproj: Lin,
    conv2: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: Lin,
    wk: Lin,
    wv: Lin,
    wo: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    temb1: Lin,
    temb2: Lin,
    stem: Conv,
    enc1: Res,
    down1: Conv,
    enc2: Res,
    down2: Conv,
    mid1: Res,
    attn: Option<Attn>,
    mid2: Res,
    up1: Conv,
    dec1: Res,
    up2: Conv,
    dec2: Res,
    head: Conv,
    cond: Option<[Conv; 3]>,
    total: usize,
}

struct Alloc {
    next: usize,
}

impl Alloc {
    fn conv(&mut self, c_in: usize, c_out: usize, stride: usize) -> Conv {
        let w = self.next;
        self.next += c_in * c_out * 9;
        let b = self.next;
        self.next += c_out;
        Conv { w, b, c_in, c_out, stride }
    }

    fn lin(&mut self, n_in: usize, n_out: usize) -> Lin {
        let w = self.next;
        self.next += n_in * n_out;
        let b = self.next;
        self.next += n_out;
        Lin { w, b, n_in, n_out }
    }

    fn res(&mut self, ch: usize) -> Res {
        Res {
            conv1: self.conv(ch, ch, 1),
            tproj: self.lin(TEMB_DIM, ch),
            conv2: self.conv(ch, ch, 1),
        }
    }
}

impl Layout {
    fn build(arch: &ArchDescriptor) -> Self {
        let (c0, c1, c2) = arch.channels();
        let in_ch = match arch.cond_mode {
            CondMode::CrossAttention => 1,
            CondMode::Concat => 2,
        };
        let mut a = Alloc { next: 0 };
        let temb1 = a.lin(SIN_DIM, TEMB_DIM);
        let temb2 = a.lin(TEMB_DIM, TEMB_DIM);
        let stem = a.conv(in_ch, c0, 1);
        let enc1 = a.res(c0);
        let down1 = a.conv(c0, c1, 2);
        let enc2 = a.res(c1);
        let down2 = a.conv(c1, c2, 2);
        let mid1 = a.res(c2);
        let attn = match arch.cond_mode {
            CondMode::CrossAttention => Some(Attn {
                wq: a.lin(c2, c2),
                wk: a.lin(c2, c2),
                wv: a.lin(c2, c2),
                wo: a.lin(c2, c2),
            }),
            CondMode::Concat => None,
        };
        let mid2 = a.res(c2);
        let up1 = a.conv(c2, c1, 1);
        let dec1 = a.res(c1);
        let up2 = a.conv(c1, c0, 1);
        let dec2 = a.res(c0);
        let head = a.conv(c0, 1, 1);
        let cond = match arch.cond_mode {
            CondMode::CrossAttention => {
                Some([a.conv(1, c0, 1), a.conv(c0, c1, 2), a.conv(c1, c2, 2)])
            }
            CondMode::Concat => None,
        };
        Layout {
            temb1,
            temb2,
            stem,
            enc1,
            down1,
            enc2,
            down2,
            mid1,
            attn,
            mid2,
            up1,
            dec1,
            up2,
            dec2,
            head,
            cond,
            total: a.next,
        }
    }
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// 3x3 convolution, padding 1. `stride` 1 or 2; output side is
/// `n_in / stride`.
fn conv_fwd<T: Scalar>(
    inp: &[T],
    out: &mut [T],
    params: &[T],
    cv: &Conv,
    n_in: usize,
) {
    let n_out = n_in / cv.stride;
    let w = &params[cv.w..cv.w + cv.c_in * cv.c_out * 9];
    let b = &params[cv.b..cv.b + cv.c_out];
    if cv.stride == 1 {
        for co in 0..cv.c_out {
            let out_c = &mut out[co * n_in * n_in..(co + 1) * n_in * n_in];
            out_c.fill(b[co]);
            for ci in 0..cv.c_in {
                let in_c = &inp[ci * n_in * n_in..(ci + 1) * n_in * n_in];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = w[((co * cv.c_in + ci) * 3 + ky) * 3 + kx];
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (n_in + 1 - ky).min(n_in);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (n_in + 1 - kx).min(n_in);
                        for y in y_lo..y_hi {
                            let src = &in_c[(y + ky - 1) * n_in..];
                            let dst = &mut out_c[y * n_in..];
                            for x in x_lo..x_hi {
                                dst[x] += wv * src[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..cv.c_out {
            for oy in 0..n_out {
                for ox in 0..n_out {
                    let mut acc = b[co];
                    for ci in 0..cv.c_in {
                        let in_c = &inp[ci * n_in * n_in..];
                        for ky in 0..3usize {
                            let iy = (oy * cv.stride + ky) as isize - 1;
                            if iy < 0 || iy >= n_in as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (ox * cv.stride + kx) as isize - 1;
                                if ix < 0 || ix >= n_in as isize {
                                    continue;
                                }
                                acc += w[((co * cv.c_in + ci) * 3 + ky) * 3 + kx]
                                    * in_c[iy as usize * n_in + ix as usize];
                            }
                        }
                    }
                    out[co * n_out * n_out + oy * n_out + ox] = acc;
                }
            }
        }
    }
}

/// Backward pass of [`conv_fwd`]: accumulates parameter gradients and,
/// when `d_in` is given, the input gradient.
fn conv_bwd<T: Scalar>(
    inp: &[T],
    d_out: &[T],
    params: &[T],
    grads: &mut [T],
    mut d_in: Option<&mut [T]>,
    cv: &Conv,
    n_in: usize,
) {
    let n_out = n_in / cv.stride;
    let w = &params[cv.w..cv.w + cv.c_in * cv.c_out * 9];
    for co in 0..cv.c_out {
        let dout_c = &d_out[co * n_out * n_out..(co + 1) * n_out * n_out];
        let mut db = T::zero();
        for &g in dout_c {
            db += g;
        }
        grads[cv.b + co] += db;
        for ci in 0..cv.c_in {
            let in_c = &inp[ci * n_in * n_in..(ci + 1) * n_in * n_in];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let widx = ((co * cv.c_in + ci) * 3 + ky) * 3 + kx;
                    let wv = w[widx];
                    let mut dw = T::zero();
                    if cv.stride == 1 {
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (n_in + 1 - ky).min(n_in);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (n_in + 1 - kx).min(n_in);
                        for y in y_lo..y_hi {
                            let src = &in_c[(y + ky - 1) * n_in..];
                            let gr = &dout_c[y * n_in..];
                            for x in x_lo..x_hi {
                                dw += src[x + kx - 1] * gr[x];
                            }
                        }
                        if let Some(di) = d_in.as_deref_mut() {
                            let di_c = &mut di[ci * n_in * n_in..(ci + 1) * n_in * n_in];
                            for y in y_lo..y_hi {
                                let dst = &mut di_c[(y + ky - 1) * n_in..];
                                let gr = &dout_c[y * n_in..];
                                for x in x_lo..x_hi {
                                    dst[x + kx - 1] += wv * gr[x];
                                }
                            }
                        }
                    } else {
                        for oy in 0..n_out {
                            let iy = (oy * cv.stride + ky) as isize - 1;
                            if iy < 0 || iy >= n_in as isize {
                                continue;
                            }
                            for ox in 0..n_out {
                                let ix = (ox * cv.stride + kx) as isize - 1;
                                if ix < 0 || ix >= n_in as isize {
                                    continue;
                                }
                                let g = dout_c[oy * n_out + ox];
                                dw += in_c[iy as usize * n_in + ix as usize] * g;
                                if let Some(di) = d_in.as_deref_mut() {
                                    di[ci * n_in * n_in + iy as usize * n_in + ix as usize] +=
                                        wv * g;
                                }
                            }
                        }
                    }
                    grads[cv.w + widx] += dw;
                }
            }
        }
    }
}

/// Vector linear `y = W x + b`, `W` row-major `[n_out][n_in]`.
fn vlin_fwd<T: Scalar>(x: &[T], y: &mut [T], params: &[T], l: &Lin) {
    for o in 0..l.n_out {
        let row = &params[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
        let mut acc = params[l.b + o];
        for i in 0..l.n_in {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

fn vlin_bwd<T: Scalar>(
    x: &[T],
    d_y: &[T],
    params: &[T],
    grads: &mut [T],
    d_x: Option<&mut [T]>,
    l: &Lin,
) {
    for o in 0..l.n_out {
        let g = d_y[o];
        grads[l.b + o] += g;
        for i in 0..l.n_in {
            grads[l.w + o * l.n_in + i] += g * x[i];
        }
    }
    if let Some(dx) = d_x {
        for i in 0..l.n_in {
            let mut acc = T::zero();
            for o in 0..l.n_out {
                acc += params[l.w + o * l.n_in + i] * d_y[o];
            }
            dx[i] += acc;
        }
    }
}

/// Token linear `Y = X W + b`, `X` `[n_tok][n_in]`, `W` row-major
/// `[n_in][n_out]`.
fn tlin_fwd<T: Scalar>(x: &[T], y: &mut [T], params: &[T], l: &Lin, n_tok: usize) {
    for t in 0..n_tok {
        let xr = &x[t * l.n_in..(t + 1) * l.n_in];
        let yr = &mut y[t * l.n_out..(t + 1) * l.n_out];
        for o in 0..l.n_out {
            yr[o] = params[l.b + o];
        }
        for i in 0..l.n_in {
            let xv = xr[i];
            let wrow = &params[l.w + i * l.n_out..l.w + (i + 1) * l.n_out];
            for o in 0..l.n_out {
                yr[o] += xv * wrow[o];
            }
        }
    }
}

fn tlin_bwd<T: Scalar>(
    x: &[T],
    d_y: &[T],
    params: &[T],
    grads: &mut [T],
    d_x: Option<&mut [T]>,
    l: &Lin,
    n_tok: usize,
) {
    for t in 0..n_tok {
        let xr = &x[t * l.n_in..(t + 1) * l.n_in];
        let gr = &d_y[t * l.n_out..(t + 1) * l.n_out];
        for o in 0..l.n_out {
            grads[l.b + o] += gr[o];
        }
        for i in 0..l.n_in {
            let xv = xr[i];
            let grow = &mut grads[l.w + i * l.n_out..l.w + (i + 1) * l.n_out];
            for o in 0..l.n_out {
                grow[o] += xv * gr[o];
            }
        }
    }
    if let Some(dx) = d_x {
        for t in 0..n_tok {
            let gr = &d_y[t * l.n_out..(t + 1) * l.n_out];
            let dxr = &mut dx[t * l.n_in..(t + 1) * l.n_in];
            for i in 0..l.n_in {
                let wrow = &params[l.w + i * l.n_out..l.w + (i + 1) * l.n_out];
                let mut acc = T::zero();
                for o in 0..l.n_out {
                    acc += wrow[o] * gr[o];
                }
                dxr[i] += acc;
            }
        }
    }
}

/// Buffers kept by one residual block for its backward pass.
struct ResWs<T> {
    h0: Vec<T>,
    h1b: Vec<T>,
    h2: Vec<T>,
    tb: Vec<T>,
    out: Vec<T>,
}

impl<T> Default for ResWs<T> {
    fn default() -> Self {
        Self { h0: Vec::new(), h1b: Vec::new(), h2: Vec::new(), tb: Vec::new(), out: Vec::new() }
    }
}

fn res_fwd<T: Scalar>(
    params: &[T],
    res: &Res,
    x: &[T],
    e: &[T],
    ch: usize,
    n: usize,
    ws: &mut ResWs<T>,
) {
    let sz = ch * n * n;
    ws.h0 = x.iter().map(|&v| silu(v)).collect();
    ws.h1b = vec![T::zero(); sz];
    conv_fwd(&ws.h0, &mut ws.h1b, params, &res.conv1, n);
    ws.tb = vec![T::zero(); ch];
    vlin_fwd(e, &mut ws.tb, params, &res.tproj);
    for ci in 0..ch {
        let bias = ws.tb[ci];
        for v in &mut ws.h1b[ci * n * n..(ci + 1) * n * n] {
            *v += bias;
        }
    }
    ws.h2 = ws.h1b.iter().map(|&v| silu(v)).collect();
    ws.out = vec![T::zero(); sz];
    conv_fwd(&ws.h2, &mut ws.out, params, &res.conv2, n);
    for (o, &xv) in ws.out.iter_mut().zip(x) {
        *o += xv;
    }
}

/// Backward through a residual block; accumulates into `d_x` and `d_e`.
fn res_bwd<T: Scalar>(
    params: &[T],
    grads: &mut [T],
    res: &Res,
    x: &[T],
    e: &[T],
    d_out: &[T],
    d_x: &mut [T],
    d_e: &mut [T],
    ch: usize,
    n: usize,
    ws: &ResWs<T>,
) {
    let sz = ch * n * n;
    // Residual path.
    for (dx, &g) in d_x.iter_mut().zip(d_out) {
        *dx += g;
    }
    // conv2.
    let mut d_h2 = vec![T::zero(); sz];
    conv_bwd(&ws.h2, d_out, params, grads, Some(&mut d_h2), &res.conv2, n);
    // silu after the timestep bias.
    let mut d_h1b = vec![T::zero(); sz];
    for i in 0..sz {
        d_h1b[i] = d_h2[i] * silu_grad(ws.h1b[i]);
    }
    // Timestep bias: per-channel sum feeds the projection.
    let mut d_tb = vec![T::zero(); ch];
    for ci in 0..ch {
        let mut acc = T::zero();
        for &g in &d_h1b[ci * n * n..(ci + 1) * n * n] {
            acc += g;
        }
        d_tb[ci] = acc;
    }
    vlin_bwd(e, &d_tb, params, grads, Some(d_e), &res.tproj);
    // conv1.
    let mut d_h0 = vec![T::zero(); sz];
    conv_bwd(&ws.h0, &d_h1b, params, grads, Some(&mut d_h0), &res.conv1, n);
    // Leading silu.
    for i in 0..sz {
        d_x[i] += d_h0[i] * silu_grad(x[i]);
    }
}

fn upsample2_fwd<T: Scalar>(inp: &[T], out: &mut [T], ch: usize, n_in: usize) {
    let n_out = n_in * 2;
    for ci in 0..ch {
        let src = &inp[ci * n_in * n_in..];
        let dst = &mut out[ci * n_out * n_out..(ci + 1) * n_out * n_out];
        for y in 0..n_out {
            for x in 0..n_out {
                dst[y * n_out + x] = src[(y / 2) * n_in + x / 2];
            }
        }
    }
}

fn upsample2_bwd<T: Scalar>(d_out: &[T], d_in: &mut [T], ch: usize, n_in: usize) {
    let n_out = n_in * 2;
    for ci in 0..ch {
        let dst = &mut d_in[ci * n_in * n_in..(ci + 1) * n_in * n_in];
        let src = &d_out[ci * n_out * n_out..];
        for y in 0..n_out {
            for x in 0..n_out {
                dst[(y / 2) * n_in + x / 2] += src[y * n_out + x];
            }
        }
    }
}

/// Sinusoidal embedding of the (integer) timestep.
fn sinusoidal<T: Scalar>(t: usize) -> Vec<T> {
    let half = SIN_DIM / 2;
    let mut out = Vec::with_capacity(SIN_DIM);
    for k in 0..half {
        let omega = (-(10_000.0f64).ln() * k as f64 / half as f64).exp();
        out.push(c::<T>((t as f64 * omega).sin()));
    }
    for k in 0..half {
        let omega = (-(10_000.0f64).ln() * k as f64 / half as f64).exp();
        out.push(c::<T>((t as f64 * omega).cos()));
    }
    out
}

/// Channel-major `[C][H][W]` to token-major `[H*W][C]`.
fn to_tokens<T: Scalar>(x: &[T], ch: usize, n: usize) -> Vec<T> {
    let hw = n * n;
    let mut out = vec![T::zero(); hw * ch];
    for ci in 0..ch {
        for p in 0..hw {
            out[p * ch + ci] = x[ci * hw + p];
        }
    }
    out
}

fn from_tokens<T: Scalar>(x: &[T], ch: usize, n: usize) -> Vec<T> {
    let hw = n * n;
    let mut out = vec![T::zero(); hw * ch];
    for ci in 0..ch {
        for p in 0..hw {
            out[ci * hw + p] = x[p * ch + ci];
        }
    }
    out
}

/// Every intermediate needed for one forward/backward pass.
struct Workspace<T> {
    sin: Vec<T>,
    e1_pre: Vec<T>,
    e1: Vec<T>,
    e: Vec<T>,
    x_in: Vec<T>,
    a0: Vec<T>,
    enc1: ResWs<T>,
    down1: Vec<T>,
    enc2: ResWs<T>,
    down2: Vec<T>,
    mid1: ResWs<T>,
    // Condition branch (cross-attention mode).
    g0_pre: Vec<T>,
    g0: Vec<T>,
    g1_pre: Vec<T>,
    g1: Vec<T>,
    g2_pre: Vec<T>,
    g2: Vec<T>,
    // Attention (token-major).
    f_t: Vec<T>,
    g_t: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
    attn_lin: Vec<T>,
    at_out: Vec<T>,
    mid2: ResWs<T>,
    up1_in: Vec<T>,
    up1_out: Vec<T>,
    s1: Vec<T>,
    dec1: ResWs<T>,
    up2_in: Vec<T>,
    up2_out: Vec<T>,
    s2: Vec<T>,
    dec2: ResWs<T>,
    head_in: Vec<T>,
    out: Vec<T>,
}

impl<T> Default for Workspace<T> {
    fn default() -> Self {
        Self {
            sin: Vec::new(),
            e1_pre: Vec::new(),
            e1: Vec::new(),
            e: Vec::new(),
            x_in: Vec::new(),
            a0: Vec::new(),
            enc1: ResWs::default(),
            down1: Vec::new(),
            enc2: ResWs::default(),
            down2: Vec::new(),
            mid1: ResWs::default(),
            g0_pre: Vec::new(),
            g0: Vec::new(),
            g1_pre: Vec::new(),
            g1: Vec::new(),
            g2_pre: Vec::new(),
            g2: Vec::new(),
            f_t: Vec::new(),
            g_t: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            p: Vec::new(),
            o: Vec::new(),
            attn_lin: Vec::new(),
            at_out: Vec::new(),
            mid2: ResWs::default(),
            up1_in: Vec::new(),
            up1_out: Vec::new(),
            s1: Vec::new(),
            dec1: ResWs::default(),
            up2_in: Vec::new(),
            up2_out: Vec::new(),
            s2: Vec::new(),
            dec2: ResWs::default(),
            head_in: Vec::new(),
            out: Vec::new(),
        }
    }
}

/// The network: architecture plus one flat parameter vector.
pub struct TinyNet<T> {
    pub arch: ArchDescriptor,
    layout: Layout,
    pub params: Vec<T>,
}

impl<T: Scalar> TinyNet<T> {
    /// Gaussian fan-in initialisation, biases zero. Draws happen in f64 and
    /// are cast, so f32 and f64 instantiations of the same seed start from
    /// identical values.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Self {
        let layout = Layout::build(&arch);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = SplitMix64::new(seed);
        let fill_conv = |params: &mut [T], cv: &Conv, rng: &mut SplitMix64| {
            let fan_in = (cv.c_in * 9) as f64;
            let scale = (2.0 / fan_in).sqrt();
            for i in 0..cv.c_in * cv.c_out * 9 {
                params[cv.w + i] = c(rng.next_gaussian() * scale);
            }
        };
        let fill_lin = |params: &mut [T], l: &Lin, rng: &mut SplitMix64| {
            let scale = (2.0 / l.n_in as f64).sqrt();
            for i in 0..l.n_in * l.n_out {
                params[l.w + i] = c(rng.next_gaussian() * scale);
            }
        };
        let fill_res = |params: &mut [T], r: &Res, rng: &mut SplitMix64| {
            let fan1 = (r.conv1.c_in * 9) as f64;
            let s1 = (2.0 / fan1).sqrt();
            for i in 0..r.conv1.c_in * r.conv1.c_out * 9 {
                params[r.conv1.w + i] = c(rng.next_gaussian() * s1);
            }
            let st = (1.0 / r.tproj.n_in as f64).sqrt();
            for i in 0..r.tproj.n_in * r.tproj.n_out {
                params[r.tproj.w + i] = c(rng.next_gaussian() * st);
            }
            // Second conv scaled down so residual blocks start near identity.
            let s2 = 0.1 * (2.0 / fan1).sqrt();
            for i in 0..r.conv2.c_in * r.conv2.c_out * 9 {
                params[r.conv2.w + i] = c(rng.next_gaussian() * s2);
            }
        };
        let lt = layout.clone();
        fill_lin(&mut params, &lt.temb1, &mut rng);
        fill_lin(&mut params, &lt.temb2, &mut rng);
        fill_conv(&mut params, &lt.stem, &mut rng);
        fill_res(&mut params, &lt.enc1, &mut rng);
        fill_conv(&mut params, &lt.down1, &mut rng);
        fill_res(&mut params, &lt.enc2, &mut rng);
        fill_conv(&mut params, &lt.down2, &mut rng);
        fill_res(&mut params, &lt.mid1, &mut rng);
        if let Some(at) = &lt.attn {
            fill_lin(&mut params, &at.wq, &mut rng);
            fill_lin(&mut params, &at.wk, &mut rng);
            fill_lin(&mut params, &at.wv, &mut rng);
            // Output projection starts small: attention begins as a gentle
            // perturbation of the residual path.
            let scale = 0.1 * (2.0 / at.wo.n_in as f64).sqrt();
            for i in 0..at.wo.n_in * at.wo.n_out {
                params[at.wo.w + i] = c(rng.next_gaussian() * scale);
            }
        }
        fill_res(&mut params, &lt.mid2, &mut rng);
        fill_conv(&mut params, &lt.up1, &mut rng);
        fill_res(&mut params, &lt.dec1, &mut rng);
        fill_conv(&mut params, &lt.up2, &mut rng);
        fill_res(&mut params, &lt.dec2, &mut rng);
        {
            // Small head: predictions start near zero.
            let scale = 0.1 * (2.0 / (lt.head.c_in * 9) as f64).sqrt();
            for i in 0..lt.head.c_in * lt.head.c_out * 9 {
                params[lt.head.w + i] = c(rng.next_gaussian() * scale);
            }
        }
        if let Some(conds) = &lt.cond {
            for cv in conds {
                fill_conv(&mut params, cv, &mut rng);
            }
        }
        Self { arch, layout, params }
    }

    pub fn from_params(arch: ArchDescriptor, params: Vec<T>) -> Result<Self, Error> {
        let layout = Layout::build(&arch);
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter count {} does not match architecture ({} expected)",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { arch, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn check_spatial(&self, n: usize, len: usize, cond_len: usize) -> Result<(), Error> {
        if n % 4 != 0 || n < 8 {
            return Err(Error::Geometry(format!(
                "network needs a square grid with side divisible by 4 and >= 8, got {n}"
            )));
        }
        if len != n * n || cond_len != n * n {
            return Err(Error::Geometry(String::from("input and condition sizes must match n*n")));
        }
        Ok(())
    }

    /// Forward pass; fills the workspace and leaves the prediction in
    /// `ws.out`.
    fn run_forward(&self, x: &[T], cond: &[T], t: usize, n: usize, ws: &mut Workspace<T>) {
        let (c0, c1, c2) = self.arch.channels();
        let (n2, n4) = (n / 2, n / 4);
        let p = &self.params;
        let lt = &self.layout;

        // Timestep embedding.
        ws.sin = sinusoidal(t);
        ws.e1_pre = vec![T::zero(); TEMB_DIM];
        vlin_fwd(&ws.sin, &mut ws.e1_pre, p, &lt.temb1);
        ws.e1 = ws.e1_pre.iter().map(|&v| silu(v)).collect();
        ws.e = vec![T::zero(); TEMB_DIM];
        vlin_fwd(&ws.e1, &mut ws.e, p, &lt.temb2);

        // Input assembly.
        ws.x_in = match self.arch.cond_mode {
            CondMode::CrossAttention => x.to_vec(),
            CondMode::Concat => {
                let mut v = Vec::with_capacity(2 * n * n);
                v.extend_from_slice(x);
                v.extend_from_slice(cond);
                v
            }
        };

        // Encoder.
        ws.a0 = vec![T::zero(); c0 * n * n];
        conv_fwd(&ws.x_in, &mut ws.a0, p, &lt.stem, n);
        res_fwd(p, &lt.enc1, &ws.a0, &ws.e, c0, n, &mut ws.enc1);
        ws.down1 = vec![T::zero(); c1 * n2 * n2];
        conv_fwd(&ws.enc1.out, &mut ws.down1, p, &lt.down1, n);
        res_fwd(p, &lt.enc2, &ws.down1, &ws.e, c1, n2, &mut ws.enc2);
        ws.down2 = vec![T::zero(); c2 * n4 * n4];
        conv_fwd(&ws.enc2.out, &mut ws.down2, p, &lt.down2, n2);
        res_fwd(p, &lt.mid1, &ws.down2, &ws.e, c2, n4, &mut ws.mid1);

        // Cross-attention over the condition encoder.
        if let (Some(at), Some(conds)) = (&lt.attn, &lt.cond) {
            ws.g0_pre = vec![T::zero(); c0 * n * n];
            conv_fwd(cond, &mut ws.g0_pre, p, &conds[0], n);
            ws.g0 = ws.g0_pre.iter().map(|&v| silu(v)).collect();
            ws.g1_pre = vec![T::zero(); c1 * n2 * n2];
            conv_fwd(&ws.g0, &mut ws.g1_pre, p, &conds[1], n);
            ws.g1 = ws.g1_pre.iter().map(|&v| silu(v)).collect();
            ws.g2_pre = vec![T::zero(); c2 * n4 * n4];
            conv_fwd(&ws.g1, &mut ws.g2_pre, p, &conds[2], n2);
            ws.g2 = ws.g2_pre.iter().map(|&v| silu(v)).collect();

            let n_tok = n4 * n4;
            ws.f_t = to_tokens(&ws.mid1.out, c2, n4);
            ws.g_t = to_tokens(&ws.g2, c2, n4);
            ws.q = vec![T::zero(); n_tok * c2];
            ws.k = vec![T::zero(); n_tok * c2];
            ws.v = vec![T::zero(); n_tok * c2];
            tlin_fwd(&ws.f_t, &mut ws.q, p, &at.wq, n_tok);
            tlin_fwd(&ws.g_t, &mut ws.k, p, &at.wk, n_tok);
            tlin_fwd(&ws.g_t, &mut ws.v, p, &at.wv, n_tok);
            let scale = c::<T>(1.0 / (c2 as f64).sqrt());
            ws.p = vec![T::zero(); n_tok * n_tok];
            for i in 0..n_tok {
                let qi = &ws.q[i * c2..(i + 1) * c2];
                let row = &mut ws.p[i * n_tok..(i + 1) * n_tok];
                let mut maxv = T::neg_infinity();
                for j in 0..n_tok {
                    let kj = &ws.k[j * c2..(j + 1) * c2];
                    let mut acc = T::zero();
                    for d in 0..c2 {
                        acc += qi[d] * kj[d];
                    }
                    let s = acc * scale;
                    row[j] = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut norm = T::zero();
                for rv in row.iter_mut() {
                    *rv = (*rv - maxv).exp();
                    norm += *rv;
                }
                for rv in row.iter_mut() {
                    *rv = *rv / norm;
                }
            }
            ws.o = vec![T::zero(); n_tok * c2];
            for i in 0..n_tok {
                let row = &ws.p[i * n_tok..(i + 1) * n_tok];
                let oi = &mut ws.o[i * c2..(i + 1) * c2];
                for j in 0..n_tok {
                    let pj = row[j];
                    let vj = &ws.v[j * c2..(j + 1) * c2];
                    for d in 0..c2 {
                        oi[d] += pj * vj[d];
                    }
                }
            }
            ws.attn_lin = vec![T::zero(); n_tok * c2];
            tlin_fwd(&ws.o, &mut ws.attn_lin, p, &at.wo, n_tok);
            let attn_img = from_tokens(&ws.attn_lin, c2, n4);
            ws.at_out = ws
                .mid1
                .out
                .iter()
                .zip(&attn_img)
                .map(|(&a, &b)| a + b)
                .collect();
        } else {
            ws.at_out = ws.mid1.out.clone();
        }

        res_fwd(p, &lt.mid2, &ws.at_out, &ws.e, c2, n4, &mut ws.mid2);

        // Decoder with additive skips.
        ws.up1_in = vec![T::zero(); c2 * n2 * n2];
        upsample2_fwd(&ws.mid2.out, &mut ws.up1_in, c2, n4);
        ws.up1_out = vec![T::zero(); c1 * n2 * n2];
        conv_fwd(&ws.up1_in, &mut ws.up1_out, p, &lt.up1, n2);
        ws.s1 = ws
            .up1_out
            .iter()
            .zip(&ws.enc2.out)
            .map(|(&a, &b)| a + b)
            .collect();
        res_fwd(p, &lt.dec1, &ws.s1, &ws.e, c1, n2, &mut ws.dec1);

        ws.up2_in = vec![T::zero(); c1 * n * n];
        upsample2_fwd(&ws.dec1.out, &mut ws.up2_in, c1, n2);
        ws.up2_out = vec![T::zero(); c0 * n * n];
        conv_fwd(&ws.up2_in, &mut ws.up2_out, p, &lt.up2, n);
        ws.s2 = ws
            .up2_out
            .iter()
            .zip(&ws.enc1.out)
            .map(|(&a, &b)| a + b)
            .collect();
        res_fwd(p, &lt.dec2, &ws.s2, &ws.e, c0, n, &mut ws.dec2);

        ws.head_in = ws.dec2.out.iter().map(|&v| silu(v)).collect();
        ws.out = vec![T::zero(); n * n];
        conv_fwd(&ws.head_in, &mut ws.out, p, &lt.head, n);
    }

    /// Noise prediction for one image. `x` and `cond` are flattened row-major
    /// `n*n` slices; `cond` should already be normalised.
    pub fn forward(&self, x: &[T], cond: &[T], t: usize, n: usize) -> Result<Vec<T>, Error> {
        self.check_spatial(n, x.len(), cond.len())?;
        let mut ws = Workspace::default();
        self.run_forward(x, cond, t, n, &mut ws);
        Ok(ws.out)
    }

    /// Mean-squared-error loss against `target` and the full parameter
    /// gradient.
    pub fn loss_and_grad(
        &self,
        x: &[T],
        cond: &[T],
        t: usize,
        target: &[T],
        n: usize,
    ) -> Result<(T, Vec<T>), Error> {
        self.check_spatial(n, x.len(), cond.len())?;
        if target.len() != n * n {
            return Err(Error::Geometry(String::from("target size must match n*n")));
        }
        let (c0, c1, c2) = self.arch.channels();
        let (n2, n4) = (n / 2, n / 4);
        let p = &self.params;
        let lt = &self.layout;

        let mut ws = Workspace::default();
        self.run_forward(x, cond, t, n, &mut ws);

        let inv = c::<T>(1.0 / (n * n) as f64);
        let mut loss = T::zero();
        let mut d_out = vec![T::zero(); n * n];
        for i in 0..n * n {
            let diff = ws.out[i] - target[i];
            loss += diff * diff;
            d_out[i] = (diff + diff) * inv;
        }
        loss = loss * inv;

        let mut grads = vec![T::zero(); self.layout.total];
        let mut d_e = vec![T::zero(); TEMB_DIM];

        // Head.
        let mut d_head_in = vec![T::zero(); c0 * n * n];
        conv_bwd(&ws.head_in, &d_out, p, &mut grads, Some(&mut d_head_in), &lt.head, n);
        let mut d_dec2_out = vec![T::zero(); c0 * n * n];
        for i in 0..c0 * n * n {
            d_dec2_out[i] = d_head_in[i] * silu_grad(ws.dec2.out[i]);
        }

        // dec2 <- s2.
        let mut d_s2 = vec![T::zero(); c0 * n * n];
        res_bwd(p, &mut grads, &lt.dec2, &ws.s2, &ws.e, &d_dec2_out, &mut d_s2, &mut d_e, c0, n, &ws.dec2);
        // s2 = up2_out + enc1.out.
        let mut d_enc1_out = d_s2.clone();
        let mut d_up2_in = vec![T::zero(); c1 * n * n];
        conv_bwd(&ws.up2_in, &d_s2, p, &mut grads, Some(&mut d_up2_in), &lt.up2, n);
        let mut d_dec1_out = vec![T::zero(); c1 * n2 * n2];
        upsample2_bwd(&d_up2_in, &mut d_dec1_out, c1, n2);

        // dec1 <- s1.
        let mut d_s1 = vec![T::zero(); c1 * n2 * n2];
        res_bwd(p, &mut grads, &lt.dec1, &ws.s1, &ws.e, &d_dec1_out, &mut d_s1, &mut d_e, c1, n2, &ws.dec1);
        let mut d_enc2_out = d_s1.clone();
        let mut d_up1_in = vec![T::zero(); c2 * n2 * n2];
        conv_bwd(&ws.up1_in, &d_s1, p, &mut grads, Some(&mut d_up1_in), &lt.up1, n2);
        let mut d_mid2_out = vec![T::zero(); c2 * n4 * n4];
        upsample2_bwd(&d_up1_in, &mut d_mid2_out, c2, n4);

        // mid2 <- at_out.
        let mut d_at_out = vec![T::zero(); c2 * n4 * n4];
        res_bwd(p, &mut grads, &lt.mid2, &ws.at_out, &ws.e, &d_mid2_out, &mut d_at_out, &mut d_e, c2, n4, &ws.mid2);

        // Attention block.
        let mut d_mid1_out = vec![T::zero(); c2 * n4 * n4];
        if let (Some(at), Some(conds)) = (&lt.attn, &lt.cond) {
            let n_tok = n4 * n4;
            // Residual: at_out = mid1.out + attn_img.
            for i in 0..c2 * n4 * n4 {
                d_mid1_out[i] += d_at_out[i];
            }
            let d_attn_lin = to_tokens(&d_at_out, c2, n4);
            let mut d_o = vec![T::zero(); n_tok * c2];
            tlin_bwd(&ws.o, &d_attn_lin, p, &mut grads, Some(&mut d_o), &at.wo, n_tok);
            // O = P V.
            let mut d_p = vec![T::zero(); n_tok * n_tok];
            let mut d_v = vec![T::zero(); n_tok * c2];
            for i in 0..n_tok {
                let doi = &d_o[i * c2..(i + 1) * c2];
                let prow = &ws.p[i * n_tok..(i + 1) * n_tok];
                let dprow = &mut d_p[i * n_tok..(i + 1) * n_tok];
                for j in 0..n_tok {
                    let vj = &ws.v[j * c2..(j + 1) * c2];
                    let mut acc = T::zero();
                    for d in 0..c2 {
                        acc += doi[d] * vj[d];
                    }
                    dprow[j] = acc;
                    let pj = prow[j];
                    let dvj = &mut d_v[j * c2..(j + 1) * c2];
                    for d in 0..c2 {
                        dvj[d] += pj * doi[d];
                    }
                }
            }
            // Softmax rows.
            let scale = c::<T>(1.0 / (c2 as f64).sqrt());
            let mut d_q = vec![T::zero(); n_tok * c2];
            let mut d_k = vec![T::zero(); n_tok * c2];
            for i in 0..n_tok {
                let prow = &ws.p[i * n_tok..(i + 1) * n_tok];
                let dprow = &d_p[i * n_tok..(i + 1) * n_tok];
                let mut dot = T::zero();
                for j in 0..n_tok {
                    dot += prow[j] * dprow[j];
                }
                let qi = &ws.q[i * c2..(i + 1) * c2];
                let dqi = &mut d_q[i * c2..(i + 1) * c2];
                for j in 0..n_tok {
                    let ds = prow[j] * (dprow[j] - dot) * scale;
                    if ds != T::zero() {
                        let kj = &ws.k[j * c2..(j + 1) * c2];
                        let dkj = &mut d_k[j * c2..(j + 1) * c2];
                        for d in 0..c2 {
                            dqi[d] += ds * kj[d];
                            dkj[d] += ds * qi[d];
                        }
                    }
                }
            }
            let mut d_f_t = vec![T::zero(); n_tok * c2];
            let mut d_g_t = vec![T::zero(); n_tok * c2];
            tlin_bwd(&ws.f_t, &d_q, p, &mut grads, Some(&mut d_f_t), &at.wq, n_tok);
            tlin_bwd(&ws.g_t, &d_k, p, &mut grads, Some(&mut d_g_t), &at.wk, n_tok);
            tlin_bwd(&ws.g_t, &d_v, p, &mut grads, Some(&mut d_g_t), &at.wv, n_tok);
            let d_f = from_tokens(&d_f_t, c2, n4);
            for i in 0..c2 * n4 * n4 {
                d_mid1_out[i] += d_f[i];
            }
            // Condition encoder.
            let d_g2_img = from_tokens(&d_g_t, c2, n4);
            let mut d_g2_pre = vec![T::zero(); c2 * n4 * n4];
            for i in 0..c2 * n4 * n4 {
                d_g2_pre[i] = d_g2_img[i] * silu_grad(ws.g2_pre[i]);
            }
            let mut d_g1 = vec![T::zero(); c1 * n2 * n2];
            conv_bwd(&ws.g1, &d_g2_pre, p, &mut grads, Some(&mut d_g1), &conds[2], n2);
            let mut d_g1_pre = vec![T::zero(); c1 * n2 * n2];
            for i in 0..c1 * n2 * n2 {
                d_g1_pre[i] = d_g1[i] * silu_grad(ws.g1_pre[i]);
            }
            let mut d_g0 = vec![T::zero(); c0 * n * n];
            conv_bwd(&ws.g0, &d_g1_pre, p, &mut grads, Some(&mut d_g0), &conds[1], n);
            let mut d_g0_pre = vec![T::zero(); c0 * n * n];
            for i in 0..c0 * n * n {
                d_g0_pre[i] = d_g0[i] * silu_grad(ws.g0_pre[i]);
            }
            conv_bwd(cond, &d_g0_pre, p, &mut grads, None, &conds[0], n);
        } else {
            d_mid1_out = d_at_out;
        }

        // mid1 <- down2.
        let mut d_down2 = vec![T::zero(); c2 * n4 * n4];
        res_bwd(p, &mut grads, &lt.mid1, &ws.down2, &ws.e, &d_mid1_out, &mut d_down2, &mut d_e, c2, n4, &ws.mid1);
        conv_bwd(&ws.enc2.out, &d_down2, p, &mut grads, Some(&mut d_enc2_out), &lt.down2, n2);

        // enc2 <- down1.
        let mut d_down1 = vec![T::zero(); c1 * n2 * n2];
        res_bwd(p, &mut grads, &lt.enc2, &ws.down1, &ws.e, &d_enc2_out, &mut d_down1, &mut d_e, c1, n2, &ws.enc2);
        conv_bwd(&ws.enc1.out, &d_down1, p, &mut grads, Some(&mut d_enc1_out), &lt.down1, n);

        // enc1 <- a0 <- stem.
        let mut d_a0 = vec![T::zero(); c0 * n * n];
        res_bwd(p, &mut grads, &lt.enc1, &ws.a0, &ws.e, &d_enc1_out, &mut d_a0, &mut d_e, c0, n, &ws.enc1);
        conv_bwd(&ws.x_in, &d_a0, p, &mut grads, None, &lt.stem, n);

        // Timestep embedding MLP.
        let mut d_e1 = vec![T::zero(); TEMB_DIM];
        vlin_bwd(&ws.e1, &d_e, p, &mut grads, Some(&mut d_e1), &lt.temb2);
        let mut d_e1_pre = vec![T::zero(); TEMB_DIM];
        for i in 0..TEMB_DIM {
            d_e1_pre[i] = d_e1[i] * silu_grad(ws.e1_pre[i]);
        }
        vlin_bwd(&ws.sin, &d_e1_pre, p, &mut grads, None, &lt.temb1);

        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_within_budget() {
        for mode in [CondMode::CrossAttention, CondMode::Concat] {
            let arch = ArchDescriptor { cond_mode: mode, base_channels: 8 };
            let count = arch.param_count();
            assert!(count <= 200_000, "{mode:?}: {count} params");
            assert!(count > 10_000, "{mode:?}: suspiciously small ({count})");
        }
    }

    #[test]
    fn init_is_deterministic_and_precision_consistent() {
        let arch = ArchDescriptor { cond_mode: CondMode::CrossAttention, base_channels: 4 };
        let a = TinyNet::<f32>::init(arch, 9);
        let b = TinyNet::<f32>::init(arch, 9);
        assert_eq!(a.params, b.params);
        let d = TinyNet::<f64>::init(arch, 9);
        for (x, y) in a.params.iter().zip(&d.params) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        for mode in [CondMode::CrossAttention, CondMode::Concat] {
            let arch = ArchDescriptor { cond_mode: mode, base_channels: 4 };
            let net = TinyNet::<f32>::init(arch, 3);
            let n = 16;
            let x = vec![0.3f32; n * n];
            let cond = vec![0.5f32; n * n];
            let out = net.forward(&x, &cond, 500, n).unwrap();
            assert_eq!(out.len(), n * n);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_spatial() {
        let arch = ArchDescriptor { cond_mode: CondMode::Concat, base_channels: 4 };
        let net = TinyNet::<f32>::init(arch, 3);
        assert!(net.forward(&vec![0.0; 36], &vec![0.0; 36], 1, 6).is_err());
    }

    #[test]
    fn condition_changes_output() {
        // The attention path must actually route anatomy information.
        let arch = ArchDescriptor { cond_mode: CondMode::CrossAttention, base_channels: 4 };
        let net = TinyNet::<f64>::init(arch, 5);
        let n = 16;
        let mut rng = crate::rng::SplitMix64::new(8);
        let x: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
        let c1: Vec<f64> = (0..n * n).map(|_| rng.next_f64()).collect();
        let c2: Vec<f64> = (0..n * n).map(|_| rng.next_f64()).collect();
        let o1 = net.forward(&x, &c1, 100, n).unwrap();
        let o2 = net.forward(&x, &c2, 100, n).unwrap();
        let diff: f64 = o1.iter().zip(&o2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "condition had no effect");
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Double-precision instantiation of the shared code path; 20 random
        // parameters per conditioning mode at initialisation.
        for mode in [CondMode::CrossAttention, CondMode::Concat] {
            let arch = ArchDescriptor { cond_mode: mode, base_channels: 4 };
            let mut net = TinyNet::<f64>::init(arch, 11);
            let n = 8;
            let mut rng = crate::rng::SplitMix64::new(13);
            let x: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
            let cond: Vec<f64> = (0..n * n).map(|_| rng.next_f64()).collect();
            let target: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
            let t = 321;
            let (_, grads) = net.loss_and_grad(&x, &cond, t, &target, n).unwrap();
            let h = 1e-4;
            let total = net.param_count();
            for k in 0..20 {
                let idx = (rng.below(total as u64)) as usize;
                let orig = net.params[idx];
                net.params[idx] = orig + h;
                let (lp, _) = net.loss_and_grad(&x, &cond, t, &target, n).unwrap();
                net.params[idx] = orig - h;
                let (lm, _) = net.loss_and_grad(&x, &cond, t, &target, n).unwrap();
                net.params[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
                assert!(
                    rel <= 1e-2,
                    "{mode:?} sample {k} param {idx}: fd={fd} an={an} rel={rel}"
                );
            }
        }
    }
}
