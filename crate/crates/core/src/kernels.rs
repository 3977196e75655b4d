//! Raw tensor kernels shared by the eager evaluator and the autograd tape.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Zero-padded "same" convolution geometry: padding = dilation * (k / 2).
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = (self.dilation * (self.kernel / 2)) as isize;
        let k = self.kernel;
        (0..self.channels * k * k).map(move |row| {
            let ky = (row / k) % k;
            let kx = row % k;
            (
                row,
                (ky * self.dilation) as isize - pad,
                (kx * self.dilation) as isize - pad,
            )
        })
    }

    /// Valid destination x-range for horizontal offset `dx`.
    fn span(&self, dx: isize) -> (usize, usize) {
        let w = self.width as isize;
        let lo = (-dx).clamp(0, w) as usize;
        let hi = (w - dx).clamp(0, w) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col<T: Real>(src: &[T], g: ConvGeom, cols: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let kk = g.kernel * g.kernel;
    for (row, dy, dx) in g.taps() {
        let plane = &src[(row / kk) * hw..(row / kk + 1) * hw];
        let dst = &mut cols[row * hw..(row + 1) * hw];
        let (lo, hi) = g.span(dx);
        for y in 0..h {
            let line = &mut dst[y * w..(y + 1) * w];
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize || lo >= hi {
                line.fill(T::zero());
                continue;
            }
            let base = sy as usize * w;
            line[..lo].fill(T::zero());
            line[hi..].fill(T::zero());
            let s0 = (lo as isize + dx) as usize;
            line[lo..hi].copy_from_slice(&plane[base + s0..base + s0 + (hi - lo)]);
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: ConvGeom, dst: &mut [T]) {
    let (h, w) = (g.height, g.width);
    let hw = h * w;
    let kk = g.kernel * g.kernel;
    for (row, dy, dx) in g.taps() {
        let plane = &mut dst[(row / kk) * hw..(row / kk + 1) * hw];
        let src = &cols[row * hw..(row + 1) * hw];
        let (lo, hi) = g.span(dx);
        if lo >= hi {
            continue;
        }
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let base = sy as usize * w;
            let s0 = (lo as isize + dx) as usize;
            let out = &mut plane[base + s0..base + s0 + (hi - lo)];
            for (o, &v) in out.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                *o += v;
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<ConvGeom> {
    let [co, ci, k, k2] = weight.shape();
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape(format!("conv kernel must be odd and square, got {k}x{k2}")));
    }
    if x.channels() != ci {
        return Err(Error::shape(format!(
            "conv expects {ci} input channels, got {}",
            x.channels()
        )));
    }
    if bias.len() != co {
        return Err(Error::shape(format!("conv bias has {} entries for {co} outputs", bias.len())));
    }
    Ok(ConvGeom {
        channels: ci,
        height: x.height(),
        width: x.width(),
        kernel: k,
        dilation: 1,
    })
}

/// Stride-1, zero-padded, shape-preserving 2-D convolution.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    dilation: usize,
) -> Result<Tensor<T>> {
    let mut g = check_conv(x, weight, bias)?;
    g.dilation = dilation.max(1);
    let co = weight.shape()[0];
    let hw = x.plane();
    let mut out = Tensor::zeros([x.batch(), co, x.height(), x.width()]);
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![T::zero(); g.rows() * hw] };
    for n in 0..x.batch() {
        let dst = out.item_mut(n);
        for (o, &b) in bias.iter().enumerate() {
            dst[o * hw..(o + 1) * hw].fill(b);
        }
        let src: &[T] = if g.kernel == 1 {
            x.item(n)
        } else {
            im2col(x.item(n), g, &mut cols);
            &cols
        };
        T::gemm(co, g.rows(), hw, T::one(), weight.data(), false, src, false, T::one(), dst);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [co, ci, k, _] = weight.shape();
    let g = ConvGeom {
        channels: ci,
        height: x.height(),
        width: x.width(),
        kernel: k,
        dilation: dilation.max(1),
    };
    grad_out.expect_shape([x.batch(), co, x.height(), x.width()], "conv grad")?;
    let hw = x.plane();
    let rows = g.rows();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); co];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = if need_input && k != 1 { vec![T::zero(); rows * hw] } else { Vec::new() };
    for n in 0..x.batch() {
        let dy = grad_out.item(n);
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        let src: &[T] = if k == 1 {
            x.item(n)
        } else {
            im2col(x.item(n), g, &mut cols);
            &cols
        };
        T::gemm(co, hw, rows, T::one(), dy, false, src, true, T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                T::gemm(rows, co, hw, T::one(), weight.data(), true, dy, false, T::zero(), dx.item_mut(n));
            } else {
                T::gemm(rows, co, hw, T::one(), weight.data(), true, dy, false, T::zero(), &mut dcols);
                col2im(&dcols, g, dx.item_mut(n));
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Channel-to-space rearrangement:
/// `out[c, y, x] = t[c*s*s + s*(y % s) + (x % s), y / s, x / s]`.
pub fn pixel_shuffle<T: Real>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::domain("pixel shuffle factor must be >= 1"));
    }
    let [n, c, h, w] = t.shape();
    if c % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel shuffle needs channels divisible by {}, got {c}",
            s * s
        )));
    }
    let oc = c / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let dst = out.data_mut();
    let mut i = 0;
    for b in 0..n {
        for ch in 0..oc {
            for y in 0..oh {
                let base = ch * s * s + s * (y % s);
                for x in 0..ow {
                    dst[i] = t.at(b, base + x % s, y / s, x / s);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::domain("pixel unshuffle factor must be >= 1"));
    }
    let [n, c, h, w] = t.shape();
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!("pixel unshuffle needs {h}x{w} divisible by {s}")));
    }
    let (ih, iw) = (h / s, w / s);
    let mut out = Tensor::zeros([n, c * s * s, ih, iw]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let dst = out.offset(b, ch * s * s + s * (y % s) + x % s, y / s, x / s);
                    out.data_mut()[dst] = t.at(b, ch, y, x);
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest<T: Real>(t: &Tensor<T>, s: usize) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, h * s, w * s], |[b, ch, y, x]| t.at(b, ch, y / s, x / s))
}

/// Adjoint of [`upsample_nearest`]: sums each `s x s` block.
pub fn upsample_nearest_adjoint<T: Real>(g: &Tensor<T>, s: usize) -> Tensor<T> {
    let [n, c, h, w] = g.shape();
    let mut out = Tensor::zeros([n, c, h / s, w / s]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let o = out.offset(b, ch, y / s, x / s);
                    out.data_mut()[o] += g.at(b, ch, y, x);
                }
            }
        }
    }
    out
}

/// Source taps along one axis for half-pixel-centred bilinear resampling.
pub(crate) fn bilinear_taps(len: usize, s: usize) -> Vec<(usize, usize, f64)> {
    (0..len * s)
        .map(|o| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor; output pixel centres map to
/// input coordinate `(i + 0.5) / s - 0.5`, clamped at the borders.
pub fn bilinear_upsample<T: Real>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::domain("bilinear scale must be >= 1"));
    }
    let [n, c, h, w] = t.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear upsample of an empty image"));
    }
    let ys = bilinear_taps(h, s);
    let xs = bilinear_taps(w, s);
    let lerp = |a: T, b: T, f: f64| a + T::lit(f) * (b - a);
    let mut out = Tensor::zeros([n, c, h * s, w * s]);
    let mut row0 = vec![T::zero(); w * s];
    let mut row1 = vec![T::zero(); w * s];
    let ow = w * s;
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    row0[ox] = lerp(t.at(b, ch, y0, x0), t.at(b, ch, y0, x1), fx);
                    row1[ox] = lerp(t.at(b, ch, y1, x0), t.at(b, ch, y1, x1), fx);
                }
                let base = out.offset(b, ch, oy, 0);
                for ox in 0..ow {
                    out.data_mut()[base + ox] = lerp(row0[ox], row1[ox], fy);
                }
            }
        }
    }
    Ok(out)
}

/// Channel concatenation.
pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        if p.batch() != n || p.height() != h || p.width() != w {
            return Err(Error::shape(format!("concat {:?} with {:?}", first.shape(), p.shape())));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Splits a channel-concatenated tensor back into pieces of the given widths.
pub fn split_channels<T: Real>(t: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let [n, _, h, w] = t.shape();
    let hw = h * w;
    let mut out: Vec<Vec<T>> = widths.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
    for b in 0..n {
        let item = t.item(b);
        let mut off = 0;
        for (dst, &c) in out.iter_mut().zip(widths) {
            dst.extend_from_slice(&item[off..off + c * hw]);
            off += c * hw;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec([n, c, h, w], d).expect("split widths sum to channels"))
        .collect()
}

/// Embedded-Gaussian attention over spatial positions. Returns the aggregated
/// features `y[:, i] = sum_j softmax_j(theta_i . phi_j) g[:, j]` and the
/// attention matrices (one `P x P` block per batch item).
pub fn attention<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    phi.expect_shape(theta.shape(), "attention phi")?;
    g.expect_shape(theta.shape(), "attention g")?;
    let [n, c, _, _] = theta.shape();
    let p = theta.plane();
    let mut attn = vec![T::zero(); n * p * p];
    let mut out = Tensor::zeros(theta.shape());
    for b in 0..n {
        let a = &mut attn[b * p * p..(b + 1) * p * p];
        T::gemm(p, c, p, T::one(), theta.item(b), true, phi.item(b), false, T::zero(), a);
        for row in a.chunks_mut(p) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        T::gemm(c, p, p, T::one(), g.item(b), false, a, true, T::zero(), out.item_mut(b));
    }
    Ok((out, attn))
}

/// Gradients of [`attention`] with respect to `(theta, phi, g)`.
pub fn attention_backward<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
    attn: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = theta.shape();
    let p = theta.plane();
    let mut d_theta = Tensor::zeros(theta.shape());
    let mut d_phi = Tensor::zeros(theta.shape());
    let mut d_g = Tensor::zeros(theta.shape());
    let mut d_a = vec![T::zero(); p * p];
    for b in 0..n {
        let a = &attn[b * p * p..(b + 1) * p * p];
        let dy = grad_out.item(b);
        T::gemm(p, c, p, T::one(), dy, true, g.item(b), false, T::zero(), &mut d_a);
        T::gemm(c, p, p, T::one(), dy, false, a, false, T::zero(), d_g.item_mut(b));
        for (da_row, a_row) in d_a.chunks_mut(p).zip(a.chunks(p)) {
            let dot: T = da_row.iter().zip(a_row).map(|(&x, &y)| x * y).sum();
            for (d, &av) in da_row.iter_mut().zip(a_row) {
                *d = av * (*d - dot);
            }
        }
        T::gemm(c, p, p, T::one(), phi.item(b), false, &d_a, true, T::zero(), d_theta.item_mut(b));
        T::gemm(c, p, p, T::one(), theta.item(b), false, &d_a, false, T::zero(), d_phi.item_mut(b));
    }
    (d_theta, d_phi, d_g)
}

/// One of the eight symmetries of the square. `id % 4` counts
/// counter-clockwise quarter turns; `id >= 4` adds a horizontal flip applied
/// before the rotation.
pub fn dihedral<T: Real>(t: &Tensor<T>, id: usize) -> Result<Tensor<T>> {
    if id >= 8 {
        return Err(Error::domain(format!("dihedral transform id {id} not in 0..8")));
    }
    let mut cur = if id >= 4 { hflip(t) } else { t.clone() };
    for _ in 0..id % 4 {
        cur = rot90(&cur);
    }
    Ok(cur)
}

/// Transform id that undoes `id`.
pub fn dihedral_inverse(id: usize) -> usize {
    if id >= 4 {
        id
    } else {
        (4 - id) % 4
    }
}

pub fn hflip<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.width();
    Tensor::from_fn(t.shape(), |[b, c, y, x]| t.at(b, c, y, w - 1 - x))
}

/// Counter-clockwise quarter turn: `out[y][x] = in[x][w - 1 - y]`.
pub fn rot90<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, w, h], |[b, ch, y, x]| t.at(b, ch, x, w - 1 - y))
}
