//! Forward implementations and adjoint rules.
//!
//! Every op validates shapes, computes its output, and (on a recording tape,
//! when the result requires grad) pushes a record. Adjoints are exact
//! vector-Jacobian products; inputs that do not require grad are skipped.

use super::tape::Tape;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool2d { k: usize, stride: usize },
    GlobalAvgPool,
    UpsampleNearest2x,
    Add,
    Mul,
    Linear,
    Exp,
    Log,
    Sum,
    ScalarMul(T),
    AddScalar,
    L2NormalizeRows,
    MatmulNT,
    SelectRows(Vec<usize>),
    ConcatRows,
    ChannelsToRows,
}

/// Row norms below this are treated as degenerate and refuse to normalize.
pub const EPSILON_NORM: f64 = 1e-12;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn expect_rank(op: &'static str, t: &Tensor<impl Scalar>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(shape_err(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn any_grad<T: Scalar>(inputs: &[&Tensor<T>]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation over `[B, Cin, H, W]` with kernel
    /// `[Cout, Cin, kh, kw]`, bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", w, 4)?;
        expect_rank("conv2d", b, 1)?;
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input channels: x has {cin}, weight expects {wcin}"),
            ));
        }
        if b.shape()[0] != cout {
            return Err(shape_err(
                "conv2d",
                format!("bias length {} != output channels {cout}", b.shape()[0]),
            ));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding
                ),
            ));
        }
        let hp = (h + 2 * padding - kh) / stride + 1;
        let wp = (wd + 2 * padding - kw) / stride + 1;

        let mut out = vec![T::zero(); bs * cout * hp * wp];
        conv2d_forward(
            x.data(),
            w.data(),
            b.data(),
            &mut out,
            ConvDims {
                bs,
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                hp,
                wp,
                stride,
                padding,
            },
        );
        let out = Tensor::from_op(vec![bs, cout, hp, wp], out, any_grad(&[x, w, b]));
        self.push(
            Op::Conv2d { stride, padding },
            vec![x.clone(), w.clone(), b.clone()],
            &out,
        );
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
        self.push(Op::Relu, vec![x.clone()], &out);
        out
    }

    /// Max pooling without padding; window `k`, step `stride`.
    pub fn maxpool2d(&mut self, x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
        expect_rank("maxpool2d", x, 4)?;
        if k == 0 || stride == 0 {
            return Err(shape_err("maxpool2d", "k and stride must be positive".into()));
        }
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if k > h || k > w {
            return Err(shape_err(
                "maxpool2d",
                format!("window {k} exceeds input {h}x{w}"),
            ));
        }
        let hp = (h - k) / stride + 1;
        let wp = (w - k) / stride + 1;
        let xd = x.data();
        let mut out = vec![T::zero(); bs * c * hp * wp];
        for bc in 0..bs * c {
            let base = bc * h * w;
            let obase = bc * hp * wp;
            for oh in 0..hp {
                for ow in 0..wp {
                    let mut m = T::neg_infinity();
                    for dh in 0..k {
                        let row = base + (oh * stride + dh) * w + ow * stride;
                        for dw in 0..k {
                            let v = xd[row + dw];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    out[obase + oh * wp + ow] = m;
                }
            }
        }
        let out = Tensor::from_op(vec![bs, c, hp, wp], out, x.requires_grad());
        self.push(Op::MaxPool2d { k, stride }, vec![x.clone()], &out);
        Ok(out)
    }

    /// `[B, C, H, W]` -> `[B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("global_avg_pool", x, 4)?;
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let xd = x.data();
        let mut out = vec![T::zero(); bs * c];
        for bc in 0..bs * c {
            let mut acc = T::zero();
            for v in &xd[bc * h * w..(bc + 1) * h * w] {
                acc = acc + *v;
            }
            out[bc] = acc * inv;
        }
        let out = Tensor::from_op(vec![bs, c], out, x.requires_grad());
        self.push(Op::GlobalAvgPool, vec![x.clone()], &out);
        Ok(out)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("upsample_nearest2x", x, 4)?;
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let xd = x.data();
        let mut out = vec![T::zero(); bs * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for bc in 0..bs * c {
            let base = bc * h * w;
            let obase = bc * h2 * w2;
            for oh in 0..h2 {
                let src_row = base + (oh / 2) * w;
                let dst_row = obase + oh * w2;
                for ow in 0..w2 {
                    out[dst_row + ow] = xd[src_row + ow / 2];
                }
            }
        }
        let out = Tensor::from_op(vec![bs, c, h2, w2], out, x.requires_grad());
        self.push(Op::UpsampleNearest2x, vec![x.clone()], &out);
        Ok(out)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_op(a.shape().to_vec(), data, any_grad(&[a, b]));
        self.push(Op::Add, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_op(a.shape().to_vec(), data, any_grad(&[a, b]));
        self.push(Op::Mul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Affine map `y = x W^T + b` with `x [B, Din]`, `W [Dout, Din]`.
    pub fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        expect_rank("linear", b, 1)?;
        let (bs, din) = (x.shape()[0], x.shape()[1]);
        let (dout, wdin) = (w.shape()[0], w.shape()[1]);
        if wdin != din {
            return Err(shape_err(
                "linear",
                format!("input dim: x has {din}, weight expects {wdin}"),
            ));
        }
        if b.shape()[0] != dout {
            return Err(shape_err(
                "linear",
                format!("bias length {} != output dim {dout}", b.shape()[0]),
            ));
        }
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![T::zero(); bs * dout];
        for bi in 0..bs {
            let xrow = &xd[bi * din..(bi + 1) * din];
            for o in 0..dout {
                let wrow = &wd[o * din..(o + 1) * din];
                let mut acc = bd[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc = acc + *xv * *wv;
                }
                out[bi * dout + o] = acc;
            }
        }
        let out = Tensor::from_op(vec![bs, dout], out, any_grad(&[x, w, b]));
        self.push(Op::Linear, vec![x.clone(), w.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn exp(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v.exp()).collect();
        let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
        self.push(Op::Exp, vec![x.clone()], &out);
        out
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some((i, v)) = x
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= T::zero())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive value {v} at flat index {i}"),
            });
        }
        let data = x.data().iter().map(|&v| v.ln()).collect();
        let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
        self.push(Op::Log, vec![x.clone()], &out);
        Ok(out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut acc = T::zero();
        for v in x.data() {
            acc = acc + *v;
        }
        let out = Tensor::from_op(vec![1], vec![acc], x.requires_grad());
        self.push(Op::Sum, vec![x.clone()], &out);
        out
    }

    pub fn scalar_mul(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v * s).collect();
        let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
        self.push(Op::ScalarMul(s), vec![x.clone()], &out);
        out
    }

    /// Adds a detached constant to every element (identity adjoint).
    pub fn add_scalar(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        let data = x.data().iter().map(|&v| v + c).collect();
        let out = Tensor::from_op(x.shape().to_vec(), data, x.requires_grad());
        self.push(Op::AddScalar, vec![x.clone()], &out);
        out
    }

    /// Normalizes every row of `[B, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("l2_normalize", x, 2)?;
        let (bs, d) = (x.shape()[0], x.shape()[1]);
        let eps = T::from_f64(EPSILON_NORM);
        let xd = x.data();
        let mut out = vec![T::zero(); bs * d];
        for r in 0..bs {
            let row = &xd[r * d..(r + 1) * d];
            let mut sq = T::zero();
            for v in row {
                sq = sq + *v * *v;
            }
            let norm = sq.sqrt();
            if norm < eps {
                return Err(Error::DegenerateEmbedding(format!(
                    "row {r} has norm {norm} below {EPSILON_NORM}"
                )));
            }
            let inv = T::one() / norm;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = *v * inv;
            }
        }
        let out = Tensor::from_op(vec![bs, d], out, x.requires_grad());
        self.push(Op::L2NormalizeRows, vec![x.clone()], &out);
        Ok(out)
    }

    /// `a [M, C] x b [K, C] -> [M, K]`, i.e. all pairwise row dot products.
    pub fn matmul_nt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("matmul_nt", a, 2)?;
        expect_rank("matmul_nt", b, 2)?;
        let (m, c) = (a.shape()[0], a.shape()[1]);
        let (k, bc) = (b.shape()[0], b.shape()[1]);
        if bc != c {
            return Err(shape_err(
                "matmul_nt",
                format!("inner dim: a has {c}, b has {bc}"),
            ));
        }
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            let arow = &ad[i * c..(i + 1) * c];
            for j in 0..k {
                let brow = &bd[j * c..(j + 1) * c];
                let mut acc = T::zero();
                for (x, y) in arow.iter().zip(brow) {
                    acc = acc + *x * *y;
                }
                out[i * k + j] = acc;
            }
        }
        let out = Tensor::from_op(vec![m, k], out, any_grad(&[a, b]));
        self.push(Op::MatmulNT, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Gathers rows of a `[R, C]` tensor in the given order.
    pub fn select_rows(&mut self, x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        expect_rank("select_rows", x, 2)?;
        if indices.is_empty() {
            return Err(shape_err("select_rows", "empty index list".into()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(shape_err(
                "select_rows",
                format!("row index {bad} out of range for {r} rows"),
            ));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_op(vec![indices.len(), c], out, x.requires_grad());
        self.push(Op::SelectRows(indices.to_vec()), vec![x.clone()], &out);
        Ok(out)
    }

    /// Stacks the rows of two `[_, C]` tensors.
    pub fn concat_rows(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("concat_rows", a, 2)?;
        expect_rank("concat_rows", b, 2)?;
        if a.shape()[1] != b.shape()[1] {
            return Err(shape_err(
                "concat_rows",
                format!("columns: {} vs {}", a.shape()[1], b.shape()[1]),
            ));
        }
        let mut out = Vec::with_capacity(a.numel() + b.numel());
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
        let out = Tensor::from_op(
            vec![a.shape()[0] + b.shape()[0], a.shape()[1]],
            out,
            any_grad(&[a, b]),
        );
        self.push(Op::ConcatRows, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Rearranges `[B, C, H, W]` into `[B*H*W, C]`: row `b*H*W + h*W + w`
    /// holds the channel vector of cell `(h, w)` of batch item `b`.
    pub fn channels_to_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        expect_rank("channels_to_rows", x, 4)?;
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let xd = x.data();
        let mut out = vec![T::zero(); bs * h * w * c];
        for b in 0..bs {
            for ci in 0..c {
                let src = (b * c + ci) * h * w;
                let dst = b * h * w;
                for hw in 0..h * w {
                    out[(dst + hw) * c + ci] = xd[src + hw];
                }
            }
        }
        let out = Tensor::from_op(vec![bs * h * w, c], out, x.requires_grad());
        self.push(Op::ChannelsToRows, vec![x.clone()], &out);
        Ok(out)
    }
}

struct ConvDims {
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hp: usize,
    wp: usize,
    stride: usize,
    padding: usize,
}

/// Valid output-column range `[lo, hi)` such that `ow*stride + shift` stays
/// inside `[0, limit)`.
fn col_range(shift: isize, stride: usize, limit: usize, out_limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    let hi = (limit as isize - shift + s - 1) / s;
    let lo = lo.max(0) as usize;
    let hi = hi.clamp(0, out_limit as isize) as usize;
    (lo.min(out_limit), hi)
}

fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], out: &mut [T], d: ConvDims) {
    for bi in 0..d.bs {
        for co in 0..d.cout {
            let obase = (bi * d.cout + co) * d.hp * d.wp;
            out[obase..obase + d.hp * d.wp].fill(b[co]);
            for ci in 0..d.cin {
                let xbase = (bi * d.cin + ci) * d.h * d.w;
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let wv = w[((co * d.cin + ci) * d.kh + khi) * d.kw + kwi];
                        let wshift = kwi as isize - d.padding as isize;
                        let (lo, hi) = col_range(wshift, d.stride, d.w, d.wp);
                        for oh in 0..d.hp {
                            let ih = (oh * d.stride + khi) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * d.w;
                            let orow = obase + oh * d.wp;
                            for ow in lo..hi {
                                let iw = (ow * d.stride) as isize + wshift;
                                out[orow + ow] =
                                    out[orow + ow] + wv * x[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_dx.then(|| vec![T::zero(); d.bs * d.cin * d.h * d.w]);
    let mut dw = need_dw.then(|| vec![T::zero(); d.cout * d.cin * d.kh * d.kw]);
    let mut db = need_db.then(|| vec![T::zero(); d.cout]);

    if let Some(db) = db.as_mut() {
        for bi in 0..d.bs {
            for co in 0..d.cout {
                let gbase = (bi * d.cout + co) * d.hp * d.wp;
                let mut acc = T::zero();
                for g in &gy[gbase..gbase + d.hp * d.wp] {
                    acc = acc + *g;
                }
                db[co] = db[co] + acc;
            }
        }
    }

    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }

    for bi in 0..d.bs {
        for co in 0..d.cout {
            let gbase = (bi * d.cout + co) * d.hp * d.wp;
            for ci in 0..d.cin {
                let xbase = (bi * d.cin + ci) * d.h * d.w;
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let widx = ((co * d.cin + ci) * d.kh + khi) * d.kw + kwi;
                        let wv = w[widx];
                        let wshift = kwi as isize - d.padding as isize;
                        let (lo, hi) = col_range(wshift, d.stride, d.w, d.wp);
                        let mut wacc = T::zero();
                        for oh in 0..d.hp {
                            let ih = (oh * d.stride + khi) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * d.w;
                            let grow = gbase + oh * d.wp;
                            match (dx.as_mut(), dw.is_some()) {
                                (Some(dx), true) => {
                                    for ow in lo..hi {
                                        let iw = ((ow * d.stride) as isize + wshift) as usize;
                                        let g = gy[grow + ow];
                                        dx[xrow + iw] = dx[xrow + iw] + wv * g;
                                        wacc = wacc + g * x[xrow + iw];
                                    }
                                }
                                (Some(dx), false) => {
                                    for ow in lo..hi {
                                        let iw = ((ow * d.stride) as isize + wshift) as usize;
                                        dx[xrow + iw] = dx[xrow + iw] + wv * gy[grow + ow];
                                    }
                                }
                                (None, true) => {
                                    for ow in lo..hi {
                                        let iw = ((ow * d.stride) as isize + wshift) as usize;
                                        wacc = wacc + gy[grow + ow] * x[xrow + iw];
                                    }
                                }
                                (None, false) => {}
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] = dw[widx] + wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-input gradients for one recorded op. `None` for inputs that do not
/// require grad.
pub(crate) fn adjoint<T: Scalar>(
    op: &Op<T>,
    inputs: &[Tensor<T>],
    output: &Tensor<T>,
    gy: &[T],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let d = ConvDims {
                bs: x.shape()[0],
                cin: x.shape()[1],
                h: x.shape()[2],
                w: x.shape()[3],
                cout: w.shape()[0],
                kh: w.shape()[2],
                kw: w.shape()[3],
                hp: output.shape()[2],
                wp: output.shape()[3],
                stride: *stride,
                padding: *padding,
            };
            let (dx, dw, db) = conv2d_backward(
                x.data(),
                w.data(),
                gy,
                &d,
                x.requires_grad(),
                w.requires_grad(),
                b.requires_grad(),
            );
            vec![dx, dw, db]
        }
        Op::Relu => {
            let x = &inputs[0];
            let g = x
                .data()
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(g)]
        }
        Op::MaxPool2d { k, stride } => {
            let x = &inputs[0];
            let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (hp, wp) = (output.shape()[2], output.shape()[3]);
            let xd = x.data();
            let mut dx = vec![T::zero(); x.numel()];
            for bc in 0..bs * c {
                let base = bc * h * w;
                let obase = bc * hp * wp;
                for oh in 0..hp {
                    for ow in 0..wp {
                        // Recompute the (first) argmax of the window.
                        let mut m = T::neg_infinity();
                        let mut arg = 0;
                        for dh in 0..*k {
                            let row = base + (oh * stride + dh) * w + ow * stride;
                            for dw in 0..*k {
                                let v = xd[row + dw];
                                if v > m {
                                    m = v;
                                    arg = row + dw;
                                }
                            }
                        }
                        dx[arg] = dx[arg] + gy[obase + oh * wp + ow];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::GlobalAvgPool => {
            let x = &inputs[0];
            let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let inv = T::from_f64(1.0 / (h * w) as f64);
            let mut dx = vec![T::zero(); x.numel()];
            for bc in 0..bs * c {
                let g = gy[bc] * inv;
                dx[bc * h * w..(bc + 1) * h * w].fill(g);
            }
            vec![Some(dx)]
        }
        Op::UpsampleNearest2x => {
            let x = &inputs[0];
            let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (h2, w2) = (2 * h, 2 * w);
            let mut dx = vec![T::zero(); x.numel()];
            for bc in 0..bs * c {
                let base = bc * h * w;
                let obase = bc * h2 * w2;
                for oh in 0..h2 {
                    let src_row = base + (oh / 2) * w;
                    let dst_row = obase + oh * w2;
                    for ow in 0..w2 {
                        dx[src_row + ow / 2] = dx[src_row + ow / 2] + gy[dst_row + ow];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Add => {
            let mk = |t: &Tensor<T>| t.requires_grad().then(|| gy.to_vec());
            vec![mk(&inputs[0]), mk(&inputs[1])]
        }
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let da = a
                .requires_grad()
                .then(|| gy.iter().zip(b.data()).map(|(&g, &v)| g * v).collect());
            let db = b
                .requires_grad()
                .then(|| gy.iter().zip(a.data()).map(|(&g, &v)| g * v).collect());
            vec![da, db]
        }
        Op::Linear => {
            let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let (bs, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[0];
            let (xd, wd) = (x.data(), w.data());
            let dx = x.requires_grad().then(|| {
                let mut dx = vec![T::zero(); bs * din];
                for bi in 0..bs {
                    for o in 0..dout {
                        let g = gy[bi * dout + o];
                        let wrow = &wd[o * din..(o + 1) * din];
                        let drow = &mut dx[bi * din..(bi + 1) * din];
                        for (dv, wv) in drow.iter_mut().zip(wrow) {
                            *dv = *dv + g * *wv;
                        }
                    }
                }
                dx
            });
            let dw = w.requires_grad().then(|| {
                let mut dw = vec![T::zero(); dout * din];
                for bi in 0..bs {
                    let xrow = &xd[bi * din..(bi + 1) * din];
                    for o in 0..dout {
                        let g = gy[bi * dout + o];
                        let wrow = &mut dw[o * din..(o + 1) * din];
                        for (dv, xv) in wrow.iter_mut().zip(xrow) {
                            *dv = *dv + g * *xv;
                        }
                    }
                }
                dw
            });
            let db = b.requires_grad().then(|| {
                let mut db = vec![T::zero(); dout];
                for bi in 0..bs {
                    for o in 0..dout {
                        db[o] = db[o] + gy[bi * dout + o];
                    }
                }
                db
            });
            vec![dx, dw, db]
        }
        Op::Exp => {
            // dy/dx = exp(x) = y
            let g = output.data().iter().zip(gy).map(|(&y, &g)| g * y).collect();
            vec![Some(g)]
        }
        Op::Log => {
            let x = &inputs[0];
            let g = x.data().iter().zip(gy).map(|(&v, &g)| g / v).collect();
            vec![Some(g)]
        }
        Op::Sum => {
            let x = &inputs[0];
            vec![Some(vec![gy[0]; x.numel()])]
        }
        Op::ScalarMul(s) => {
            let g = gy.iter().map(|&g| g * *s).collect();
            vec![Some(g)]
        }
        Op::AddScalar => vec![Some(gy.to_vec())],
        Op::L2NormalizeRows => {
            let x = &inputs[0];
            let (bs, dim) = (x.shape()[0], x.shape()[1]);
            let (xd, yd) = (x.data(), output.data());
            let mut dx = vec![T::zero(); bs * dim];
            for r in 0..bs {
                let xrow = &xd[r * dim..(r + 1) * dim];
                let yrow = &yd[r * dim..(r + 1) * dim];
                let grow = &gy[r * dim..(r + 1) * dim];
                let mut sq = T::zero();
                for v in xrow {
                    sq = sq + *v * *v;
                }
                let norm = sq.sqrt();
                let mut dot = T::zero();
                for (y, g) in yrow.iter().zip(grow) {
                    dot = dot + *y * *g;
                }
                let inv = T::one() / norm;
                for ((d, y), g) in dx[r * dim..(r + 1) * dim]
                    .iter_mut()
                    .zip(yrow)
                    .zip(grow)
                {
                    *d = (*g - *y * dot) * inv;
                }
            }
            vec![Some(dx)]
        }
        Op::MatmulNT => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, c) = (a.shape()[0], a.shape()[1]);
            let k = b.shape()[0];
            let (ad, bd) = (a.data(), b.data());
            let da = a.requires_grad().then(|| {
                let mut da = vec![T::zero(); m * c];
                for i in 0..m {
                    for j in 0..k {
                        let g = gy[i * k + j];
                        let brow = &bd[j * c..(j + 1) * c];
                        let drow = &mut da[i * c..(i + 1) * c];
                        for (dv, bv) in drow.iter_mut().zip(brow) {
                            *dv = *dv + g * *bv;
                        }
                    }
                }
                da
            });
            let db = b.requires_grad().then(|| {
                let mut db = vec![T::zero(); k * c];
                for i in 0..m {
                    let arow = &ad[i * c..(i + 1) * c];
                    for j in 0..k {
                        let g = gy[i * k + j];
                        let drow = &mut db[j * c..(j + 1) * c];
                        for (dv, av) in drow.iter_mut().zip(arow) {
                            *dv = *dv + g * *av;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::SelectRows(indices) => {
            let x = &inputs[0];
            let c = x.shape()[1];
            let mut dx = vec![T::zero(); x.numel()];
            for (pos, &row) in indices.iter().enumerate() {
                let src = &gy[pos * c..(pos + 1) * c];
                let dst = &mut dx[row * c..(row + 1) * c];
                for (d, g) in dst.iter_mut().zip(src) {
                    *d = *d + *g;
                }
            }
            vec![Some(dx)]
        }
        Op::ConcatRows => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let split = a.numel();
            let da = a.requires_grad().then(|| gy[..split].to_vec());
            let db = b.requires_grad().then(|| gy[split..].to_vec());
            vec![da, db]
        }
        Op::ChannelsToRows => {
            let x = &inputs[0];
            let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..bs {
                for ci in 0..c {
                    let dst = (b * c + ci) * h * w;
                    let src = b * h * w;
                    for hw in 0..h * w {
                        dx[dst + hw] = gy[(src + hw) * c + ci];
                    }
                }
            }
            vec![Some(dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::with_grad(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = t(&[1, 1, 2, 2], &[1.; 4]);
        let w = t(&[1, 1, 2, 2], &[1.; 4]);
        let b = t(&[1], &[0.]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[1, 2, 3, 3], &[0.; 18]);
        let w = t(&[1, 3, 2, 2], &[0.; 12]);
        let b = t(&[1], &[0.]);
        let err = tape.conv2d(&x, &w, &b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[1, 1, 5, 5], &[1.; 25]);
        let w = t(&[1, 1, 3, 3], &[1.; 9]);
        let b = t(&[1], &[0.]);
        let y = tape.conv2d(&x, &w, &b, 2, 1).unwrap();
        // (5 + 2 - 3)/2 + 1 = 3
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        // Corner output (0,0) covers a 2x2 valid region.
        assert_eq!(y.data()[0], 4.0);
        // Center output covers the full 3x3 kernel.
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = t(&[3], &[-1., 0., 2.]);
        let y = tape.relu(&x);
        assert_eq!(y.data(), &[0., 0., 2.]);
    }

    #[test]
    fn upsample_nearest_replicates() {
        let mut tape = Tape::new();
        let x = t(&[1, 1, 1, 1], &[7.]);
        let y = tape.upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[7., 7., 7., 7.]);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let mut tape = Tape::new();
        let x = t(&[1, 1, 2, 2], &[1., 5., 3., 2.]);
        let y = tape.maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = t(&[1, 2], &[3., 4.]);
        let y = tape.l2_normalize(&x).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_idempotent_on_unit_rows() {
        let mut tape = Tape::new();
        let x = t(&[1, 2], &[0.6, 0.8]);
        let y = tape.l2_normalize(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1., 1., 0., 0.]);
        assert!(matches!(
            tape.l2_normalize(&x),
            Err(crate::Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1.0, 0.0]);
        assert!(matches!(tape.log(&x), Err(crate::Error::Domain { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_of_elementwise_square() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1., 2.]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn tape_consumed_is_an_error() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1., 2.]);
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert!(matches!(
            tape.backward(&loss),
            Err(crate::Error::TapeConsumed)
        ));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1., 2.]);
        let y = tape.relu(&x);
        assert!(matches!(
            tape.backward(&y),
            Err(crate::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn empty_tape_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&x), Err(crate::Error::EmptyTape)));
    }

    #[test]
    fn unreachable_tensors_have_no_grad() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1., 2.]);
        let y = t(&[2], &[3., 4.]);
        let _unused = tape.relu(&y);
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).is_some());
        assert!(grads.get(&y).is_none());
    }

    #[test]
    fn backward_linearity() {
        // grad of (a*loss1 + b*loss2) == a*grad1 + b*grad2
        let xdata = [0.3, -1.2, 2.5];
        let (a, b) = (1.7, -0.4);

        let g1 = {
            let mut tape = Tape::new();
            let x = t(&[3], &xdata);
            let e = tape.exp(&x);
            let loss = tape.sum(&e);
            tape.backward(&loss).unwrap().get(&x).unwrap().to_vec()
        };
        let g2 = {
            let mut tape = Tape::new();
            let x = t(&[3], &xdata);
            let sq = tape.mul(&x, &x).unwrap();
            let loss = tape.sum(&sq);
            tape.backward(&loss).unwrap().get(&x).unwrap().to_vec()
        };
        let gc = {
            let mut tape = Tape::new();
            let x = t(&[3], &xdata);
            let e = tape.exp(&x);
            let loss1 = tape.sum(&e);
            let sq = tape.mul(&x, &x).unwrap();
            let loss2 = tape.sum(&sq);
            let s1 = tape.scalar_mul(&loss1, a);
            let s2 = tape.scalar_mul(&loss2, b);
            let loss = tape.add(&s1, &s2).unwrap();
            tape.backward(&loss).unwrap().get(&x).unwrap().to_vec()
        };
        for i in 0..3 {
            assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn select_concat_channels_round_trip() {
        let mut tape = Tape::new();
        let x = t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        // channel vectors per cell: (1,5), (2,6), (3,7), (4,8)
        let rows = tape.channels_to_rows(&x).unwrap();
        assert_eq!(rows.shape(), &[4, 2]);
        assert_eq!(rows.data(), &[1., 5., 2., 6., 3., 7., 4., 8.]);

        let picked = tape.select_rows(&rows, &[3, 0]).unwrap();
        assert_eq!(picked.data(), &[4., 8., 1., 5.]);

        let both = tape.concat_rows(&picked, &rows).unwrap();
        assert_eq!(both.shape(), &[6, 2]);

        let loss = tape.sum(&both);
        let grads = tape.backward(&loss).unwrap();
        // Every cell contributes once from `rows`, cells 0 and 3 once more.
        assert_eq!(grads.get(&x).unwrap(), &[2., 1., 1., 2., 2., 1., 1., 2.]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = t(&[2], &[1., 2.]);
        let _ = tape.relu(&x);
        assert_eq!(tape.num_records(), 0);
    }
}
