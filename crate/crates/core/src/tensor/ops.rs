use super::{shape_err, Result, Tensor};

/// Numpy-style broadcast of two shapes: dimensions are right-aligned and each
/// pair must be equal or contain a 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    "broadcast",
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn reduce_to(src_len: usize, idx: Option<&[usize]>, values: impl Iterator<Item = f32>) -> Vec<f32> {
    match idx {
        None => values.collect(),
        Some(idx) => {
            let mut acc = vec![0f64; src_len];
            for (&i, v) in idx.iter().zip(values) {
                acc[i] += v as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let shape = if a.shape == b.shape {
        a.shape.clone()
    } else {
        broadcast_shapes(&a.shape, &b.shape)?
    };
    let same_a = a.shape == shape;
    let same_b = b.shape == shape;
    let ia = (!same_a).then(|| broadcast_index(&shape, &a.shape));
    let ib = (!same_b).then(|| broadcast_index(&shape, &b.shape));
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data.clone(), b.data.clone());
    let get = |d: &[f32], idx: &Option<Vec<usize>>, o: usize| match idx {
        Some(idx) => d[idx[o]],
        None => d[o],
    };
    let data: Vec<f32> = (0..n)
        .map(|o| {
            let (x, y) = (get(&ad, &ia, o), get(&bd, &ib, o));
            match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            }
        })
        .collect();
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::record(&[a, b], shape, data, move |g, needs| {
        let ga = needs[0].then(|| {
            let vals = (0..g.len()).map(|o| match kind {
                Binary::Add | Binary::Sub => g[o],
                Binary::Mul => g[o] * get(&bd, &ib, o),
            });
            reduce_to(na, ia.as_deref(), vals)
        });
        let gb = needs[1].then(|| {
            let vals = (0..g.len()).map(|o| match kind {
                Binary::Add => g[o],
                Binary::Sub => -g[o],
                Binary::Mul => g[o] * get(&ad, &ia, o),
            });
            reduce_to(nb, ib.as_deref(), vals)
        });
        vec![ga, gb]
    }))
}

fn unary<F, D>(x: &Tensor, f: F, df: D) -> Tensor
where
    F: Fn(f32) -> f32,
    D: Fn(f32, f32) -> f32 + 'static,
{
    let data: Vec<f32> = x.data.iter().map(|&v| f(v)).collect();
    let input = x.data.clone();
    let out = std::sync::Arc::new(data.clone());
    Tensor::record(&[x], x.shape.clone(), data, move |g, _| {
        vec![Some(
            g.iter()
                .zip(input.iter().zip(out.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect(),
        )]
    })
}

fn sigmoid_f32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f32(x: f32) -> f32 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = op(a)·op(b) + beta·c` for row-major storage, where `op` optionally
/// transposes. `op(a)` is m×k, `op(b)` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_raw(
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    gemm(m, k, n, a, a_t, b, b_t, 0.0, &mut out);
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    /// Calls `f(y_out, y_in, x_out_range, x_in_start)` for every row/column
    /// overlap of kernel tap (ky, kx) under "same" zero padding.
    #[inline]
    fn for_rows(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let x0 = pw.saturating_sub(kx);
        let x1 = (self.w + pw).saturating_sub(kx).min(self.w);
        if x0 >= x1 {
            return;
        }
        let xin0 = x0 + kx - pw;
        for y in 0..self.h {
            let yi = y + ky;
            if yi < ph || yi - ph >= self.h {
                continue;
            }
            f(y, yi - ph, x0, x1, xin0);
        }
    }
}

impl ConvDims {
    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Unfolds one (C, H, W) image into a (C·kh·kw, H·W) patch matrix.
    fn im2col(&self, src: &[f32], col: &mut [f32]) {
        let plane = self.h * self.w;
        col.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.c {
            let img = &src[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[((ci * self.kh + ky) * self.kw + kx) * plane..][..plane];
                    self.for_rows(ky, kx, |y, yi, x0, x1, xi0| {
                        row[y * self.w + x0..y * self.w + x1].copy_from_slice(
                            &img[yi * self.w + xi0..yi * self.w + xi0 + (x1 - x0)],
                        );
                    });
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates patch gradients.
    fn col2im(&self, col: &[f32], dst: &mut [f32]) {
        let plane = self.h * self.w;
        for ci in 0..self.c {
            let img = &mut dst[ci * plane..(ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[((ci * self.kh + ky) * self.kw + kx) * plane..][..plane];
                    self.for_rows(ky, kx, |y, yi, x0, x1, xi0| {
                        let o = &mut img[yi * self.w + xi0..yi * self.w + xi0 + (x1 - x0)];
                        for (o, &s) in o.iter_mut().zip(&row[y * self.w + x0..y * self.w + x1]) {
                            *o += s;
                        }
                    });
                }
            }
        }
    }
}

fn conv_forward(input: &[f32], weight: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let plane = d.h * d.w;
    let mut out = vec![0f32; d.n * d.o * plane];
    let mut col = vec![0f32; d.taps() * plane];
    for ni in 0..d.n {
        d.im2col(&input[ni * d.c * plane..(ni + 1) * d.c * plane], &mut col);
        let dst = &mut out[ni * d.o * plane..(ni + 1) * d.o * plane];
        if let Some(b) = bias {
            for (oi, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = b[oi]);
            }
        }
        gemm(d.o, d.taps(), plane, weight, false, &col, false, 1.0, dst);
    }
    out
}

fn conv_backward_input(g: &[f32], weight: &[f32], d: &ConvDims) -> Vec<f32> {
    let plane = d.h * d.w;
    let mut gin = vec![0f32; d.n * d.c * plane];
    let mut col = vec![0f32; d.taps() * plane];
    for ni in 0..d.n {
        gemm(
            d.taps(),
            d.o,
            plane,
            weight,
            true,
            &g[ni * d.o * plane..],
            false,
            0.0,
            &mut col,
        );
        d.col2im(&col, &mut gin[ni * d.c * plane..(ni + 1) * d.c * plane]);
    }
    gin
}

fn conv_backward_weight(g: &[f32], input: &[f32], d: &ConvDims) -> Vec<f32> {
    let plane = d.h * d.w;
    let mut gw = vec![0f32; d.o * d.taps()];
    let mut col = vec![0f32; d.taps() * plane];
    for ni in 0..d.n {
        d.im2col(&input[ni * d.c * plane..(ni + 1) * d.c * plane], &mut col);
        gemm(
            d.o,
            plane,
            d.taps(),
            &g[ni * d.o * plane..],
            false,
            &col,
            true,
            1.0,
            &mut gw,
        );
    }
    gw
}

fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [(Option<usize>, f32); 4] {
    // (u, v) are continuous coordinates with pixel centers at i + 0.5.
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let at = |xi: f64, yi: f64| -> Option<usize> {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            None
        } else {
            Some(yi as usize * w + xi as usize)
        }
    };
    [
        (at(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (at(x0 + 1.0, y0), fx * (1.0 - fy)),
        (at(x0, y0 + 1.0), (1.0 - fx) * fy),
        (at(x0 + 1.0, y0 + 1.0), fx * fy),
    ]
}

fn project(m: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = m[6] * x + m[7] * y + m[8];
    (
        (m[0] * x + m[1] * y + m[2]) / w,
        (m[3] * x + m[4] * y + m[5]) / w,
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine_scalar(&self, scale: f32, shift: f32) -> Tensor {
        unary(self, |x| scale * x + shift, move |_, _| scale)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_f32, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus_f32, |x, _| sigmoid_f32(x))
    }

    /// Clamp to [0, 1]; gradient passes through inside the interval.
    pub fn clamp01(&self) -> Tensor {
        unary(
            self,
            |x| x.clamp(0.0, 1.0),
            |x, _| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data.iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::record(&[self], vec![], vec![total as f32], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        let total: f64 = self.data.iter().map(|&v| v as f64).sum();
        let len = self.numel();
        Tensor::record(
            &[self],
            vec![],
            vec![(total / n as f64) as f32],
            move |g, _| vec![Some(vec![g[0] / n as f32; len])],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::record(
            &[self],
            shape.to_vec(),
            self.to_vec(),
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start >= end || end > self.shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{end} on {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let take = end - start;
        let mut data = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&self.data[base..base + take * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = take;
        let n = self.numel();
        Ok(Tensor::record(&[self], shape, data, move |g, _| {
            let mut gi = vec![0f32; n];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                gi[base..base + take * inner]
                    .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no tensors"))?;
        if axis >= first.rank() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} on {:?}", first.shape),
            ));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::record(&refs, shape, data, move |g, needs| {
            let mut out: Vec<Option<Vec<f32>>> = lens
                .iter()
                .zip(needs)
                .map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &l) in out.iter_mut().zip(&lens) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            out
        }))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err("transpose", format!("rank {}", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let data = transpose_raw(&self.data, r, c);
        Ok(Tensor::record(&[self], vec![c, r], data, move |g, _| {
            vec![Some(transpose_raw(g, c, r))]
        }))
    }

    /// (m×k)·(k×n) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = matmul_raw(&self.data, false, &other.data, false, m, k, n);
        let (ad, bd) = (self.data.clone(), other.data.clone());
        Ok(Tensor::record(
            &[self, other],
            vec![m, n],
            data,
            move |g, needs| {
                let ga = needs[0].then(|| matmul_raw(g, false, &bd, true, m, n, k));
                let gb = needs[1].then(|| matmul_raw(&ad, true, g, false, k, m, n));
                vec![ga, gb]
            },
        ))
    }

    /// 2-D convolution (cross-correlation), stride 1, zero "same" padding.
    /// `self`: (N, C, H, W); `weight`: (O, C, kh, kw) with odd kernel sizes;
    /// `bias`: (O).
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 || weight.shape[1] != self.shape[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape, weight.shape),
            ));
        }
        if weight.shape[2].is_multiple_of(2) || weight.shape[3].is_multiple_of(2) {
            return Err(shape_err("conv2d", "kernel sizes must be odd"));
        }
        if let Some(b) = bias {
            if b.shape != [weight.shape[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", b.shape, weight.shape[0]),
                ));
            }
        }
        let d = ConvDims {
            n: self.shape[0],
            c: self.shape[1],
            h: self.shape[2],
            w: self.shape[3],
            o: weight.shape[0],
            kh: weight.shape[2],
            kw: weight.shape[3],
        };
        let data = conv_forward(
            &self.data,
            &weight.data,
            bias.map(|b| b.data.as_slice()),
            &d,
        );
        let shape = vec![d.n, d.o, d.h, d.w];
        let (xd, wd) = (self.data.clone(), weight.data.clone());
        let plane = d.h * d.w;
        let backward = move |g: &[f32], needs: &[bool]| {
            let gx = needs[0].then(|| conv_backward_input(g, &wd, &d));
            let gw = needs[1].then(|| conv_backward_weight(g, &xd, &d));
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    let mut gb = vec![0f64; d.o];
                    for ni in 0..d.n {
                        for (oi, gb) in gb.iter_mut().enumerate() {
                            let s = &g[(ni * d.o + oi) * plane..(ni * d.o + oi + 1) * plane];
                            *gb += s.iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    gb.into_iter().map(|v| v as f32).collect()
                }));
            }
            out
        };
        Ok(match bias {
            Some(b) => Tensor::record(&[self, weight, b], shape, data, backward),
            None => Tensor::record(&[self, weight], shape, data, backward),
        })
    }

    /// 2×2 max pooling with stride 2 over (N, C, H, W); odd trailing rows or
    /// columns are dropped.
    pub fn max_pool2d(&self) -> Result<Tensor> {
        if self.rank() != 4 || self.shape[2] < 2 || self.shape[3] < 2 {
            return Err(shape_err("max_pool2d", format!("input {:?}", self.shape)));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if self.data[i] > self.data[best] {
                            best = i;
                        }
                    }
                    data.push(self.data[best]);
                    argmax.push(best);
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::record(
            &[self],
            vec![n, c, oh, ow],
            data,
            move |g, _| {
                let mut gi = vec![0f32; len];
                for (&i, &g) in argmax.iter().zip(g) {
                    gi[i] += g;
                }
                vec![Some(gi)]
            },
        ))
    }

    /// Bilinear resampling of (N, C, H, W) through one 3×3 row-major
    /// projective map per batch element. Each map takes output pixel-center
    /// coordinates to continuous input coordinates (pixel centers at i + 0.5).
    /// Samples falling outside the input read as zero.
    pub fn affine_grid_sample(
        &self,
        transforms: &[[f64; 9]],
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        if self.rank() != 4 || transforms.len() != self.shape[0] {
            return Err(shape_err(
                "affine_grid_sample",
                format!(
                    "input {:?} with {} transforms",
                    self.shape,
                    transforms.len()
                ),
            ));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let mut taps = Vec::with_capacity(n * out_h * out_w);
        for m in transforms {
            for y in 0..out_h {
                for x in 0..out_w {
                    let (u, v) = project(m, x as f64 + 0.5, y as f64 + 0.5);
                    taps.push(if u.is_finite() && v.is_finite() {
                        bilinear_taps(u, v, w, h)
                    } else {
                        [(None, 0.0); 4]
                    });
                }
            }
        }
        let (ip, op) = (h * w, out_h * out_w);
        let mut data = vec![0f32; n * c * op];
        for ni in 0..n {
            for ci in 0..c {
                let src = &self.data[(ni * c + ci) * ip..(ni * c + ci + 1) * ip];
                let dst = &mut data[(ni * c + ci) * op..(ni * c + ci + 1) * op];
                for (o, t) in dst.iter_mut().zip(&taps[ni * op..(ni + 1) * op]) {
                    *o = t.iter().filter_map(|&(i, wt)| i.map(|i| src[i] * wt)).sum();
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::record(
            &[self],
            vec![n, c, out_h, out_w],
            data,
            move |g, _| {
                let mut gi = vec![0f32; len];
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = &mut gi[(ni * c + ci) * ip..(ni * c + ci + 1) * ip];
                        let gs = &g[(ni * c + ci) * op..(ni * c + ci + 1) * op];
                        for (&g, t) in gs.iter().zip(&taps[ni * op..(ni + 1) * op]) {
                            for &(i, wt) in t {
                                if let Some(i) = i {
                                    dst[i] += g * wt;
                                }
                            }
                        }
                    }
                }
                vec![Some(gi)]
            },
        ))
    }
}
