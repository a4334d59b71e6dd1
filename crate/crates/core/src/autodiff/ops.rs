use super::{invalid, Tensor, TensorError};
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// broadcasting elementwise arithmetic

/// Numpy-style right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat output index, the flat index of the operand it reads.
fn broadcast_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..operand.len()).rev() {
        let oi = i + rank - operand.len();
        strides[oi] = if operand[i] == 1 { 0 } else { s };
        s *= operand[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to<T: Scalar>(grad: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += *g;
    }
    out
}

#[derive(Clone, Copy)]
enum Arith {
    Add,
    Sub,
    Mul,
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: Arith) -> Result<Tensor<T>> {
    let name = match kind {
        Arith::Add => "add",
        Arith::Sub => "sub",
        Arith::Mul => "mul_elem",
    };
    if a.shape() == b.shape() {
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = match kind {
            Arith::Add => ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect(),
            Arith::Sub => ad.iter().zip(bd.iter()).map(|(&x, &y)| x - y).collect(),
            Arith::Mul => ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect(),
        };
        let saved = matches!(kind, Arith::Mul).then(|| (ad.clone(), bd.clone()));
        drop((ad, bd));
        return Ok(Tensor::from_op(
            a.shape().to_vec(),
            data,
            name,
            vec![a.clone(), b.clone()],
            Box::new(move |g, needs| match (&saved, kind) {
                (Some((x, y)), _) => vec![
                    needs[0].then(|| g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(x).map(|(&g, &x)| g * x).collect()),
                ],
                (None, Arith::Sub) => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())],
                (None, _) => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            }),
        ));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: name,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let ma = broadcast_map(&out_shape, a.shape());
    let mb = broadcast_map(&out_shape, b.shape());
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| match kind {
            Arith::Add => ad[i] + bd[j],
            Arith::Sub => ad[i] - bd[j],
            Arith::Mul => ad[i] * bd[j],
        })
        .collect();
    let saved = matches!(kind, Arith::Mul).then(|| (ad.clone(), bd.clone()));
    drop((ad, bd));
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(
        out_shape,
        data,
        name,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| match &saved {
                Some((_, y)) => {
                    let prod: Vec<T> = g.iter().zip(&mb).map(|(&g, &j)| g * y[j]).collect();
                    reduce_to(&prod, &ma, na)
                }
                None => reduce_to(g, &ma, na),
            });
            let gb = needs[1].then(|| match (&saved, kind) {
                (Some((x, _)), _) => {
                    let prod: Vec<T> = g.iter().zip(&ma).map(|(&g, &i)| g * x[i]).collect();
                    reduce_to(&prod, &mb, nb)
                }
                (None, Arith::Sub) => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    reduce_to(&neg, &mb, nb)
                }
                (None, _) => reduce_to(g, &mb, nb),
            });
            vec![ga, gb]
        }),
    ))
}

/// Elementwise sum with right-aligned broadcasting.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, Arith::Add)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, Arith::Sub)
}

/// Elementwise (Hadamard) product with right-aligned broadcasting.
pub fn mul_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, Arith::Mul)
}

pub fn scalar_mul<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = a.data().iter().map(|&v| v * s).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "scalar_mul",
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
    )
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = a.data().iter().map(|&v| v + s).collect();
    Tensor::from_op(a.shape().to_vec(), data, "add_scalar", vec![a.clone()], Box::new(|g, _| vec![Some(g.to_vec())]))
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

/// `max(x, 0)`; the subgradient at zero is zero.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mask = super::kinks::filter(x.data().iter().map(|&v| v > T::zero()).collect());
    let data: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "relu",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect())]),
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        "sigmoid",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(&g, &s)| g * s * (T::one() - s)).collect())]),
    )
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sqrt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|&v| v < T::zero()) {
        return Err(invalid("sqrt", "negative input"));
    }
    let data: Vec<T> = x.data().iter().map(|v| v.sqrt()).collect();
    let saved = data.clone();
    let half = T::of(0.5);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        "sqrt",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(&g, &s)| g * half / s).collect())]),
    ))
}

// ---------------------------------------------------------------------------
// reductions and reshaping

/// Sum of all elements, shape `[1]`.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(vec![1], vec![s], "sum", vec![x.clone()], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
}

/// Mean of all elements, shape `[1]`.
pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::one() / T::of_usize(n);
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op(vec![1], vec![s * inv], "mean", vec![x.clone()], Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]))
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.numel() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ShapeMismatch { op: "reshape", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), "reshape", vec![x.clone()], Box::new(|g, _| vec![Some(g.to_vec())])))
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    reshape(x, &[n, x.numel() / n])
}

fn nchw(op: &'static str, x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid(op, format!("expected rank-4 NCHW input, got {:?}", x.shape()))),
    }
}

/// Spatial mean of each channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("global_avg_pool", x)?;
    let hw = h * w;
    let inv = T::one() / T::of_usize(hw);
    let data: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_op(
        vec![n, c],
        data,
        "global_avg_pool",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(hw)).collect())]),
    ))
}

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("avg_pool2d", x)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(invalid("avg_pool2d", format!("window {k} does not tile {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::of_usize(k * k);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * ow + xx / k] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        "avg_pool2d",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[p * h * w + y * w + xx] = g[p * oh * ow + (y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("upsample_nearest", x)?;
    if factor == 0 {
        return Err(invalid("upsample_nearest", "factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(xd[p * h * w + (y / factor) * w + xx / factor]);
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        "upsample_nearest",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        gx[p * h * w + (y / factor) * w + xx / factor] += g[p * oh * ow + y * ow + xx];
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Rows of `x` (along the first axis) in the order given by `indices`.
pub fn index_select_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    if indices.is_empty() {
        return Err(invalid("index_select_rows", "no indices"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(invalid("index_select_rows", format!("index {bad} out of range for {n} rows")));
    }
    let row = x.numel() / n;
    let xd = x.data();
    let data: Vec<T> = indices.iter().flat_map(|&i| xd[i * row..(i + 1) * row].iter().copied()).collect();
    drop(xd);
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        shape,
        data,
        "index_select_rows",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * row];
            for (k, &i) in idx.iter().enumerate() {
                gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(a, &b)| *a += b);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Concatenate `[N, D_i]` matrices along the feature axis.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat_cols", "nothing to concatenate"))?;
    let n = first.shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        match *p.shape() {
            [rows, d] if rows == n => widths.push(d),
            _ => {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs: first.shape().to_vec(), rhs: p.shape().to_vec() })
            }
        }
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for (p, &d) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, total],
        data,
        "concat_cols",
        parts.to_vec(),
        Box::new(move |g, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&d, &need)| {
                    let o = offset;
                    offset += d;
                    need.then(|| (0..n).flat_map(|r| g[r * total + o..r * total + o + d].iter().copied()).collect())
                })
                .collect()
        }),
    ))
}

/// Columns `start..start + len` of an `[N, D]` matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, d) = match *x.shape() {
        [n, d] if len > 0 && start + len <= d => (n, d),
        _ => return Err(invalid("slice_cols", format!("columns {start}..{} of {:?}", start + len, x.shape()))),
    };
    let xd = x.data();
    let data: Vec<T> = (0..n).flat_map(|r| xd[r * d + start..r * d + start + len].iter().copied()).collect();
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, len],
        data,
        "slice_cols",
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n * d];
            for r in 0..n {
                gx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(gx)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// linear algebra and convolution

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        _ => return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }),
    };
    let (ad, bd) = (a.to_vec(), b.to_vec());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let row = &bd[p * n..(p + 1) * n];
            out[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        "matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            // dA = G B^T, dB = A^T G
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(o, &gv)| *o += av * gv);
                    }
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Range of output columns `ox` whose input column `ox*stride + kx - pad` is inside `[0, w)`.
    fn valid_range(&self, k: usize, out: usize, inp: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // ox*s + off >= 0  and  ox*s + off < inp
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((inp as isize - off) + s - 1) / s;
        (lo as usize, (hi.max(0) as usize).min(out))
    }
}

/// 2-D cross-correlation of an NCHW batch with a `[Cout, Cin, KH, KW]` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (n, cin, h, w) = nchw("conv2d", x)?;
    let (cout, kcin, kh, kw) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(invalid("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape()))),
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: kernel.shape().to_vec() });
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(invalid(
            "conv2d",
            format!("non-integral output size for {h}x{w} input, {kh}x{kw} kernel, stride {stride}, padding {padding}"),
        ));
    }
    let geo = ConvGeom { n, cin, h, w, cout, kh, kw, oh: (ph - kh) / stride + 1, ow: (pw - kw) / stride + 1, stride, pad: padding };
    let xd = x.to_vec();
    let kd = kernel.to_vec();
    let out = conv_forward(&geo, &xd, &kd);
    Ok(Tensor::from_op(
        vec![n, cout, geo.oh, geo.ow],
        out,
        "conv2d",
        vec![x.clone(), kernel.clone()],
        Box::new(move |g, needs| {
            vec![needs[0].then(|| conv_grad_input(&geo, g, &kd)), needs[1].then(|| conv_grad_kernel(&geo, g, &xd))]
        }),
    ))
}

fn conv_forward<T: Scalar>(geo: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let ConvGeom { n, cin, h, w, cout, kh, kw, oh, ow, stride, pad } = *geo;
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (ylo, yhi) = geo.valid_range(ky, oh, h);
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        let (xlo, xhi) = geo.valid_range(kx, ow, w);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            let srow = &src[iy * w..(iy + 1) * w];
                            for ox in xlo..xhi {
                                drow[ox] += wv * srow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input<T: Scalar>(geo: &ConvGeom, g: &[T], k: &[T]) -> Vec<T> {
    let ConvGeom { n, cin, h, w, cout, kh, kw, oh, ow, stride, pad } = *geo;
    let mut gx = vec![T::zero(); n * cin * h * w];
    for b in 0..n {
        for co in 0..cout {
            let gsrc = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let dst = &mut gx[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (ylo, yhi) = geo.valid_range(ky, oh, h);
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        let (xlo, xhi) = geo.valid_range(kx, ow, w);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            for ox in xlo..xhi {
                                dst[iy * w + ox * stride + kx - pad] += wv * gsrc[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_grad_kernel<T: Scalar>(geo: &ConvGeom, g: &[T], x: &[T]) -> Vec<T> {
    let ConvGeom { n, cin, h, w, cout, kh, kw, oh, ow, stride, pad } = *geo;
    let mut gk = vec![T::zero(); cout * cin * kh * kw];
    for b in 0..n {
        for co in 0..cout {
            let gsrc = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    let (ylo, yhi) = geo.valid_range(ky, oh, h);
                    for kx in 0..kw {
                        let (xlo, xhi) = geo.valid_range(kx, ow, w);
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - pad;
                            for ox in xlo..xhi {
                                acc += gsrc[oy * ow + ox] * src[iy * w + ox * stride + kx - pad];
                            }
                        }
                        gk[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    gk
}

// ---------------------------------------------------------------------------
// gradient-manipulating pseudo-ops

/// Identity forward; backward multiplies the upstream gradient by `-lambda`.
pub fn grad_reverse<T: Scalar>(x: &Tensor<T>, lambda: T) -> Tensor<T> {
    Tensor::from_op(
        x.shape().to_vec(),
        x.to_vec(),
        "grad_reverse",
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|&v| -(lambda * v)).collect())]),
    )
}

/// Identity forward; the result is a fresh constant so no gradient reaches `x`.
pub fn stop_gradient<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.detach()
}

// ---------------------------------------------------------------------------
// normalization kernels

/// Per-(sample, channel) normalization followed by a per-(sample, channel)
/// affine map: `gamma * (x - mu) / sqrt(var + eps) + beta`.
///
/// `gamma` and `beta` are `[N, C]`; statistics use the biased variance over
/// the spatial positions of each channel.
pub fn adain<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("adain", x)?;
    for p in [gamma, beta] {
        if p.shape() != [n, c] {
            return Err(TensorError::ShapeMismatch { op: "adain", lhs: x.shape().to_vec(), rhs: p.shape().to_vec() });
        }
    }
    let hw = h * w;
    let (xhat, inv_std) = normalize_groups(&x.data(), n * c, hw, eps);
    let (gd, bd) = (gamma.to_vec(), beta.to_vec());
    let out: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| gd[i / hw] * v + bd[i / hw]).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "adain",
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); g.len()]);
            let mut gg = needs[1].then(|| vec![T::zero(); n * c]);
            let mut gb = needs[2].then(|| vec![T::zero(); n * c]);
            let inv_hw = T::one() / T::of_usize(hw);
            for p in 0..n * c {
                let gs = &g[p * hw..(p + 1) * hw];
                let xs = &xhat[p * hw..(p + 1) * hw];
                let sum_g: T = gs.iter().copied().sum();
                let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                if let Some(gg) = gg.as_mut() {
                    gg[p] = sum_gx;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[p] = sum_g;
                }
                if let Some(gx) = gx.as_mut() {
                    let scale = gd[p] * inv_std[p];
                    let (mg, mgx) = (sum_g * inv_hw, sum_gx * inv_hw);
                    for i in 0..hw {
                        gx[p * hw + i] = scale * (gs[i] - mg - xs[i] * mgx);
                    }
                }
            }
            vec![gx, gg, gb]
        }),
    ))
}

/// Normalizes `groups` contiguous runs of length `len`; returns the
/// normalized values and `1/sqrt(var + eps)` per group.
fn normalize_groups<T: Scalar>(x: &[T], groups: usize, len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_len = T::one() / T::of_usize(len);
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(groups);
    for p in 0..groups {
        let s = &x[p * len..(p + 1) * len];
        let mu = s.iter().copied().sum::<T>() * inv_len;
        let var = s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_len;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        out.extend(s.iter().map(|&v| (v - mu) * is));
    }
    (out, inv_std)
}

/// Batch statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode batch normalization over (N, H, W) per channel, followed by
/// the per-channel affine `scale`, `shift` (both `[C]`).
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, h, w) = nchw("batch_norm", x)?;
    for p in [scale, shift] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: x.shape().to_vec(), rhs: p.shape().to_vec() });
        }
    }
    if n < 2 {
        return Err(invalid("batch_norm", "training mode needs a batch of at least 2 samples"));
    }
    let hw = h * w;
    let m = n * hw;
    let inv_m = T::one() / T::of_usize(m);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_m);
    for b in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (sd, hd) = (scale.to_vec(), shift.to_vec());
    let mut xhat = Vec::with_capacity(xd.len());
    let mut out = Vec::with_capacity(xd.len());
    for (i, &v) in xd.iter().enumerate() {
        let ch = (i / hw) % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        xhat.push(xh);
        out.push(sd[ch] * xh + hd[ch]);
    }
    drop(xd);
    let y = Tensor::from_op(
        x.shape().to_vec(),
        out,
        "batch_norm",
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(move |g, needs| {
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
                let ch = (i / hw) % c;
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xh;
            }
            let gx = needs[0].then(|| {
                g.iter()
                    .zip(&xhat)
                    .enumerate()
                    .map(|(i, (&gv, &xh))| {
                        let ch = (i / hw) % c;
                        sd[ch] * inv_std[ch] * (gv - sum_g[ch] * inv_m - xh * sum_gx[ch] * inv_m)
                    })
                    .collect()
            });
            vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
        }),
    );
    Ok((y, BatchStats { mean, var }))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = nchw("batch_norm", x)?;
    if scale.shape() != [c] || shift.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: x.shape().to_vec(), rhs: scale.shape().to_vec() });
    }
    let hw = h * w;
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let rm = running_mean.to_vec();
    let xd = x.to_vec();
    let (sd, hd) = (scale.to_vec(), shift.to_vec());
    let out = xd
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            sd[ch] * (v - rm[ch]) * inv_std[ch] + hd[ch]
        })
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "batch_norm_infer",
        vec![x.clone(), scale.clone(), shift.clone()],
        Box::new(move |g, needs| {
            let chan = |i: usize| (i / hw) % c;
            let gx = needs[0].then(|| g.iter().enumerate().map(|(i, &gv)| gv * sd[chan(i)] * inv_std[chan(i)]).collect());
            let mut gs = vec![T::zero(); c];
            let mut gh = vec![T::zero(); c];
            for (i, &gv) in g.iter().enumerate() {
                let ch = chan(i);
                gs[ch] += gv * (xd[i] - rm[ch]) * inv_std[ch];
                gh[ch] += gv;
            }
            vec![gx, needs[1].then_some(gs), needs[2].then_some(gh)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// losses

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(invalid("cross_entropy", format!("logits must be [N, K], got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(invalid("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
    }
    let ld = logits.data();
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &ld[r * k..(r + 1) * k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[label];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    drop(ld);
    let inv_n = T::one() / T::of_usize(n);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss * inv_n],
        "cross_entropy",
        vec![logits.clone()],
        Box::new(move |g, _| {
            let s = g[0] * inv_n;
            let mut gl: Vec<T> = probs.iter().map(|&p| p * s).collect();
            for (r, &label) in labels.iter().enumerate() {
                gl[r * k + label] -= s;
            }
            vec![Some(gl)]
        }),
    ))
}

/// Mean of squared differences over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch { op: "mse", lhs: pred.shape().to_vec(), rhs: target.shape().to_vec() });
    }
    let diff: Vec<T> = pred.data().iter().zip(target.data().iter()).map(|(&p, &t)| p - t).collect();
    let inv_n = T::one() / T::of_usize(diff.len());
    let loss = diff.iter().map(|&d| d * d).sum::<T>() * inv_n;
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        "mse",
        vec![pred.clone(), target.clone()],
        Box::new(move |g, needs| {
            let s = T::of(2.0) * g[0] * inv_n;
            vec![
                needs[0].then(|| diff.iter().map(|&d| d * s).collect()),
                needs[1].then(|| diff.iter().map(|&d| -d * s).collect()),
            ]
        }),
    ))
}

/// Rowwise negative cosine similarity `-(a/|a|)·(b/|b|)` of two `[N, D]`
/// matrices, with each norm floored at `eps`. Returns `[N]`.
pub fn neg_cosine_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, d) = match (a.shape(), b.shape()) {
        (&[n, d], &[n2, d2]) if n == n2 && d == d2 => (n, d),
        _ => return Err(TensorError::ShapeMismatch { op: "neg_cosine_rows", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }),
    };
    let (ad, bd) = (a.to_vec(), b.to_vec());
    let mut stats = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
        let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        let sa: T = ar.iter().map(|&x| x * x).sum();
        let sb: T = br.iter().map(|&x| x * x).sum();
        // a floored norm is a constant with respect to its vector
        let eps2 = eps * eps;
        let (fa2, fb2) = (sa.max(eps2), sb.max(eps2));
        // sqrt(s * s) == s exactly, so identical rows give exactly -1
        let denom = (fa2 * fb2).sqrt();
        stats.push((dot, fa2, fb2, denom, sa >= eps2, sb >= eps2));
        out.push(-dot / denom);
    }
    Ok(Tensor::from_op(
        vec![n],
        out,
        "neg_cosine_rows",
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); n * d]);
            let mut gb = needs[1].then(|| vec![T::zero(); n * d]);
            for r in 0..n {
                let (dot, fa2, fb2, denom, a_live, b_live) = stats[r];
                let (ar, br) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                let s = -g[r] / denom;
                if let Some(ga) = ga.as_mut() {
                    let corr = if a_live { dot / fa2 } else { T::zero() };
                    for j in 0..d {
                        ga[r * d + j] = s * (br[j] - ar[j] * corr);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let corr = if b_live { dot / fb2 } else { T::zero() };
                    for j in 0..d {
                        gb[r * d + j] = s * (ar[j] - br[j] * corr);
                    }
                }
            }
            vec![ga, gb]
        }),
    ))
}
