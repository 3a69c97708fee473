//! Differentiable operations. Each op computes its forward value and, when
//! any input is tape-tracked, records a backward closure that routes
//! gradient contributions to its inputs. Backward closures work on the
//! detached tensors they captured and never touch the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::attach;
use crate::tensor::{chw, rc, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ── Elementwise ──────────────────────────────────────────────────────

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), data);
    Ok(attach(&[a, b], out, move |g, sink| {
        sink(0, g.detached());
        sink(1, g.detached());
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), data);
    Ok(attach(&[a, b], out, move |g, sink| {
        sink(0, g.detached());
        let neg: Vec<T> = g.data().iter().map(|&v| -v).collect();
        sink(1, Tensor::from_parts(g.shape().to_vec(), neg));
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_parts(a.shape().to_vec(), data);
    let (ac, bc) = (a.detached(), b.detached());
    Ok(attach(&[a, b], out, move |g, sink| {
        let da: Vec<T> = g.data().iter().zip(bc.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
        sink(0, Tensor::from_parts(g.shape().to_vec(), da));
        let db: Vec<T> = g.data().iter().zip(ac.data().iter()).map(|(&gv, &av)| gv * av).collect();
        sink(1, Tensor::from_parts(g.shape().to_vec(), db));
    }))
}

fn unary<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    // derivative as a function of (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let out = Tensor::from_parts(x.shape().to_vec(), data);
    let (xc, yc) = (x.detached(), out.detached());
    attach(&[x], out, move |g, sink| {
        let dx: Vec<T> = g
            .data()
            .iter()
            .zip(xc.data().iter().zip(yc.data().iter()))
            .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
            .collect();
        sink(0, Tensor::from_parts(g.shape().to_vec(), dx));
    })
}

pub fn scale_const<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    unary(x, move |v| v * c, move |_, _| c)
}

/// `1 - x` elementwise.
pub fn one_minus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |v| T::one() - v, |_, _| -T::one())
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    unary(
        x,
        move |v| if v > T::zero() { v } else { slope * v },
        move |xv, _| if xv > T::zero() { T::one() } else { slope },
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        |v| {
            // split on sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        },
        |_, yv| yv * (T::one() - yv),
    )
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |v| v.tanh(), |_, yv| T::one() - yv * yv)
}

// ── Shape ────────────────────────────────────────────────────────────

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != x.len() {
        return Err(Error::dim(
            "reshape",
            format!("cannot view {:?} ({} values) as {:?}", x.shape(), x.len(), shape),
        ));
    }
    let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
    let orig = x.shape().to_vec();
    Ok(attach(&[x], out, move |g, sink| {
        sink(0, Tensor::from_parts(orig.clone(), g.data().to_vec()));
    }))
}

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = rc(x, "transpose2d")?;
    let mut data = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = x.data()[i * n + j];
        }
    }
    let out = Tensor::from_parts(vec![n, m], data);
    Ok(attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); m * n];
        for j in 0..n {
            for i in 0..m {
                dx[i * n + j] = g.data()[j * m + i];
            }
        }
        sink(0, Tensor::from_parts(vec![m, n], dx));
    }))
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::dim("concat", format!("axis {} out of rank {}", axis, rank)));
    }
    for p in parts {
        if p.rank() != rank {
            return Err(Error::dim("concat", "rank mismatch between parts".to_string()));
        }
        for (d, (&a, &b)) in p.shape().iter().zip(parts[0].shape().iter()).enumerate() {
            if d != axis && a != b {
                return Err(Error::dim(
                    "concat",
                    format!("axis {} differs: {:?} vs {:?}", d, p.shape(), parts[0].shape()),
                ));
            }
        }
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let axis_dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_axis: usize = axis_dims.iter().sum();

    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total_axis;
    let mut data = vec![T::zero(); outer * total_axis * inner];
    for o in 0..outer {
        let mut off = 0;
        for (p, &ad) in parts.iter().zip(axis_dims.iter()) {
            let src = &p.data()[o * ad * inner..(o + 1) * ad * inner];
            let dst_start = (o * total_axis + off) * inner;
            data[dst_start..dst_start + ad * inner].copy_from_slice(src);
            off += ad;
        }
    }
    let out = Tensor::from_parts(shape, data);
    let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
    let inputs: Vec<&Tensor<T>> = parts.to_vec();
    Ok(attach(&inputs, out, move |g, sink| {
        for (pi, pshape) in part_shapes.iter().enumerate() {
            let ad = pshape[axis];
            let mut dx = vec![T::zero(); pshape.iter().product()];
            let off: usize = part_shapes[..pi].iter().map(|s| s[axis]).sum();
            for o in 0..outer {
                let src_start = (o * total_axis + off) * inner;
                let dst_start = o * ad * inner;
                dx[dst_start..dst_start + ad * inner]
                    .copy_from_slice(&g.data()[src_start..src_start + ad * inner]);
            }
            sink(pi, Tensor::from_parts(pshape.clone(), dx));
        }
    }))
}

/// Contiguous row slice of a rank-2 tensor.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = rc(x, "slice_rows")?;
    if start + len > m {
        return Err(Error::dim(
            "slice_rows",
            format!("rows {}..{} out of {}", start, start + len, m),
        ));
    }
    let data = x.data()[start * n..(start + len) * n].to_vec();
    let out = Tensor::from_parts(vec![len, n], data);
    Ok(attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); m * n];
        dx[start * n..(start + len) * n].copy_from_slice(g.data());
        sink(0, Tensor::from_parts(vec![m, n], dx));
    }))
}

// ── Linear algebra ───────────────────────────────────────────────────

fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

// out[i,j] = sum_p a[i,p] * b[j,p]   (a: m×k, b: n×k)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

// out[p,j] = sum_i a[i,p] * b[i,j]   (a: m×k, b: m×n, out: k×n)
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = rc(a, "matmul")?;
    let (k2, n) = rc(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("inner dims {} vs {}", k, k2)));
    }
    let out = Tensor::from_parts(vec![m, n], mm_nn(a.data(), b.data(), m, k, n));
    let (ac, bc) = (a.detached(), b.detached());
    Ok(attach(&[a, b], out, move |g, sink| {
        sink(0, Tensor::from_parts(vec![m, k], mm_nt(g.data(), bc.data(), m, n, k)));
        sink(1, Tensor::from_parts(vec![k, n], mm_tn(ac.data(), g.data(), m, k, n)));
    }))
}

// ── Softmax / max / reductions ───────────────────────────────────────

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = *x.shape().last().expect("softmax on rank >= 1");
    let rows = x.len() / cols;
    let mut data = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            data[r * cols + j] = e;
            sum = sum + e;
        }
        for j in 0..cols {
            data[r * cols + j] = data[r * cols + j] / sum;
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), data);
    let yc = out.detached();
    attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); g.len()];
        for r in 0..rows {
            let y = &yc.data()[r * cols..(r + 1) * cols];
            let gr = &g.data()[r * cols..(r + 1) * cols];
            let mut dot = T::zero();
            for j in 0..cols {
                dot = dot + gr[j] * y[j];
            }
            for j in 0..cols {
                dx[r * cols + j] = y[j] * (gr[j] - dot);
            }
        }
        sink(0, Tensor::from_parts(g.shape().to_vec(), dx));
    })
}

/// Max over the last axis; ties resolve to the lowest index (the
/// subgradient is routed to that element).
pub fn max_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = *x.shape().last().expect("max on rank >= 1");
    let rows = x.len() / cols;
    let mut data = vec![T::zero(); rows];
    let mut arg = vec![0usize; rows];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mut best = row[0];
        let mut bi = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = j;
            }
        }
        data[r] = best;
        arg[r] = bi;
    }
    let mut shape = x.shape().to_vec();
    shape.pop();
    if shape.is_empty() {
        shape.push(1);
    }
    let out = Tensor::from_parts(shape, data);
    attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); rows * cols];
        for r in 0..rows {
            dx[r * cols + arg[r]] = g.data()[r];
        }
        sink(0, Tensor::from_parts(vec![rows, cols], dx));
    })
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = T::zero();
    for &v in x.data() {
        s = s + v;
    }
    let out = Tensor::scalar(s);
    let shape = x.shape().to_vec();
    attach(&[x], out, move |g, sink| {
        sink(0, Tensor::full(&shape, g.value()));
    })
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_usize(x.len());
    let mut s = T::zero();
    for &v in x.data() {
        s = s + v;
    }
    let out = Tensor::scalar(s / n);
    let shape = x.shape().to_vec();
    attach(&[x], out, move |g, sink| {
        sink(0, Tensor::full(&shape, g.value() / n));
    })
}

// ── Vector utilities (scores, one-hot selection) ─────────────────────

/// Select elements of a rank-1 tensor.
pub fn gather<T: Scalar>(v: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if v.rank() != 1 {
        return Err(Error::dim("gather", format!("expected rank-1, got {:?}", v.shape())));
    }
    let n = v.len();
    for &i in idx {
        if i >= n {
            return Err(Error::dim("gather", format!("index {} out of length {}", i, n)));
        }
    }
    let data: Vec<T> = idx.iter().map(|&i| v.data()[i]).collect();
    let out = Tensor::from_parts(vec![idx.len()], data);
    let idx = idx.to_vec();
    Ok(attach(&[v], out, move |g, sink| {
        let mut dv = vec![T::zero(); n];
        for (pos, &i) in idx.iter().enumerate() {
            dv[i] = dv[i] + g.data()[pos];
        }
        sink(0, Tensor::from_parts(vec![n], dv));
    }))
}

/// Place the elements of `v` at `idx` inside a zero vector of length `n`.
pub fn scatter<T: Scalar>(v: &Tensor<T>, idx: &[usize], n: usize) -> Result<Tensor<T>> {
    if v.rank() != 1 || v.len() != idx.len() {
        return Err(Error::dim(
            "scatter",
            format!("value shape {:?} vs {} indices", v.shape(), idx.len()),
        ));
    }
    let mut data = vec![T::zero(); n];
    for (pos, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::dim("scatter", format!("index {} out of length {}", i, n)));
        }
        data[i] = v.data()[pos];
    }
    let out = Tensor::from_parts(vec![n], data);
    let idx = idx.to_vec();
    Ok(attach(&[v], out, move |g, sink| {
        let dv: Vec<T> = idx.iter().map(|&i| g.data()[i]).collect();
        sink(0, Tensor::from_parts(vec![idx.len()], dv));
    }))
}

/// Multiply a tensor by a single-element tensor (product rule on both).
pub fn scale_by<T: Scalar>(s: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if !s.is_scalar() {
        return Err(Error::dim("scale_by", format!("scale must be scalar, got {:?}", s.shape())));
    }
    let sv = s.value();
    let data: Vec<T> = x.data().iter().map(|&v| sv * v).collect();
    let out = Tensor::from_parts(x.shape().to_vec(), data);
    let xc = x.detached();
    Ok(attach(&[s, x], out, move |g, sink| {
        let mut ds = T::zero();
        for (&gv, &xv) in g.data().iter().zip(xc.data().iter()) {
            ds = ds + gv * xv;
        }
        sink(0, Tensor::scalar(ds));
        let dx: Vec<T> = g.data().iter().map(|&gv| sv * gv).collect();
        sink(1, Tensor::from_parts(g.shape().to_vec(), dx));
    }))
}

/// Straight-through hard selection: the forward value is the one-hot
/// argmax of `a_soft` (ties to the lowest index); the backward pass is the
/// identity, i.e. gradients flow exactly as if `a_soft` had been used.
pub fn straight_through<T: Scalar>(a_soft: &Tensor<T>) -> Result<Tensor<T>> {
    if a_soft.rank() != 1 {
        return Err(Error::dim(
            "straight_through",
            format!("expected rank-1 weights, got {:?}", a_soft.shape()),
        ));
    }
    let mut bi = 0usize;
    let mut best = a_soft.data()[0];
    for (j, &v) in a_soft.data().iter().enumerate().skip(1) {
        if v > best {
            best = v;
            bi = j;
        }
    }
    let mut data = vec![T::zero(); a_soft.len()];
    data[bi] = T::one();
    let out = Tensor::from_parts(vec![a_soft.len()], data);
    Ok(attach(&[a_soft], out, move |g, sink| {
        sink(0, g.detached());
    }))
}

// ── Convolution / upsampling ─────────────────────────────────────────

/// 2-D cross-correlation with square odd kernel, per-output-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, win) = chw(x, "conv2d")?;
    let ws = w.shape();
    let (cout, wcin, kh, kw) = match ws {
        [a, b2, c, d] => (*a, *b2, *c, *d),
        _ => return Err(Error::dim("conv2d", format!("kernel must be rank-4, got {:?}", ws))),
    };
    if kh != kw {
        return Err(Error::dim("conv2d", format!("kernel must be square, got {}x{}", kh, kw)));
    }
    if kh % 2 == 0 {
        return Err(Error::Contract(format!("kernel size must be odd, got {}", kh)));
    }
    if wcin != cin {
        return Err(Error::dim(
            "conv2d",
            format!("input channels {} vs kernel input channels {}", cin, wcin),
        ));
    }
    if b.shape() != [cout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias shape {:?} vs output channels {}", b.shape(), cout),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let k = kh;
    if h + 2 * pad < k || win + 2 * pad < k {
        return Err(Error::dim(
            "conv2d",
            format!("input {}x{} too small for kernel {} with pad {}", h, win, k, pad),
        ));
    }
    // floor output convention: windows that run off the padded edge are dropped
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;

    let out_data = conv_forward(x.data(), w.data(), b.data(), cin, h, win, cout, k, stride, pad, ho, wo);
    let out = Tensor::from_parts(vec![cout, ho, wo], out_data);

    let (xc, wc) = (x.detached(), w.detached());
    Ok(attach(&[x, w, b], out, move |g, sink| {
        let (dx, dw, db) =
            conv_backward(g.data(), xc.data(), wc.data(), cin, h, win, cout, k, stride, pad, ho, wo);
        sink(0, Tensor::from_parts(vec![cin, h, win], dx));
        sink(1, Tensor::from_parts(vec![cout, cin, k, k], dw));
        sink(2, Tensor::from_parts(vec![cout], db));
    }))
}

/// For a kernel offset, the output index range whose sampled input index
/// stays within [0, size).
fn valid_range(kofs: usize, pad: usize, stride: usize, size: usize, osize: usize) -> (usize, usize) {
    // input index = o*stride + kofs - pad must lie in [0, size)
    let lo = if kofs >= pad { 0 } else { (pad - kofs + stride - 1) / stride };
    if kofs > size - 1 + pad {
        return (0, 0); // offset never lands inside the input
    }
    let hi = ((size - 1 + pad - kofs) / stride + 1).min(osize);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * ho * wo];
    for co in 0..cout {
        let ochan = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for v in ochan.iter_mut() {
            *v = b[co];
        }
        for ci in 0..cin {
            let xchan = &x[ci * h * win..(ci + 1) * h * win];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = valid_range(kx, pad, stride, win, wo);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xchan[iy * win..(iy + 1) * win];
                        let orow = &mut ochan[oy * wo..(oy + 1) * wo];
                        for ox in x0..x1 {
                            let ix = ox * stride + kx - pad;
                            orow[ox] = orow[ox] + wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); cin * h * win];
    let mut dw = vec![T::zero(); cout * cin * k * k];
    let mut db = vec![T::zero(); cout];
    for co in 0..cout {
        let gchan = &g[co * ho * wo..(co + 1) * ho * wo];
        let mut bacc = T::zero();
        for &gv in gchan.iter() {
            bacc = bacc + gv;
        }
        db[co] = bacc;
        for ci in 0..cin {
            let xchan = &x[ci * h * win..(ci + 1) * h * win];
            let dxchan_base = ci * h * win;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..k {
                    let (x0, x1) = valid_range(kx, pad, stride, win, wo);
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let mut wacc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xchan[iy * win..(iy + 1) * win];
                        let grow = &gchan[oy * wo..(oy + 1) * wo];
                        let dxrow = &mut dx[dxchan_base + iy * win..dxchan_base + (iy + 1) * win];
                        for ox in x0..x1 {
                            let ix = ox * stride + kx - pad;
                            let gv = grow[ox];
                            wacc = wacc + gv * xrow[ix];
                            dxrow[ix] = dxrow[ix] + gv * wv;
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] = wacc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Bilinear 2× upsampling (half-pixel centers, edges clamped).
pub fn bilinear_up2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "bilinear_up2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let half = T::from_f64(0.5);
    // per-output-axis sample: (src floor index, weight of the +1 neighbor)
    let plan = |osize: usize, isize_: usize| -> Vec<(usize, usize, T)> {
        (0..osize)
            .map(|o| {
                let src = (T::from_usize(o) + half) * half - half;
                let src = if src < T::zero() { T::zero() } else { src };
                let max = T::from_usize(isize_ - 1);
                let src = if src > max { max } else { src };
                let i0 = (src.floor().to_f64() as usize).min(isize_ - 1);
                let i1 = (i0 + 1).min(isize_ - 1);
                let frac = src - T::from_usize(i0);
                (i0, i1, frac)
            })
            .collect()
    };
    let ys = plan(ho, h);
    let xs = plan(wo, w);
    let mut data = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let xc = &x.data()[ch * h * w..(ch + 1) * h * w];
        let oc = &mut data[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let one = T::one();
                let v = xc[y0 * w + x0] * (one - fy) * (one - fx)
                    + xc[y0 * w + x1] * (one - fy) * fx
                    + xc[y1 * w + x0] * fy * (one - fx)
                    + xc[y1 * w + x1] * fy * fx;
                oc[oy * wo + ox] = v;
            }
        }
    }
    let out = Tensor::from_parts(vec![c, ho, wo], data);
    Ok(attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let gc = &g.data()[ch * ho * wo..(ch + 1) * ho * wo];
            let dc = &mut dx[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let gv = gc[oy * wo + ox];
                    let one = T::one();
                    dc[y0 * w + x0] = dc[y0 * w + x0] + gv * (one - fy) * (one - fx);
                    dc[y0 * w + x1] = dc[y0 * w + x1] + gv * (one - fy) * fx;
                    dc[y1 * w + x0] = dc[y1 * w + x0] + gv * fy * (one - fx);
                    dc[y1 * w + x1] = dc[y1 * w + x1] + gv * fy * fx;
                }
            }
        }
        sink(0, Tensor::from_parts(vec![c, h, w], dx));
    }))
}

// ── Normalization ────────────────────────────────────────────────────

/// Group normalization over C×H×W with per-channel affine.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {} channels not divisible by {} groups",
            c, groups
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "group_norm",
            format!("gamma {:?} / beta {:?} vs {} channels", gamma.shape(), beta.shape(), c),
        ));
    }
    let cg = c / groups;
    let gn = cg * h * w; // elements per group
    let gn_t = T::from_usize(gn);

    let mut xhat = vec![T::zero(); c * h * w];
    let mut inv_std = vec![T::zero(); groups];
    for gi in 0..groups {
        let span = gi * gn..(gi + 1) * gn;
        let mut mean = T::zero();
        for &v in &x.data()[span.clone()] {
            mean = mean + v;
        }
        mean = mean / gn_t;
        let mut var = T::zero();
        for &v in &x.data()[span.clone()] {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / gn_t;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[gi] = istd;
        for (o, &v) in span.clone().zip(x.data()[span.clone()].iter()) {
            xhat[o] = (v - mean) * istd;
        }
    }
    let mut data = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in ch * h * w..(ch + 1) * h * w {
            data[i] = gm * xhat[i] + bt;
        }
    }
    let out = Tensor::from_parts(vec![c, h, w], data);
    let gammac = gamma.detached();
    Ok(attach(&[x, gamma, beta], out, move |g, sink| {
        let hw = h * w;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let mut dg = T::zero();
            let mut db = T::zero();
            for i in ch * hw..(ch + 1) * hw {
                dg = dg + g.data()[i] * xhat[i];
                db = db + g.data()[i];
            }
            dgamma[ch] = dg;
            dbeta[ch] = db;
        }
        let mut dx = vec![T::zero(); c * hw];
        for gi in 0..groups {
            let span = gi * gn..(gi + 1) * gn;
            // dxhat = g * gamma (channel-wise)
            let mut dxhat = vec![T::zero(); gn];
            for (local, o) in span.clone().enumerate() {
                let ch = o / hw;
                dxhat[local] = g.data()[o] * gammac.data()[ch];
            }
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for (local, o) in span.clone().enumerate() {
                mean_dxhat = mean_dxhat + dxhat[local];
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat[local] * xhat[o];
            }
            mean_dxhat = mean_dxhat / gn_t;
            mean_dxhat_xhat = mean_dxhat_xhat / gn_t;
            for (local, o) in span.clone().enumerate() {
                dx[o] = inv_std[gi] * (dxhat[local] - mean_dxhat - xhat[o] * mean_dxhat_xhat);
            }
        }
        sink(0, Tensor::from_parts(vec![c, h, w], dx));
        sink(1, Tensor::from_parts(vec![c], dgamma));
        sink(2, Tensor::from_parts(vec![c], dbeta));
    }))
}

/// Normalize each pixel's channel vector to unit length; `eps` sits under
/// the square root so zero vectors map to zero.
pub fn l2_normalize_channels<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x, "l2_normalize")?;
    let hw = h * w;
    let mut data = vec![T::zero(); c * hw];
    let mut inv_norm = vec![T::zero(); hw];
    for p in 0..hw {
        let mut s = T::zero();
        for ch in 0..c {
            let v = x.data()[ch * hw + p];
            s = s + v * v;
        }
        let inv = T::one() / (s + eps).sqrt();
        inv_norm[p] = inv;
        for ch in 0..c {
            data[ch * hw + p] = x.data()[ch * hw + p] * inv;
        }
    }
    let out = Tensor::from_parts(vec![c, h, w], data);
    let xc = x.detached();
    Ok(attach(&[x], out, move |g, sink| {
        let mut dx = vec![T::zero(); c * hw];
        for p in 0..hw {
            let inv = inv_norm[p];
            let inv3 = inv * inv * inv;
            let mut gx = T::zero();
            for ch in 0..c {
                gx = gx + g.data()[ch * hw + p] * xc.data()[ch * hw + p];
            }
            for ch in 0..c {
                dx[ch * hw + p] =
                    g.data()[ch * hw + p] * inv - xc.data()[ch * hw + p] * gx * inv3;
            }
        }
        sink(0, Tensor::from_parts(vec![c, h, w], dx));
    }))
}

// ── Losses ───────────────────────────────────────────────────────────

/// Mean per-pixel negative log-likelihood of `labels` under the softmax of
/// class-axis-first logits (C×H×W).
pub fn cross_entropy_pixel<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (c, h, w) = chw(logits, "cross_entropy")?;
    let hw = h * w;
    if labels.len() != hw {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels vs {} pixels", labels.len(), hw),
        ));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::Contract(format!("label {} out of {} classes", l, c)));
        }
    }
    let np = T::from_usize(hw);
    let mut probs = vec![T::zero(); c * hw];
    let mut total = T::zero();
    for p in 0..hw {
        let mut mx = logits.data()[p];
        for ch in 1..c {
            let v = logits.data()[ch * hw + p];
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (logits.data()[ch * hw + p] - mx).exp();
            probs[ch * hw + p] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            probs[ch * hw + p] = probs[ch * hw + p] / sum;
        }
        let lse = mx + sum.ln();
        total = total + lse - logits.data()[labels[p] * hw + p];
    }
    let out = Tensor::scalar(total / np);
    let labels = labels.to_vec();
    Ok(attach(&[logits], out, move |g, sink| {
        let gv = g.value() / np;
        let mut dl = vec![T::zero(); c * hw];
        for p in 0..hw {
            for ch in 0..c {
                let ind = if ch == labels[p] { T::one() } else { T::zero() };
                dl[ch * hw + p] = (probs[ch * hw + p] - ind) * gv;
            }
        }
        sink(0, Tensor::from_parts(vec![c, hw / w, w], dl));
    }))
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mse", a, b)?;
    let n = T::from_usize(a.len());
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        s = s + d * d;
    }
    let out = Tensor::scalar(s / n);
    let (ac, bc) = (a.detached(), b.detached());
    Ok(attach(&[a, b], out, move |g, sink| {
        let two = T::from_f64(2.0);
        let scale = two * g.value() / n;
        let da: Vec<T> =
            ac.data().iter().zip(bc.data().iter()).map(|(&x, &y)| (x - y) * scale).collect();
        let db: Vec<T> = da.iter().map(|&v| -v).collect();
        sink(0, Tensor::from_parts(ac.shape().to_vec(), da));
        sink(1, Tensor::from_parts(bc.shape().to_vec(), db));
    }))
}

pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mae", a, b)?;
    let n = T::from_usize(a.len());
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        s = s + (x - y).abs();
    }
    let out = Tensor::scalar(s / n);
    let (ac, bc) = (a.detached(), b.detached());
    Ok(attach(&[a, b], out, move |g, sink| {
        let scale = g.value() / n;
        let da: Vec<T> = ac
            .data()
            .iter()
            .zip(bc.data().iter())
            .map(|(&x, &y)| {
                let d = x - y;
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let db: Vec<T> = da.iter().map(|&v| -v).collect();
        sink(0, Tensor::from_parts(ac.shape().to_vec(), da));
        sink(1, Tensor::from_parts(bc.shape().to_vec(), db));
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradientTape;

    #[test]
    fn conv_scalar_multiply() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i as f64) * 0.37 - 1.0);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert!(y.value_eq(&x));
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[3, 5, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
        // window larger than padded input
        let w = Tensor::zeros(&[3, 2, 5, 5]);
        let b5 = Tensor::zeros(&[3]);
        assert!(conv2d(&x, &w, &b5, 1, 0).is_err());
        // even kernel size
        let tiny = Tensor::<f64>::zeros(&[1, 4, 4]);
        let even = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&tiny, &even, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn softmax_symmetry_and_dominance() {
        let y = softmax_last(&Tensor::<f64>::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        assert_eq!(y.data(), &[0.5, 0.5]);

        let y = softmax_last(&Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap());
        assert!((y.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((y.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);

        let y = softmax_last(&Tensor::<f64>::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn group_norm_constant_input_and_affine_collapse() {
        let x = Tensor::full(&[4, 3, 3], 7.0);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let y = group_norm(&x, 2, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_fn(&[4, 3, 3], |i| (i as f64).sin());
        let y = group_norm(&x, 2, &Tensor::zeros(&[4]), &Tensor::full(&[4], 5.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));

        assert!(group_norm(&x, 3, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn group_norm_statistics() {
        let x = Tensor::from_fn(&[4, 3, 3], |i| ((i * 37 % 11) as f64) * 0.3 - 1.2);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let y = group_norm(&x, 2, &gamma, &beta, 1e-12).unwrap();
        for gi in 0..2 {
            let vals = &y.data()[gi * 18..(gi + 1) * 18];
            let mean: f64 = vals.iter().sum::<f64>() / 18.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-10, "group mean {}", mean);
            assert!((var - 1.0).abs() < 1e-6, "group var {}", var);
        }
    }

    #[test]
    fn straight_through_forward_is_argmax_with_low_tie() {
        let a = Tensor::from_vec(&[2], vec![0.7, 0.3]).unwrap();
        assert_eq!(straight_through(&a).unwrap().data(), &[1.0, 0.0]);
        let a = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(straight_through(&a).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn straight_through_backward_is_identity_on_linear_downstream() {
        // f = c . st(softmax(s)); analytic grad equals the finite-difference
        // gradient of the soft path because f is linear in the weights.
        let c = [0.3, -1.1, 0.7];
        let s0 = [0.2, 0.9, -0.4];
        let f_soft = |s: &[f64]| {
            let sm = softmax_last(&Tensor::from_vec(&[3], s.to_vec()).unwrap());
            sm.data().iter().zip(c.iter()).map(|(&a, &b)| a * b).sum::<f64>()
        };
        let tape = GradientTape::<f64>::new();
        let s = tape.var(&Tensor::from_vec(&[3], s0.to_vec()).unwrap());
        let sm = softmax_last(&s);
        let hard = straight_through(&sm).unwrap();
        let cv = Tensor::from_vec(&[3], c.to_vec()).unwrap();
        let loss = sum_all(&mul(&hard, &cv).unwrap());
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.wrt(&s).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut sp = s0;
            sp[i] += eps;
            let mut sm2 = s0;
            sm2[i] -= eps;
            let numeric = (f_soft(&sp) - f_soft(&sm2)) / (2.0 * eps);
            assert!(
                (analytic.data()[i] - numeric).abs() < 1e-7,
                "coord {}: {} vs {}",
                i,
                analytic.data()[i],
                numeric
            );
        }
    }

    #[test]
    fn concat_and_gather_roundtrip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let v = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = gather(&v, &[3, 1]).unwrap();
        assert_eq!(g.data(), &[4.0, 2.0]);
        let s = scatter(&g, &[3, 1], 4).unwrap();
        assert_eq!(s.data(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn losses_match_closed_form() {
        let a = Tensor::<f64>::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.0, 0.2, 0.5, 0.0]).unwrap();
        assert!((mse(&a, &b).unwrap().value() - (0.01 + 0.0 + 0.04 + 0.16) / 4.0).abs() < 1e-15);
        assert!((mae(&a, &b).unwrap().value() - (0.1 + 0.0 + 0.2 + 0.4) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_preserves_constant() {
        let x = Tensor::full(&[2, 3, 3], 4.5);
        let y = bilinear_up2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 4.5f64).abs() < 1e-12));
    }

    #[test]
    fn l2_normalize_zero_vectors_stay_zero() {
        let x = Tensor::zeros(&[3, 2, 2]);
        let y = l2_normalize_channels(&x, 1e-12).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::from_vec(&[2, 1, 1], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize_channels(&x, 1e-12).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-9 && (y.data()[1] - 0.8).abs() < 1e-9);
    }
}
