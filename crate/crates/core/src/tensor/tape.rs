use super::{Result, Tensor, TensorError};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    AvgPool3d {
        x: Var,
        k: usize,
    },
    Upsample3d {
        x: Var,
        k: usize,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    SoftDvh {
        dose: Var,
        voxels: Vec<usize>,
        edges: Vec<f64>,
        steepness: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Every operation appends a node; [`Tape::backward`] replays the nodes in
/// reverse order. Gradients of leaves accumulate across repeated `backward`
/// calls until [`Tape::zero_grad`] is called. A tape is meant to be rebuilt
/// for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mismatch(op: &'static str, expected: &[usize], found: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w, d] => Ok([c, h, w, d]),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a [C, H, W, D] volume, found {shape:?}"),
        }),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match *shape {
        [m, n] => Ok([m, n]),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a matrix, found {shape:?}"),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Output positions `o < out` whose input tap `o * stride + k - 1` lies in `[0, extent)`.
fn tap_range(k: usize, extent: usize, out: usize, stride: usize) -> std::ops::Range<usize> {
    let lo = usize::from(k == 0);
    // largest o with o * stride + k - 1 <= extent - 1
    let hi = if extent + 1 > k { ((extent - k) / stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

/// 3×3×3 convolution with zero padding of one voxel.
fn conv3d_forward(
    x: &[f64],
    [cin, h, w, d]: [usize; 4],
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (ho, wo, dout) = (
        conv_out_extent(h, stride),
        conv_out_extent(w, stride),
        conv_out_extent(d, stride),
    );
    let osz = ho * wo * dout;
    let mut out = vec![0.0; cout * osz];
    for co in 0..cout {
        let oc = &mut out[co * osz..(co + 1) * osz];
        oc.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let xc = &x[ci * h * w * d..(ci + 1) * h * w * d];
            for kx in 0..3 {
                for ky in 0..3 {
                    for kz in 0..3 {
                        let wv = weight[(((co * cin + ci) * 3 + kx) * 3 + ky) * 3 + kz];
                        let zr = tap_range(kz, d, dout, stride);
                        for ox in tap_range(kx, h, ho, stride) {
                            let ix = ox * stride + kx - 1;
                            for oy in tap_range(ky, w, wo, stride) {
                                let iy = oy * stride + ky - 1;
                                let orow = &mut oc[(ox * wo + oy) * dout..(ox * wo + oy + 1) * dout];
                                let ibase = (ix * w + iy) * d;
                                if stride == 1 {
                                    let xs = &xc[ibase + zr.start + kz - 1..ibase + zr.end + kz - 1];
                                    for (o, &xv) in orow[zr.clone()].iter_mut().zip(xs) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for oz in zr.clone() {
                                        orow[oz] += wv * xc[ibase + oz * stride + kz - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [cout, ho, wo, dout])
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
fn conv3d_backward(
    x: &[f64],
    [cin, h, w, d]: [usize; 4],
    weight: &[f64],
    g: &[f64],
    [cout, ho, wo, dout]: [usize; 4],
    stride: usize,
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let osz = ho * wo * dout;
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; weight.len()] } else { Vec::new() };
    let gb: Vec<f64> = (0..cout)
        .map(|co| g[co * osz..(co + 1) * osz].iter().sum())
        .collect();
    for co in 0..cout {
        let gc = &g[co * osz..(co + 1) * osz];
        for ci in 0..cin {
            let off = ci * h * w * d;
            for kx in 0..3 {
                for ky in 0..3 {
                    for kz in 0..3 {
                        let widx = (((co * cin + ci) * 3 + kx) * 3 + ky) * 3 + kz;
                        let wv = weight[widx];
                        let zr = tap_range(kz, d, dout, stride);
                        let mut wacc = 0.0;
                        for ox in tap_range(kx, h, ho, stride) {
                            let ix = ox * stride + kx - 1;
                            for oy in tap_range(ky, w, wo, stride) {
                                let iy = oy * stride + ky - 1;
                                let grow = &gc[(ox * wo + oy) * dout..(ox * wo + oy + 1) * dout];
                                let ibase = off + (ix * w + iy) * d;
                                if stride == 1 {
                                    let lo = ibase + zr.start + kz - 1;
                                    let hi = ibase + zr.end + kz - 1;
                                    let gs = &grow[zr.clone()];
                                    if need_w {
                                        wacc += gs.iter().zip(&x[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if need_x {
                                        for (gxv, &gv) in gx[lo..hi].iter_mut().zip(gs) {
                                            *gxv += gv * wv;
                                        }
                                    }
                                } else {
                                    for oz in zr.clone() {
                                        let xi = ibase + oz * stride + kz - 1;
                                        let gv = grow[oz];
                                        wacc += gv * x[xi];
                                        if need_x {
                                            gx[xi] += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [m, n] = dims2("transpose", xv.shape())?;
        let out = Tensor::new(vec![n, m], transpose_raw(xv.data(), m, n))?;
        let rg = self.rg(x);
        self.push("transpose", out, Op::Transpose(x), rg)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [m, k] = dims2("matmul", av.shape())?;
        let [k2, n] = dims2("matmul", bv.shape())?;
        if k != k2 {
            return Err(mismatch("matmul", &[k, n], bv.shape()));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting each row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [m, n] = dims2("softmax_rows", xv.shape())?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(x);
        self.push("softmax_rows", out, Op::SoftmaxRows(x), rg)
    }

    /// Mean over non-overlapping `k×k×k` blocks of a `[C, H, W, D]` volume.
    pub fn avg_pool3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w, d] = dims3("avg_pool3d", xv.shape())?;
        if k == 0 || h % k != 0 || w % k != 0 || d % k != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool3d",
                msg: format!("extents {:?} not divisible by pooling factor {k}", [h, w, d]),
            });
        }
        let (ho, wo, dout) = (h / k, w / k, d / k);
        let mut out = vec![0.0; c * ho * wo * dout];
        let xs = xv.data();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let ibase = ((ch * h + i) * w + j) * d;
                    let obase = ((ch * ho + i / k) * wo + j / k) * dout;
                    for l in 0..d {
                        out[obase + l / k] += xs[ibase + l];
                    }
                }
            }
        }
        let inv = 1.0 / (k * k * k) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![c, ho, wo, dout], out)?;
        let rg = self.rg(x);
        self.push("avg_pool3d", out, Op::AvgPool3d { x, k }, rg)
    }

    /// Nearest-neighbour upsampling of a `[C, H, W, D]` volume by `k` per axis.
    pub fn upsample_nearest3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w, d] = dims3("upsample_nearest3d", xv.shape())?;
        if k == 0 {
            return Err(TensorError::Invalid {
                op: "upsample_nearest3d",
                msg: "factor must be positive".into(),
            });
        }
        let (ho, wo, dout) = (h * k, w * k, d * k);
        let xs = xv.data();
        let mut out = Vec::with_capacity(c * ho * wo * dout);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let ibase = ((ch * h + i / k) * w + j / k) * d;
                    out.extend((0..dout).map(|l| xs[ibase + l / k]));
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo, dout], out)?;
        let rg = self.rg(x);
        self.push("upsample_nearest3d", out, Op::Upsample3d { x, k }, rg)
    }

    /// `out[.., c] = scale[c] * x[.., c] + bias[c]`: a depthwise 1×1×1
    /// convolution over channel-last tokens.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&1);
        for p in [scale, bias] {
            if self.shape(p) != [c] {
                return Err(mismatch("channel_affine", &[c], self.shape(p)));
            }
        }
        let (s, b) = (self.value(scale).data(), self.value(bias).data());
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(move |(ch, &v)| s[ch] * v + b[ch]))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(bias);
        self.push("channel_affine", out, Op::ChannelAffine { x, scale, bias }, rg)
    }

    /// Normalizes each row over its last axis, then applies a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("layer_norm", &[c], self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / c;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (ch, &v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                xhat.push(n);
                data.push(g[ch] * n + b[ch]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Concatenates `[P, C_i]` matrices along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = dims2("concat_cols", self.shape(*first))?[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let [r, c] = dims2("concat_cols", self.shape(x))?;
            if r != rows {
                return Err(mismatch("concat_cols", &[rows, c], &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push("concat_cols", out, Op::ConcatCols(xs.to_vec()), rg)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = dims2("slice_cols", xv.shape())?;
        if width == 0 || start + width > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {cols}", start + width),
            });
        }
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, width], data)?;
        let rg = self.rg(x);
        self.push("slice_cols", out, Op::SliceCols { x, start }, rg)
    }

    /// 3×3×3 convolution, zero padding 1, of a `[Cin, H, W, D]` volume with
    /// weights `[Cout, Cin, 3, 3, 3]` and bias `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let dims = dims3("conv3d", xv.shape())?;
        let ws = self.shape(w);
        let cout = ws.first().copied().unwrap_or(0);
        if ws != [cout, dims[0], 3, 3, 3] {
            return Err(mismatch("conv3d", &[cout, dims[0], 3, 3, 3], ws));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch("conv3d", &[cout], self.shape(b)));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: "stride must be positive".into(),
            });
        }
        let (data, oshape) = conv3d_forward(
            xv.data(),
            dims,
            self.value(w).data(),
            self.value(b).data(),
            cout,
            stride,
        );
        let out = Tensor::new(oshape.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("conv3d", out, Op::Conv3d { x, w, b, stride }, rg)
    }

    /// Sigmoid-relaxed cumulative dose-volume histogram.
    ///
    /// `out[t] = (1/|M|) * sum_{v in M} sigmoid(steepness * (dose[v] - edges[t]))`,
    /// where `mask` must be binary and non-empty with the same element count as `dose`.
    pub fn soft_dvh(&mut self, dose: Var, mask: &[f64], edges: &[f64], steepness: f64) -> Result<Var> {
        let dv = self.value(dose);
        if mask.len() != dv.numel() {
            return Err(mismatch("soft_dvh", dv.shape(), &[mask.len()]));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(TensorError::Invalid {
                op: "soft_dvh",
                msg: "mask must be binary".into(),
            });
        }
        let voxels: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 1.0).collect();
        if voxels.is_empty() {
            return Err(TensorError::Invalid {
                op: "soft_dvh",
                msg: "empty mask".into(),
            });
        }
        if edges.is_empty() {
            return Err(TensorError::Invalid {
                op: "soft_dvh",
                msg: "no bin edges".into(),
            });
        }
        let inv = 1.0 / voxels.len() as f64;
        let ds = dv.data();
        let data = edges
            .iter()
            .map(|&e| voxels.iter().map(|&v| sigmoid(steepness * (ds[v] - e))).sum::<f64>() * inv)
            .collect();
        let out = Tensor::new(vec![edges.len()], data)?;
        let rg = self.rg(dose);
        self.push(
            "soft_dvh",
            out,
            Op::SoftDvh {
                dose,
                voxels,
                edges: edges.to_vec(),
                steepness,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output. Leaf gradients accumulate into the
    /// tape's gradient slots; call [`Tape::zero_grad`] between steps to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    let shape = node.value.shape().to_vec();
                    match &mut self.grads[id] {
                        Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(Tensor::new(shape, g)?),
                    }
                }
                Op::Add(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    }
                    if rg(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let gb = g.iter().zip(val(b)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], gb);
                    }
                    if rg(b) {
                        let ga = g.iter().zip(val(a)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], ga);
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], g.iter().map(|v| v * s).collect()),
                Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], g),
                Op::Square(x) => {
                    let gx = g.iter().zip(val(x)).map(|(gv, xv)| 2.0 * xv * gv).collect();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sum(x) => accumulate(&mut grads[x.0], vec![g[0]; nodes[x.0].value.numel()]),
                Op::Sigmoid(x) => {
                    let out = node.value.data();
                    let gx = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Softplus(x) => {
                    let gx = g.iter().zip(val(x)).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Silu(x) => {
                    let gx = g
                        .iter()
                        .zip(val(x))
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Transpose(x) => {
                    let [m, n] = dims2("transpose", node.value.shape())?;
                    accumulate(&mut grads[x.0], transpose_raw(&g, m, n));
                }
                Op::MatMul(a, b) => {
                    let [m, k] = dims2("matmul", nodes[a.0].value.shape())?;
                    let n = node.value.shape()[1];
                    if rg(a) {
                        let bt = transpose_raw(val(b), k, n);
                        accumulate(&mut grads[a.0], matmul_raw(&g, &bt, m, n, k));
                    }
                    if rg(b) {
                        let at = transpose_raw(val(a), m, k);
                        accumulate(&mut grads[b.0], matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::SoftmaxRows(x) => {
                    let n = node.value.shape()[1];
                    let mut gx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(n).zip(node.value.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        gx.extend(grow.iter().zip(yrow).map(|(gv, y)| y * (gv - dot)));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::AvgPool3d { x, k } => {
                    let [c, h, w, d] = dims3("avg_pool3d", nodes[x.0].value.shape())?;
                    let (wo, dout) = (w / k, d / k);
                    let ho = h / k;
                    let inv = 1.0 / (k * k * k) as f64;
                    let mut gx = vec![0.0; c * h * w * d];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let ibase = ((ch * h + i) * w + j) * d;
                                let obase = ((ch * ho + i / k) * wo + j / k) * dout;
                                for l in 0..d {
                                    gx[ibase + l] = g[obase + l / k] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Upsample3d { x, k } => {
                    let [c, h, w, d] = dims3("upsample_nearest3d", nodes[x.0].value.shape())?;
                    let (ho, wo, dout) = (h * k, w * k, d * k);
                    let mut gx = vec![0.0; c * h * w * d];
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let obase = ((ch * ho + i) * wo + j) * dout;
                                let ibase = ((ch * h + i / k) * w + j / k) * d;
                                for l in 0..dout {
                                    gx[ibase + l / k] += g[obase + l];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ChannelAffine { x, scale, bias } => {
                    let s = val(scale);
                    let c = s.len();
                    if rg(x) {
                        let gx = g
                            .chunks(c)
                            .flat_map(|row| row.iter().zip(s).map(|(gv, sv)| gv * sv))
                            .collect();
                        accumulate(&mut grads[x.0], gx);
                    }
                    if rg(scale) {
                        let mut gs = vec![0.0; c];
                        for (grow, xrow) in g.chunks(c).zip(val(x).chunks(c)) {
                            for ch in 0..c {
                                gs[ch] += grow[ch] * xrow[ch];
                            }
                        }
                        accumulate(&mut grads[scale.0], gs);
                    }
                    if rg(bias) {
                        let mut gb = vec![0.0; c];
                        for grow in g.chunks(c) {
                            gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = val(gamma);
                    let c = gam.len();
                    if rg(x) {
                        let mut gx = Vec::with_capacity(g.len());
                        for ((grow, nrow), is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                            let gg: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let m1 = gg.iter().sum::<f64>() / c as f64;
                            let m2 = gg.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            gx.extend(gg.iter().zip(nrow).map(|(gv, n)| is * (gv - m1 - n * m2)));
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                    if rg(gamma) {
                        let mut gg = vec![0.0; c];
                        for (grow, nrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                gg[ch] += grow[ch] * nrow[ch];
                            }
                        }
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if rg(beta) {
                        let mut gb = vec![0.0; c];
                        for grow in g.chunks(c) {
                            gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads[beta.0], gb);
                    }
                }
                Op::ConcatCols(xs) => {
                    let total = node.value.shape()[1];
                    let mut start = 0;
                    for x in xs {
                        let c = nodes[x.0].value.shape()[1];
                        if rg(x) {
                            let gx = g.chunks(total).flat_map(|row| row[start..start + c].iter().copied()).collect();
                            accumulate(&mut grads[x.0], gx);
                        }
                        start += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let [rows, cols] = dims2("slice_cols", nodes[x.0].value.shape())?;
                    let width = node.value.shape()[1];
                    let mut gx = vec![0.0; rows * cols];
                    for (r, grow) in g.chunks(width).enumerate() {
                        gx[r * cols + start..r * cols + start + width].copy_from_slice(grow);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Conv3d { x, w, b, stride } => {
                    let xdims = dims3("conv3d", nodes[x.0].value.shape())?;
                    let odims = dims3("conv3d", node.value.shape())?;
                    let (gx, gw, gb) =
                        conv3d_backward(val(x), xdims, val(w), &g, odims, *stride, rg(x), rg(w));
                    if rg(x) {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if rg(w) {
                        accumulate(&mut grads[w.0], gw);
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::SoftDvh {
                    dose,
                    voxels,
                    edges,
                    steepness,
                } => {
                    let ds = val(dose);
                    let inv = 1.0 / voxels.len() as f64;
                    let mut gd = vec![0.0; ds.len()];
                    for &v in voxels {
                        let mut acc = 0.0;
                        for (gt, &e) in g.iter().zip(edges) {
                            let s = sigmoid(steepness * (ds[v] - e));
                            acc += gt * s * (1.0 - s);
                        }
                        gd[v] = acc * steepness * inv;
                    }
                    accumulate(&mut grads[dose.0], gd);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small_product() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2)).unwrap();
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let ones = t.constant(Tensor::ones(&[2, 1])).unwrap();
        let z = t.matmul(x, ones).unwrap();
        assert_eq!(t.value(z).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap()).unwrap();
        let y = t.softmax_rows(x).unwrap();
        let d = t.value(y).data();
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((d[3] - 1.0).abs() < 1e-12);
        assert!(d[4] < 1e-300 && d[5] >= 0.0);
    }

    #[test]
    fn pool_of_one_to_eight_is_four_and_a_half() {
        let mut t = Tape::new();
        let x = t
            .constant(Tensor::new(vec![1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap())
            .unwrap();
        let y = t.avg_pool3d(x, 2).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).item(), 4.5);
    }

    #[test]
    fn pool_rejects_indivisible_extent() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(t.avg_pool3d(x, 2).is_err());
    }

    #[test]
    fn pool_then_upsample_constant_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 4, 4, 8], 2.75)).unwrap();
        for k in [1, 2, 4] {
            let p = t.avg_pool3d(x, k).unwrap();
            let u = t.upsample_nearest3d(p, k).unwrap();
            assert_eq!(t.value(u), t.value(x));
        }
    }

    #[test]
    fn channel_affine_arithmetic() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let s = t.param(Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let b = t.param(Tensor::new(vec![1], vec![-1.0]).unwrap()).unwrap();
        let y = t.channel_affine(x, s, b).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
        let bad = t.param(Tensor::zeros(&[2])).unwrap();
        assert!(t.channel_affine(x, bad, b).is_err());
    }

    #[test]
    fn layer_norm_zero_variance_maps_to_bias() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 4], 5.0)).unwrap();
        let g = t.param(Tensor::ones(&[4])).unwrap();
        let b = t.param(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);

        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let b = t.param(Tensor::zeros(&[2])).unwrap();
        let g = t.param(Tensor::ones(&[2])).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_of_sum_and_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        t.zero_grad();
        let sq = t.square(x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.param(Tensor::ones(&[2])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::ones(&[2])).unwrap();
        assert_eq!(t.backward(x), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1], 1e200)).unwrap();
        assert_eq!(t.square(x), Err(TensorError::NonFinite { op: "square" }));
        assert!(t.leaf(Tensor::full(&[1], f64::NAN), false).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::ones(&[2])).unwrap();
        let x = t.param(Tensor::ones(&[2])).unwrap();
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(x).is_some());
    }

    #[test]
    fn conv_output_extents() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[2, 8, 8, 6])).unwrap();
        let w = t.param(Tensor::zeros(&[3, 2, 3, 3, 3])).unwrap();
        let b = t.param(Tensor::full(&[3], 0.5)).unwrap();
        let y = t.conv3d(x, w, b, 2).unwrap();
        assert_eq!(t.shape(y), &[3, 4, 4, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 0.5));
    }
}
