//! The residue network: a small convolutional net (Conv / BN / ReLU with
//! additive skips between alternate layers) that predicts the residue map
//! R2 of a patch. Forward, backward, and the Adam trainer are hand-rolled
//! so gradients can be checked against central differences.
//!
//! Layer roles: layer 1 = Conv+ReLU, layers 2..t-1 = Conv+BN+ReLU,
//! layer t = Conv with a single output channel. The input of layer i is
//! added to the input of layer i+2; at the two channel boundaries the
//! skip passes through a 1x1 projection conv (1 -> f entering layer 3,
//! f -> 1 into the final output).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array5, ArrayView2, Axis, s};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DenoiseError, Result};
use crate::rng::seeded;

pub const NET_MAGIC: &[u8; 5] = b"RNET1";
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetSpec {
    pub depth: usize,
    pub filters: usize,
    /// Kernel extents `(kz, ky, kx)`.
    pub kernel: (usize, usize, usize),
    /// Patch shape `(z, y, x)` this net operates on.
    pub patch_shape: (usize, usize, usize),
}

impl NetSpec {
    /// Standard kernel choice: 3x3 in-plane, and for 3D patches a depth
    /// extent of min(8, q) so the kernel always fits.
    pub fn for_patch(depth: usize, filters: usize, patch_shape: (usize, usize, usize)) -> Result<Self> {
        let (q, ny, nx) = patch_shape;
        let kz = if q == 1 { 1 } else { q.min(8) };
        let spec = Self {
            depth,
            filters,
            kernel: (kz, 3.min(ny), 3.min(nx)),
            patch_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (kz, ky, kx) = self.kernel;
        let (pz, py, px) = self.patch_shape;
        if self.depth < 3 || self.filters == 0 || kz == 0 || ky == 0 || kx == 0 {
            return Err(DenoiseError::TooSmall {
                min_dim: 3,
                got: self.depth,
            });
        }
        if kz > pz || ky > py || kx > px {
            return Err(DenoiseError::PatchLargerThanVolume {
                patch: self.kernel,
                volume: self.patch_shape,
            });
        }
        Ok(())
    }

    fn kernel_len(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    /// Channel count entering conv layer `l` (1-based).
    fn in_channels(&self, l: usize) -> usize {
        if l == 1 {
            1
        } else {
            self.filters
        }
    }

    fn out_channels(&self, l: usize) -> usize {
        if l == self.depth {
            1
        } else {
            self.filters
        }
    }

    /// Exact trainable parameter count (conv weights/biases, BN scale and
    /// shift, and the two skip projections).
    pub fn param_count(&self) -> usize {
        let kk = self.kernel_len();
        let f = self.filters;
        let mut n = 0;
        for l in 1..=self.depth {
            n += self.out_channels(l) * self.in_channels(l) * kk + self.out_channels(l);
        }
        n += (self.depth - 2) * 2 * f; // BN gamma/beta on layers 2..t-1
        n += f + f; // proj_in: 1 -> f (1x1) + bias
        n += f + 1; // proj_out: f -> 1 (1x1) + bias
        n
    }
}

/// One convolution, weights stored row-major as `(c_out, c_in * kk)` so
/// the forward pass is a single matrix product against the im2col matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub kernel: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: NetSpec,
    /// Conv layers 1..=depth in order.
    pub convs: Vec<ConvLayer>,
    /// BN layers for conv layers 2..=depth-1 in order.
    pub bns: Vec<BnLayer>,
    pub proj_in: ConvLayer,
    pub proj_out: ConvLayer,
}

fn uniform_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kernel: (usize, usize, usize),
) -> ConvLayer {
    let kk = kernel.0 * kernel.1 * kernel.2;
    let fan_in = (c_in * kk) as f64;
    // Uniform with std 1/sqrt(fan_in).
    let bound = (3.0 / fan_in).sqrt();
    let weight = Array2::from_shape_fn((c_out, c_in * kk), |_| rng.gen_range(-bound..bound));
    ConvLayer {
        weight,
        bias: Array1::zeros(c_out),
        c_in,
        kernel,
    }
}

fn zero_conv(c_out: usize, c_in: usize, kernel: (usize, usize, usize)) -> ConvLayer {
    let kk = kernel.0 * kernel.1 * kernel.2;
    ConvLayer {
        weight: Array2::zeros((c_out, c_in * kk)),
        bias: Array1::zeros(c_out),
        c_in,
        kernel,
    }
}

/// Fan-in-scaled uniform init, deterministic per seed. The final conv and
/// the output-side projection start at zero so an untrained net predicts
/// a zero residue instead of noise of its own.
pub fn net_init(spec: &NetSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let f = spec.filters;
    let mut convs = Vec::with_capacity(spec.depth);
    for l in 1..=spec.depth {
        if l == spec.depth {
            convs.push(zero_conv(1, f, spec.kernel));
        } else {
            convs.push(uniform_conv(&mut rng, spec.out_channels(l), spec.in_channels(l), spec.kernel));
        }
    }
    let bns = (0..spec.depth - 2)
        .map(|_| BnLayer {
            gamma: Array1::ones(f),
            beta: Array1::zeros(f),
            running_mean: Array1::zeros(f),
            running_var: Array1::ones(f),
        })
        .collect();
    let proj_in = uniform_conv(&mut rng, f, 1, (1, 1, 1));
    let proj_out = zero_conv(1, f, (1, 1, 1));
    Ok(NetParams {
        spec: *spec,
        convs,
        bns,
        proj_in,
        proj_out,
    })
}

impl NetParams {
    /// Trainable parameters in a fixed order: conv/BN per layer, then the
    /// two projections. Running BN stats are not trainable and excluded.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for (l, conv) in self.convs.iter().enumerate() {
            out.extend(conv.weight.iter());
            out.extend(conv.bias.iter());
            if l >= 1 && l < self.spec.depth - 1 {
                let bn = &self.bns[l - 1];
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        for p in [&self.proj_in, &self.proj_out] {
            out.extend(p.weight.iter());
            out.extend(p.bias.iter());
        }
        debug_assert_eq!(out.len(), self.spec.param_count());
        out
    }

    pub fn apply_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.spec.param_count());
        let mut it = flat.iter();
        let depth = self.spec.depth;
        for (l, conv) in self.convs.iter_mut().enumerate() {
            for w in conv.weight.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in conv.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
            if l >= 1 && l < depth - 1 {
                let bn = &mut self.bns[l - 1];
                for g in bn.gamma.iter_mut() {
                    *g = *it.next().unwrap();
                }
                for b in bn.beta.iter_mut() {
                    *b = *it.next().unwrap();
                }
            }
        }
        for p in [&mut self.proj_in, &mut self.proj_out] {
            for w in p.weight.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in p.bias.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        let s = &self.spec;
        for v in [
            s.depth as u64,
            s.filters as u64,
            s.kernel.0 as u64,
            s.kernel.1 as u64,
            s.kernel.2 as u64,
            s.patch_shape.0 as u64,
            s.patch_shape.1 as u64,
            s.patch_shape.2 as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        for bn in &self.bns {
            for v in bn.running_mean.iter().chain(bn.running_var.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic)?;
        if &magic != NET_MAGIC {
            return Err(DenoiseError::BadMagic { expected: "RNET1" });
        }
        let mut h = [0u64; 8];
        for v in h.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let spec = NetSpec {
            depth: h[0] as usize,
            filters: h[1] as usize,
            kernel: (h[2] as usize, h[3] as usize, h[4] as usize),
            patch_shape: (h[5] as usize, h[6] as usize, h[7] as usize),
        };
        spec.validate()?;
        let mut params = net_init(&spec, 0)?;
        let n = spec.param_count();
        let mut flat = vec![0.0f64; n];
        for v in flat.iter_mut() {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
        params.apply_flat(&flat);
        for bn in params.bns.iter_mut() {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(params)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(DenoiseError::TruncatedBody {
                expected: buf.len(),
                got,
            });
        }
        got += n;
    }
    Ok(())
}

/// Gradients in the same layout as the parameters.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub convs: Vec<(Array2<f64>, Array1<f64>)>,
    pub bns: Vec<(Array1<f64>, Array1<f64>)>,
    pub proj_in: (Array2<f64>, Array1<f64>),
    pub proj_out: (Array2<f64>, Array1<f64>),
}

impl NetGrads {
    fn zeros_like(p: &NetParams) -> Self {
        let zc = |c: &ConvLayer| {
            (
                Array2::zeros(c.weight.raw_dim()),
                Array1::zeros(c.bias.raw_dim()),
            )
        };
        Self {
            convs: p.convs.iter().map(zc).collect(),
            bns: p
                .bns
                .iter()
                .map(|b| (Array1::zeros(b.gamma.raw_dim()), Array1::zeros(b.beta.raw_dim())))
                .collect(),
            proj_in: zc(&p.proj_in),
            proj_out: zc(&p.proj_out),
        }
    }

    pub fn to_flat(&self, spec: &NetSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(spec.param_count());
        for (l, (w, b)) in self.convs.iter().enumerate() {
            out.extend(w.iter());
            out.extend(b.iter());
            if l >= 1 && l < spec.depth - 1 {
                let (g, be) = &self.bns[l - 1];
                out.extend(g.iter());
                out.extend(be.iter());
            }
        }
        for (w, b) in [&self.proj_in, &self.proj_out] {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

// ---- low-level layer math ------------------------------------------------

/// Batch tensor layout: (sample, channel, z, y, x).
pub type Batch = Array5<f64>;

fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

fn im2col(input: &Batch, kernel: (usize, usize, usize)) -> Array2<f64> {
    let (n, c, z, y, x) = input.dim();
    let (kz, ky, kx) = kernel;
    let (pz, py, px) = (pad_before(kz), pad_before(ky), pad_before(kx));
    let kk = kz * ky * kx;
    let spatial = z * y * x;
    let mut col = Array2::<f64>::zeros((c * kk, n * spatial));
    for ni in 0..n {
        for ci in 0..c {
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let row = ((ci * kz + dz) * ky + dy) * kx + dx;
                        for zi in 0..z {
                            let sz = (zi + dz).checked_sub(pz);
                            let sz = match sz {
                                Some(v) if v < z => v,
                                _ => continue,
                            };
                            for yi in 0..y {
                                let sy = match (yi + dy).checked_sub(py) {
                                    Some(v) if v < y => v,
                                    _ => continue,
                                };
                                for xi in 0..x {
                                    let sx = match (xi + dx).checked_sub(px) {
                                        Some(v) if v < x => v,
                                        _ => continue,
                                    };
                                    col[(row, ni * spatial + (zi * y + yi) * x + xi)] =
                                        input[(ni, ci, sz, sy, sx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    kernel: (usize, usize, usize),
    dim: (usize, usize, usize, usize, usize),
) -> Batch {
    let (n, c, z, y, x) = dim;
    let (kz, ky, kx) = kernel;
    let (pz, py, px) = (pad_before(kz), pad_before(ky), pad_before(kx));
    let spatial = z * y * x;
    let mut out = Batch::zeros(dim);
    for ni in 0..n {
        for ci in 0..c {
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let row = ((ci * kz + dz) * ky + dy) * kx + dx;
                        for zi in 0..z {
                            let sz = match (zi + dz).checked_sub(pz) {
                                Some(v) if v < z => v,
                                _ => continue,
                            };
                            for yi in 0..y {
                                let sy = match (yi + dy).checked_sub(py) {
                                    Some(v) if v < y => v,
                                    _ => continue,
                                };
                                for xi in 0..x {
                                    let sx = match (xi + dx).checked_sub(px) {
                                        Some(v) if v < x => v,
                                        _ => continue,
                                    };
                                    out[(ni, ci, sz, sy, sx)] +=
                                        dcol[(row, ni * spatial + (zi * y + yi) * x + xi)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct ConvCache {
    col: Array2<f64>,
    input_dim: (usize, usize, usize, usize, usize),
}

fn conv_forward(layer: &ConvLayer, input: &Batch) -> (Batch, ConvCache) {
    let (n, _c, z, y, x) = input.dim();
    let spatial = z * y * x;
    let col = im2col(input, layer.kernel);
    let mut out2 = layer.weight.dot(&col);
    for (mut row, b) in out2.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
        row += *b;
    }
    let c_out = layer.weight.nrows();
    let mut out = Batch::zeros((n, c_out, z, y, x));
    for ni in 0..n {
        let block: ArrayView2<f64> = out2.slice(s![.., ni * spatial..(ni + 1) * spatial]);
        let reshaped = block
            .to_owned()
            .into_shape_with_order((c_out, z, y, x))
            .expect("conv reshape");
        out.slice_mut(s![ni, .., .., .., ..]).assign(&reshaped);
    }
    (
        out,
        ConvCache {
            col,
            input_dim: input.dim(),
        },
    )
}

fn conv_backward(
    layer: &ConvLayer,
    cache: &ConvCache,
    grad_out: &Batch,
) -> (Array2<f64>, Array1<f64>, Batch) {
    let (n, c_out, z, y, x) = grad_out.dim();
    let spatial = z * y * x;
    let mut dout2 = Array2::<f64>::zeros((c_out, n * spatial));
    for ni in 0..n {
        let block = grad_out
            .slice(s![ni, .., .., .., ..])
            .to_owned()
            .into_shape_with_order((c_out, spatial))
            .expect("grad reshape");
        dout2.slice_mut(s![.., ni * spatial..(ni + 1) * spatial]).assign(&block);
    }
    let dw = dout2.dot(&cache.col.t());
    let db = dout2.sum_axis(Axis(1));
    let dcol = layer.weight.t().dot(&dout2);
    let dinput = col2im(&dcol, layer.kernel, cache.input_dim);
    (dw, db, dinput)
}

struct BnCache {
    xhat: Batch,
    inv_std: Array1<f64>,
}

fn bn_forward_train(bn: &mut BnLayer, input: &Batch) -> (Batch, BnCache) {
    let (n, c, z, y, x) = input.dim();
    let count = (n * z * y * x) as f64;
    let mut out = Batch::zeros(input.raw_dim());
    let mut xhat = Batch::zeros(input.raw_dim());
    let mut inv_std = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = input.slice(s![.., ci, .., .., ..]);
        let mean = ch.sum() / count;
        let var = ch.mapv(|v| (v - mean) * (v - mean)).sum() / count;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ci] = istd;
        let (g, b) = (bn.gamma[ci], bn.beta[ci]);
        for ni in 0..n {
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        let h = (input[(ni, ci, zi, yi, xi)] - mean) * istd;
                        xhat[(ni, ci, zi, yi, xi)] = h;
                        out[(ni, ci, zi, yi, xi)] = g * h + b;
                    }
                }
            }
        }
        bn.running_mean[ci] = BN_MOMENTUM * bn.running_mean[ci] + (1.0 - BN_MOMENTUM) * mean;
        bn.running_var[ci] = BN_MOMENTUM * bn.running_var[ci] + (1.0 - BN_MOMENTUM) * var;
    }
    (out, BnCache { xhat, inv_std })
}

fn bn_forward_eval(bn: &BnLayer, input: &Batch) -> Batch {
    let (n, c, z, y, x) = input.dim();
    let mut out = Batch::zeros(input.raw_dim());
    for ci in 0..c {
        let istd = 1.0 / (bn.running_var[ci] + BN_EPS).sqrt();
        let (g, b, m) = (bn.gamma[ci], bn.beta[ci], bn.running_mean[ci]);
        for ni in 0..n {
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        out[(ni, ci, zi, yi, xi)] = g * (input[(ni, ci, zi, yi, xi)] - m) * istd + b;
                    }
                }
            }
        }
    }
    out
}

fn bn_backward(
    bn: &BnLayer,
    cache: &BnCache,
    grad_out: &Batch,
) -> (Array1<f64>, Array1<f64>, Batch) {
    let (n, c, z, y, x) = grad_out.dim();
    let count = (n * z * y * x) as f64;
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    let mut dinput = Batch::zeros(grad_out.raw_dim());
    for ci in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        let dy = grad_out[(ni, ci, zi, yi, xi)];
                        sum_dy += dy;
                        sum_dy_xhat += dy * cache.xhat[(ni, ci, zi, yi, xi)];
                    }
                }
            }
        }
        dgamma[ci] = sum_dy_xhat;
        dbeta[ci] = sum_dy;
        let scale = bn.gamma[ci] * cache.inv_std[ci] / count;
        for ni in 0..n {
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        let dy = grad_out[(ni, ci, zi, yi, xi)];
                        let h = cache.xhat[(ni, ci, zi, yi, xi)];
                        dinput[(ni, ci, zi, yi, xi)] =
                            scale * (count * dy - sum_dy - h * sum_dy_xhat);
                    }
                }
            }
        }
    }
    (dgamma, dbeta, dinput)
}

fn relu_forward(input: &Batch) -> Batch {
    input.mapv(|v| v.max(0.0))
}

fn relu_backward(pre: &Batch, grad_out: &Batch) -> Batch {
    let mut g = grad_out.clone();
    g.zip_mut_with(pre, |gv, &p| {
        if p <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

// ---- full network --------------------------------------------------------

pub struct ForwardCache {
    /// Inputs x_1..x_t of every conv layer.
    inputs: Vec<Batch>,
    conv_caches: Vec<ConvCache>,
    bn_caches: Vec<BnCache>,
    /// Pre-activation (post-BN for middle layers) tensors per ReLU.
    relu_pre: Vec<Batch>,
    proj_in_cache: ConvCache,
    proj_out_cache: ConvCache,
}

fn check_shape(spec: &NetSpec, batch: &Batch) -> Result<()> {
    let (_, c, z, y, x) = batch.dim();
    if c != 1 || (z, y, x) != spec.patch_shape {
        return Err(DenoiseError::ShapeMismatch {
            expected: spec.patch_shape,
            got: (z, y, x),
        });
    }
    Ok(())
}

/// Train-mode forward: BN uses minibatch statistics (and updates running
/// stats in `params`), all intermediates cached for `backward`.
pub fn forward_train(params: &mut NetParams, batch: &Batch) -> Result<(Batch, ForwardCache)> {
    check_shape(&params.spec, batch)?;
    let t = params.spec.depth;
    let mut inputs: Vec<Batch> = vec![batch.clone()];
    let mut conv_caches = Vec::with_capacity(t);
    let mut bn_caches = Vec::with_capacity(t - 2);
    let mut relu_pre = Vec::with_capacity(t - 1);

    // Layer 1: Conv + ReLU.
    let (pre, cc) = conv_forward(&params.convs[0], &inputs[0]);
    conv_caches.push(cc);
    relu_pre.push(pre.clone());
    inputs.push(relu_forward(&pre));

    // Skip sources, computed lazily when their target layer is reached.
    let (skip_in, proj_in_cache) = conv_forward(&params.proj_in, &inputs[0]);

    // Middle layers 2..=t-1: Conv + BN + ReLU, plus the incoming skip.
    for l in 2..t {
        let (u, cc) = conv_forward(&params.convs[l - 1], &inputs[l - 1]);
        conv_caches.push(cc);
        let (v, bc) = bn_forward_train(&mut params.bns[l - 2], &u);
        bn_caches.push(bc);
        relu_pre.push(v.clone());
        let mut next = relu_forward(&v);
        if l == 2 {
            next += &skip_in; // projected x_1 into x_3
        } else {
            next += &inputs[l - 2]; // identity skip x_{l-1} into x_{l+1}
        }
        inputs.push(next);
    }

    // Final layer t: Conv to one channel, plus projected skip from x_{t-1}.
    let (mut out, cc) = conv_forward(&params.convs[t - 1], &inputs[t - 1]);
    conv_caches.push(cc);
    let (skip_out, proj_out_cache) = conv_forward(&params.proj_out, &inputs[t - 2]);
    out += &skip_out;

    Ok((
        out,
        ForwardCache {
            inputs,
            conv_caches,
            bn_caches,
            relu_pre,
            proj_in_cache,
            proj_out_cache,
        },
    ))
}

/// Eval-mode forward: pure function of (params, batch); BN uses running
/// statistics, so per-sample results are batch-size independent.
pub fn forward_eval(params: &NetParams, batch: &Batch) -> Result<Batch> {
    check_shape(&params.spec, batch)?;
    let t = params.spec.depth;
    let mut inputs: Vec<Batch> = vec![batch.clone()];
    let (pre, _) = conv_forward(&params.convs[0], &inputs[0]);
    inputs.push(relu_forward(&pre));
    let (skip_in, _) = conv_forward(&params.proj_in, &inputs[0]);
    for l in 2..t {
        let (u, _) = conv_forward(&params.convs[l - 1], &inputs[l - 1]);
        let v = bn_forward_eval(&params.bns[l - 2], &u);
        let mut next = relu_forward(&v);
        if l == 2 {
            next += &skip_in;
        } else {
            next += &inputs[l - 2];
        }
        inputs.push(next);
    }
    let (mut out, _) = conv_forward(&params.convs[t - 1], &inputs[t - 1]);
    let (skip_out, _) = conv_forward(&params.proj_out, &inputs[t - 2]);
    out += &skip_out;
    Ok(out)
}

/// Single-patch eval forward on a (z, y, x) tensor.
pub fn predict(params: &NetParams, patch: &Array3<f64>) -> Result<Array3<f64>> {
    let (z, y, x) = patch.dim();
    let mut batch = Batch::zeros((1, 1, z, y, x));
    batch.slice_mut(s![0, 0, .., .., ..]).assign(patch);
    let out = forward_eval(params, &batch)?;
    Ok(out.slice(s![0, 0, .., .., ..]).to_owned())
}

/// Exact gradients of the train-mode forward pass.
pub fn backward(params: &NetParams, cache: &ForwardCache, grad_out: &Batch) -> (NetGrads, Batch) {
    let t = params.spec.depth;
    let mut grads = NetGrads::zeros_like(params);
    // d_inputs[l] = gradient w.r.t. x_{l+1} (0-based index into cache.inputs).
    let mut d_inputs: Vec<Batch> = cache
        .inputs
        .iter()
        .map(|b| Batch::zeros(b.raw_dim()))
        .collect();

    // Final conv and output-side projection both feed the output.
    {
        let (dw, db, dx) = conv_backward(&params.convs[t - 1], &cache.conv_caches[t - 1], grad_out);
        grads.convs[t - 1] = (dw, db);
        d_inputs[t - 1] += &dx;
        let (dw, db, dx) = conv_backward(&params.proj_out, &cache.proj_out_cache, grad_out);
        grads.proj_out = (dw, db);
        d_inputs[t - 2] += &dx;
    }

    // Middle layers in reverse.
    for l in (2..t).rev() {
        let d_next = d_inputs[l].clone();
        // Skip branch: the same gradient flows to the skip source.
        if l == 2 {
            let (dw, db, dx) = conv_backward(&params.proj_in, &cache.proj_in_cache, &d_next);
            grads.proj_in = (dw, db);
            d_inputs[0] += &dx;
        } else {
            let d = d_next.clone();
            d_inputs[l - 2] += &d;
        }
        // Main branch: ReLU -> BN -> Conv.
        let d_relu = relu_backward(&cache.relu_pre[l - 1], &d_next);
        let (dg, dbeta, d_bn) = bn_backward(&params.bns[l - 2], &cache.bn_caches[l - 2], &d_relu);
        grads.bns[l - 2] = (dg, dbeta);
        let (dw, db, dx) = conv_backward(&params.convs[l - 1], &cache.conv_caches[l - 1], &d_bn);
        grads.convs[l - 1] = (dw, db);
        d_inputs[l - 1] += &dx;
    }

    // Layer 1: ReLU -> Conv.
    let d_relu = relu_backward(&cache.relu_pre[0], &d_inputs[1].clone());
    let (dw, db, dx) = conv_backward(&params.convs[0], &cache.conv_caches[0], &d_relu);
    grads.convs[0] = (dw, db);
    d_inputs[0] += &dx;

    let d_input = d_inputs.swap_remove(0);
    (grads, d_input)
}

// ---- trainer -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epoch_losses: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(spec: &NetSpec, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        let n = spec.param_count();
        Self {
            step: 0,
            learning_rate,
            batch_size: batch_size.max(1),
            epoch_losses: Vec::new(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            rng: seeded(seed),
        }
    }
}

fn stack_batch(patches: &[&Array3<f64>]) -> Batch {
    let (z, y, x) = patches[0].dim();
    let mut b = Batch::zeros((patches.len(), 1, z, y, x));
    for (i, p) in patches.iter().enumerate() {
        b.slice_mut(s![i, 0, .., .., ..]).assign(*p);
    }
    b
}

/// One epoch of minibatch Adam on the MSE between predictions and the
/// per-patch targets. Returns the epoch-mean loss (also recorded in
/// `state.epoch_losses`).
pub fn train_epoch(
    params: &mut NetParams,
    state: &mut TrainState,
    patches: &[Array3<f64>],
    targets: &[Array3<f64>],
) -> Result<f64> {
    assert_eq!(patches.len(), targets.len());
    if patches.is_empty() {
        state.epoch_losses.push(0.0);
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut state.rng);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(state.batch_size) {
        let p_refs: Vec<&Array3<f64>> = chunk.iter().map(|&i| &patches[i]).collect();
        let t_refs: Vec<&Array3<f64>> = chunk.iter().map(|&i| &targets[i]).collect();
        let batch = stack_batch(&p_refs);
        let target = stack_batch(&t_refs);
        let (out, cache) = forward_train(params, &batch)?;
        let diff = &out - &target;
        let n_elem = diff.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / n_elem;
        if !loss.is_finite() {
            return Err(DenoiseError::NonFiniteLoss {
                step: state.step as usize,
            });
        }
        if loss <= 1e-20 {
            // Residuals at the f64 noise floor: Adam would still take
            // lr-sized steps on them (it normalizes by gradient scale),
            // turning numerical dust into real parameter drift.
            loss_sum += loss;
            batches += 1;
            continue;
        }
        let grad_out = diff.mapv(|v| 2.0 * v / n_elem);
        let (grads, _) = backward(params, &cache, &grad_out);
        adam_step(params, state, &grads);
        loss_sum += loss;
        batches += 1;
    }
    let mean = loss_sum / batches as f64;
    state.epoch_losses.push(mean);
    Ok(mean)
}

fn adam_step(params: &mut NetParams, state: &mut TrainState, grads: &NetGrads) {
    state.step += 1;
    let t = state.step as i32;
    let g = grads.to_flat(&params.spec);
    let mut p = params.to_flat();
    let bc1 = 1.0 - ADAM_B1.powi(t);
    let bc2 = 1.0 - ADAM_B2.powi(t);
    for i in 0..p.len() {
        state.m[i] = ADAM_B1 * state.m[i] + (1.0 - ADAM_B1) * g[i];
        state.v[i] = ADAM_B2 * state.v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        p[i] -= state.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    params.apply_flat(&p);
}
