use super::linalg::{gemm, gemm_nt, gemm_tn};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Output geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::dim(format!("conv2d expects 4-D input and kernel, got {x:?} and {k:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (batch, c_in, h, w) = (x[0], x[1], x[2], x[3]);
        let (c_out, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c_in {
            return Err(Error::dim(format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        let h_out = out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::dim(format!("kernel height {kh} does not fit padded input height {h} (pad {pad})")))?;
        let w_out = out_extent(w, kw, stride, pad)
            .ok_or_else(|| Error::dim(format!("kernel width {kw} does not fit padded input width {w} (pad {pad})")))?;
        Ok(Conv2dGeometry { batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }
}

/// `floor((n + 2·pad − k)/stride) + 1`, or `None` when non-positive.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

fn im2col(x: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.rows() * pl];
    for b in 0..g.batch {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((b * g.h_out + oy) * g.w_out + ox) * pl;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.kh + ky) * g.kw + kx] =
                                x[((b * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Conv2dGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for b in 0..g.batch {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let row = ((b * g.h_out + oy) * g.w_out + ox) * pl;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[((b * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Batch statistics from a training-mode batch norm, for running averages.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Splits a `[B, C, ...]` shape into `(B, C, inner)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("expected at least [batch, channels], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(&[a, b], out, Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|inputs, _, g| {
                let ga = g.iter().zip(inputs[1].data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(inputs[0].data()).map(|(g, x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.custom(&[a], out, Box::new(move |_, _, g| vec![Some(g.iter().map(|v| v * c).collect())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.custom(
            &[a],
            out,
            Box::new(|inputs, _, g| {
                let gx = g
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Adds `bias[c]` along dimension 1 of a `[B, C, ...]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (batch, channels, inner) = channel_layout(self.value(x).shape())?;
        if self.value(bias).shape() != [channels] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match {channels} channels",
                self.value(bias).shape()
            )));
        }
        let vb = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for v in &mut data[base..base + inner] {
                    *v += vb[c];
                }
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.custom(
            &[x, bias],
            out,
            Box::new(move |_, _, g| {
                let mut gb = vec![0.0; channels];
                for b in 0..batch {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let base = (b * channels + c) * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |inputs, _, g| {
                // grad_a = g·bᵀ, grad_b = aᵀ·g
                let ga = gemm_nt(g, inputs[1].data(), m, n, k);
                let gb = gemm_tn(inputs[0].data(), g, k, m, n);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Fully connected product `x[B×in] · w[out×in]ᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear: input {sx:?} does not fit weight {sw:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let data = gemm_nt(self.value(x).data(), self.value(w).data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.custom(
            &[x, w],
            out,
            Box::new(move |inputs, _, g| {
                let gx = gemm(g, inputs[1].data(), m, n, k);
                let gw = gemm_tn(g, inputs[0].data(), n, m, k);
                vec![Some(gx), Some(gw)]
            }),
        ))
    }

    /// 2-D cross-correlation (no kernel flip): `x[B,Cin,H,W]`, `w[Cout,Cin,kh,kw]`.
    ///
    /// Backward gives `dL/dX` as the transposed correlation of the upstream
    /// gradient with `w`, and `dL/dW` as the correlation of `x` with it.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = Conv2dGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let cols = im2col(self.value(x).data(), &g);
        let (rows, pl) = (g.rows(), g.patch_len());
        // [rows, c_out]
        let y_mat = gemm_nt(&cols, self.value(w).data(), rows, pl, g.c_out);
        let hw = g.h_out * g.w_out;
        let mut data = vec![0.0; g.batch * g.c_out * hw];
        for b in 0..g.batch {
            for p in 0..hw {
                for o in 0..g.c_out {
                    data[(b * g.c_out + o) * hw + p] = y_mat[(b * hw + p) * g.c_out + o];
                }
            }
        }
        let out = Tensor::from_parts(vec![g.batch, g.c_out, g.h_out, g.w_out], data);
        Ok(self.custom(
            &[x, w],
            out,
            Box::new(move |inputs, _, grad| {
                let mut g_mat = vec![0.0; rows * g.c_out];
                for b in 0..g.batch {
                    for p in 0..hw {
                        for o in 0..g.c_out {
                            g_mat[(b * hw + p) * g.c_out + o] = grad[(b * g.c_out + o) * hw + p];
                        }
                    }
                }
                let gw = gemm_tn(&g_mat, &cols, g.c_out, rows, pl);
                let gcols = gemm(&g_mat, inputs[1].data(), rows, g.c_out, pl);
                vec![Some(col2im(&gcols, &g)), Some(gw)]
            }),
        ))
    }

    /// Per-channel normalization of a `[B, C, ...]` tensor followed by the
    /// affine map `gamma·x̂ + beta`. With `running = None` batch statistics
    /// are used and returned; otherwise the given `(mean, var)` are treated
    /// as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let (batch, channels, inner) = channel_layout(self.value(x).shape())?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [channels] {
                return Err(Error::dim(format!("batch norm {name} must have shape [{channels}]")));
            }
        }
        let count = (batch * inner) as f64;
        let vx = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return Err(Error::dim("running statistics do not match channel count"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        s += vx[base..base + inner].iter().sum::<f64>();
                    }
                    mean[c] = s / count;
                    let mut s2 = 0.0;
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        s2 += vx[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                    var[c] = s2 / count;
                }
                let stats = BatchNormStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (vx[i] - mean[c]) * inv_std[c];
                }
            }
        }
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![0.0; vx.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for i in base..base + inner {
                    data[i] = vg[c] * xhat[i] + vb[c];
                }
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        let training = stats.is_some();
        let var_node = self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |inputs, _, g| {
                let gamma = inputs[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; channels];
                let mut gb = vec![0.0; channels];
                for c in 0..channels {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        for i in base..base + inner {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    gg[c] = sum_gx;
                    gb[c] = sum_g;
                    let k = gamma[c] * inv_std[c];
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        for i in base..base + inner {
                            gx[i] = if training {
                                k * (g[i] - sum_g / count - xhat[i] * sum_gx / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        );
        Ok((var_node, stats))
    }

    /// Mean over all trailing dimensions: `[B, C, ...] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, channels, inner) = channel_layout(self.value(x).shape())?;
        let vx = self.value(x).data();
        let data = (0..batch * channels)
            .map(|bc| vx[bc * inner..(bc + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::from_parts(vec![batch, channels], data);
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |_, _, g| {
                let mut gx = vec![0.0; batch * channels * inner];
                for (bc, gv) in g.iter().enumerate() {
                    for v in &mut gx[bc * inner..(bc + 1) * inner] {
                        *v = gv / inner as f64;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.custom(&[x], out, Box::new(|_, _, g| vec![Some(g.to_vec())])))
    }

    /// `[B, ...] → [B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = *shape.first().ok_or_else(|| Error::dim("cannot flatten a scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![batch, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let out = Tensor::scalar(self.value(x).sum());
        self.custom(&[x], out, Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let out = Tensor::scalar(self.value(x).mean());
        self.custom(&[x], out, Box::new(move |_, _, g| vec![Some(vec![g[0] / n as f64; n])]))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross-entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::dim(format!("label {bad} out of range for {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (k, v) in row.iter().enumerate() {
                probs[b * classes + k] = (v - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[b]];
        }
        let out = Tensor::scalar(loss / batch as f64);
        let labels = labels.to_vec();
        Ok(self.custom(
            &[logits],
            out,
            Box::new(move |_, _, g| {
                let scale = g[0] / batch as f64;
                let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    gz[b * classes + l] -= scale;
                }
                vec![Some(gz)]
            }),
        ))
    }
}
