//! Numeric kernels behind the tape primitives.
//!
//! All kernels operate on flat row-major `f64` buffers; the execution engine
//! converts from 32-bit tensor storage at the boundary. Loops run in a fixed
//! index order so results are bitwise deterministic.

/// Output spatial size for a conv/pool window.
/// `floor((input + 2*padding - dilation*(kernel-1) - 1) / stride) + 1`
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// C = A (m x k) * B (k x n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// C = A^T (k x m -> m x k view) * B ... helper: out(k x n) += A^T(m x k)·B(m x n)
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += a[i * k + p] * b[i * n + j];
            }
            out[p * n + j] += acc;
        }
    }
}

/// out(m x k) += A(m x n)·B^T(k x n)
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] += acc;
        }
    }
}

pub struct Conv2dSpec {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn out_height(&self) -> usize {
        conv_out_dim(self.height, self.kernel, self.stride, self.padding, self.dilation).unwrap()
    }
    pub fn out_width(&self) -> usize {
        conv_out_dim(self.width, self.kernel, self.stride, self.padding, self.dilation).unwrap()
    }
}

/// Direct 2-D convolution. x: [B, Cin, H, W], w: [Cout, Cin/groups, K, K],
/// bias: optional [Cout]. Output [B, Cout, Ho, Wo].
pub fn conv2d(x: &[f64], w: &[f64], bias: Option<&[f64]>, s: &Conv2dSpec, out: &mut [f64]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    for b in 0..s.batch {
        for oc in 0..s.out_channels {
            let g = oc / cout_g;
            let w_base = oc * cin_g * s.kernel * s.kernel;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..cin_g {
                        let c = g * cin_g + ic;
                        let x_base = ((b * s.in_channels + c) * s.height) * s.width;
                        for ky in 0..s.kernel {
                            let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                            if iy < 0 || iy >= s.height as isize {
                                continue;
                            }
                            for kx in 0..s.kernel {
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if ix < 0 || ix >= s.width as isize {
                                    continue;
                                }
                                let xv = x[x_base + iy as usize * s.width + ix as usize];
                                let wv = w[w_base + (ic * s.kernel + ky) * s.kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * s.out_channels + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
}

/// Gradients of conv2d. Accumulates into dx, dw, db (callers pre-zero).
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    s: &Conv2dSpec,
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    if let Some(db) = db {
        for b in 0..s.batch {
            for oc in 0..s.out_channels {
                let base = (b * s.out_channels + oc) * ho * wo;
                let mut acc = 0.0;
                for i in 0..ho * wo {
                    acc += dy[base + i];
                }
                db[oc] += acc;
            }
        }
    }
    for b in 0..s.batch {
        for oc in 0..s.out_channels {
            let g = oc / cout_g;
            let w_base = oc * cin_g * s.kernel * s.kernel;
            for oy in 0..ho {
                for ox in 0..wo {
                    let gy = dy[((b * s.out_channels + oc) * ho + oy) * wo + ox];
                    if gy == 0.0 {
                        continue;
                    }
                    for ic in 0..cin_g {
                        let c = g * cin_g + ic;
                        let x_base = ((b * s.in_channels + c) * s.height) * s.width;
                        for ky in 0..s.kernel {
                            let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                            if iy < 0 || iy >= s.height as isize {
                                continue;
                            }
                            for kx in 0..s.kernel {
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if ix < 0 || ix >= s.width as isize {
                                    continue;
                                }
                                let xi = x_base + iy as usize * s.width + ix as usize;
                                let wi = w_base + (ic * s.kernel + ky) * s.kernel + kx;
                                dx[xi] += gy * w[wi];
                                dw[wi] += gy * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct Pool2dSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Pool2dSpec {
    pub fn out_height(&self) -> usize {
        conv_out_dim(self.height, self.kernel, self.stride, self.padding, 1).unwrap()
    }
    pub fn out_width(&self) -> usize {
        conv_out_dim(self.width, self.kernel, self.stride, self.padding, 1).unwrap()
    }
}

/// Average pooling, count-including-padding: every window divides by k*k.
pub fn avg_pool2d(x: &[f64], s: &Pool2dSpec, out: &mut [f64]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let norm = 1.0 / (s.kernel * s.kernel) as f64;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let x_base = (b * s.channels + c) * s.height * s.width;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            acc += x[x_base + iy as usize * s.width + ix as usize];
                        }
                    }
                    out[((b * s.channels + c) * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
    }
}

pub fn avg_pool2d_backward(dy: &[f64], s: &Pool2dSpec, dx: &mut [f64]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    let norm = 1.0 / (s.kernel * s.kernel) as f64;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let x_base = (b * s.channels + c) * s.height * s.width;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy[((b * s.channels + c) * ho + oy) * wo + ox] * norm;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            dx[x_base + iy as usize * s.width + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling. Padded positions count as -inf. Ties resolve to the first
/// maximal index in scan order; `argmax` records the chosen flat input index
/// per output element for the backward pass.
pub fn max_pool2d(x: &[f64], s: &Pool2dSpec, out: &mut [f64], argmax: &mut [usize]) {
    let (ho, wo) = (s.out_height(), s.out_width());
    for b in 0..s.batch {
        for c in 0..s.channels {
            let x_base = (b * s.channels + c) * s.height * s.width;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            let idx = x_base + iy as usize * s.width + ix as usize;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    // Fully-padded window: the shape rule guarantees at least
                    // one in-bounds element when padding < kernel.
                    let o = ((b * s.channels + c) * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
}

pub fn max_pool2d_backward(dy: &[f64], argmax: &[usize], dx: &mut [f64]) {
    for (g, &idx) in dy.iter().zip(argmax.iter()) {
        dx[idx] += g;
    }
}

/// Smallest gap `max - runner_up` over all pooling windows; used by the
/// gradient checker to exclude tie points. Returns +inf for 1-element windows.
pub fn max_pool2d_tie_gap(x: &[f64], s: &Pool2dSpec) -> f64 {
    let (ho, wo) = (s.out_height(), s.out_width());
    let mut min_gap = f64::INFINITY;
    for b in 0..s.batch {
        for c in 0..s.channels {
            let x_base = (b * s.channels + c) * s.height * s.width;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for ky in 0..s.kernel {
                        let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        for kx in 0..s.kernel {
                            let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            let v = x[x_base + iy as usize * s.width + ix as usize];
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if second.is_finite() {
                        min_gap = min_gap.min(best - second);
                    }
                }
            }
        }
    }
    min_gap
}

/// Row-wise softmax over the last axis. `rows * cols == x.len()`.
pub fn softmax_last_axis(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o /= sum;
        }
    }
}

/// dx_i = y_i * (dy_i - sum_j dy_j y_j), per row.
pub fn softmax_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let base = r * cols;
        let mut dot = 0.0;
        for j in 0..cols {
            dot += dy[base + j] * y[base + j];
        }
        for j in 0..cols {
            dx[base + j] += y[base + j] * (dy[base + j] - dot);
        }
    }
}

/// Mean cross-entropy over the batch from raw logits, with fused
/// log-softmax. `labels[b]` is the target class index.
pub fn cross_entropy(logits: &[f64], labels: &[usize], batch: usize, classes: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lse = 0.0;
        for &v in row {
            lse += (v - max).exp();
        }
        let lse = lse.ln() + max;
        total += lse - row[labels[b]];
    }
    total / batch as f64
}

/// d logits = (softmax(logits) - onehot(label)) / batch, scaled by dy.
pub fn cross_entropy_backward(
    logits: &[f64],
    labels: &[usize],
    batch: usize,
    classes: usize,
    dy: f64,
    dx: &mut [f64],
) {
    let scale = dy / batch as f64;
    let mut probs = vec![0.0; classes];
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        softmax_last_axis(row, 1, classes, &mut probs);
        for j in 0..classes {
            let onehot = if j == labels[b] { 1.0 } else { 0.0 };
            dx[b * classes + j] += (probs[j] - onehot) * scale;
        }
    }
}
