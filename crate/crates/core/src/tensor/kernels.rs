//! Raw numeric kernels over row-major slices. The tape in `graph` wraps these
//! with shape checks and gradient bookkeeping.

/// `c[m×n] = a[m×k] · b[k×n]`.
///
/// Every output element accumulates over `k` in ascending order, independent
/// of its row or column, so permuting the rows of `a` permutes the rows of `c`
/// bit-exactly.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * k];
    for (a_row, c_row) in a.chunks_exact(n).zip(c.chunks_exact_mut(k)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(n)) {
            *cv = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// Spatial output extent of a sliding window; `None` when the window does
/// not fit.
pub fn window_output(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds the padded input into one row per output position. Column order is
/// `(ky, kx, channel)`, matching the `k×k×Cin×Cout` kernel layout.
pub fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let mut cols = vec![0.0; g.positions() * patch];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            let row = &mut cols[(oy * g.out_width + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = (iy as usize * g.width + ix as usize) * g.in_channels;
                    let dst = (ky * g.kernel + kx) * g.in_channels;
                    row[dst..dst + g.in_channels]
                        .copy_from_slice(&input[src..src + g.in_channels]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let mut out = vec![0.0; g.height * g.width * g.in_channels];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            let row = &cols[(oy * g.out_width + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.width + ix as usize) * g.in_channels;
                    let src = (ky * g.kernel + kx) * g.in_channels;
                    for c in 0..g.in_channels {
                        out[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Window maxima plus the flat input index each maximum came from. On ties the
/// first element in row-major window order wins.
pub fn max_pool(input: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let n = g.out_height * g.out_width * g.channels;
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            for c in 0..g.channels {
                let o = (oy * g.out_width + ox) * g.channels + c;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        let i = (iy * g.width + ix) * g.channels + c;
                        if input[i] > out[o] {
                            out[o] = input[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn avg_pool(input: &[f64], g: &PoolGeometry) -> Vec<f64> {
    let area = (g.kernel * g.kernel) as f64;
    let mut out = vec![0.0; g.out_height * g.out_width * g.channels];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            for c in 0..g.channels {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        acc += input[(iy * g.width + ix) * g.channels + c];
                    }
                }
                out[(oy * g.out_width + ox) * g.channels + c] = acc / area;
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &[f64], g: &PoolGeometry) -> Vec<f64> {
    let area = (g.kernel * g.kernel) as f64;
    let mut grad_in = vec![0.0; g.height * g.width * g.channels];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            for c in 0..g.channels {
                let share = grad_out[(oy * g.out_width + ox) * g.channels + c] / area;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = oy * g.stride + ky;
                        let ix = ox * g.stride + kx;
                        grad_in[(iy * g.width + ix) * g.channels + c] += share;
                    }
                }
            }
        }
    }
    grad_in
}

/// Column sums of a `rows × cols` matrix. Each column is summed in ascending
/// value order, which makes the result independent of row order.
pub fn order_free_column_sum(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), rows * cols);
    let mut column = Vec::with_capacity(rows);
    (0..cols)
        .map(|c| {
            column.clear();
            column.extend((0..rows).map(|r| values[r * cols + c]));
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
