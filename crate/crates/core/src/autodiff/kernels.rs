//! Plain loop kernels shared by forward and backward passes. Reductions run
//! in a fixed order so results are bitwise reproducible.

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// da[m×k] += dc[m×n] · bᵀ
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(dcrow, brow);
        }
    }
}

/// db[k×n] += aᵀ · dc[m×n]
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(dcrow) {
                *d += av * g;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 1-D convolution over `[batch, time, channel]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    fn input_index(&self, to: usize, j: usize) -> Option<usize> {
        let ti = (to * self.stride + j).checked_sub(self.pad_left)?;
        (ti < self.t_in).then_some(ti)
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.t_out * g.c_out];
    for b in 0..g.batch {
        for to in 0..g.t_out {
            let yrow = &mut y[(b * g.t_out + to) * g.c_out..(b * g.t_out + to + 1) * g.c_out];
            if let Some(bias) = bias {
                yrow.copy_from_slice(bias);
            }
            for j in 0..g.kernel {
                let Some(ti) = g.input_index(to, j) else { continue };
                let xrow = &x[(b * g.t_in + ti) * g.c_in..(b * g.t_in + ti + 1) * g.c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(j * g.c_in + ci) * g.c_out..(j * g.c_in + ci + 1) * g.c_out];
                    for (yv, wv) in yrow.iter_mut().zip(wrow) {
                        *yv += xv * wv;
                    }
                }
            }
        }
    }
    y
}

/// Accumulates input, kernel and bias gradients for `conv1d_forward`.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for to in 0..g.t_out {
            let dyrow = &dy[(b * g.t_out + to) * g.c_out..(b * g.t_out + to + 1) * g.c_out];
            if let Some(db) = db.as_deref_mut() {
                for (d, v) in db.iter_mut().zip(dyrow) {
                    *d += v;
                }
            }
            for j in 0..g.kernel {
                let Some(ti) = g.input_index(to, j) else { continue };
                let base = (b * g.t_in + ti) * g.c_in;
                for ci in 0..g.c_in {
                    let woff = (j * g.c_in + ci) * g.c_out;
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[base + ci] += dot(dyrow, &w[woff..woff + g.c_out]);
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let xv = x[base + ci];
                        if xv != 0.0 {
                            for (d, v) in dw[woff..woff + g.c_out].iter_mut().zip(dyrow) {
                                *d += xv * v;
                            }
                        }
                    }
                }
            }
        }
    }
}
