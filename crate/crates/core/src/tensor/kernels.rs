// Raw loops behind the graph primitives. Everything here works on flat
// row-major slices; shape validation happens in graph.rs.

#[inline]
pub(crate) fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorizable while staying deterministic
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// Gradients of `matmul` given upstream `dout[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    m: usize,
    k: usize,
    n: usize,
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let da = want_a.then(|| {
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let drow = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                da[i * k + p] = dot(drow, &b[p * n..(p + 1) * n]);
            }
        }
        da
    });
    let db = want_b.then(|| {
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let drow = &dout[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(&mut db[p * n..(p + 1) * n], a[i * k + p], drow);
            }
        }
        db
    });
    (da, db)
}

/// Unfolds one [c,h,w] image into [c*9, h*w] patches for a 3x3, pad-1 kernel.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Folds patch gradients back onto the image gradient (adjoint of `im2col`).
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

/// 3x3, stride 1, zero-pad 1 convolution without bias.
/// x: [n, c_in, h, w], weight: [c_out, c_in, 3, 3] -> [n, c_out, h, w]
pub(crate) fn conv3x3(x: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let kdim = d.c_in * 9;
    let mut out = vec![0.0; d.n * d.c_out * hw];
    let mut cols = vec![0.0; kdim * hw];
    for s in 0..d.n {
        im2col(&x[s * d.c_in * hw..(s + 1) * d.c_in * hw], d.c_in, d.h, d.w, &mut cols);
        let o_s = &mut out[s * d.c_out * hw..(s + 1) * d.c_out * hw];
        for o in 0..d.c_out {
            let row = &mut o_s[o * hw..(o + 1) * hw];
            let wrow = &weight[o * kdim..(o + 1) * kdim];
            for (k, &wk) in wrow.iter().enumerate() {
                axpy(row, wk, &cols[k * hw..(k + 1) * hw]);
            }
        }
    }
    out
}

pub(crate) fn conv3x3_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let kdim = d.c_in * 9;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; kdim * hw];
    let mut dcols = vec![0.0; kdim * hw];
    for s in 0..d.n {
        let d_s = &dout[s * d.c_out * hw..(s + 1) * d.c_out * hw];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * d.c_in * hw..(s + 1) * d.c_in * hw], d.c_in, d.h, d.w, &mut cols);
            for o in 0..d.c_out {
                let drow = &d_s[o * hw..(o + 1) * hw];
                let dwrow = &mut dw[o * kdim..(o + 1) * kdim];
                for (k, dwk) in dwrow.iter_mut().enumerate() {
                    *dwk += dot(drow, &cols[k * hw..(k + 1) * hw]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for o in 0..d.c_out {
                let drow = &d_s[o * hw..(o + 1) * hw];
                let wrow = &weight[o * kdim..(o + 1) * kdim];
                for (k, &wk) in wrow.iter().enumerate() {
                    axpy(&mut dcols[k * hw..(k + 1) * hw], wk, drow);
                }
            }
            col2im_add(&dcols, d.c_in, d.h, d.w, &mut dx[s * d.c_in * hw..(s + 1) * d.c_in * hw]);
        }
    }
    (dx, dw)
}

/// Source index for a counter-clockwise rotation by `k` quarter turns of an
/// `s`x`s` plane: `out[i][j] = in[src(i, j)]`.
#[inline]
fn rot_src(i: usize, j: usize, s: usize, k: usize) -> usize {
    match k % 4 {
        0 => i * s + j,
        1 => j * s + (s - 1 - i),
        2 => (s - 1 - i) * s + (s - 1 - j),
        _ => (s - 1 - j) * s + i,
    }
}

/// Rotates every trailing `s`x`s` plane of `x` by `k` quarter turns.
pub(crate) fn rotate_planes(x: &[f64], s: usize, k: usize) -> Vec<f64> {
    let plane = s * s;
    let mut out = vec![0.0; x.len()];
    if plane == 0 {
        return out;
    }
    for (src, dst) in x.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for i in 0..s {
            for j in 0..s {
                dst[i * s + j] = src[rot_src(i, j, s, k)];
            }
        }
    }
    out
}

/// Rotates 2-D points (rows of a [n, 2] matrix) by `k` quarter turns.
pub(crate) fn rotate_points(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(2).zip(out.chunks_exact_mut(2)) {
        let (a, b) = (src[0], src[1]);
        let (ra, rb) = match k % 4 {
            0 => (a, b),
            1 => (-b, a),
            2 => (-a, -b),
            _ => (b, -a),
        };
        dst[0] = ra;
        dst[1] = rb;
    }
    out
}
