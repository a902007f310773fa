//! Raw numeric kernels on slices. The tape ops in `tape.rs` wrap these.

/// `C = op(A) · op(B)` where `op` optionally transposes. `a` is stored as
/// `a_rows × a_cols` row-major, likewise `b`.
pub fn matmul(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch ({m}x{k} · {k2}x{n})");
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return (c, m, n);
    }
    let (rsa, csa) = if ta { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if tb { (1, b_cols) } else { (b_cols, 1) };
    // SAFETY: the strides above address exactly the `a_rows*a_cols` and
    // `b_rows*b_cols` elements of the input slices, and `c` holds m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (c, m, n)
}

/// Geometry of a stride-1 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox + kj) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        x[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let in_sz = g.in_ch * g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_ch * hw];
    let mut cols = vec![0.0; g.patch() * hw];
    for n in 0..g.batch {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
        let (y, _, _) = matmul(w, g.out_ch, g.patch(), false, &cols, g.patch(), hw, false);
        out[n * g.out_ch * hw..(n + 1) * g.out_ch * hw].copy_from_slice(&y);
    }
    out
}

pub fn conv2d_grad_input(g: &ConvGeom, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let in_sz = g.in_ch * g.height * g.width;
    let mut dx = vec![0.0; g.batch * in_sz];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_ch * hw..(n + 1) * g.out_ch * hw];
        let (dcols, _, _) = matmul(w, g.out_ch, g.patch(), true, go, g.out_ch, hw, false);
        col2im(g, &dcols, &mut dx[n * in_sz..(n + 1) * in_sz]);
    }
    dx
}

pub fn conv2d_grad_weight(g: &ConvGeom, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let in_sz = g.in_ch * g.height * g.width;
    let mut dw = vec![0.0; g.out_ch * g.patch()];
    let mut cols = vec![0.0; g.patch() * hw];
    for n in 0..g.batch {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut cols);
        let go = &grad_out[n * g.out_ch * hw..(n + 1) * g.out_ch * hw];
        let (part, _, _) = matmul(go, g.out_ch, hw, false, &cols, g.patch(), hw, true);
        for (d, p) in dw.iter_mut().zip(part) {
            *d += p;
        }
    }
    dw
}

/// 2×2 max pooling with stride 2 over `[n, c, h, w]`; returns the pooled
/// values and the flat input index of each winner. Ties go to the first
/// element in row-major window order.
pub fn max_pool2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
