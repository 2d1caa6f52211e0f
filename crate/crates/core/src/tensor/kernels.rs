//! Raw slice kernels behind the graph operations.
//!
//! Every matrix product accumulates each output element over the inner
//! dimension in ascending order starting from `0.0`, with no fused
//! multiply-add, so results are bitwise identical to a naive triple loop.

const MR: usize = 8;
const NR: usize = 16;

/// Strided view of a matrix operand: element `(i, j)` is at
/// `data[i * row_stride + j * col_stride]`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows×cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of the row-major `rows×cols` matrix `data`.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

/// `a[m×k] · b[k×n]`, row-major.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(MatRef::rows(a, k), MatRef::rows(b, n), m, k, n)
}

/// `a · bᵀ` for row-major `a[m×k]` and `b[n×k]`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    gemm_strided(MatRef::rows(a, k), MatRef::transposed(b, k), m, k, n)
}

/// `aᵀ · b` for row-major `a[k×m]` and `b[k×n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(MatRef::transposed(a, m), MatRef::rows(b, n), m, k, n)
}

/// `a[m×k] · b[k×n]` into a fresh row-major `m×n` buffer. Both operands
/// are packed into zero-padded `MR`-row and `NR`-column panels, so every
/// output block goes through the same register kernel.
pub fn gemm_strided(a: MatRef<'_>, b: MatRef<'_>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row_blocks = m.div_ceil(MR);
    let mut a_pack = vec![0.0; row_blocks * k * MR];
    for blk in 0..row_blocks {
        let dst = &mut a_pack[blk * k * MR..(blk + 1) * k * MR];
        for r in 0..MR.min(m - blk * MR) {
            let i = blk * MR + r;
            for p in 0..k {
                dst[p * MR + r] = a.at(i, p);
            }
        }
    }
    let mut panel = vec![0.0; k * NR];
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        if w < NR {
            panel.fill(0.0);
        }
        if b.col_stride == 1 {
            for p in 0..k {
                let start = p * b.row_stride + j0;
                panel[p * NR..p * NR + w].copy_from_slice(&b.data[start..start + w]);
            }
        } else {
            for jj in 0..w {
                for p in 0..k {
                    panel[p * NR + jj] = b.at(p, j0 + jj);
                }
            }
        }
        for blk in 0..row_blocks {
            let ap = &a_pack[blk * k * MR..(blk + 1) * k * MR];
            let acc = micro_kernel(ap, &panel, k);
            for (r, acc_row) in acc.iter().enumerate().take(m - blk * MR) {
                let i = blk * MR + r;
                c[i * n + j0..i * n + j0 + w].copy_from_slice(&acc_row[..w]);
            }
        }
    }
    c
}

fn micro_kernel(a_panel: &[f64], b_panel: &[f64], k: usize) -> [[f64; NR]; MR] {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        assert!(a_panel.len() >= k * MR && b_panel.len() >= k * NR);
        // SAFETY: the feature is present and both panels hold `k` steps.
        return unsafe { micro_kernel_avx512(a_panel, b_panel, k) };
    }
    micro_kernel_portable(a_panel, b_panel, k)
}

#[inline(always)]
fn micro_kernel_portable(a_panel: &[f64], b_panel: &[f64], k: usize) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for p in 0..k {
        let bp: &[f64; NR] = b_panel[p * NR..(p + 1) * NR].try_into().unwrap();
        let av: &[f64; MR] = a_panel[p * MR..(p + 1) * MR].try_into().unwrap();
        for r in 0..MR {
            let a_v = av[r];
            for (acc_v, &b_v) in acc[r].iter_mut().zip(bp) {
                *acc_v += a_v * b_v;
            }
        }
    }
    acc
}

/// Same arithmetic as the portable kernel (separate multiply and add, one
/// rounding each), in 512-bit registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn micro_kernel_avx512(a_panel: &[f64], b_panel: &[f64], k: usize) -> [[f64; NR]; MR] {
    use std::arch::x86_64::*;
    let mut acc = [[_mm512_setzero_pd(); 2]; MR];
    let (a, b) = (a_panel.as_ptr(), b_panel.as_ptr());
    for p in 0..k {
        let b0 = _mm512_loadu_pd(b.add(p * NR));
        let b1 = _mm512_loadu_pd(b.add(p * NR + 8));
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_pd(*a.add(p * MR + r));
            acc_row[0] = _mm512_add_pd(acc_row[0], _mm512_mul_pd(av, b0));
            acc_row[1] = _mm512_add_pd(acc_row[1], _mm512_mul_pd(av, b1));
        }
    }
    let mut out = [[0.0f64; NR]; MR];
    for (o, acc_row) in out.iter_mut().zip(&acc) {
        _mm512_storeu_pd(o.as_mut_ptr(), acc_row[0]);
        _mm512_storeu_pd(o.as_mut_ptr().add(8), acc_row[1]);
    }
    out
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when the window does not fit.
    pub fn output_extent(&self) -> Option<(usize, usize)> {
        let span_h = self.height + 2 * self.pad;
        let span_w = self.width + 2 * self.pad;
        if self.stride == 0 || span_h < self.kernel || span_w < self.kernel {
            return None;
        }
        Some((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold a `C×H×W` input into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_extent().expect("valid conv geometry");
    if g.is_pointwise() {
        return input.to_vec();
    }
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * ow + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.output_extent().expect("valid conv geometry");
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let k = g.kernel;
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a `C×H×W` tensor to `C×OH×OW`; output
/// pixel `(y, x)` reads source pixel `(⌊y·H/OH⌋, ⌊x·W/OW⌋)`.
pub fn resize_nearest(input: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let src_x: Vec<usize> = (0..ow).map(|x| x * w / ow).collect();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let sy = oy * h / oh;
            let src = &input[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (d, &sx) in dst.iter_mut().zip(&src_x) {
                *d = src[sx];
            }
        }
    }
    out
}

/// Adjoint of [`resize_nearest`]: every source pixel collects the gradient
/// of the output pixels that read it.
pub fn resize_nearest_adjoint(grad: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let src_x: Vec<usize> = (0..ow).map(|x| x * w / ow).collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let sy = oy * h / oh;
            let src = &grad[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            let dst = &mut out[(ch * h + sy) * w..(ch * h + sy + 1) * w];
            for (g, &sx) in src.iter().zip(&src_x) {
                dst[sx] += g;
            }
        }
    }
    out
}
