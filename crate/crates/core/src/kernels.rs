//! Dense convolution arithmetic for 2-D and 3-D feature maps.
//!
//! Both convolution and transposed convolution are expressed through one
//! patch-matrix representation: a "grid" of positions (the conv output / the
//! transposed-conv input) maps into a "field" (the conv input / the
//! transposed-conv output) at `field = grid·stride − pad + kernel_offset`.
//! Gathering patches plus a blocked GEMM yields every forward and gradient
//! pass without separate kernel code paths.

/// Output extent of a convolution along one axis.
#[must_use]
pub fn conv_out_dim(input: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(input + 2 * p >= k, "conv input {input} too small for kernel {k} pad {p}");
    (input + 2 * p - k) / s + 1
}

/// Output extent of a transposed convolution along one axis.
#[must_use]
pub fn convt_out_dim(input: usize, k: usize, s: usize, p: usize, out_pad: usize) -> usize {
    assert!(out_pad < s, "output padding {out_pad} must be smaller than stride {s}");
    (input - 1) * s + k + out_pad - 2 * p
}

/// Geometry of one convolution call (single batch element).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub out_pad: usize,
    /// Spatial extents of the input feature map.
    pub in_dims: Vec<usize>,
    /// Spatial extents of the output feature map.
    pub out_dims: Vec<usize>,
    pub transposed: bool,
}

impl ConvGeom {
    /// Geometry for an ordinary convolution.
    #[must_use]
    pub fn conv(c_in: usize, c_out: usize, k: usize, s: usize, p: usize, in_dims: &[usize]) -> Self {
        let out_dims = in_dims.iter().map(|&d| conv_out_dim(d, k, s, p)).collect();
        ConvGeom {
            c_in,
            c_out,
            k,
            s,
            p,
            out_pad: 0,
            in_dims: in_dims.to_vec(),
            out_dims,
            transposed: false,
        }
    }

    /// Geometry for a transposed convolution.
    #[must_use]
    pub fn convt(
        c_in: usize,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        out_pad: usize,
        in_dims: &[usize],
    ) -> Self {
        let out_dims = in_dims.iter().map(|&d| convt_out_dim(d, k, s, p, out_pad)).collect();
        ConvGeom {
            c_in,
            c_out,
            k,
            s,
            p,
            out_pad,
            in_dims: in_dims.to_vec(),
            out_dims,
            transposed: true,
        }
    }

    /// Spatial rank (2 or 3).
    #[must_use]
    pub fn rank(&self) -> usize {
        self.in_dims.len()
    }

    /// Number of grid positions (patch rows).
    #[must_use]
    pub fn grid_len(&self) -> usize {
        self.grid_dims().iter().product()
    }

    /// Kernel volume `k^rank`.
    #[must_use]
    pub fn kernel_volume(&self) -> usize {
        self.k.pow(self.rank() as u32)
    }

    /// Patch length: field channels times kernel volume.
    #[must_use]
    pub fn patch_len(&self) -> usize {
        self.field_channels() * self.kernel_volume()
    }

    /// Channel count of the field side (conv input / transposed-conv output).
    #[must_use]
    pub fn field_channels(&self) -> usize {
        if self.transposed {
            self.c_out
        } else {
            self.c_in
        }
    }

    /// Spatial dims of the grid side.
    #[must_use]
    pub fn grid_dims(&self) -> &[usize] {
        if self.transposed {
            &self.in_dims
        } else {
            &self.out_dims
        }
    }

    /// Spatial dims of the field side.
    #[must_use]
    pub fn field_dims(&self) -> &[usize] {
        if self.transposed {
            &self.out_dims
        } else {
            &self.in_dims
        }
    }

    /// Elements of the input feature map (channels included).
    #[must_use]
    pub fn in_len(&self) -> usize {
        self.c_in * self.in_dims.iter().product::<usize>()
    }

    /// Elements of the output feature map (channels included).
    #[must_use]
    pub fn out_len(&self) -> usize {
        self.c_out * self.out_dims.iter().product::<usize>()
    }
}

const GEMM_NC: usize = 512;
const GEMM_KC: usize = 256;
const GEMM_MR: usize = 4;

/// `c[m×n] += a[m×kd] · b[kd×n]`, all row-major.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, kd: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), m * kd);
    assert_eq!(b.len(), kd * n);
    if m == 0 || kd == 0 || n == 0 {
        return;
    }
    let mut acc = [[0.0f64; GEMM_NC]; GEMM_MR];
    for j0 in (0..n).step_by(GEMM_NC) {
        let jl = GEMM_NC.min(n - j0);
        for k0 in (0..kd).step_by(GEMM_KC) {
            let kl = GEMM_KC.min(kd - k0);
            for i0 in (0..m).step_by(GEMM_MR) {
                let il = GEMM_MR.min(m - i0);
                for (r, row) in acc.iter_mut().take(il).enumerate() {
                    row[..jl].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + jl]);
                }
                for k in k0..k0 + kl {
                    let brow = &b[k * n + j0..k * n + j0 + jl];
                    for (r, row) in acc.iter_mut().take(il).enumerate() {
                        let av = a[(i0 + r) * kd + k];
                        for (dst, &bv) in row[..jl].iter_mut().zip(brow) {
                            *dst += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().take(il).enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + jl].copy_from_slice(&row[..jl]);
                }
            }
        }
    }
}

/// `dst[cols×rows] = src[rows×cols]ᵀ`, row-major.
pub fn transpose(dst: &mut [f64], src: &[f64], rows: usize, cols: usize) {
    assert_eq!(dst.len(), rows * cols);
    assert_eq!(src.len(), rows * cols);
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Gathers field patches into patch rows: `cols[p][c·k^R + κ] = field value`.
///
/// Out-of-bounds taps read as zero. `field` has layout `[channels, *dims]`.
pub fn gather_patches(field: &[f64], channels: usize, geom: &ConvGeom, cols: &mut [f64]) {
    let fd = geom.field_dims();
    let gd = geom.grid_dims();
    let patch = geom.patch_len();
    assert_eq!(channels, geom.field_channels());
    assert_eq!(field.len(), channels * fd.iter().product::<usize>());
    assert_eq!(cols.len(), geom.grid_len() * patch);
    match geom.rank() {
        2 => gather2(field, channels, fd, gd, geom, cols),
        3 => gather3(field, channels, fd, gd, geom, cols),
        r => panic!("unsupported spatial rank {r}"),
    }
}

/// Scatter-adds patch rows back into the field (adjoint of [`gather_patches`]).
pub fn scatter_patches(cols: &[f64], channels: usize, geom: &ConvGeom, field: &mut [f64]) {
    let fd = geom.field_dims();
    let gd = geom.grid_dims();
    let patch = geom.patch_len();
    assert_eq!(channels, geom.field_channels());
    assert_eq!(field.len(), channels * fd.iter().product::<usize>());
    assert_eq!(cols.len(), geom.grid_len() * patch);
    match geom.rank() {
        2 => scatter2(cols, channels, fd, gd, geom, field),
        3 => scatter3(cols, channels, fd, gd, geom, field),
        r => panic!("unsupported spatial rank {r}"),
    }
}

fn gather2(field: &[f64], ch: usize, fd: &[usize], gd: &[usize], g: &ConvGeom, cols: &mut [f64]) {
    let (fh, fw) = (fd[0], fd[1]);
    let (gh, gw) = (gd[0], gd[1]);
    let (k, s, p) = (g.k, g.s, g.p);
    let kk = k * k;
    let patch = ch * kk;
    for gy in 0..gh {
        let iy0 = gy as isize * s as isize - p as isize;
        for gx in 0..gw {
            let ix0 = gx as isize * s as isize - p as isize;
            let row = &mut cols[(gy * gw + gx) * patch..(gy * gw + gx + 1) * patch];
            let inside = iy0 >= 0
                && ix0 >= 0
                && iy0 + k as isize <= fh as isize
                && ix0 + k as isize <= fw as isize;
            if inside {
                let (iy0, ix0) = (iy0 as usize, ix0 as usize);
                for c in 0..ch {
                    let base = c * fh * fw;
                    for ky in 0..k {
                        let src = base + (iy0 + ky) * fw + ix0;
                        row[c * kk + ky * k..c * kk + ky * k + k]
                            .copy_from_slice(&field[src..src + k]);
                    }
                }
            } else {
                for c in 0..ch {
                    let base = c * fh * fw;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            row[c * kk + ky * k + kx] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < fh
                                && (ix as usize) < fw
                            {
                                field[base + iy as usize * fw + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn scatter2(cols: &[f64], ch: usize, fd: &[usize], gd: &[usize], g: &ConvGeom, field: &mut [f64]) {
    let (fh, fw) = (fd[0], fd[1]);
    let (gh, gw) = (gd[0], gd[1]);
    let (k, s, p) = (g.k, g.s, g.p);
    let kk = k * k;
    let patch = ch * kk;
    for gy in 0..gh {
        let iy0 = gy as isize * s as isize - p as isize;
        for gx in 0..gw {
            let ix0 = gx as isize * s as isize - p as isize;
            let row = &cols[(gy * gw + gx) * patch..(gy * gw + gx + 1) * patch];
            for c in 0..ch {
                let base = c * fh * fw;
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy as usize >= fh {
                        continue;
                    }
                    let dst_base = base + iy as usize * fw;
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && (ix as usize) < fw {
                            field[dst_base + ix as usize] += row[c * kk + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
}

fn gather3(field: &[f64], ch: usize, fd: &[usize], gd: &[usize], g: &ConvGeom, cols: &mut [f64]) {
    let (fd0, fd1, fd2) = (fd[0], fd[1], fd[2]);
    let (gd0, gd1, gd2) = (gd[0], gd[1], gd[2]);
    let (k, s, p) = (g.k, g.s, g.p);
    let kv = k * k * k;
    let patch = ch * kv;
    for g0 in 0..gd0 {
        let i0 = g0 as isize * s as isize - p as isize;
        for g1 in 0..gd1 {
            let i1 = g1 as isize * s as isize - p as isize;
            for g2 in 0..gd2 {
                let i2 = g2 as isize * s as isize - p as isize;
                let pos = (g0 * gd1 + g1) * gd2 + g2;
                let row = &mut cols[pos * patch..(pos + 1) * patch];
                for c in 0..ch {
                    let base = c * fd0 * fd1 * fd2;
                    for k0 in 0..k {
                        let f0 = i0 + k0 as isize;
                        for k1 in 0..k {
                            let f1 = i1 + k1 as isize;
                            let dst = c * kv + (k0 * k + k1) * k;
                            if f0 < 0 || f0 as usize >= fd0 || f1 < 0 || f1 as usize >= fd1 {
                                row[dst..dst + k].fill(0.0);
                                continue;
                            }
                            let src_base = base + (f0 as usize * fd1 + f1 as usize) * fd2;
                            if i2 >= 0 && i2 + k as isize <= fd2 as isize {
                                let src = src_base + i2 as usize;
                                row[dst..dst + k].copy_from_slice(&field[src..src + k]);
                            } else {
                                for k2 in 0..k {
                                    let f2 = i2 + k2 as isize;
                                    row[dst + k2] = if f2 >= 0 && (f2 as usize) < fd2 {
                                        field[src_base + f2 as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn scatter3(cols: &[f64], ch: usize, fd: &[usize], gd: &[usize], g: &ConvGeom, field: &mut [f64]) {
    let (fd0, fd1, fd2) = (fd[0], fd[1], fd[2]);
    let (gd0, gd1, gd2) = (gd[0], gd[1], gd[2]);
    let (k, s, p) = (g.k, g.s, g.p);
    let kv = k * k * k;
    let patch = ch * kv;
    for g0 in 0..gd0 {
        let i0 = g0 as isize * s as isize - p as isize;
        for g1 in 0..gd1 {
            let i1 = g1 as isize * s as isize - p as isize;
            for g2 in 0..gd2 {
                let i2 = g2 as isize * s as isize - p as isize;
                let pos = (g0 * gd1 + g1) * gd2 + g2;
                let row = &cols[pos * patch..(pos + 1) * patch];
                for c in 0..ch {
                    let base = c * fd0 * fd1 * fd2;
                    for k0 in 0..k {
                        let f0 = i0 + k0 as isize;
                        if f0 < 0 || f0 as usize >= fd0 {
                            continue;
                        }
                        for k1 in 0..k {
                            let f1 = i1 + k1 as isize;
                            if f1 < 0 || f1 as usize >= fd1 {
                                continue;
                            }
                            let src = c * kv + (k0 * k + k1) * k;
                            let dst_base = base + (f0 as usize * fd1 + f1 as usize) * fd2;
                            for k2 in 0..k {
                                let f2 = i2 + k2 as isize;
                                if f2 >= 0 && (f2 as usize) < fd2 {
                                    field[dst_base + f2 as usize] += row[src + k2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for one batch element.
///
/// `x`: `[c_in, *in_dims]`; `w`: `[c_out, c_in·k^R]`; `y`: `[c_out, *out_dims]`.
pub fn conv_item_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, y: &mut [f64]) {
    assert!(!g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut cols = vec![0.0; p_len * kw];
    gather_patches(x, g.c_in, g, &mut cols);
    let mut w_t = vec![0.0; kw * g.c_out];
    transpose(&mut w_t, w, g.c_out, kw);
    let mut y_t = vec![0.0; p_len * g.c_out];
    gemm_acc(&mut y_t, &cols, &w_t, p_len, kw, g.c_out);
    transpose(y, &y_t, p_len, g.c_out);
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            for v in &mut y[c * p_len..(c + 1) * p_len] {
                *v += bv;
            }
        }
    }
}

/// Input gradient of a convolution: accumulates into `dx`.
pub fn conv_item_grad_x(dy: &[f64], w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    assert!(!g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut dy_t = vec![0.0; p_len * g.c_out];
    transpose(&mut dy_t, dy, g.c_out, p_len);
    let mut dcols = vec![0.0; p_len * kw];
    gemm_acc(&mut dcols, &dy_t, w, p_len, g.c_out, kw);
    scatter_patches(&dcols, g.c_in, g, dx);
}

/// Weight/bias gradient of a convolution: accumulates into `dw` (and `db`).
pub fn conv_item_grad_w(
    x: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    assert!(!g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut cols = vec![0.0; p_len * kw];
    gather_patches(x, g.c_in, g, &mut cols);
    gemm_acc(dw, dy, &cols, g.c_out, p_len, kw);
    if let Some(db) = db {
        for (c, dbv) in db.iter_mut().enumerate() {
            *dbv += dy[c * p_len..(c + 1) * p_len].iter().sum::<f64>();
        }
    }
}

/// Forward transposed convolution for one batch element.
///
/// `x`: `[c_in, *in_dims]`; `w`: `[c_in, c_out·k^R]`; `y`: `[c_out, *out_dims]`.
pub fn convt_item_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, y: &mut [f64]) {
    assert!(g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut x_t = vec![0.0; p_len * g.c_in];
    transpose(&mut x_t, x, g.c_in, p_len);
    let mut cols = vec![0.0; p_len * kw];
    gemm_acc(&mut cols, &x_t, w, p_len, g.c_in, kw);
    y.fill(0.0);
    scatter_patches(&cols, g.c_out, g, y);
    if let Some(b) = bias {
        let out_sp: usize = g.out_dims.iter().product();
        for (c, &bv) in b.iter().enumerate() {
            for v in &mut y[c * out_sp..(c + 1) * out_sp] {
                *v += bv;
            }
        }
    }
}

/// Input gradient of a transposed convolution: accumulates into `dx`.
pub fn convt_item_grad_x(dy: &[f64], w: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    assert!(g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut dcols = vec![0.0; p_len * kw];
    gather_patches(dy, g.c_out, g, &mut dcols);
    let mut w_t = vec![0.0; kw * g.c_in];
    transpose(&mut w_t, w, g.c_in, kw);
    let mut dx_t = vec![0.0; p_len * g.c_in];
    gemm_acc(&mut dx_t, &dcols, &w_t, p_len, kw, g.c_in);
    let mut dx_add = vec![0.0; dx.len()];
    transpose(&mut dx_add, &dx_t, p_len, g.c_in);
    for (dst, src) in dx.iter_mut().zip(&dx_add) {
        *dst += src;
    }
}

/// Weight/bias gradient of a transposed convolution: accumulates into `dw`.
pub fn convt_item_grad_w(
    x: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    assert!(g.transposed);
    let (kw, p_len) = (g.patch_len(), g.grid_len());
    let mut dcols = vec![0.0; p_len * kw];
    gather_patches(dy, g.c_out, g, &mut dcols);
    gemm_acc(dw, x, &dcols, g.c_in, p_len, kw);
    if let Some(db) = db {
        let out_sp: usize = g.out_dims.iter().product();
        for (c, dbv) in db.iter_mut().enumerate() {
            *dbv += dy[c * out_sp..(c + 1) * out_sp].iter().sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution used as the oracle.
    fn naive_conv2(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
        let (ih, iw) = (g.in_dims[0], g.in_dims[1]);
        let (oh, ow) = (g.out_dims[0], g.out_dims[1]);
        let mut y = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.s + ky) as isize - g.p as isize;
                                let ix = (ox * g.s + kx) as isize - g.p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                                    let xv = x[(ci * ih + iy as usize) * iw + ix as usize];
                                    let wv = w[(co * g.c_in + ci) * g.k * g.k + ky * g.k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    /// Direct transposed convolution oracle (scatter form).
    fn naive_convt2(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ih, iw) = (g.in_dims[0], g.in_dims[1]);
        let (oh, ow) = (g.out_dims[0], g.out_dims[1]);
        let mut y = vec![0.0; g.c_out * oh * ow];
        for ci in 0..g.c_in {
            for iy in 0..ih {
                for ix in 0..iw {
                    let xv = x[(ci * ih + iy) * iw + ix];
                    for co in 0..g.c_out {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let oy = (iy * g.s + ky) as isize - g.p as isize;
                                let ox = (ix * g.s + kx) as isize - g.p as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let wv = w[(ci * g.c_out + co) * g.k * g.k + ky * g.k + kx];
                                    y[(co * oh + oy as usize) * ow + ox as usize] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "at {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_output_dims_match_arithmetic() {
        assert_eq!(conv_out_dim(160, 5, 2, 2), 80);
        assert_eq!(conv_out_dim(5, 5, 2, 2), 3);
        assert_eq!(conv_out_dim(10, 4, 1, 0), 7);
        assert_eq!(convt_out_dim(5, 5, 2, 2, 1), 10);
        assert_eq!(convt_out_dim(7, 4, 1, 0, 0), 10);
        assert_eq!(convt_out_dim(10, 4, 2, 1, 0), 20);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, kd, n) in &[(1, 1, 1), (4, 7, 9), (13, 600, 17), (5, 3, 1100)] {
            let a = randv(m * kd, &mut rng);
            let b = randv(kd * n, &mut rng);
            let mut c = randv(m * n, &mut rng);
            let mut expect = c.clone();
            for i in 0..m {
                for kk in 0..kd {
                    for j in 0..n {
                        expect[i * n + j] += a[i * kd + kk] * b[kk * n + j];
                    }
                }
            }
            gemm_acc(&mut c, &a, &b, m, kd, n);
            assert_close(&c, &expect, 1e-12);
        }
    }

    #[test]
    fn conv2_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(cin, cout, k, s, p, side) in
            &[(3, 4, 5, 2, 2, 8), (2, 3, 3, 1, 1, 6), (1, 2, 4, 2, 1, 10), (2, 2, 1, 1, 0, 4)]
        {
            let g = ConvGeom::conv(cin, cout, k, s, p, &[side, side]);
            let x = randv(g.in_len(), &mut rng);
            let w = randv(cout * g.patch_len(), &mut rng);
            let b = randv(cout, &mut rng);
            let mut y = vec![0.0; g.out_len()];
            conv_item_forward(&x, &w, Some(&b), &g, &mut y);
            assert_close(&y, &naive_conv2(&x, &w, Some(&b), &g), 1e-12);
        }
    }

    #[test]
    fn convt2_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &(cin, cout, k, s, p, op, side) in
            &[(3, 2, 5, 2, 2, 1, 5), (2, 3, 4, 2, 1, 0, 6), (4, 1, 4, 1, 0, 0, 7)]
        {
            let g = ConvGeom::convt(cin, cout, k, s, p, op, &[side, side]);
            let x = randv(g.in_len(), &mut rng);
            let w = randv(cin * g.patch_len(), &mut rng);
            let mut y = vec![0.0; g.out_len()];
            convt_item_forward(&x, &w, None, &g, &mut y);
            assert_close(&y, &naive_convt2(&x, &w, &g), 1e-12);
        }
    }

    #[test]
    fn conv3_forward_matches_gather_identity() {
        // For k=s=1, p=0 the convolution is a per-voxel channel mix; verify
        // against a direct matrix product.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom::conv(3, 2, 1, 1, 0, &[4, 5, 6]);
        let x = randv(g.in_len(), &mut rng);
        let w = randv(2 * 3, &mut rng);
        let mut y = vec![0.0; g.out_len()];
        conv_item_forward(&x, &w, None, &g, &mut y);
        let sp = 4 * 5 * 6;
        for co in 0..2 {
            for v in 0..sp {
                let expect = (0..3).map(|ci| w[co * 3 + ci] * x[ci * sp + v]).sum::<f64>();
                assert!((y[co * sp + v] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3_strided_matches_2d_slicewise() {
        // A 3-D conv with kernel extent 1 on the leading axis reduces to a 2-D
        // conv applied per slice.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g3 = ConvGeom::conv(2, 3, 1, 1, 0, &[4, 6, 6]);
        assert_eq!(g3.out_dims, vec![4, 6, 6]);
        let g2 = ConvGeom::conv(2, 3, 1, 1, 0, &[6, 6]);
        let x = randv(g3.in_len(), &mut rng);
        let w = randv(3 * g3.patch_len(), &mut rng);
        let mut y3 = vec![0.0; g3.out_len()];
        conv_item_forward(&x, &w, None, &g3, &mut y3);
        for d in 0..4 {
            let mut slice = vec![0.0; 2 * 36];
            for c in 0..2 {
                slice[c * 36..(c + 1) * 36]
                    .copy_from_slice(&x[c * 4 * 36 + d * 36..c * 4 * 36 + (d + 1) * 36]);
            }
            let mut y2 = vec![0.0; 3 * 36];
            conv_item_forward(&slice, &w, None, &g2, &mut y2);
            for c in 0..3 {
                let got = &y3[c * 4 * 36 + d * 36..c * 4 * 36 + (d + 1) * 36];
                assert_close(got, &y2[c * 36..(c + 1) * 36], 1e-12);
            }
        }
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        // <gather(x), c> must equal <x, scatter(c)> — the defining property of
        // the adjoint pair used by every gradient path.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for geom in [
            ConvGeom::conv(2, 3, 5, 2, 2, &[9, 9]),
            ConvGeom::convt(3, 2, 4, 2, 1, 0, &[5, 5]),
            ConvGeom::conv(1, 2, 4, 2, 1, &[6, 6, 6]),
            ConvGeom::convt(2, 1, 4, 1, 0, 0, &[3, 3, 3]),
        ] {
            let ch = geom.field_channels();
            let f_len = ch * geom.field_dims().iter().product::<usize>();
            let c_len = geom.grid_len() * geom.patch_len();
            let x = randv(f_len, &mut rng);
            let c = randv(c_len, &mut rng);
            let mut gx = vec![0.0; c_len];
            gather_patches(&x, ch, &geom, &mut gx);
            let mut sc = vec![0.0; f_len];
            scatter_patches(&c, ch, &geom, &mut sc);
            let lhs: f64 = gx.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&sc).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = ConvGeom::conv(2, 2, 3, 2, 1, &[5, 5]);
        let x = randv(g.in_len(), &mut rng);
        let w = randv(2 * g.patch_len(), &mut rng);
        let b = randv(2, &mut rng);
        let seed = randv(g.out_len(), &mut rng);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            let mut y = vec![0.0; g.out_len()];
            conv_item_forward(x, w, Some(b), &g, &mut y);
            y.iter().zip(&seed).map(|(a, s)| a * s).sum()
        };
        let mut dx = vec![0.0; x.len()];
        conv_item_grad_x(&seed, &w, &g, &mut dx);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        conv_item_grad_w(&x, &seed, &g, &mut dw, Some(&mut db));
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]: {fd} vs {}", dx[i]);
        }
        for i in (0..w.len()).step_by(11) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dw[{i}]: {fd} vs {}", dw[i]);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6 * (1.0 + fd.abs()), "db[{i}]: {fd} vs {}", db[i]);
        }
    }

    #[test]
    fn convt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = ConvGeom::convt(2, 2, 4, 2, 1, 0, &[4, 4]);
        let x = randv(g.in_len(), &mut rng);
        let w = randv(2 * g.patch_len(), &mut rng);
        let seed = randv(g.out_len(), &mut rng);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            let mut y = vec![0.0; g.out_len()];
            convt_item_forward(x, w, None, &g, &mut y);
            y.iter().zip(&seed).map(|(a, s)| a * s).sum()
        };
        let mut dx = vec![0.0; x.len()];
        convt_item_grad_x(&seed, &w, &g, &mut dx);
        let mut dw = vec![0.0; w.len()];
        convt_item_grad_w(&x, &seed, &g, &mut dw, None);
        let h = 1e-6;
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]");
        }
        for i in (0..w.len()).step_by(9) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dw[{i}]");
        }
    }
}
