//! Raw convolution and sampling kernels over flat slices.
//!
//! Both the fixed-grid and the offset-sampled convolution lower to the same
//! `im2col` + GEMM path, so with all-zero offsets the two produce
//! bit-identical outputs.

/// `C = beta * C + A · B` for row-major operands, with optional transposes.
///
/// `a` is `m × k` (or `k × m` when `ta`), `b` is `k × n` (or `n × k` when
/// `tb`), `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Value of `plane[y, x]` with zero outside `[0,h) × [0,w)`.
#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Integer cell and fractional position of a sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cell {
    pub y0: isize,
    pub x0: isize,
    pub ly: f64,
    pub lx: f64,
}

impl Cell {
    #[inline]
    pub fn locate(y: f64, x: f64) -> Cell {
        let yf = y.floor();
        let xf = x.floor();
        Cell {
            y0: yf as isize,
            x0: xf as isize,
            ly: y - yf,
            lx: x - xf,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[f64], h: usize, w: usize) -> f64 {
        let Cell { y0, x0, ly, lx } = *self;
        (1.0 - ly) * (1.0 - lx) * pixel(plane, h, w, y0, x0)
            + (1.0 - ly) * lx * pixel(plane, h, w, y0, x0 + 1)
            + ly * (1.0 - lx) * pixel(plane, h, w, y0 + 1, x0)
            + ly * lx * pixel(plane, h, w, y0 + 1, x0 + 1)
    }

    /// Derivatives of the sampled value with respect to `(y, x)`.
    #[inline]
    pub fn position_grad(&self, plane: &[f64], h: usize, w: usize) -> (f64, f64) {
        let Cell { y0, x0, ly, lx } = *self;
        let p00 = pixel(plane, h, w, y0, x0);
        let p01 = pixel(plane, h, w, y0, x0 + 1);
        let p10 = pixel(plane, h, w, y0 + 1, x0);
        let p11 = pixel(plane, h, w, y0 + 1, x0 + 1);
        let dy = (1.0 - lx) * (p10 - p00) + lx * (p11 - p01);
        let dx = (1.0 - ly) * (p01 - p00) + ly * (p11 - p10);
        (dy, dx)
    }

    /// Distribute `g` onto the four corner pixels of `grad_plane`.
    #[inline]
    pub fn scatter(&self, grad_plane: &mut [f64], h: usize, w: usize, g: f64) {
        let Cell { y0, x0, ly, lx } = *self;
        let corners = [
            (y0, x0, (1.0 - ly) * (1.0 - lx)),
            (y0, x0 + 1, (1.0 - ly) * lx),
            (y0 + 1, x0, ly * (1.0 - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ];
        for (y, x, wt) in corners {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                grad_plane[y as usize * w + x as usize] += g * wt;
            }
        }
    }
}

/// Bilinear interpolation of a single `h × w` plane at a fractional point.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    Cell::locate(y, x).sample(plane, h, w)
}

/// Geometry shared by the convolution kernels for one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.taps()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Zero-padded `im2col` for one sample: `cols[(ci·k² + tap), pixel]`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let ConvGeom { cin, h, w, k, pad } = g;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = pixel(plane, h, w, y as isize + dy, xx as isize + dx);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate column gradients into `dx`.
pub(crate) fn col2im(dcols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let ConvGeom { cin, h, w, k, pad } = g;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad as isize;
                let dx_ = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx_;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        plane[sy as usize * w + sx as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Sample cells for one sample of an offset-sampled convolution, indexed
/// `[tap, pixel]`. Offsets are laid out `(Δy, Δx)` per tap, taps in raster
/// order of the `k × k` grid.
pub(crate) fn deform_cells(offsets: &[f64], g: ConvGeom) -> Vec<Cell> {
    let ConvGeom { h, w, k, pad, .. } = g;
    let hw = h * w;
    let taps = g.taps();
    let mut cells = Vec::with_capacity(taps * hw);
    for tap in 0..taps {
        let ky = tap / k;
        let kx = tap % k;
        let oy = &offsets[(2 * tap) * hw..(2 * tap + 1) * hw];
        let ox = &offsets[(2 * tap + 1) * hw..(2 * tap + 2) * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sy = y as f64 + ky as f64 - pad as f64 + oy[p];
                let sx = x as f64 + kx as f64 - pad as f64 + ox[p];
                cells.push(Cell::locate(sy, sx));
            }
        }
    }
    cells
}

/// `im2col` at the fractional positions described by `cells`.
pub(crate) fn deform_im2col(x: &[f64], g: ConvGeom, cells: &[Cell], cols: &mut [f64]) {
    let ConvGeom { cin, h, w, .. } = g;
    let hw = h * w;
    let taps = g.taps();
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for tap in 0..taps {
            let row = ci * taps + tap;
            let dst = &mut cols[row * hw..(row + 1) * hw];
            let cs = &cells[tap * hw..(tap + 1) * hw];
            for (d, cell) in dst.iter_mut().zip(cs) {
                *d = cell.sample(plane, h, w);
            }
        }
    }
}

/// Adjoint of [`deform_im2col`] with respect to both the input pixels and
/// the offsets.
pub(crate) fn deform_col2im(
    dcols: &[f64],
    x: &[f64],
    g: ConvGeom,
    cells: &[Cell],
    dx: Option<&mut [f64]>,
    doff: Option<&mut [f64]>,
) {
    let ConvGeom { cin, h, w, .. } = g;
    let hw = h * w;
    let taps = g.taps();
    if let Some(dx) = dx {
        for ci in 0..cin {
            let gplane = &mut dx[ci * hw..(ci + 1) * hw];
            for tap in 0..taps {
                let row = ci * taps + tap;
                let src = &dcols[row * hw..(row + 1) * hw];
                let cs = &cells[tap * hw..(tap + 1) * hw];
                for (&gv, cell) in src.iter().zip(cs) {
                    if gv != 0.0 {
                        cell.scatter(gplane, h, w, gv);
                    }
                }
            }
        }
    }
    if let Some(doff) = doff {
        for ci in 0..cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for tap in 0..taps {
                let row = ci * taps + tap;
                let src = &dcols[row * hw..(row + 1) * hw];
                let cs = &cells[tap * hw..(tap + 1) * hw];
                let (gy, gx) = doff[2 * tap * hw..(2 * tap + 2) * hw].split_at_mut(hw);
                for p in 0..hw {
                    let gv = src[p];
                    if gv == 0.0 {
                        continue;
                    }
                    let (dy, dxv) = cs[p].position_grad(plane, h, w);
                    gy[p] += gv * dy;
                    gx[p] += gv * dxv;
                }
            }
        }
    }
}
