//! im2col-based convolution kernels over a single sample.
//!
//! One geometry type covers 2D and 3D convolutions; a 2D convolution is the
//! depth-1 case. Depth always uses stride 1.

use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::Element;

/// Geometry of a convolution seen from the *image* side (`c`, `d`, `h`, `w`)
/// and the *response* side (`od`, `oh`, `ow`).
///
/// For a transposed convolution the image is the output and the response is
/// the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pd: usize,
    pub ph: usize,
    pub pw: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.c * self.kd * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.od * self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kd == 1 && self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pd == 0 && self.ph == 0 && self.pw == 0
    }

    /// Image index read by column entry (`row`, `col`), if inside the image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (s, cols) = (self.stride as isize, self.cols());
        for ci in 0..self.c {
            for kz in 0..self.kd {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = ((ci * self.kd + kz) * self.kh + ky) * self.kw + kx;
                        for oz in 0..self.od {
                            let iz = oz as isize + kz as isize - self.pd as isize;
                            if iz < 0 || iz >= self.d as isize {
                                continue;
                            }
                            for oy in 0..self.oh {
                                let iy = oy as isize * s + ky as isize - self.ph as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let img_row = ((ci * self.d + iz as usize) * self.h + iy as usize) * self.w;
                                let col_row = row * cols + (oz * self.oh + oy) * self.ow;
                                for ox in 0..self.ow {
                                    let ix = ox as isize * s + kx as isize - self.pw as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    f(col_row + ox, img_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col<T: Element>(g: &Geom, img: &[T], cols: &mut [T]) {
    cols.fill(T::ZERO);
    g.for_each(|ci, ii| cols[ci] = img[ii]);
}

pub fn col2im_add<T: Element>(g: &Geom, cols: &[T], img: &mut [T]) {
    g.for_each(|ci, ii| img[ii] += cols[ci]);
}

fn columns<'a, T: Element>(g: &Geom, img: &'a [T], scratch: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        img
    } else {
        scratch.resize(g.rows() * g.cols(), T::ZERO);
        im2col(g, img, scratch);
        scratch
    }
}

/// Forward convolution of one sample. `out` has `cout * g.cols()` entries.
pub fn conv_forward<T: Element>(g: &Geom, cout: usize, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let n = g.cols();
    match bias {
        Some(b) => {
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(b[co]);
            }
        }
        None => out.fill(T::ZERO),
    }
    let mut scratch = Vec::new();
    let cols = columns(g, x, &mut scratch);
    gemm_nn(cout, n, g.rows(), w, cols, out);
}

/// Backward convolution of one sample; each gradient buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Element>(
    g: &Geom,
    cout: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.cols();
    if let Some(db) = db {
        for (co, chunk) in dout.chunks(n).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let mut scratch = Vec::new();
        let cols = columns(g, x, &mut scratch);
        gemm_nt(cout, g.rows(), n, dout, cols, dw);
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm_tn(g.rows(), n, cout, w, dout, dx);
        } else {
            let mut dcols = vec![T::ZERO; g.rows() * n];
            gemm_tn(g.rows(), n, cout, w, dout, &mut dcols);
            col2im_add(g, &dcols, dx);
        }
    }
}

/// Transposed convolution of one sample: `x` has `cin * g.cols()` entries and
/// `out` has `g.image_len()` entries. Weight layout `(cin, g.c, k..)`.
pub fn conv_transpose_forward<T: Element>(g: &Geom, cin: usize, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let plane = g.d * g.h * g.w;
    match bias {
        Some(b) => {
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        None => out.fill(T::ZERO),
    }
    if g.is_pointwise() {
        gemm_tn(g.rows(), g.cols(), cin, w, x, out);
    } else {
        let mut cols = vec![T::ZERO; g.rows() * g.cols()];
        gemm_tn(g.rows(), g.cols(), cin, w, x, &mut cols);
        col2im_add(g, &cols, out);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Element>(
    g: &Geom,
    cin: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane = g.d * g.h * g.w;
    if let Some(db) = db {
        for (co, chunk) in dout.chunks(plane).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut scratch = Vec::new();
    let dcols = columns(g, dout, &mut scratch);
    if let Some(dx) = dx {
        gemm_nn(cin, g.cols(), g.rows(), w, dcols, dx);
    }
    if let Some(dw) = dw {
        gemm_nt(cin, g.rows(), g.cols(), x, dcols, dw);
    }
}
