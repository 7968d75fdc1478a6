//! Convolution kernels built on im2col + GEMM.
//!
//! Layouts follow the usual deep-learning conventions: signals are
//! `[batch, channels, length]`, conv weights `[out, in / groups, kernel]`,
//! transposed-conv weights `[in, out, kernel]`.

use super::scalar::{gemm, Scalar};

/// Geometry shared by a convolution and its adjoint.
///
/// Column `t` of the im2col matrix reads the long signal at
/// `t * stride + j * dilation - padding` for tap `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn conv_out_len(&self, lin: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = lin + 2 * self.padding;
        assert!(
            padded >= span,
            "input length {lin} too short for kernel span {span}"
        );
        (padded - span) / self.stride + 1
    }

    pub fn transpose_out_len(&self, lin: usize) -> usize {
        let full = (lin - 1) * self.stride + self.dilation * (self.kernel - 1) + 1;
        assert!(
            full > 2 * self.padding,
            "transposed conv output would be empty"
        );
        full - 2 * self.padding
    }

    #[inline]
    fn pos(&self, t: usize, j: usize) -> isize {
        (t * self.stride + j * self.dilation) as isize - self.padding as isize
    }
}

/// `cols[(c * k + j) * ld + col0 + t] = long[c, pos(t, j)]` for `t < ncols`,
/// zero outside `[0, llen)`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    long: &[F],
    channels: usize,
    llen: usize,
    g: ConvGeom,
    ncols: usize,
    cols: &mut [F],
    ld: usize,
    col0: usize,
) {
    for c in 0..channels {
        let src = &long[c * llen..(c + 1) * llen];
        for j in 0..g.kernel {
            let start = (c * g.kernel + j) * ld + col0;
            let row = &mut cols[start..start + ncols];
            if g.stride == 1 {
                let off = j as isize * g.dilation as isize - g.padding as isize;
                // valid t: 0 <= t + off < llen
                let t0 = ((-off).max(0) as usize).min(ncols);
                let t1 = ((llen as isize - off).max(0) as usize).clamp(t0, ncols);
                row[..t0].iter_mut().for_each(|v| *v = F::zero());
                if t1 > t0 {
                    let s0 = (t0 as isize + off) as usize;
                    row[t0..t1].copy_from_slice(&src[s0..s0 + (t1 - t0)]);
                }
                row[t1..].iter_mut().for_each(|v| *v = F::zero());
            } else {
                for (t, v) in row.iter_mut().enumerate() {
                    let p = g.pos(t, j);
                    *v = if p >= 0 && (p as usize) < llen {
                        src[p as usize]
                    } else {
                        F::zero()
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the long signal.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<F: Scalar>(
    cols: &[F],
    channels: usize,
    llen: usize,
    g: ConvGeom,
    ncols: usize,
    long: &mut [F],
    ld: usize,
    col0: usize,
) {
    for c in 0..channels {
        let dst = &mut long[c * llen..(c + 1) * llen];
        for j in 0..g.kernel {
            let start = (c * g.kernel + j) * ld + col0;
            let row = &cols[start..start + ncols];
            if g.stride == 1 {
                let off = j as isize * g.dilation as isize - g.padding as isize;
                let t0 = ((-off).max(0) as usize).min(ncols);
                let t1 = ((llen as isize - off).max(0) as usize).clamp(t0, ncols);
                if t1 > t0 {
                    let s0 = (t0 as isize + off) as usize;
                    for (d, &v) in dst[s0..s0 + (t1 - t0)].iter_mut().zip(&row[t0..t1]) {
                        *d = *d + v;
                    }
                }
                continue;
            }
            for (t, &v) in row.iter().enumerate() {
                let p = g.pos(t, j);
                if p >= 0 && (p as usize) < llen {
                    dst[p as usize] = dst[p as usize] + v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub lin: usize,
    pub lout: usize,
    pub groups: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Upper bound on im2col buffer elements; batch items are packed side by side
/// into one GEMM up to this size.
const COLS_CAP: usize = 1 << 22;

fn batch_chunk(batch: usize, per_item: usize) -> usize {
    (COLS_CAP / per_item.max(1)).clamp(1, batch.max(1))
}

/// Copies `[rows, len]` blocks of items `b0..b0 + nb` (item stride `item`,
/// row offset `row0`) into `out[r * nb * len + bi * len + t]`.
#[allow(clippy::too_many_arguments)]
fn gather<F: Scalar>(
    src: &[F],
    b0: usize,
    nb: usize,
    item: usize,
    row0: usize,
    rows: usize,
    len: usize,
    out: &mut [F],
) {
    let n = nb * len;
    for bi in 0..nb {
        for r in 0..rows {
            let s = (b0 + bi) * item + (row0 + r) * len;
            out[r * n + bi * len..r * n + (bi + 1) * len].copy_from_slice(&src[s..s + len]);
        }
    }
}

/// Inverse of [`gather`].
#[allow(clippy::too_many_arguments)]
fn scatter<F: Scalar>(
    packed: &[F],
    b0: usize,
    nb: usize,
    item: usize,
    row0: usize,
    rows: usize,
    len: usize,
    dst: &mut [F],
) {
    let n = nb * len;
    for bi in 0..nb {
        for r in 0..rows {
            let d = (b0 + bi) * item + (row0 + r) * len;
            dst[d..d + len].copy_from_slice(&packed[r * n + bi * len..r * n + (bi + 1) * len]);
        }
    }
}

pub fn conv1d_forward<F: Scalar>(x: &[F], w: &[F], s: &ConvShape) -> Vec<F> {
    let (cin_g, cout_g, k) = (s.cin_g(), s.cout_g(), s.geom.kernel);
    let rows = cin_g * k;
    let chunk = batch_chunk(s.batch, rows * s.lout);
    let mut y = vec![F::zero(); s.batch * s.cout * s.lout];
    let mut cols = vec![F::zero(); rows * chunk * s.lout];
    let mut out = vec![F::zero(); cout_g * chunk * s.lout];
    for b0 in (0..s.batch).step_by(chunk) {
        let nb = chunk.min(s.batch - b0);
        let n = nb * s.lout;
        for grp in 0..s.groups {
            for bi in 0..nb {
                let c0 = ((b0 + bi) * s.cin + grp * cin_g) * s.lin;
                im2col(
                    &x[c0..c0 + cin_g * s.lin],
                    cin_g,
                    s.lin,
                    s.geom,
                    s.lout,
                    &mut cols,
                    n,
                    bi * s.lout,
                );
            }
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            gemm(cout_g, rows, n, wg, false, &cols, false, &mut out, false);
            scatter(
                &out,
                b0,
                nb,
                s.cout * s.lout,
                grp * cout_g,
                cout_g,
                s.lout,
                &mut y,
            );
        }
    }
    y
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv1d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    s: &ConvShape,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let (cin_g, cout_g, k) = (s.cin_g(), s.cout_g(), s.geom.kernel);
    let rows = cin_g * k;
    let chunk = batch_chunk(s.batch, rows * s.lout);
    let mut dx = need_dx.then(|| vec![F::zero(); s.batch * s.cin * s.lin]);
    let mut dw = need_dw.then(|| vec![F::zero(); w.len()]);
    let mut cols = vec![F::zero(); rows * chunk * s.lout];
    let mut dys = vec![F::zero(); cout_g * chunk * s.lout];
    for b0 in (0..s.batch).step_by(chunk) {
        let nb = chunk.min(s.batch - b0);
        let n = nb * s.lout;
        for grp in 0..s.groups {
            gather(
                dy,
                b0,
                nb,
                s.cout * s.lout,
                grp * cout_g,
                cout_g,
                s.lout,
                &mut dys,
            );
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            if let Some(dw) = dw.as_mut() {
                for bi in 0..nb {
                    let c0 = ((b0 + bi) * s.cin + grp * cin_g) * s.lin;
                    im2col(
                        &x[c0..c0 + cin_g * s.lin],
                        cin_g,
                        s.lin,
                        s.geom,
                        s.lout,
                        &mut cols,
                        n,
                        bi * s.lout,
                    );
                }
                let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                gemm(cout_g, n, rows, &dys, false, &cols, true, dwg, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, cout_g, n, wg, true, &dys, false, &mut cols, false);
                for bi in 0..nb {
                    let c0 = ((b0 + bi) * s.cin + grp * cin_g) * s.lin;
                    col2im_add(
                        &cols,
                        cin_g,
                        s.lin,
                        s.geom,
                        s.lout,
                        &mut dx[c0..c0 + cin_g * s.lin],
                        n,
                        bi * s.lout,
                    );
                }
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution (groups = 1), weight `[cin, cout, k]`.
pub fn conv_transpose1d_forward<F: Scalar>(x: &[F], w: &[F], s: &ConvShape) -> Vec<F> {
    let k = s.geom.kernel;
    let rows = s.cout * k;
    let chunk = batch_chunk(s.batch, rows * s.lin);
    let mut y = vec![F::zero(); s.batch * s.cout * s.lout];
    let mut cols = vec![F::zero(); rows * chunk * s.lin];
    let mut xs = vec![F::zero(); s.cin * chunk * s.lin];
    for b0 in (0..s.batch).step_by(chunk) {
        let nb = chunk.min(s.batch - b0);
        let n = nb * s.lin;
        gather(x, b0, nb, s.cin * s.lin, 0, s.cin, s.lin, &mut xs);
        gemm(rows, s.cin, n, w, true, &xs, false, &mut cols, false);
        for bi in 0..nb {
            let b = b0 + bi;
            let ys = &mut y[b * s.cout * s.lout..(b + 1) * s.cout * s.lout];
            col2im_add(&cols, s.cout, s.lout, s.geom, s.lin, ys, n, bi * s.lin);
        }
    }
    y
}

pub fn conv_transpose1d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    s: &ConvShape,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let k = s.geom.kernel;
    let rows = s.cout * k;
    let chunk = batch_chunk(s.batch, rows * s.lin);
    let mut dx = need_dx.then(|| vec![F::zero(); s.batch * s.cin * s.lin]);
    let mut dw = need_dw.then(|| vec![F::zero(); w.len()]);
    let mut cols = vec![F::zero(); rows * chunk * s.lin];
    let mut packed = vec![F::zero(); s.cin * chunk * s.lin];
    for b0 in (0..s.batch).step_by(chunk) {
        let nb = chunk.min(s.batch - b0);
        let n = nb * s.lin;
        for bi in 0..nb {
            let b = b0 + bi;
            let dys = &dy[b * s.cout * s.lout..(b + 1) * s.cout * s.lout];
            im2col(dys, s.cout, s.lout, s.geom, s.lin, &mut cols, n, bi * s.lin);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(s.cin, rows, n, w, false, &cols, false, &mut packed, false);
            scatter(&packed, b0, nb, s.cin * s.lin, 0, s.cin, s.lin, dx);
        }
        if let Some(dw) = dw.as_mut() {
            gather(x, b0, nb, s.cin * s.lin, 0, s.cin, s.lin, &mut packed);
            gemm(s.cin, n, rows, &packed, false, &cols, true, dw, true);
        }
    }
    (dx, dw)
}
