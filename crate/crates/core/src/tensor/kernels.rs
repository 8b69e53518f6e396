//! Dense inner loops. All routines accumulate into `c` (`c += ...`).

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub(crate) fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[c,h,w]` into `[c·kh·kw, oh·ow]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            img[(ch * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[c·kh·kw, oh·ow]` back onto `[c,h,w]`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let cols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        img[(ch * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every flat index of `out_shape` to the flat index of an input of
/// `in_shape` broadcast against it. `in_shape` must be broadcast-compatible.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> BroadcastMap {
    let out_n: usize = out_shape.iter().product();
    let in_n: usize = in_shape.iter().product();
    if out_shape == in_shape {
        return BroadcastMap::Identity;
    }
    // Trailing-suffix broadcast (bias, positional tables): index = i % in_n.
    let trimmed: Vec<usize> = in_shape.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out_shape.len() && out_shape[out_shape.len() - trimmed.len()..] == trimmed[..] {
        return BroadcastMap::Modulo(in_n.max(1));
    }
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for (i, &d) in in_shape.iter().enumerate() {
        eff[offset + i] = if d == 1 { 0 } else { in_strides[i] };
    }
    let mut map = Vec::with_capacity(out_n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..out_n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    BroadcastMap::Table(map)
}

pub(crate) enum BroadcastMap {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Modulo(m) => i % m,
            BroadcastMap::Table(t) => t[i],
        }
    }

    /// Sums `g` (laid out over the broadcast output) back onto the input.
    pub(crate) fn reduce<T: Scalar>(&self, g: &[T], in_n: usize) -> Vec<T> {
        match self {
            BroadcastMap::Identity => g.to_vec(),
            _ => {
                let mut out = vec![T::zero(); in_n];
                for (i, &gi) in g.iter().enumerate() {
                    out[self.get(i)] += gi;
                }
                out
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_table_matches_manual_indexing() {
        // out [2,3,2], in [2,1,2]
        let m = broadcast_index(&[2, 3, 2], &[2, 1, 2]);
        let got: Vec<usize> = (0..12).map(|i| m.get(i)).collect();
        assert_eq!(got, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        let m = broadcast_index(&[2, 3], &[3]);
        assert!(matches!(m, BroadcastMap::Modulo(3)));
        let m = broadcast_index(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|i| m.get(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c1 = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c1, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let mut c2 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut c3 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }
}
