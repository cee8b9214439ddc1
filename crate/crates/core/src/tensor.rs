//! Layout helpers shared by the plaintext and secure engines. Everything here
//! is data-independent rearrangement, so it is a local operation on shares.

use std::ops::Add;

/// Row-major f64 product (m×k)·(k×n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(a[r * cols + c]);
        }
    }
    out
}

/// Sum of the rows of a rows×cols matrix.
pub fn column_sums<T: Copy + Default + Add<Output = T>>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
            *o = *o + v;
        }
    }
    out
}

/// Broadcast-add a length-cols vector to every row.
pub fn add_row<T: Copy + Add<Output = T>>(a: &mut [T], row: &[T]) {
    let cols = row.len();
    for chunk in a.chunks_mut(cols) {
        for (o, &v) in chunk.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.in_h - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kernel + 1
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }
}

/// Patches as rows (b, oy, ox) with columns (c, ky, kx). Input is B×(C·H·W).
pub fn im2col<T: Copy>(x: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut out = Vec::with_capacity(batch * g.positions() * g.patch_len());
    for b in 0..batch {
        let img = &x[b * g.in_len()..(b + 1) * g.in_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..g.in_ch {
                    for ky in 0..k {
                        let base = c * g.in_h * g.in_w + (oy + ky) * g.in_w + ox;
                        out.extend_from_slice(&img[base..base + k]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im<T: Copy + Default + Add<Output = T>>(p: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut out = vec![T::default(); batch * g.in_len()];
    let mut idx = 0;
    for b in 0..batch {
        let img = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..g.in_ch {
                    for ky in 0..k {
                        let base = c * g.in_h * g.in_w + (oy + ky) * g.in_w + ox;
                        for kx in 0..k {
                            img[base + kx] = img[base + kx] + p[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// (B·P)×OC rows-of-positions to B×(OC·P) channel-major activations.
pub fn positions_to_channels<T: Copy>(z: &[T], batch: usize, positions: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for b in 0..batch {
        for c in 0..channels {
            for p in 0..positions {
                out.push(z[(b * positions + p) * channels + c]);
            }
        }
    }
    out
}

pub fn channels_to_positions<T: Copy>(y: &[T], batch: usize, positions: usize, channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for b in 0..batch {
        for p in 0..positions {
            for c in 0..channels {
                out.push(y[(b * channels + c) * positions + p]);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }

    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }
}

/// The four members of every 2×2 window, in order (0,0) (0,1) (1,0) (1,1).
pub fn pool_windows<T: Copy>(x: &[T], batch: usize, g: PoolGeometry) -> [Vec<T>; 4] {
    let n = batch * g.out_len();
    let mut parts: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for b in 0..batch {
        let img = &x[b * g.in_len()..(b + 1) * g.in_len()];
        for c in 0..g.channels {
            for oy in 0..g.out_h() {
                for ox in 0..g.out_w() {
                    let base = c * g.in_h * g.in_w + 2 * oy * g.in_w + 2 * ox;
                    parts[0].push(img[base]);
                    parts[1].push(img[base + 1]);
                    parts[2].push(img[base + g.in_w]);
                    parts[3].push(img[base + g.in_w + 1]);
                }
            }
        }
    }
    parts
}

/// Inverse placement of [`pool_windows`]; cells outside any window stay zero.
pub fn pool_scatter<T: Copy + Default>(parts: &[Vec<T>; 4], batch: usize, g: PoolGeometry) -> Vec<T> {
    let mut out = vec![T::default(); batch * g.in_len()];
    let mut i = 0;
    for b in 0..batch {
        let img = &mut out[b * g.in_len()..(b + 1) * g.in_len()];
        for c in 0..g.channels {
            for oy in 0..g.out_h() {
                for ox in 0..g.out_w() {
                    let base = c * g.in_h * g.in_w + 2 * oy * g.in_w + 2 * ox;
                    img[base] = parts[0][i];
                    img[base + 1] = parts[1][i];
                    img[base + g.in_w] = parts[2][i];
                    img[base + g.in_w + 1] = parts[3][i];
                    i += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), p> == <x, col2im(p)> for the usual inner product.
        let g = ConvGeometry {
            in_ch: 2,
            in_h: 5,
            in_w: 4,
            kernel: 3,
        };
        let batch = 2;
        let x: Vec<f64> = (0..batch * g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, batch, g);
        let p: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&p).map(|(a, b)| a * b).sum();
        let back = col2im(&p, batch, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_round_trip() {
        let g = PoolGeometry {
            channels: 2,
            in_h: 4,
            in_w: 4,
        };
        let x: Vec<i32> = (0..2 * g.in_len() as i32).collect();
        let parts = pool_windows(&x, 2, g);
        assert_eq!(parts[0][0], 0);
        assert_eq!(parts[3][0], 5);
        assert_eq!(pool_scatter(&parts, 2, g), x);
    }

    #[test]
    fn channel_reorder_round_trip() {
        let z: Vec<u32> = (0..2 * 3 * 4).collect();
        let y = positions_to_channels(&z, 2, 3, 4);
        assert_eq!(channels_to_positions(&y, 2, 3, 4), z);
    }
}
