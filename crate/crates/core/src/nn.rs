//! Convolution and pooling on `[H·W, C]` row-major feature grids.

use std::sync::Arc;

use crate::autodiff::{Graph, Var, PAD};
use crate::params::ParamId;
use crate::params::ParamStore;

/// Output side length of a sliding window.
pub fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// 2-D convolution with a `[out, in, k, k]` weight via im2col. Returns the
/// output grid and its `(height, width)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    (h, w, cin): (usize, usize, usize),
    (weight, bias): (ParamId, ParamId),
    k: usize,
    stride: usize,
    pad: usize,
) -> (Var, usize, usize) {
    let cout = store.get(weight).shape[0];
    assert_eq!(store.get(weight).shape, [cout, cin, k, k], "{}", store.get(weight).name);
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let cols = cin * k * k;
    let mut idx = Vec::with_capacity(oh * ow * cols);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..cin {
                for ky in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        idx.push(if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            PAD
                        } else {
                            ((y as usize * w + xx as usize) * cin + ch) as u32
                        });
                    }
                }
            }
        }
    }
    let patches = g.gather(x, Arc::new(idx), &[oh * ow, cols]);
    let wv = g.param(store, weight);
    let wv = g.reshape(wv, &[cout, cols]);
    let bv = g.param(store, bias);
    (g.linear(patches, wv, Some(bv)), oh, ow)
}

/// Max pooling without padding.
pub fn max_pool(g: &mut Graph, x: Var, (h, w, c): (usize, usize, usize), k: usize, stride: usize) -> (Var, usize, usize) {
    let (oh, ow) = (out_size(h, k, stride, 0), out_size(w, k, stride, 0));
    let mut idx = Vec::with_capacity(oh * ow * c * k * k);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let (y, xx) = (oy * stride + ky, ox * stride + kx);
                        idx.push(((y * w + xx) * c + ch) as u32);
                    }
                }
            }
        }
    }
    let win = g.gather(x, Arc::new(idx), &[oh * ow, c, k * k]);
    let out = g.max_last(win);
    (out, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let (h, w, cin, cout, k) = (5, 4, 2, 3, 3);
        let mut store = ParamStore::new();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 7) % 11) as f64 * 0.125 - 0.5).collect();
        let wid = store.insert("w", &[cout, cin, k, k], wt.clone());
        let bid = store.insert("b", &[cout], vec![0.25, -0.5, 1.0]);
        let x: Vec<f64> = (0..h * w * cin).map(|i| ((i * 5) % 9) as f64 * 0.25).collect();
        for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone(), &[h * w, cin]);
            let (y, oh, ow) = conv2d(&mut g, &store, xv, (h, w, cin), (wid, bid), k, stride, pad);
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..cout {
                        let mut s = store.values(bid)[o];
                        for ch in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yy = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        s += wt[((o * cin + ch) * k + ky) * k + kx]
                                            * x[(yy as usize * w + xx as usize) * cin + ch];
                                    }
                                }
                            }
                        }
                        let got = g.value(y)[(oy * ow + ox) * cout + o];
                        assert!((got - s).abs() < 1e-12, "stride {stride} pad {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_overlapping_windows() {
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut g = Graph::inference();
        let xv = g.constant(x, &[25, 1]);
        let (y, oh, ow) = max_pool(&mut g, xv, (5, 5, 1), 3, 2);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(g.value(y), &[12.0, 14.0, 22.0, 24.0]);
    }
}
