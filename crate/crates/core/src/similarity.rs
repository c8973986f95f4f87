//! Per-channel texture (mean) and structure (covariance) similarity.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::FeatureMap;

/// Stabilizer of the texture term.
pub const C1: f64 = 1e-6;
/// Stabilizer of the structure term.
pub const C2: f64 = 1e-6;

/// Texture terms `l` and structure terms `s`, one per channel, for two
/// `[N, C]` feature grids. Statistics are population moments over `N`.
pub fn texture_structure_on(g: &mut Graph, fx: Var, fy: Var) -> Result<(Var, Var)> {
    if g.shape(fx) != g.shape(fy) || g.shape(fx).len() != 2 {
        return Err(Error::Shape(format!(
            "similarity inputs {:?} and {:?} differ",
            g.shape(fx),
            g.shape(fy)
        )));
    }
    let mx = g.mean_rows(fx);
    let my = g.mean_rows(fy);
    let nmx = g.neg(mx);
    let nmy = g.neg(my);
    let cx = g.add_suffix(fx, nmx);
    let cy = g.add_suffix(fy, nmy);
    let sxx = g.square(cx);
    let vx = g.mean_rows(sxx);
    let syy = g.square(cy);
    let vy = g.mean_rows(syy);
    let sxy = g.mul(cx, cy);
    let cov = g.mean_rows(sxy);

    let mxy = g.mul(mx, my);
    let num = g.scale(mxy, 2.0);
    let num = g.add_scalar(num, C1);
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let den = g.add(mx2, my2);
    let den = g.add_scalar(den, C1);
    let l = g.div(num, den);

    let num = g.scale(cov, 2.0);
    let num = g.add_scalar(num, C2);
    let den = g.add(vx, vy);
    let den = g.add_scalar(den, C2);
    let s = g.div(num, den);
    Ok((l, s))
}

/// `(l_j, s_j)` for every channel of two equally shaped maps.
pub fn texture_structure_similarity(fx: &FeatureMap, fy: &FeatureMap) -> Result<Vec<(f64, f64)>> {
    if fx.shape() != fy.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", fx.shape(), fy.shape())));
    }
    let mut g = Graph::inference();
    let n = fx.height * fx.width;
    let x = g.constant(fx.data.clone(), &[n, fx.channels]);
    let y = g.constant(fy.data.clone(), &[n, fy.channels]);
    let (l, s) = texture_structure_on(&mut g, x, y)?;
    Ok(g.value(l).iter().copied().zip(g.value(s).iter().copied()).collect())
}
