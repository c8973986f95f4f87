use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::{accumulate, gemm, Graph, Op, SparseMap, Var, PAD};

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x + y` where `y` is broadcast over the leading dimensions of `x`.
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert!(!yv.is_empty() && xv.len() % yv.len() == 0, "suffix broadcast");
        let value: Vec<f64> = xv
            .chunks(yv.len())
            .flat_map(|row| row.iter().zip(yv.iter()).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::AddSuffix(x, y))
    }

    /// `x * y` where `y` is broadcast over the leading dimensions of `x`.
    pub fn mul_suffix(&mut self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        assert!(!yv.is_empty() && xv.len() % yv.len() == 0, "suffix broadcast");
        let value: Vec<f64> = xv
            .chunks(yv.len())
            .flat_map(|row| row.iter().zip(yv.iter()).map(|(a, b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::MulSuffix(x, y))
    }

    /// Scales row `i` of `x` (viewed as `[s.len(), rest]`) by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert!(!sv.is_empty() && xv.len() % sv.len() == 0, "row broadcast");
        let width = xv.len() / sv.len();
        let value: Vec<f64> = xv
            .chunks(width)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |a| a * k))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::MulRows(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], vec![1], Op::MeanAll(x))
    }

    /// Mean over all leading dimensions: `[.., c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().expect("mean_rows on rank-0");
        let v = self.value(x);
        let rows = v.len() / c;
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.push(out, vec![c], Op::MeanRows(x))
    }

    /// Sum over the last dimension: `[.., c] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let c = *shape.last().expect("sum_last on rank-0");
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out: Vec<f64> = self.value(x).chunks(c).map(|r| r.iter().sum()).collect();
        self.push(out, out_shape, Op::SumLast(x))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, batch: usize, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = if batch == 0 { 2 } else { 3 };
        assert!(sa.len() == rank && sb.len() == rank, "matmul ranks {sa:?} {sb:?}");
        let nb = if batch == 0 { 1 } else { sa[0] };
        assert!(batch == 0 || sb[0] == nb, "batch mismatch {sa:?} {sb:?}");
        let (m, k) = (sa[rank - 2], sa[rank - 1]);
        let (kb, n) = if trans_b {
            (sb[rank - 1], sb[rank - 2])
        } else {
            (sb[rank - 2], sb[rank - 1])
        };
        assert_eq!(k, kb, "matmul inner dims {sa:?} {sb:?} trans_b={trans_b}");
        let mut out = vec![0.0; nb * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bstride,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let shape = if batch == 0 { vec![m, n] } else { vec![nb, m, n] };
        self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch: nb,
                m,
                k,
                n,
                trans_b,
            },
        )
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, 0, false)
    }

    /// `[m, k] · [n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, 0, true)
    }

    /// Batched `[B, m, k] · [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, 1, false)
    }

    /// Batched `[B, m, k] · [B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, 1, true)
    }

    /// Affine map with a weight stored `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let y = self.matmul_nt(x, weight);
        match bias {
            Some(b) => self.add_suffix(y, b),
            None => y,
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().expect("softmax on rank-0");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Softmax(x))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let c = *self.shape(x).last().expect("layer_norm on rank-0");
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape");
        let xv = self.value(x);
        let out: Vec<f64> = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { xv[i as usize] })
            .collect();
        self.push(out, shape.to_vec(), Op::Gather(x, index))
    }

    /// `out[i] = Σ weights * x[cols]` over the sparse row `i`.
    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>, shape: &[usize]) -> Var {
        assert_eq!(map.rows(), shape.iter().product::<usize>(), "sparse shape");
        let xv = self.value(x);
        let out: Vec<f64> = (0..map.rows())
            .map(|r| {
                let (s, e) = (map.offsets[r] as usize, map.offsets[r + 1] as usize);
                (s..e).map(|j| map.weights[j] * xv[map.cols[j] as usize]).sum()
            })
            .collect();
        self.push(out, shape.to_vec(), Op::Sparse(x, map))
    }

    /// Concatenation along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0]);
        let lead = lead[..lead.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(out, shape, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.value(x).len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            self.shape(x)
        );
        let value = self.node(x).value.clone();
        self.push_arc(value, shape.to_vec(), Op::Reshape(x))
    }

    /// Max over the last dimension: `[.., k] -> [..]`.
    pub fn max_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let k = *shape.last().unwrap();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = Vec::new();
        let mut arg = Vec::new();
        for row in self.value(x).chunks(k) {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            arg.push(bi as u32);
        }
        self.push(out, out_shape, Op::MaxLast(x, arg))
    }

    pub(crate) fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let len = |v: &Var| self.nodes[v.0].value.len();
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr, $f:expr) => {
                if want(&$v) {
                    accumulate(&mut grads[$v.0], len(&$v), $f);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc!(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc!(*b, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / bv[j];
                    }
                });
                acc!(*b, |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddSuffix(x, y) => {
                acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let n = len(y);
                acc!(*y, |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MulSuffix(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let n = yv.len();
                acc!(*x, |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j] * yv[j % n];
                    }
                });
                acc!(*y, |d| {
                    for (j, (&gj, &xj)) in g.iter().zip(xv).enumerate() {
                        d[j % n] += gj * xj;
                    }
                });
            }
            Op::MulRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let w = xv.len() / sv.len();
                acc!(*x, |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j] * sv[j / w];
                    }
                });
                acc!(*s, |d| {
                    for (j, (&gj, &xj)) in g.iter().zip(xv).enumerate() {
                        d[j / w] += gj * xj;
                    }
                });
            }
            Op::Scale(x, c) => acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::AddScalar(x) => acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Sigmoid(x) | Op::Exp(x) | Op::Sqrt(x) => {
                let y = &node.value;
                let kind = &node.op;
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        let dy = match kind {
                            Op::Sigmoid(_) => y[j] * (1.0 - y[j]),
                            Op::Exp(_) => y[j],
                            _ => 0.5 / y[j],
                        };
                        d[j] += g[j] * dy;
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc!(*x, |d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * g[j] * xv[j];
                    }
                });
            }
            Op::SumAll(x) => acc!(*x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(x) => {
                let n = len(x) as f64;
                acc!(*x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MeanRows(x) => {
                let c = g.len();
                let rows = (len(x) / c) as f64;
                acc!(*x, |d| {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g / rows);
                    }
                });
            }
            Op::SumLast(x) => {
                let c = len(x) / g.len();
                acc!(*x, |d| {
                    for (row, gr) in d.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gr);
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a, |d| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ (B stored [k,n]) or dC · B (B stored [n,k])
                        let bs = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, gi, (n, 1), bi, bs, &mut d[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc!(*b, |d| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dCᵀ · A
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), di, 1.0);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), di, 1.0);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *node.shape.last().unwrap();
                acc!(*x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let c = gv.len();
                acc!(*gamma, |d| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc!(*beta, |d| {
                    for gr in g.chunks(c) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
                acc!(*x, |d| {
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gather(x, index) => acc!(*x, |d| {
                for (&ix, &gj) in index.iter().zip(g) {
                    if ix != PAD {
                        d[ix as usize] += gj;
                    }
                }
            }),
            Op::Sparse(x, map) => acc!(*x, |d| {
                for (r, &gr) in g.iter().enumerate() {
                    let (s, e) = (map.offsets[r] as usize, map.offsets[r + 1] as usize);
                    for j in s..e {
                        d[map.cols[j] as usize] += map.weights[j] * gr;
                    }
                }
            }),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.nodes[p.0].shape.last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    acc!(*p, |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => acc!(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::MaxLast(x, arg) => {
                let k = len(x) / g.len();
                acc!(*x, |d| {
                    for (r, (&a, &gr)) in arg.iter().zip(g).enumerate() {
                        d[r * k + a as usize] += gr;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheck};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let mut g = Graph::new();
        let a = g.input(rand_vec(6, 1), &[2, 3]);
        let b = g.input(rand_vec(12, 2), &[3, 4]);
        let c = g.matmul(a, b);
        let (av, bv) = (g.value(a).to_vec(), g.value(b).to_vec());
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| av[i * 3 + t] * bv[t * 4 + j]).sum();
                assert!((g.value(c)[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let check = GradCheck::default();
        let shapes: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (rand_vec(12, 3), vec![3, 4]),
            (rand_vec(8, 4), vec![4, 2]),
            (rand_vec(4, 5).iter().map(|v| v + 2.0).collect(), vec![4]),
            (rand_vec(24, 6), vec![2, 3, 4]),
        ];
        let report = check_inputs(&check, &shapes, |g, xs| {
            let (x, w, s, t) = (xs[0], xs[1], xs[2], xs[3]);
            let y = g.matmul(x, w); // [3,2]
            let y = g.gelu(y);
            let ones = g.constant(vec![1.0, 1.0], &[2]);
            let beta = s_head(g, s);
            let y = g.layer_norm(y, ones, beta, 1e-5);
            let sm = g.softmax(y);
            let m = g.mean_rows(sm);
            let z = g.mul_suffix(x, s);
            let z = g.sigmoid(z);
            let z2 = g.matmul_nt(z, z);
            let z2 = g.sum_last(z2);
            let r = g.mul_rows(x, z2);
            let q = g.sqrt(s);
            let q = g.ln(q);
            let tb = g.bmm_nt(t, t);
            let tb2 = g.bmm(tb, t);
            let mx = g.max_last(tb2);
            let a1 = g.sum_all(m);
            let a2 = g.mean_all(r);
            let a3 = g.sum_all(q);
            let a4 = g.mean_all(mx);
            let c = g.concat_last(&[a1, a2, a3, a4]);
            let c = g.square(c);
            let e = g.exp(c);
            let d = g.div(e, c);
            g.sum_all(d)
        });
        assert!(report.passed(), "{report}");

        fn s_head(g: &mut Graph, s: Var) -> Var {
            let idx = std::sync::Arc::new(vec![0u32, 1]);
            g.gather(s, idx, &[2])
        }
    }
}
