//! Layer math: forward passes with caches and exact backward passes.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Seq(Array3<f64>),
    Flat(Array2<f64>),
}

impl Tensor {
    pub fn batch_size(&self) -> usize {
        match self {
            Tensor::Seq(a) => a.dim().0,
            Tensor::Flat(a) => a.dim().0,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn dropout_mask(shape: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..shape)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub units: usize,
    pub dropout: f64,
    pub return_sequences: bool,
    /// Input kernel, `in x 4H`, gate blocks ordered i, f, g, o.
    pub w: Array2<f64>,
    /// Recurrent kernel, `H x 4H`.
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array3<f64>,
    drop: Option<Array2<f64>>,
    h_prev: Array3<f64>,
    c_prev: Array3<f64>,
    gates: Array3<f64>,
    tanh_c: Array3<f64>,
}

impl Lstm {
    pub fn forward(
        &self,
        x: &Array3<f64>,
        mask: &Array2<f64>,
        train: bool,
        rng: &mut impl Rng,
    ) -> (Tensor, LstmCache) {
        let (bsz, t_len, f) = x.dim();
        let h = self.units;
        let drop = (train && self.dropout > 0.0).then(|| {
            Array2::from_shape_vec((bsz, f), dropout_mask(bsz * f, self.dropout, rng)).unwrap()
        });
        let xd = match &drop {
            Some(d) => x * &d.view().insert_axis(Axis(1)),
            None => x.clone(),
        };
        let zx = xd
            .view()
            .into_shape_with_order((bsz * t_len, f))
            .unwrap()
            .dot(&self.w)
            .into_shape_with_order((bsz, t_len, 4 * h))
            .unwrap();

        let mut hcur = Array2::<f64>::zeros((bsz, h));
        let mut ccur = Array2::<f64>::zeros((bsz, h));
        let mut h_prev = Array3::zeros((bsz, t_len, h));
        let mut c_prev = Array3::zeros((bsz, t_len, h));
        let mut gates = Array3::zeros((bsz, t_len, 4 * h));
        let mut tanh_c = Array3::zeros((bsz, t_len, h));
        let mut out = Array3::zeros((bsz, t_len, h));
        for t in 0..t_len {
            let mut z = hcur.dot(&self.u);
            z += &zx.slice(s![.., t, ..]);
            z += &self.b;
            h_prev.slice_mut(s![.., t, ..]).assign(&hcur);
            c_prev.slice_mut(s![.., t, ..]).assign(&ccur);
            for bi in 0..bsz {
                let valid = mask[[bi, t]] > 0.0;
                for k in 0..h {
                    let i = sigmoid(z[[bi, k]]);
                    let fg = sigmoid(z[[bi, h + k]]);
                    let g = z[[bi, 2 * h + k]].tanh();
                    let o = sigmoid(z[[bi, 3 * h + k]]);
                    let c_new = fg * ccur[[bi, k]] + i * g;
                    let tc = c_new.tanh();
                    gates[[bi, t, k]] = i;
                    gates[[bi, t, h + k]] = fg;
                    gates[[bi, t, 2 * h + k]] = g;
                    gates[[bi, t, 3 * h + k]] = o;
                    tanh_c[[bi, t, k]] = tc;
                    if valid {
                        ccur[[bi, k]] = c_new;
                        hcur[[bi, k]] = o * tc;
                        out[[bi, t, k]] = o * tc;
                    }
                }
            }
        }
        let y = if self.return_sequences {
            Tensor::Seq(out)
        } else {
            Tensor::Flat(hcur)
        };
        (
            y,
            LstmCache {
                x: xd,
                drop,
                h_prev,
                c_prev,
                gates,
                tanh_c,
            },
        )
    }

    /// Returns (dx, [dW, dU, db]).
    pub fn backward(
        &self,
        cache: &LstmCache,
        mask: &Array2<f64>,
        grad: &Tensor,
    ) -> (Array3<f64>, Vec<Vec<f64>>) {
        let (bsz, t_len, f) = cache.x.dim();
        let h = self.units;
        let (mut dh_next, dy) = match grad {
            Tensor::Flat(g) => (g.clone(), None),
            Tensor::Seq(g) => (Array2::zeros((bsz, h)), Some(g)),
        };
        let mut dc_next = Array2::<f64>::zeros((bsz, h));
        let mut dz_all = Array3::<f64>::zeros((bsz, t_len, 4 * h));
        let mut gu = Array2::<f64>::zeros((h, 4 * h));
        for t in (0..t_len).rev() {
            let mut dh = dh_next;
            if let Some(dy) = dy {
                for bi in 0..bsz {
                    if mask[[bi, t]] > 0.0 {
                        for k in 0..h {
                            dh[[bi, k]] += dy[[bi, t, k]];
                        }
                    }
                }
            }
            let mut dz = Array2::<f64>::zeros((bsz, 4 * h));
            let mut dc_prev = dc_next.clone();
            for bi in 0..bsz {
                if mask[[bi, t]] <= 0.0 {
                    continue;
                }
                for k in 0..h {
                    let i = cache.gates[[bi, t, k]];
                    let fg = cache.gates[[bi, t, h + k]];
                    let g = cache.gates[[bi, t, 2 * h + k]];
                    let o = cache.gates[[bi, t, 3 * h + k]];
                    let tc = cache.tanh_c[[bi, t, k]];
                    let cp = cache.c_prev[[bi, t, k]];
                    let dht = dh[[bi, k]];
                    let dct = dc_next[[bi, k]] + dht * o * (1.0 - tc * tc);
                    dz[[bi, k]] = dct * g * i * (1.0 - i);
                    dz[[bi, h + k]] = dct * cp * fg * (1.0 - fg);
                    dz[[bi, 2 * h + k]] = dct * i * (1.0 - g * g);
                    dz[[bi, 3 * h + k]] = dht * tc * o * (1.0 - o);
                    dc_prev[[bi, k]] = dct * fg;
                }
            }
            let dh_through = dz.dot(&self.u.t());
            for bi in 0..bsz {
                if mask[[bi, t]] > 0.0 {
                    dh.row_mut(bi).assign(&dh_through.row(bi));
                }
            }
            gu += &cache.h_prev.slice(s![.., t, ..]).t().dot(&dz);
            dz_all.slice_mut(s![.., t, ..]).assign(&dz);
            dh_next = dh;
            dc_next = dc_prev;
        }
        let dz2 = dz_all.into_shape_with_order((bsz * t_len, 4 * h)).unwrap();
        let x2 = cache.x.view().into_shape_with_order((bsz * t_len, f)).unwrap();
        let gw = x2.t().dot(&dz2);
        let gb = dz2.sum_axis(Axis(0));
        let mut dx = dz2
            .dot(&self.w.t())
            .into_shape_with_order((bsz, t_len, f))
            .unwrap();
        if let Some(d) = &cache.drop {
            dx *= &d.view().insert_axis(Axis(1));
        }
        (dx, vec![flat(gw), flat(gu), gb.to_vec()])
    }
}

fn flat<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    rows: Vec<(usize, usize)>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    seq: Option<(usize, usize)>,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

/// Valid (sample, step) positions; a flat tensor uses step 0 for every sample.
fn valid_positions(x: &Tensor, mask: &Array2<f64>) -> Vec<(usize, usize)> {
    match x {
        Tensor::Flat(a) => (0..a.dim().0).map(|b| (b, 0)).collect(),
        Tensor::Seq(a) => {
            let (bsz, t_len, _) = a.dim();
            (0..bsz)
                .flat_map(|b| (0..t_len).map(move |t| (b, t)))
                .filter(|&(b, t)| mask[[b, t]] > 0.0)
                .collect()
        }
    }
}

fn gather(x: &Tensor, rows: &[(usize, usize)]) -> Array2<f64> {
    match x {
        Tensor::Flat(a) => a.clone(),
        Tensor::Seq(a) => {
            let f = a.dim().2;
            let mut out = Array2::zeros((rows.len(), f));
            for (r, &(b, t)) in rows.iter().enumerate() {
                out.row_mut(r).assign(&a.slice(s![b, t, ..]));
            }
            out
        }
    }
}

fn scatter(rows_data: Array2<f64>, rows: &[(usize, usize)], seq: Option<(usize, usize)>) -> Tensor {
    match seq {
        None => Tensor::Flat(rows_data),
        Some((bsz, t_len)) => {
            let f = rows_data.dim().1;
            let mut out = Array3::zeros((bsz, t_len, f));
            for (r, &(b, t)) in rows.iter().enumerate() {
                out.slice_mut(s![b, t, ..]).assign(&rows_data.row(r));
            }
            Tensor::Seq(out)
        }
    }
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    /// Statistics come from the batch in training mode and from the running
    /// averages otherwise.
    pub fn forward(&self, x: &Tensor, mask: &Array2<f64>, train: bool) -> (Tensor, BatchNormCache) {
        let rows = valid_positions(x, mask);
        let seq = match x {
            Tensor::Seq(a) => Some((a.dim().0, a.dim().1)),
            Tensor::Flat(_) => None,
        };
        let data = gather(x, &rows);
        let n = data.dim().0.max(1) as f64;
        let (mean, var) = if train {
            let mean = data.sum_axis(Axis(0)) / n;
            let centered = &data - &mean;
            let var = (&centered * &centered).sum_axis(Axis(0)) / n;
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
        let xhat = (&data - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (
            scatter(y, &rows, seq),
            BatchNormCache {
                rows,
                xhat,
                inv_std,
                seq,
                batch_stats: train.then_some((mean, var)),
            },
        )
    }

    /// Moves the running averages toward the statistics of a training-mode pass.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            self.running_mean = &self.running_mean * BN_MOMENTUM + mean * (1.0 - BN_MOMENTUM);
            self.running_var = &self.running_var * BN_MOMENTUM + var * (1.0 - BN_MOMENTUM);
        }
    }

    /// Gradient for training-mode (batch statistics) forward passes.
    pub fn backward(&self, cache: &BatchNormCache, grad: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let dy = gather(grad, &cache.rows);
        let n = dy.dim().0.max(1) as f64;
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let dx = (&dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &cache.inv_std / n;
        (
            scatter(dx, &cache.rows, cache.seq),
            vec![dgamma.to_vec(), dbeta.to_vec()],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub activation: Activation,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Array2<f64>,
    y: Array2<f64>,
}

impl Dense {
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let mut y = x.dot(&self.w) + &self.b;
        match self.activation {
            Activation::Relu => y.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => y.mapv_inplace(sigmoid),
        }
        (
            y.clone(),
            DenseCache { x: x.clone(), y },
        )
    }

    pub fn backward(&self, cache: &DenseCache, grad: &Array2<f64>) -> (Array2<f64>, Vec<Vec<f64>>) {
        let dz = match self.activation {
            Activation::Relu => {
                let mut d = grad.clone();
                d.zip_mut_with(&cache.y, |g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                });
                d
            }
            Activation::Sigmoid => grad * &cache.y.mapv(|p| p * (1.0 - p)),
        };
        let gw = cache.x.t().dot(&dz);
        let gb = dz.sum_axis(Axis(0));
        (dz.dot(&self.w.t()), vec![flat(gw), gb.to_vec()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn forward(&self, x: &Tensor, train: bool, rng: &mut impl Rng) -> (Tensor, Option<Vec<f64>>) {
        if !train || self.rate <= 0.0 {
            return (x.clone(), None);
        }
        match x {
            Tensor::Flat(a) => {
                let m = dropout_mask(a.len(), self.rate, rng);
                let ma = Array2::from_shape_vec(a.raw_dim(), m.clone()).unwrap();
                (Tensor::Flat(a * &ma), Some(m))
            }
            Tensor::Seq(a) => {
                let m = dropout_mask(a.len(), self.rate, rng);
                let ma = Array3::from_shape_vec(a.raw_dim(), m.clone()).unwrap();
                (Tensor::Seq(a * &ma), Some(m))
            }
        }
    }

    pub fn backward(mask: &Option<Vec<f64>>, grad: &Tensor) -> Tensor {
        let Some(m) = mask else {
            return grad.clone();
        };
        match grad {
            Tensor::Flat(a) => Tensor::Flat(a * &Array2::from_shape_vec(a.raw_dim(), m.clone()).unwrap()),
            Tensor::Seq(a) => Tensor::Seq(a * &Array3::from_shape_vec(a.raw_dim(), m.clone()).unwrap()),
        }
    }
}

/// Additive self-attention pooling: `e_t = v . tanh(W h_t)`, masked softmax,
/// context `sum_t alpha_t h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    /// `H x A`.
    pub w: Array2<f64>,
    pub v: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    h: Array3<f64>,
    u: Array3<f64>,
    pub alpha: Array2<f64>,
}

impl SelfAttention {
    pub fn forward(&self, h: &Array3<f64>, mask: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (bsz, t_len, hd) = h.dim();
        let a = self.w.dim().1;
        let u = h
            .view()
            .into_shape_with_order((bsz * t_len, hd))
            .unwrap()
            .dot(&self.w)
            .mapv(f64::tanh);
        let e = u
            .dot(&self.v)
            .into_shape_with_order((bsz, t_len))
            .unwrap();
        let u = u.into_shape_with_order((bsz, t_len, a)).unwrap();
        let mut alpha = Array2::zeros((bsz, t_len));
        for b in 0..bsz {
            let max = (0..t_len)
                .filter(|&t| mask[[b, t]] > 0.0)
                .map(|t| e[[b, t]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for t in 0..t_len {
                if mask[[b, t]] > 0.0 {
                    let w = (e[[b, t]] - max).exp();
                    alpha[[b, t]] = w;
                    total += w;
                }
            }
            alpha.row_mut(b).mapv_inplace(|w| w / total);
        }
        let mut ctx = Array2::zeros((bsz, hd));
        for b in 0..bsz {
            ctx.row_mut(b).assign(&alpha.row(b).dot(&h.slice(s![b, .., ..])));
        }
        (
            ctx,
            AttentionCache {
                h: h.clone(),
                u,
                alpha,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, grad: &Array2<f64>) -> (Array3<f64>, Vec<Vec<f64>>) {
        let (bsz, t_len, hd) = cache.h.dim();
        let a = self.w.dim().1;
        let mut dh = Array3::zeros((bsz, t_len, hd));
        let mut de = Array2::zeros((bsz, t_len));
        for b in 0..bsz {
            let hb = cache.h.slice(s![b, .., ..]);
            let dc = grad.row(b);
            let dalpha = hb.dot(&dc);
            let alpha = cache.alpha.row(b);
            let mean = alpha.dot(&dalpha);
            for t in 0..t_len {
                de[[b, t]] = alpha[t] * (dalpha[t] - mean);
                let mut row = dh.slice_mut(s![b, t, ..]);
                row.scaled_add(alpha[t], &dc);
            }
        }
        let u2 = cache.u.view().into_shape_with_order((bsz * t_len, a)).unwrap();
        let de1 = de.view().into_shape_with_order(bsz * t_len).unwrap();
        let gv = u2.t().dot(&de1);
        let mut dpre = Array2::zeros((bsz * t_len, a));
        for r in 0..bsz * t_len {
            for k in 0..a {
                let uu = u2[[r, k]];
                dpre[[r, k]] = de1[r] * self.v[k] * (1.0 - uu * uu);
            }
        }
        let h2 = cache.h.view().into_shape_with_order((bsz * t_len, hd)).unwrap();
        let gw = h2.t().dot(&dpre);
        dh += &dpre
            .dot(&self.w.t())
            .into_shape_with_order((bsz, t_len, hd))
            .unwrap();
        (dh, vec![flat(gw), gv.to_vec()])
    }
}

/// Masked mean over time, used when a dense layer receives a sequence.
pub fn mean_pool(x: &Array3<f64>, mask: &Array2<f64>) -> Array2<f64> {
    let (bsz, _, f) = x.dim();
    let mut out = Array2::zeros((bsz, f));
    for b in 0..bsz {
        let n = mask.row(b).sum();
        if n > 0.0 {
            let w = mask.row(b).mapv(|m| m / n);
            out.row_mut(b).assign(&w.dot(&x.slice(s![b, .., ..])));
        }
    }
    out
}

pub fn mean_pool_backward(grad: &Array2<f64>, mask: &Array2<f64>) -> Array3<f64> {
    let (bsz, t_len) = mask.dim();
    let f = grad.dim().1;
    let mut dx = Array3::zeros((bsz, t_len, f));
    for b in 0..bsz {
        let n = mask.row(b).sum();
        for t in 0..t_len {
            if mask[[b, t]] > 0.0 {
                dx.slice_mut(s![b, t, ..]).assign(&(&grad.row(b) / n));
            }
        }
    }
    dx
}

/// Orthonormal rows via modified Gram-Schmidt on a random Gaussian matrix.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut q = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mut v: Array1<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for j in 0..i {
            let qj = q.row(j);
            let d = qj.dot(&v);
            v.scaled_add(-d, &qj);
        }
        let norm = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / norm));
    }
    if rows <= cols {
        q
    } else {
        q.t().to_owned()
    }
}

pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}
