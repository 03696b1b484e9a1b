use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2, Zip};
use rand_chacha::ChaCha8Rng;

use super::{cast, impl_parameterized, Param, Real};

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<A> {
    pub weight: Param<A>,
    pub bias: Option<Param<A>>,
}

impl_parameterized!(Linear { weight, bias });

impl<A: Real> Linear<A> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::uniform_fan_in(&[d_in, d_out], d_in, rng),
            bias: bias.then(|| Param::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn w(&self) -> ArrayView2<'_, A> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: ArrayView2<A>) -> Array2<A> {
        let mut y = x.dot(&self.w());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
            y += &b;
        }
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`. `x` is the forward input.
    pub fn backward(&mut self, x: ArrayView2<A>, dy: ArrayView2<A>) -> Array2<A> {
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
            general_mat_mul(A::one(), &x.t(), &dy, A::one(), &mut gw);
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w().t())
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<A> {
    pub gamma: Param<A>,
    pub beta: Param<A>,
    eps: f64,
}

impl_parameterized!(LayerNorm { gamma, beta });

pub struct LayerNormCache<A> {
    xhat: Array2<A>,
    rstd: Array1<A>,
}

impl<A: Real> LayerNorm<A> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param::filled(&[dim], A::one()), beta: Param::zeros(&[dim]), eps: 1e-5 }
    }

    pub fn forward(&self, x: ArrayView2<A>) -> (Array2<A>, LayerNormCache<A>) {
        let (rows, dim) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1-d");
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().expect("1-d");
        let inv_d: A = cast(1.0 / dim as f64);
        let eps: A = cast(self.eps);
        let mut xhat = Array2::zeros((rows, dim));
        let mut y = Array2::zeros((rows, dim));
        let mut rstd = Array1::zeros(rows);
        for (((xr, mut hr), mut yr), r) in x
            .outer_iter()
            .zip(xhat.outer_iter_mut())
            .zip(y.outer_iter_mut())
            .zip(rstd.iter_mut())
        {
            let mean = xr.sum() * inv_d;
            let var = xr.fold(A::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let rs = A::one() / (var + eps).sqrt();
            *r = rs;
            Zip::from(&mut hr).and(&mut yr).and(&xr).and(&gamma).and(&beta).for_each(
                |h, o, &v, &g, &b| {
                    *h = (v - mean) * rs;
                    *o = *h * g + b;
                },
            );
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<A>, dy: ArrayView2<A>) -> Array2<A> {
        let dim = dy.ncols();
        let inv_d: A = cast(1.0 / dim as f64);
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
            let mut gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
            for (dr, hr) in dy.outer_iter().zip(cache.xhat.outer_iter()) {
                Zip::from(&mut gg).and(&mut gb).and(&dr).and(&hr).for_each(|g, b, &d, &h| {
                    *g += d * h;
                    *b += d;
                });
            }
        }
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1-d");
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((dr, hr), mut xr), &rs) in dy
            .outer_iter()
            .zip(cache.xhat.outer_iter())
            .zip(dx.outer_iter_mut())
            .zip(cache.rstd.iter())
        {
            let mut mean_g = A::zero();
            let mut mean_gh = A::zero();
            Zip::from(&dr).and(&hr).and(&gamma).for_each(|&d, &h, &g| {
                mean_g += d * g;
                mean_gh += d * g * h;
            });
            mean_g = mean_g * inv_d;
            mean_gh = mean_gh * inv_d;
            Zip::from(&mut xr).and(&dr).and(&hr).and(&gamma).for_each(|o, &d, &h, &g| {
                *o = rs * (d * g - mean_g - h * mean_gh);
            });
        }
        dx
    }
}

const GELU_C: f64 = 1.595_769_121_605_730_7; // 2 * sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-form GELU, written as `x * sigmoid(2 sqrt(2/pi) (x + 0.044715 x^3))`.
#[inline]
pub fn gelu<A: Real>(x: A) -> A {
    let c: A = cast(GELU_C);
    let k: A = cast(GELU_K);
    let u = c * (x + k * x * x * x);
    x / (A::one() + (-u).exp())
}

#[inline]
pub fn gelu_grad<A: Real>(x: A) -> A {
    let c: A = cast(GELU_C);
    let k: A = cast(GELU_K);
    let three: A = cast(3.0);
    let u = c * (x + k * x * x * x);
    let s = A::one() / (A::one() + (-u).exp());
    s + x * s * (A::one() - s) * c * (A::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let ln = LayerNorm::<f64>::new(4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.0, 1.0]];
        let (y, _) = ln.forward(x.view());
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::<f64>::new(3, 2, true, &mut rng);
        let x = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let dy = array![[1.0, -2.0], [0.5, 0.3]];
        let dx = lin.backward(x.view(), dy.view());
        let f = |l: &Linear<f64>, x: &Array2<f64>| (l.forward(x.view()) * &dy).sum();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&lin, &xp) - f(&lin, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-8);
            }
        }
        let gw = lin.weight.grad.clone();
        for i in 0..3 {
            for j in 0..2 {
                let mut lp = lin.clone();
                lp.weight.value[[i, j]] += h;
                let mut lm = lin.clone();
                lm.weight.value[[i, j]] -= h;
                let fd = (f(&lp, &x) - f(&lm, &x)) / (2.0 * h);
                assert!((fd - gw[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
