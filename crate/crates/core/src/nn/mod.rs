//! Minimal reverse-mode building blocks for the separator.
//!
//! Every layer exposes an explicit `forward` that returns its output together
//! with a cache, and a `backward` that consumes the cache, accumulates
//! parameter gradients into [`Param::grad`] and returns the input gradient.
//! All layers are generic over the scalar type so the same code runs in
//! single precision for training and in double precision for gradient checks.

mod attention;
mod layers;

pub use attention::{
    sinusoidal_positions, AttentionCache, CrossAttentionCache, CrossAttentionLayer,
    MultiHeadAttention, TransformerCache, TransformerLayer,
};
pub use layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};

use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar type usable by the network (implemented for `f32` and `f64`).
pub trait Real: NdFloat + FromPrimitive + Default {}
impl<T: NdFloat + FromPrimitive + Default> Real for T {}

#[inline]
pub fn cast<A: Real>(x: f64) -> A {
    A::from_f64(x).expect("f64 is representable in every Real")
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<A> {
    pub value: ArrayD<A>,
    pub grad: ArrayD<A>,
}

impl<A: Real> Param<A> {
    pub fn new(value: ArrayD<A>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: A) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::uniform(shape, bound, rng)
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cast(rng.random_range(-bound..bound))).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(A::zero());
    }
}

/// Named traversal over every parameter of a module tree.
pub trait Parameterized<A: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<A>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<A>)>);

    fn params(&self) -> Vec<(String, &Param<A>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<A>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<A: Real> Parameterized<A> for Param<A> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<A>)>) {
        out.push((prefix.to_string(), self));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<A>)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<A: Real, T: Parameterized<A>> Parameterized<A> for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<A>)>) {
        if let Some(t) = self {
            t.visit(prefix, out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<A>)>) {
        if let Some(t) = self {
            t.visit_mut(prefix, out);
        }
    }
}

impl<A: Real, T: Parameterized<A>> Parameterized<A> for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<A>)>) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(prefix, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<A>)>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Parameterized`] for a struct by visiting the listed fields in order.
macro_rules! impl_parameterized {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<A: $crate::nn::Real> $crate::nn::Parameterized<A> for $ty<A> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::nn::Param<A>)>,
            ) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::nn::Param<A>)>,
            ) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_parameterized;

/// Forward-pass mode. Dropout is active only when a training RNG is present.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted-dropout multiplier (0 or `1/(1-p)`), or `None` when dropout is inactive.
    pub fn dropout_mask<A: Real>(&mut self, shape: &[usize], p: f64) -> Option<ArrayD<A>> {
        let rng = self.rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep: A = cast(1.0 / (1.0 - p));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { A::zero() } else { keep })
            .collect();
        Some(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }
}
