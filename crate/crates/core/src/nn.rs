//! Parameter storage and the small set of dense layers the model is built from.
//!
//! Every layer keeps its values and accumulated gradients side by side in
//! [`Param`]s. Forward passes return whatever the matching backward pass needs;
//! backward passes add into `Param::grad` and return the input gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named tensor of trainable values (or a non-trainable buffer).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn from_values(shape: &[usize], value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn buffer(shape: &[usize], v: f64) -> Self {
        let mut p = Self::filled(shape, v);
        p.trainable = false;
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters, visited in a fixed, deterministic order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(0.0));
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Parameterized`] by visiting the listed fields in order.
macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameterized for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::nn::Param)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param)) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameterized;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Row-wise affine map `y = x W + b`, weight stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl_parameterized!(Linear { weight, bias });

impl Linear {
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::uniform(&[input, output], bound, rng),
            bias: bias.then(|| Param::zeros(&[output])),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(&[input, output]),
            bias: bias.then(|| Param::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    /// Apply to `rows` consecutive input rows.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (ni, no) = (self.input_dim(), self.output_dim());
        let rows = x.len() / ni;
        let mut y = vec![0.0; rows * no];
        let w = &self.weight.value;
        for r in 0..rows {
            let yr = &mut y[r * no..(r + 1) * no];
            if let Some(b) = &self.bias {
                yr.copy_from_slice(&b.value);
            }
            for (i, &xv) in x[r * ni..(r + 1) * ni].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (yo, wo) in yr.iter_mut().zip(&w[i * no..(i + 1) * no]) {
                    *yo += xv * wo;
                }
            }
        }
        y
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&mut self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let (ni, no) = (self.input_dim(), self.output_dim());
        let rows = x.len() / ni;
        let mut gx = vec![0.0; rows * ni];
        let w = &self.weight.value;
        let gw = &mut self.weight.grad;
        for r in 0..rows {
            let gyr = &gy[r * no..(r + 1) * no];
            let xr = &x[r * ni..(r + 1) * ni];
            let gxr = &mut gx[r * ni..(r + 1) * ni];
            for i in 0..ni {
                let wi = &w[i * no..(i + 1) * no];
                gxr[i] = wi.iter().zip(gyr).map(|(a, b)| a * b).sum();
                let xv = xr[i];
                if xv != 0.0 {
                    for (g, &gyo) in gw[i * no..(i + 1) * no].iter_mut().zip(gyr) {
                        *g += xv * gyo;
                    }
                }
            }
        }
        if let Some(b) = &mut self.bias {
            for r in 0..rows {
                for (g, &gyo) in b.grad.iter_mut().zip(&gy[r * no..(r + 1) * no]) {
                    *g += gyo;
                }
            }
        }
        gx
    }
}

/// Normalization over the channel vector of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl_parameterized!(LayerNorm { gamma, beta });

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], 1.0),
            beta: Param::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, NormCache) {
        let c = self.dim();
        let rows = x.len() / c;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let h = (xr[k] - mean) * is;
                xhat[r * c + k] = h;
                y[r * c + k] = h * self.gamma.value[k] + self.beta.value[k];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, gy: &[f64]) -> Vec<f64> {
        let c = self.dim();
        let rows = gy.len() / c;
        let mut gx = vec![0.0; gy.len()];
        let mut gh = vec![0.0; c];
        for r in 0..rows {
            let xh = &cache.xhat[r * c..(r + 1) * c];
            let g = &gy[r * c..(r + 1) * c];
            let mut mean_gh = 0.0;
            let mut mean_ghx = 0.0;
            for k in 0..c {
                self.gamma.grad[k] += g[k] * xh[k];
                self.beta.grad[k] += g[k];
                gh[k] = g[k] * self.gamma.value[k];
                mean_gh += gh[k];
                mean_ghx += gh[k] * xh[k];
            }
            mean_gh /= c as f64;
            mean_ghx /= c as f64;
            let is = cache.inv_std[r];
            for k in 0..c {
                gx[r * c + k] = is * (gh[k] - mean_gh - xh[k] * mean_ghx);
            }
        }
        gx
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn activations() {
        assert_eq!(silu(0.0), 0.0);
        assert!((softplus(softplus_inv(0.05)) - 0.05).abs() < 1e-14);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        let g = fd::gradient(&[0.7], 1e-4, |v| silu(v[0]));
        assert!((g[0] - silu_grad(0.7)).abs() < 1e-10);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let mut lin = Linear::new(3, 2, true, &mut r);
        lin.bias.as_mut().unwrap().value = vec![0.3, -0.2];
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let gy = vec![0.5, -1.0, 0.25, 2.0];
        let gx = lin.backward(&x, &gy);
        let loss = |lin: &Linear, x: &[f64]| -> f64 {
            lin.forward(x).iter().zip(&gy).map(|(a, b)| a * b).sum()
        };
        let num = fd::gradient(&x, 1e-4, |v| loss(&lin, v));
        assert!(fd::max_rel_err(&gx, &num, 1e-8) < 1e-8);
        let w0 = lin.weight.value.clone();
        let num_w = fd::gradient(&w0, 1e-4, |v| {
            let mut l = lin.clone();
            l.weight.value = v.to_vec();
            loss(&l, &x)
        });
        assert!(fd::max_rel_err(&lin.weight.grad, &num_w, 1e-8) < 1e-8);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut ln = LayerNorm::new(4);
        ln.gamma.value = vec![1.0, 0.5, -0.3, 2.0];
        ln.beta.value = vec![0.1, 0.0, 0.2, -0.1];
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let gy: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, cache) = ln.forward(&x);
        let gx = ln.backward(&cache, &gy);
        let num = fd::gradient(&x, 1e-4, |v| {
            ln.forward(v).0.iter().zip(&gy).map(|(a, b)| a * b).sum()
        });
        assert!(fd::max_rel_err(&gx, &num, 1e-6) < 1e-7);
    }

    #[test]
    fn layer_norm_of_zero_rows_is_beta() {
        let ln = LayerNorm::new(3);
        let (y, _) = ln.forward(&[0.0; 6]);
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
