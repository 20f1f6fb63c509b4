use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamStore, Session};
use crate::autodiff::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// 2-D convolution with bias, optionally spectrally normalized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
    pub spectral: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel, stride, pad, padding: Padding::Zero, spectral: false }
    }

    pub fn reflect(mut self) -> Self {
        self.padding = Padding::Reflect;
        self
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn sn_u_name(&self) -> String {
        format!("{}.sn_u", self.name)
    }

    pub fn sn_v_name(&self) -> String {
        format!("{}.sn_v", self.name)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        store.insert_param(self.weight_name(), normal_tensor(rng, &shape, INIT_STD));
        store.insert_param(self.bias_name(), Tensor::zeros(&[self.out_ch]));
        if self.spectral {
            let cols = self.in_ch * self.kernel * self.kernel;
            let u = unit(normal_tensor(rng, &[self.out_ch], 1.0));
            let v = unit(normal_tensor(rng, &[cols], 1.0));
            store.insert_buffer(self.sn_u_name(), u);
            store.insert_buffer(self.sn_v_name(), v);
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut w = s.param(store, &self.weight_name());
        let b = s.param(store, &self.bias_name());
        if self.spectral {
            w = s.graph.spectral_normalize(w, store.buffer(&self.sn_u_name()), store.buffer(&self.sn_v_name()));
        }
        match self.padding {
            Padding::Zero => s.graph.conv2d(x, w, Some(b), self.stride, self.pad),
            Padding::Reflect => {
                let x = if self.pad > 0 { s.graph.reflect_pad(x, self.pad) } else { x };
                s.graph.conv2d(x, w, Some(b), self.stride, 0)
            }
        }
    }

    /// One power-iteration step on the weight viewed as `out × (in·k·k)`:
    /// `v ← normalize(Wᵀu)`, `u ← normalize(Wv)`. No-op without spectral
    /// normalization.
    pub fn power_iterate<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if !self.spectral {
            return;
        }
        let w = store.param(&self.weight_name()).clone();
        let u = store.buffer(&self.sn_u_name()).clone();
        let (u, v) = power_step(&w, &u);
        *store.buffer_mut(&self.sn_u_name()) = u;
        *store.buffer_mut(&self.sn_v_name()) = v;
    }
}

fn unit<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let n = t.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    let n = n.max(T::of(1e-12));
    t.map(|x| x / n)
}

/// One power-iteration step; returns the updated `(u, v)`.
pub fn power_step<T: Scalar>(w: &Tensor<T>, u: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let wd = w.data();
    let mut v = vec![T::zero(); cols];
    for i in 0..rows {
        let ui = u.data()[i];
        for (vj, &wij) in v.iter_mut().zip(&wd[i * cols..(i + 1) * cols]) {
            *vj += wij * ui;
        }
    }
    let v = unit(Tensor::from_vec(&[cols], v));
    let u_new: Vec<T> = (0..rows)
        .map(|i| wd[i * cols..(i + 1) * cols].iter().zip(v.data()).map(|(&a, &b)| a * b).sum())
        .collect();
    (unit(Tensor::from_vec(&[rows], u_new)), v)
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "group norm: {channels} channels, {groups} groups");
        Self { name: name.into(), channels, groups }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert_param(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = s.param(store, &format!("{}.gamma", self.name));
        let beta = s.param(store, &format!("{}.beta", self.name));
        let y = s.graph.group_norm(x, self.groups, T::of(NORM_EPS));
        s.graph.channel_affine(y, gamma, beta)
    }
}

/// Instance normalization without affine parameters.
pub fn instance_norm<T: Scalar>(s: &mut Session<T>, x: Var) -> Var {
    let c = s.graph.shape(x)[0];
    s.graph.group_norm(x, c, T::of(NORM_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_output_is_standardized_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new("gn", 4, 2);
        gn.init(&mut store);
        let mut s = Session::new(false);
        let x = s.graph.constant(normal_tensor(&mut rng, &[4, 3, 3], 2.0));
        let y = gn.forward(&mut s, &store, x);
        let v = s.graph.value(y);
        for g in 0..2 {
            let part = &v.data()[g * 18..(g + 1) * 18];
            let mean: f64 = part.iter().sum::<f64>() / 18.0;
            let var: f64 = part.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn reflect_conv_preserves_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new("c", 3, 5, 7, 1, 3).reflect();
        conv.init(&mut store, &mut rng);
        let mut s = Session::new(false);
        let x = s.graph.constant(Tensor::zeros(&[3, 16, 12]));
        let y = conv.forward(&mut s, &store, x);
        assert_eq!(s.graph.shape(y), &[5, 16, 12]);
    }
}
