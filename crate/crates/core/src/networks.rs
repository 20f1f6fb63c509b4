//! Generators and discriminators.
//!
//! A generator is an encoder of its source domain followed by a decoder of
//! its target domain, CycleGAN style:
//!
//! * encoder: reflect-padded 7×7 stem, two stride-2 3×3 downsamplings
//!   (instance norm + ReLU), an attention block, then residual blocks;
//! * decoder: an attention block, residual blocks, two 2× upsamplings
//!   (nearest neighbour + 3×3 conv, group norm + ReLU) and a reflect-padded
//!   7×7 head with `tanh`.
//!
//! Images cross the generator boundary in `[0, 1]`; internally they live
//! in `[-1, 1]`.
//!
//! A discriminator holds three spectrally normalized 70×70 PatchGAN stacks
//! over different views of its input: RGB, luminance (channel mean) and
//! Sobel gradient magnitude (channel max).

use rand::Rng;

use crate::autodiff::Var;
use crate::edges::sobel_magnitude;
use crate::error::{Error, Result};
use crate::nn::{instance_norm, Conv2d, GroupNorm, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tdga::{Tdga, TdgaOutput};

/// Generator inputs must be divisible by this: two stride-2 stages leave
/// features that the attention pyramid halves four more times.
pub const INPUT_DIVISOR: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Channels after the stem; features carry `4 · ngf` channels.
    pub ngf: usize,
    pub n_res_enc: usize,
    pub n_res_dec: usize,
    pub gn_groups: usize,
}

impl Default for GeneratorConfig {
    /// Nine residual blocks split 4 / 5, 64 base channels.
    fn default() -> Self {
        Self { ngf: 64, n_res_enc: 4, n_res_dec: 5, gn_groups: 8 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngf == 0 || self.gn_groups == 0 || !self.ngf.is_multiple_of(self.gn_groups) {
            return Err(Error::Config(format!(
                "ngf ({}) must be a positive multiple of gn_groups ({})",
                self.ngf, self.gn_groups
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        4 * self.ngf
    }
}

/// Residual block: two reflect-padded 3×3 convs with instance norm.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), ch, ch, 3, 1, 1).reflect(),
            conv2: Conv2d::new(format!("{name}.conv2"), ch, ch, 3, 1, 1).reflect(),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv1.forward(s, store, x);
        let y = instance_norm(s, y);
        let y = s.graph.relu(y);
        let y = self.conv2.forward(s, store, y);
        let y = instance_norm(s, y);
        s.graph.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub name: String,
    pub cfg: GeneratorConfig,
    pub stem: Conv2d,
    pub down: [Conv2d; 2],
    pub tdga: Tdga,
    pub blocks: Vec<ResBlock>,
}

/// Encoder outputs: post-residual features and the attention block output.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: Var,
    pub attention: TdgaOutput,
}

impl Encoder {
    pub fn new(name: impl Into<String>, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let n = cfg.ngf;
        Ok(Self {
            stem: Conv2d::new(format!("{name}.stem"), 3, n, 7, 1, 3).reflect(),
            down: [
                Conv2d::new(format!("{name}.down1"), n, 2 * n, 3, 2, 1),
                Conv2d::new(format!("{name}.down2"), 2 * n, 4 * n, 3, 2, 1),
            ],
            tdga: Tdga::new(format!("{name}.tdga"), 4 * n)?,
            blocks: (0..cfg.n_res_enc).map(|i| ResBlock::new(&format!("{name}.res{i}"), 4 * n)).collect(),
            name,
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        self.down.iter().for_each(|c| c.init(store, rng));
        self.tdga.init(store, rng);
        self.blocks.iter().for_each(|b| b.init(store, rng));
    }

    /// Encodes a 3×H×W image in `[0, 1]`; H and W must be divisible by
    /// [`INPUT_DIVISOR`].
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Encoded> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch { context: "encoder input", left: shape, right: vec![3, 0, 0] });
        }
        if !shape[1].is_multiple_of(INPUT_DIVISOR) || !shape[2].is_multiple_of(INPUT_DIVISOR) {
            return Err(Error::SpatialNotDivisible {
                context: "generator input",
                height: shape[1],
                width: shape[2],
                divisor: INPUT_DIVISOR,
            });
        }
        let y = s.graph.mul_scalar(x, T::of(2.0));
        let y = s.graph.add_scalar(y, T::of(-1.0));
        let y = self.stem.forward(s, store, y);
        let y = instance_norm(s, y);
        let mut y = s.graph.relu(y);
        for conv in &self.down {
            y = conv.forward(s, store, y);
            y = instance_norm(s, y);
            y = s.graph.relu(y);
        }
        let attention = self.tdga.forward(s, store, y)?;
        let mut y = attention.features;
        for b in &self.blocks {
            y = b.forward(s, store, y);
        }
        Ok(Encoded { features: y, attention })
    }
}

/// Nearest-neighbour 2× upsampling followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub name: String,
    pub cfg: GeneratorConfig,
    pub tdga: Tdga,
    pub blocks: Vec<ResBlock>,
    pub up: [UpBlock; 2],
    pub head: Conv2d,
}

/// Normalization layer kinds in forward order, for architecture audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Group,
}

impl Decoder {
    pub fn new(name: impl Into<String>, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let n = cfg.ngf;
        let up = |i: usize, cin: usize, cout: usize| UpBlock {
            conv: Conv2d::new(format!("{name}.up{i}"), cin, cout, 3, 1, 1),
            norm: GroupNorm::new(format!("{name}.up{i}.gn"), cout, cfg.gn_groups),
        };
        Ok(Self {
            tdga: Tdga::new(format!("{name}.tdga"), 4 * n)?,
            blocks: (0..cfg.n_res_dec).map(|i| ResBlock::new(&format!("{name}.res{i}"), 4 * n)).collect(),
            up: [up(1, 4 * n, 2 * n), up(2, 2 * n, n)],
            head: Conv2d::new(format!("{name}.head"), n, 3, 7, 1, 3).reflect(),
            name,
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.tdga.init(store, rng);
        self.blocks.iter().for_each(|b| b.init(store, rng));
        for u in &self.up {
            u.conv.init(store, rng);
            u.norm.init(store);
        }
        self.head.init(store, rng);
    }

    /// Normalization layers in forward order (the attention block has none).
    pub fn norm_layers(&self) -> Vec<NormKind> {
        let mut out = vec![NormKind::Instance; 2 * self.blocks.len()];
        out.extend([NormKind::Group; 2]);
        out
    }

    /// Decodes encoder features into a 3-channel image in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let shape = s.graph.shape(f).to_vec();
        let c = self.cfg.feature_channels();
        if shape.len() != 3 || shape[0] != c {
            return Err(Error::ShapeMismatch { context: "decoder input", left: shape, right: vec![c, 0, 0] });
        }
        let mut y = self.tdga.forward(s, store, f)?.features;
        for b in &self.blocks {
            y = b.forward(s, store, y);
        }
        for u in &self.up {
            y = s.graph.upsample_nearest(y, 2);
            y = u.conv.forward(s, store, y);
            y = u.norm.forward(s, store, y);
            y = s.graph.relu(y);
        }
        let y = self.head.forward(s, store, y);
        let y = s.graph.tanh(y);
        let y = s.graph.add_scalar(y, T::one());
        Ok(s.graph.mul_scalar(y, T::of(0.5)))
    }
}

/// `G_XY`: encoder of domain X followed by decoder of domain Y.
#[derive(Clone, Copy, Debug)]
pub struct Generator<'a> {
    pub encoder: &'a Encoder,
    pub decoder: &'a Decoder,
}

impl Generator<'_> {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Encoded)> {
        let enc = self.encoder.forward(s, store, x)?;
        let out = self.decoder.forward(s, store, enc.features)?;
        Ok((out, enc))
    }
}

/// PatchGAN: k4 convs with strides 2, 2, 2, 1, 1, leaky ReLU 0.2, instance
/// norm on the inner layers, every conv spectrally normalized.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(name: &str, in_ch: usize, ndf: usize) -> Self {
        let layers = [(in_ch, ndf, 2), (ndf, 2 * ndf, 2), (2 * ndf, 4 * ndf, 2), (4 * ndf, 8 * ndf, 1), (8 * ndf, 1, 1)];
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| Conv2d::new(format!("{name}.conv{i}"), cin, cout, 4, stride, 1).spectral())
            .collect();
        Self { convs }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.convs.iter().for_each(|c| c.init(store, rng));
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Var {
        let last = self.convs.len() - 1;
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(s, store, y);
            if i == last {
                break;
            }
            if i > 0 {
                y = instance_norm(s, y);
            }
            y = s.graph.leaky_relu(y, T::of(0.2));
        }
        y
    }

    /// Receptive field of one output score, in input pixels.
    pub fn receptive_field(&self) -> usize {
        self.convs.iter().rev().fold(1, |rf, c| (rf - 1) * c.stride + c.kernel)
    }

    /// Output grid side for an input side `n`.
    pub fn output_side(&self, n: usize) -> usize {
        self.convs.iter().fold(n, |n, c| (n + 2 * c.pad - c.kernel) / c.stride + 1)
    }
}

/// Discriminator views, in score order.
pub const VIEWS: [&str; 3] = ["rgb", "luma", "grad"];

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub name: String,
    pub views: [PatchDiscriminator; 3],
}

impl Discriminator {
    pub fn new(name: impl Into<String>, ndf: usize) -> Self {
        let name = name.into();
        let views = [
            PatchDiscriminator::new(&format!("{name}.{}", VIEWS[0]), 3, ndf),
            PatchDiscriminator::new(&format!("{name}.{}", VIEWS[1]), 1, ndf),
            PatchDiscriminator::new(&format!("{name}.{}", VIEWS[2]), 1, ndf),
        ];
        Self { name, views }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.views.iter().for_each(|v| v.init(store, rng));
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.views.iter().flat_map(|v| v.convs.iter())
    }

    /// One power-iteration step on every spectrally normalized weight.
    pub fn power_iterate<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.convs().for_each(|c| c.power_iterate(store));
    }

    /// The three view inputs of a 3×H×W image in `[0, 1]`.
    pub fn view_inputs<T: Scalar>(s: &mut Session<T>, x: Var) -> [Var; 3] {
        let c = s.graph.shape(x)[0] as f64;
        let sum = s.graph.sum_axis0(x);
        let luma = s.graph.mul_scalar(sum, T::of(1.0 / c));
        let grad = sobel_magnitude(&mut s.graph, x);
        [x, luma, grad]
    }

    /// Patch score grids, one per view.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> [Var; 3] {
        let inputs = Self::view_inputs(s, x);
        [0, 1, 2].map(|i| self.views[i].forward(s, store, inputs[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { ngf: 8, n_res_enc: 1, n_res_dec: 1, gn_groups: 8 }
    }

    fn build(cfg: GeneratorConfig, seed: u64) -> (Encoder, Decoder, ParamStore<f32>) {
        let enc = Encoder::new("enc", cfg).unwrap();
        let dec = Decoder::new("dec", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        enc.init(&mut store, &mut rng);
        dec.init(&mut store, &mut rng);
        (enc, dec, store)
    }

    #[test]
    fn encode_shapes_and_decode_round_trip() {
        let (enc, dec, store) = build(tiny(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Session::new(false);
        let x = s.graph.constant(Tensor::from_fn(&[3, 64, 128], |_| rng.random_range(0.0..1.0)));
        let e = enc.forward(&mut s, &store, x).unwrap();
        assert_eq!(s.graph.shape(e.features), &[32, 16, 32]);
        assert_eq!(s.graph.shape(e.attention.tensor), &[3, 16, 32]);
        let y = dec.forward(&mut s, &store, e.features).unwrap();
        assert_eq!(s.graph.shape(y), &[3, 64, 128]);
        let v = s.graph.value(y);
        assert!(v.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn encode_is_deterministic_and_rejects_bad_sizes() {
        let (enc, _, store) = build(tiny(), 2);
        let img = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i % 17) as f32 / 17.0);
        let run = || {
            let mut s = Session::new(false);
            let x = s.graph.constant(img.clone());
            let e = enc.forward(&mut s, &store, x).unwrap();
            (s.graph.value(e.features).clone(), s.graph.value(e.attention.tensor).clone())
        };
        assert_eq!(run(), run());
        let mut s = Session::new(false);
        let bad = s.graph.constant(Tensor::zeros(&[3, 250, 250]));
        assert!(matches!(enc.forward(&mut s, &store, bad), Err(Error::SpatialNotDivisible { .. })));
    }

    #[test]
    fn decoder_tail_is_two_group_norms() {
        let dec = Decoder::new("dec", GeneratorConfig::default()).unwrap();
        let norms = dec.norm_layers();
        let first_group = norms.iter().position(|&n| n == NormKind::Group).unwrap();
        assert_eq!(norms.iter().filter(|&&n| n == NormKind::Group).count(), 2);
        assert_eq!(first_group, norms.len() - 2);
        assert!(norms[first_group..].iter().all(|&n| n == NormKind::Group));
    }

    #[test]
    fn constant_features_decode_to_finite_output() {
        let (_, dec, store) = build(tiny(), 3);
        let mut s = Session::new(false);
        let f = s.graph.constant(Tensor::full(&[32, 16, 16], 0.7));
        let y = dec.forward(&mut s, &store, f).unwrap();
        assert!(s.graph.value(y).all_finite());
    }

    #[test]
    fn patch_grid_geometry() {
        let d = PatchDiscriminator::new("d", 3, 64);
        assert_eq!(d.receptive_field(), 70);
        assert_eq!(d.output_side(256), 30);
        assert_eq!(d.output_side(64), 6);
        let disc = Discriminator::new("D", 4);
        let mut store = ParamStore::<f32>::new();
        disc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let mut s = Session::new(false);
        let x = s.graph.constant(Tensor::full(&[3, 64, 64], 0.5));
        let scores = disc.forward(&mut s, &store, x);
        for v in scores {
            assert_eq!(s.graph.shape(v), &[1, 6, 6]);
        }
    }

    #[test]
    fn gray_image_gradient_view_is_zero() {
        let mut s = Session::<f64>::new(false);
        let x = s.graph.constant(Tensor::full(&[3, 16, 16], 0.5));
        let [_, luma, grad] = Discriminator::view_inputs(&mut s, x);
        assert!(s.graph.value(grad).data().iter().all(|&v| v.abs() < 1e-15));
        assert!(s.graph.value(luma).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let cfg = GeneratorConfig { ngf: 8, n_res_enc: 1, n_res_dec: 1, gn_groups: 8 };
        let enc = Encoder::new("enc", cfg).unwrap();
        let dec = Decoder::new("dec", cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        enc.init(&mut store, &mut rng);
        dec.init(&mut store, &mut rng);
        // Larger weights than the GAN initializer so the check is not
        // dominated by near-zero signals.
        for name in store.params().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
            if name.ends_with(".weight") {
                let t = store.param(&name).clone();
                *store.param_mut(&name) = t.scale(8.0);
            }
        }
        let x = Tensor::from_fn(&[3, 64, 64], |_| rng.random_range(0.0..1.0));
        let probe = Tensor::from_fn(&[3, 64, 64], |_| rng.random_range(-1.0..1.0));
        // Spot check on a subset of pixels keeps the runtime bounded.
        let err = gradcheck::check_coords(
            &[x],
            |g, v| {
                let mut s = Session::new(false);
                std::mem::swap(&mut s.graph, g);
                let (y, _) = Generator { encoder: &enc, decoder: &dec }.forward(&mut s, &store, v[0]).unwrap();
                let p = s.graph.constant(probe.clone());
                let yp = s.graph.mul(y, p);
                let out = s.graph.sum(yp);
                std::mem::swap(&mut s.graph, g);
                out
            },
            1e-5,
            &(0..3 * 64 * 64).step_by(997).collect::<Vec<_>>(),
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn spectral_norm_audit_against_svd() {
        let disc = Discriminator::new("D", 8);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        disc.init(&mut store, &mut rng);
        for _ in 0..100 {
            disc.power_iterate(&mut store);
        }
        for conv in disc.convs() {
            let mut s = Session::<f64>::new(false);
            let w = s.param(&store, &conv.weight_name());
            let wn = s.graph.spectral_normalize(w, store.buffer(&conv.sn_u_name()), store.buffer(&conv.sn_v_name()));
            let v = s.graph.value(wn);
            let rows = v.shape()[0];
            let cols = v.len() / rows;
            let m = nalgebra::DMatrix::from_row_slice(rows, cols, v.data());
            let sigma = m.singular_values().max();
            assert!((0.9..=1.1).contains(&sigma), "{}: largest singular value {sigma}", conv.name);
        }
    }
}
