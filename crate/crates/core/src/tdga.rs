//! Top-down guided attention.
//!
//! The input feature map is split by a learned convolution into four
//! channel groups. Group `s` is average-pooled `s` times, giving a
//! statistical pyramid whose coarsest level predicts the first attention
//! map. Each finer level is gated by the upsampled attention of the level
//! below before predicting its own map. Every map then re-weights its group
//! at full resolution (`F + F ⊙ A↑`), and the groups are concatenated from
//! coarsest to finest.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Session};
use crate::scalar::Scalar;

/// Number of pyramid scales.
pub const SCALES: usize = 4;
/// Number of attention maps in the cascaded attention tensor (the three
/// finer scales).
pub const N_ATT: usize = 3;

/// `[F_1, F_2, F_3, F_4]`, each (c/4)×h×w.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGroups {
    pub groups: [Var; SCALES],
}

/// `levels[s-1]` is group `s` pooled `s` times: (c/4)×(h/2^s)×(w/2^s).
#[derive(Clone, Copy, Debug)]
pub struct StatPyramid {
    pub levels: [Var; SCALES],
}

/// Attention maps ordered coarse to fine: `[A_d4, A_d3, A_d2, A_d1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub maps: [Var; SCALES],
}

impl AttentionMaps {
    /// Map at pyramid scale `s ∈ 1..=4`.
    pub fn scale(&self, s: usize) -> Var {
        self.maps[SCALES - s]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TdgaOutput {
    /// Enhanced features, same shape as the input.
    pub features: Var,
    /// Cascaded attention tensor, 3×h×w: `(A_d3↑8, A_d2↑4, A_d1↑2)`.
    pub tensor: Var,
    pub attention: AttentionMaps,
}

/// Learned parameters of one attention block.
#[derive(Clone, Debug)]
pub struct Tdga {
    pub name: String,
    pub channels: usize,
}

impl Tdga {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::ChannelsNotDivisible { context: "tdga", channels });
        }
        Ok(Self { name: name.into(), channels })
    }

    pub fn split_conv(&self) -> Conv2d {
        Conv2d::new(format!("{}.split", self.name), self.channels, self.channels, 3, 1, 1)
    }

    /// Attention head of pyramid scale `s ∈ 1..=4`.
    pub fn head(&self, s: usize) -> Conv2d {
        Conv2d::new(format!("{}.att_d{s}", self.name), self.channels / 4, 1, 3, 1, 1)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.split_conv().init(store, rng);
        for s in 1..=SCALES {
            self.head(s).init(store, rng);
        }
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<(usize, usize)> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::ShapeMismatch {
                context: "tdga input",
                left: shape.to_vec(),
                right: vec![self.channels, 0, 0],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::SpatialNotDivisible { context: "tdga", height: h, width: w, divisor: 16 });
        }
        Ok((h, w))
    }

    /// Learned channel-preserving convolution followed by a partition into
    /// four contiguous groups of c/4 channels.
    pub fn split_features<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<FeatureGroups> {
        let c = s.graph.shape(x)[0];
        if c != self.channels {
            return Err(Error::ShapeMismatch { context: "tdga split", left: vec![c], right: vec![self.channels] });
        }
        let y = self.split_conv().forward(s, store, x);
        Ok(partition_groups(&mut s.graph, y))
    }

    /// Coarse-to-fine attention over a pyramid: `A_d4 = Att(F_d4)`, then
    /// `A_ds = Att(F_ds + F_ds ⊙ (A_d(s+1)↑2))` for s = 3, 2, 1.
    pub fn cascade_attention<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, p: &StatPyramid) -> AttentionMaps {
        let mut prior: Option<Var> = None;
        let mut maps = Vec::with_capacity(SCALES);
        for scale in (1..=SCALES).rev() {
            let a = self.guided_attention(s, store, scale, p.levels[scale - 1], prior);
            maps.push(a);
            prior = Some(a);
        }
        AttentionMaps { maps: [maps[0], maps[1], maps[2], maps[3]] }
    }

    /// One cascade step at `scale`; with no prior this is plain `Att(level)`.
    pub fn guided_attention<T: Scalar>(
        &self,
        s: &mut Session<T>,
        store: &ParamStore<T>,
        scale: usize,
        level: Var,
        prior: Option<Var>,
    ) -> Var {
        let input = match prior {
            Some(a) => {
                let up = s.graph.upsample_nearest(a, 2);
                enhance(&mut s.graph, level, up)
            }
            None => level,
        };
        attention_head(s, store, &self.head(scale), input)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<TdgaOutput> {
        self.check_input(&s.graph, x)?;
        let groups = self.split_features(s, store, x)?;
        let pyramid = build_stat_pyramid(&mut s.graph, &groups)?;
        let attention = self.cascade_attention(s, store, &pyramid);
        let features = merge_groups(&mut s.graph, &groups, &attention);
        let tensor = cascaded_tensor(&mut s.graph, &attention);
        Ok(TdgaOutput { features, tensor, attention })
    }
}

/// Splits c channels into four contiguous groups.
pub fn partition_groups<T: Scalar>(g: &mut Graph<T>, x: Var) -> FeatureGroups {
    let q = g.shape(x)[0] / 4;
    let groups = [0, 1, 2, 3].map(|i| g.slice_channels(x, i * q, q));
    FeatureGroups { groups }
}

/// Level `s` is group `s` average-pooled (2×2, stride 2) `s` times.
pub fn build_stat_pyramid<T: Scalar>(g: &mut Graph<T>, groups: &FeatureGroups) -> Result<StatPyramid> {
    let shape = g.shape(groups.groups[0]).to_vec();
    let (h, w) = (shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::SpatialNotDivisible { context: "statistical pyramid", height: h, width: w, divisor: 16 });
    }
    let mut levels = Vec::with_capacity(SCALES);
    for (i, &group) in groups.groups.iter().enumerate() {
        let mut v = group;
        for _ in 0..=i {
            v = g.avg_pool2(v);
        }
        levels.push(v);
    }
    Ok(StatPyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
}

/// `σ(conv3×3(x))`, a single-channel map in (0, 1).
pub fn attention_head<T: Scalar>(s: &mut Session<T>, store: &ParamStore<T>, head: &Conv2d, x: Var) -> Var {
    let logits = head.forward(s, store, x);
    s.graph.sigmoid(logits)
}

/// Attention-directed enhancement `F + F ⊙ A` with `A` broadcast over
/// channels.
pub fn enhance<T: Scalar>(g: &mut Graph<T>, features: Var, attention: Var) -> Var {
    let gated = g.mul_channel_broadcast(features, attention);
    g.add(features, gated)
}

/// `concat(F_4 + F_4⊙A_d4↑16, F_3 + F_3⊙A_d3↑8, F_2 + F_2⊙A_d2↑4, F_1 + F_1⊙A_d1↑2)`.
pub fn merge_groups<T: Scalar>(g: &mut Graph<T>, groups: &FeatureGroups, att: &AttentionMaps) -> Var {
    let parts: Vec<Var> = (1..=SCALES)
        .rev()
        .map(|scale| {
            let up = g.upsample_nearest(att.scale(scale), 1 << scale);
            enhance(g, groups.groups[scale - 1], up)
        })
        .collect();
    g.concat(&parts)
}

/// `concat(A_d3↑8, A_d2↑4, A_d1↑2)`.
pub fn cascaded_tensor<T: Scalar>(g: &mut Graph<T>, att: &AttentionMaps) -> Var {
    let parts: Vec<Var> = (1..=N_ATT).rev().map(|scale| g.upsample_nearest(att.scale(scale), 1 << scale)).collect();
    g.concat(&parts)
}
