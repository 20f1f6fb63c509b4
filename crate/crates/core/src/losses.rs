//! Training losses: relativistic-average least-squares adversarial loss,
//! SSIM-augmented cycle loss, total variation, attentional diversity (AD),
//! attentional cross-domain conditional similarity (ACCS), structured
//! gradient alignment (SGA) and their weighted total.
//!
//! Every loss is a graph op, so gradients reach the networks.

use crate::autodiff::{Graph, Var};
use crate::edges::{sobel_magnitude, EdgePatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the total objective and the AD coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_ssim: f64,
    pub lambda_tv: f64,
    pub lambda_att: f64,
    pub lambda_sga: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_ssim: 1.0, lambda_tv: 5.0, lambda_att: 1.0, lambda_sga: 0.5, alpha: 0.5, beta: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cyc,
            self.lambda_ssim,
            self.lambda_tv,
            self.lambda_att,
            self.lambda_sga,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Denominator guard for the scale-confidence normalization.
pub const CONFIDENCE_EPS: f64 = 1e-8;
/// Attention rows whose mean weight falls below this become zero vectors.
pub const DEGENERATE_GAP: f64 = 1e-6;
/// Guard for normalizing gradient patches by their maximum.
pub const PATCH_EPS: f64 = 1e-12;

/// Broadcasts a one-element node to `shape`.
fn splat<T: Scalar>(g: &mut Graph<T>, s: Var, shape: &[usize]) -> Var {
    let ones = vec![1; shape.len()];
    let r = g.reshape(s, &ones);
    g.broadcast_to(r, shape)
}

/// `a − mean(b)` with the mean broadcast over `a`.
fn minus_mean<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let m = g.mean(b);
    let shape = g.shape(a).to_vec();
    let m = splat(g, m, &shape);
    g.sub(a, m)
}

/// `mean((x + c)²)`.
fn mean_sq_shift<T: Scalar>(g: &mut Graph<T>, x: Var, c: f64) -> Var {
    let y = g.add_scalar(x, T::of(c));
    let y = g.square(y);
    g.mean(y)
}

/// `max(x, floor)` on a one-element node, with zero gradient when clamped.
fn clamp_min<T: Scalar>(g: &mut Graph<T>, x: Var, floor: f64) -> Var {
    let f = T::of(floor);
    g.unary(x, move |v| v.max(f), move |v, _| if v > f { T::one() } else { T::zero() })
}

/// Relativistic-average least-squares losses `(generator, discriminator)`,
/// averaged over the score grids of all views.
pub fn adversarial_losses<T: Scalar>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<(Var, Var)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::ShapeMismatch { context: "adversarial views", left: vec![real.len()], right: vec![fake.len()] });
    }
    let mut gen_terms = Vec::new();
    let mut disc_terms = Vec::new();
    for (&r, &f) in real.iter().zip(fake) {
        if g.shape(r) != g.shape(f) {
            return Err(Error::ShapeMismatch {
                context: "adversarial scores",
                left: g.shape(r).to_vec(),
                right: g.shape(f).to_vec(),
            });
        }
        let r_rel = minus_mean(g, r, f);
        let f_rel = minus_mean(g, f, r);
        let d1 = mean_sq_shift(g, r_rel, -1.0);
        let d2 = mean_sq_shift(g, f_rel, 1.0);
        disc_terms.push(g.add(d1, d2));
        let g1 = mean_sq_shift(g, f_rel, -1.0);
        let g2 = mean_sq_shift(g, r_rel, 1.0);
        gen_terms.push(g.add(g1, g2));
    }
    let n = T::of(1.0 / real.len() as f64);
    let mut avg = |terms: Vec<Var>| {
        let c = g.concat(&terms);
        let s = g.sum(c);
        g.mul_scalar(s, n)
    };
    let gen = avg(gen_terms);
    let disc = avg(disc_terms);
    Ok((gen, disc))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b, "l1")?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn check_same<T: Scalar>(g: &Graph<T>, a: Var, b: Var, context: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch { context, left: g.shape(a).to_vec(), right: g.shape(b).to_vec() });
    }
    Ok(())
}

/// SSIM window: 11×11 Gaussian, σ = 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 2-D Gaussian window.
pub fn gaussian_window<T: Scalar>(size: usize, sigma: f64) -> Tensor<T> {
    let r = (size / 2) as f64;
    let g1: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g1.iter().sum();
    Tensor::from_fn(&[size, size], |i| T::of(g1[i / size] * g1[i % size] / (s * s)))
}

/// Mean single-scale SSIM over channels and valid window positions, for
/// images in `[0, 1]` (dynamic range 1).
pub fn ssim<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    check_same(g, x, y, "ssim")?;
    let (_, h, w) = g.value(x).chw();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, need: SSIM_WINDOW });
    }
    let k = gaussian_window::<T>(SSIM_WINDOW, SSIM_SIGMA);
    let mu_x = g.depthwise_fixed(x, &k);
    let mu_y = g.depthwise_fixed(y, &k);
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y);
    let e_xx = g.depthwise_fixed(xx, &k);
    let e_yy = g.depthwise_fixed(yy, &k);
    let e_xy = g.depthwise_fixed(xy, &k);
    let mu_x2 = g.square(mu_x);
    let mu_y2 = g.square(mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mu_x2);
    let var_y = g.sub(e_yy, mu_y2);
    let cov = g.sub(e_xy, mu_xy);
    let a = g.mul_scalar(mu_xy, T::of(2.0));
    let a = g.add_scalar(a, T::of(SSIM_C1));
    let b = g.mul_scalar(cov, T::of(2.0));
    let b = g.add_scalar(b, T::of(SSIM_C2));
    let num = g.mul(a, b);
    let c = g.add(mu_x2, mu_y2);
    let c = g.add_scalar(c, T::of(SSIM_C1));
    let d = g.add(var_x, var_y);
    let d = g.add_scalar(d, T::of(SSIM_C2));
    let den = g.mul(c, d);
    let map = g.div(num, den);
    Ok(g.mean(map))
}

/// Cycle-loss parts `(mean |x − rec|, 1 − SSIM(x, rec))`.
pub fn cycle_terms<T: Scalar>(g: &mut Graph<T>, x: Var, rec: Var) -> Result<(Var, Var)> {
    let l1 = l1_loss(g, x, rec)?;
    let s = ssim(g, x, rec)?;
    let neg = g.neg(s);
    let dssim = g.add_scalar(neg, T::one());
    Ok((l1, dssim))
}

/// `λ_cyc · mean|x − rec| + λ_ssim · (1 − SSIM(x, rec))`.
pub fn cycle_loss<T: Scalar>(g: &mut Graph<T>, x: Var, rec: Var, w: &LossWeights) -> Result<Var> {
    let (l1, dssim) = cycle_terms(g, x, rec)?;
    let a = g.mul_scalar(l1, T::of(w.lambda_cyc));
    let b = g.mul_scalar(dssim, T::of(w.lambda_ssim));
    Ok(g.add(a, b))
}

/// Mean absolute horizontal difference plus mean absolute vertical
/// difference.
pub fn tv_loss<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (_, h, w) = g.value(x).chw();
    if h < 2 || w < 2 {
        return Err(Error::ImageTooSmall { width: w, height: h, need: 2 });
    }
    let right = g.crop(x, 0, 1, h, w - 1);
    let left = g.crop(x, 0, 0, h, w - 1);
    let dx = g.sub(right, left);
    let dx = g.abs(dx);
    let dx = g.mean(dx);
    let down = g.crop(x, 1, 0, h - 1, w);
    let up = g.crop(x, 0, 0, h - 1, w);
    let dy = g.sub(down, up);
    let dy = g.abs(dy);
    let dy = g.mean(dy);
    Ok(g.add(dx, dy))
}

/// Attentional diversity:
/// `α · mean_{ij}[(1 − max_k T_kij) + β · (Σ_k T_kij − 1)²]`.
pub fn ad_loss<T: Scalar>(g: &mut Graph<T>, t: Var, w: &LossWeights) -> Var {
    let mx = g.max_axis0(t);
    let neg = g.neg(mx);
    let excl = g.add_scalar(neg, T::one());
    let sum = g.sum_axis0(t);
    let compl = mean_sq_shift_map(g, sum, -1.0);
    let compl = g.mul_scalar(compl, T::of(w.beta));
    let per_pixel = g.add(excl, compl);
    let m = g.mean(per_pixel);
    g.mul_scalar(m, T::of(w.alpha))
}

fn mean_sq_shift_map<T: Scalar>(g: &mut Graph<T>, x: Var, c: f64) -> Var {
    let y = g.add_scalar(x, T::of(c));
    g.square(y)
}

/// Average-pools `t` by 2× steps until its spatial size matches `(h, w)`.
fn align_to<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let mut t = t;
    loop {
        let (_, th, tw) = g.value(t).chw();
        if (th, tw) == (h, w) {
            return Ok(t);
        }
        if th < 2 * h || tw < 2 * w || th % 2 != 0 || tw % 2 != 0 {
            return Err(Error::ShapeMismatch { context: "attention alignment", left: vec![th, tw], right: vec![h, w] });
        }
        t = g.avg_pool2(t);
    }
}

/// Attention features: row `k` is `GAP(F ⊙ T_k) / GAP(T_k)`, L2-normalized,
/// giving an `n × c` matrix. `T` is average-pooled to the resolution of `F`
/// when larger. Rows whose mean attention is below [`DEGENERATE_GAP`] are
/// zero.
pub fn attention_feature<T: Scalar>(g: &mut Graph<T>, f: Var, t: Var) -> Result<Var> {
    let (c, h, w) = g.value(f).chw();
    let t = align_to(g, t, h, w)?;
    let n = g.shape(t)[0];
    let tm = g.reshape(t, &[n, h * w]);
    let fm = g.reshape(f, &[c, h * w]);
    let ft = g.transpose(fm);
    let weighted = g.matmul(tm, ft);
    let ones = g.constant(Tensor::ones(&[h * w, 1]));
    let gap = g.matmul(tm, ones);
    let gap_b = g.broadcast_to(gap, &[n, c]);
    let means = g.div(weighted, gap_b);
    let rows = g.l2_normalize_rows(means);
    let area = (h * w) as f64;
    let degenerate: Vec<bool> = g.value(gap).data().iter().map(|&s| s.to_f64c() / area < DEGENERATE_GAP).collect();
    if degenerate.iter().any(|&d| d) {
        let mask = Tensor::from_fn(&[n, c], |i| if degenerate[i / c] { T::zero() } else { T::one() });
        let mask = g.constant(mask);
        return Ok(g.mul(rows, mask));
    }
    Ok(rows)
}

/// `max(mean of the off-diagonal entries of V Vᵀ, 0)`.
pub fn dis_term<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    let n = g.shape(v)[0];
    let vt = g.transpose(v);
    let q = g.matmul(v, vt);
    let total = g.sum(q);
    let d = diagonal(g, q);
    let dsum = g.sum(d);
    let off = g.sub(total, dsum);
    let denom = (n * n.saturating_sub(1)).max(1) as f64;
    let off = g.mul_scalar(off, T::of(1.0 / denom));
    g.relu(off)
}

/// Diagonal of an `n × n` matrix as a `1 × n` row.
fn diagonal<T: Scalar>(g: &mut Graph<T>, q: Var) -> Var {
    let n = g.shape(q)[0];
    g.gather(q, &[1, n], (0..n).map(|i| i * n + i).collect())
}

/// Row-wise maximum of an `n × n` matrix as a `1 × n` row.
fn row_max<T: Scalar>(g: &mut Graph<T>, q: Var) -> Var {
    let qt = g.transpose(q);
    g.max_axis0(qt)
}

/// Per-scale confidence `W_k = min(max T_ra^k, max T_rb^k)`, a `1 × n` row.
pub fn scale_confidence<T: Scalar>(g: &mut Graph<T>, t_ra: Var, t_rb: Var) -> Var {
    let row_maxes = |g: &mut Graph<T>, t: Var| {
        let n = g.shape(t)[0];
        let hw = g.value(t).len() / n;
        let m = g.reshape(t, &[n, hw]);
        let mt = g.transpose(m);
        g.max_axis0(mt)
    };
    let a = row_maxes(g, t_ra);
    let b = row_maxes(g, t_rb);
    g.minimum(a, b)
}

/// Confidence-weighted relativity of a cross-domain similarity matrix:
/// `Σ_k W_k (M(Q)_k − Q_kk) / max(Σ_k W_k, ε)` with `Q = V_real V_fakeᵀ`.
pub fn relativity_term<T: Scalar>(g: &mut Graph<T>, v_real: Var, v_fake: Var, w: Var) -> Var {
    let vt = g.transpose(v_fake);
    let q = g.matmul(v_real, vt);
    let m = row_max(g, q);
    let d = diagonal(g, q);
    let gap = g.sub(m, d);
    let weighted = g.mul(w, gap);
    let num = g.sum(weighted);
    let wsum = g.sum(w);
    let den = clamp_min(g, wsum, CONFIDENCE_EPS);
    g.div(num, den)
}

/// The four attention-feature matrices entering ACCS.
#[derive(Clone, Copy, Debug)]
pub struct AccsFeatures {
    /// Real A with its own attention.
    pub v_rara: Var,
    /// Fake A (translated from real B) with real-B attention.
    pub v_farb: Var,
    /// Real B with its own attention.
    pub v_rbrb: Var,
    /// Fake B (translated from real A) with real-A attention.
    pub v_fbra: Var,
}

/// ACCS from precomputed attention features and scale confidence.
pub fn accs_from_features<T: Scalar>(g: &mut Graph<T>, v: &AccsFeatures, w: Var) -> Var {
    let rel_b = relativity_term(g, v.v_rbrb, v.v_fbra, w);
    let dis_rbrb = dis_term(g, v.v_rbrb);
    let dis_fbra = dis_term(g, v.v_fbra);
    let rel_a = relativity_term(g, v.v_rara, v.v_farb, w);
    let dis_rara = dis_term(g, v.v_rara);
    let dis_farb = dis_term(g, v.v_farb);
    let parts = [rel_b, dis_rbrb, dis_fbra, rel_a, dis_rara, dis_farb];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    total
}

/// Attentional cross-domain conditional similarity of both domains. `f_*`
/// are encoder features of real / fake images, `t_ra`, `t_rb` the
/// attention tensors of the real-image encoder passes.
#[allow(clippy::too_many_arguments)]
pub fn accs_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_ra: Var,
    f_rb: Var,
    f_fa: Var,
    f_fb: Var,
    t_ra: Var,
    t_rb: Var,
) -> Result<Var> {
    let v = AccsFeatures {
        v_rara: attention_feature(g, f_ra, t_ra)?,
        v_farb: attention_feature(g, f_fa, t_rb)?,
        v_rbrb: attention_feature(g, f_rb, t_rb)?,
        v_fbra: attention_feature(g, f_fb, t_ra)?,
    };
    let w = scale_confidence(g, t_ra, t_rb);
    Ok(accs_from_features(g, &v, w))
}

/// `Σ max(η·P_e − P_g, 0) / Σ P_e`.
pub fn sga_patch_loss<T: Scalar>(g: &mut Graph<T>, pe: Var, pg: Var, eta: f64) -> Result<Var> {
    check_same(g, pe, pg, "sga patch")?;
    let total_e = g.value(pe).sum();
    if total_e <= T::zero() {
        return Err(Error::EmptyEdgePatch);
    }
    let target = g.mul_scalar(pe, T::of(eta));
    let short = g.sub(target, pg);
    let short = g.relu(short);
    let s = g.sum(short);
    Ok(g.mul_scalar(s, T::one() / total_e))
}

/// Gradient patch of `img` at the edge patch's location, normalized by its
/// own maximum.
pub fn gradient_patch<T: Scalar>(g: &mut Graph<T>, img: Var, patch: &EdgePatch<T>) -> Var {
    let l = patch.values.shape()[1];
    let mag = sobel_magnitude(g, img);
    let p = g.crop(mag, patch.row, patch.col, l, l);
    let mx = g.max_all(p);
    let mx = clamp_min(g, mx, PATCH_EPS);
    let mx = splat(g, mx, &[1, l, l]);
    g.div(p, mx)
}

/// SGA term of one translation direction: the edge patch comes from the
/// real source image, the gradient patch from the translated image.
pub fn sga_direction<T: Scalar>(g: &mut Graph<T>, fake: Var, patch: &EdgePatch<T>, eta: f64) -> Result<Var> {
    let pg = gradient_patch(g, fake, patch);
    let pe = g.constant(patch.values.clone());
    sga_patch_loss(g, pe, pg, eta)
}

/// Sum of the available direction terms; zero when none is available.
pub fn sga_loss<T: Scalar>(g: &mut Graph<T>, terms: &[Option<Var>]) -> Var {
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for t in terms.iter().flatten() {
        total = g.add(total, *t);
    }
    total
}

/// Loss components of one generator update. `cyc_l1`, `ssim`, `tv`, `ad`
/// and `sga` are summed over both directions; `ssim` holds `1 − SSIM`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<V> {
    pub adv: V,
    pub cyc_l1: V,
    pub ssim: V,
    pub tv: V,
    pub ad: V,
    pub accs: V,
    pub sga: V,
}

impl<V: Copy> LossComponents<V> {
    pub const NAMES: [&'static str; 7] = ["adv", "cyc_l1", "ssim", "tv", "ad", "accs", "sga"];

    pub fn to_array(&self) -> [V; 7] {
        [self.adv, self.cyc_l1, self.ssim, self.tv, self.ad, self.accs, self.sga]
    }
}

/// Schedule gates for the SSIM and ACCS terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gates {
    pub ssim: bool,
    pub accs: bool,
}

impl Gates {
    pub const OPEN: Gates = Gates { ssim: true, accs: true };
    pub const CLOSED: Gates = Gates { ssim: false, accs: false };
}

/// Coefficient of each component in the total, in [`LossComponents::NAMES`]
/// order.
pub fn coefficients(w: &LossWeights, gates: Gates) -> [f64; 7] {
    let gate = |b: bool| if b { 1.0 } else { 0.0 };
    [
        1.0,
        w.lambda_cyc,
        gate(gates.ssim) * w.lambda_ssim,
        w.lambda_tv,
        w.lambda_att,
        gate(gates.accs) * w.lambda_att,
        w.lambda_sga,
    ]
}

/// `adv + λ_cyc·L1 + g_ssim·λ_ssim·(1−SSIM) + λ_tv·TV + λ_att·(AD + g_accs·ACCS) + λ_sga·SGA`.
pub fn total_objective<T: Scalar>(g: &mut Graph<T>, c: &LossComponents<Var>, w: &LossWeights, gates: Gates) -> Var {
    let coef = coefficients(w, gates);
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (v, k) in c.to_array().into_iter().zip(coef) {
        if k != 0.0 {
            let t = g.mul_scalar(v, T::of(k));
            total = g.add(total, t);
        }
    }
    total
}

/// Scalar version of [`total_objective`].
pub fn total_value(c: &LossComponents<f64>, w: &LossWeights, gates: Gates) -> f64 {
    c.to_array().iter().zip(coefficients(w, gates)).filter(|(_, k)| *k != 0.0).map(|(v, k)| v * k).sum()
}
