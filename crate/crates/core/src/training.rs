//! Bidirectional training: schedules, the per-iteration step, loss logging,
//! sample grids and the outer loop.
//!
//! Naming: `enc_a`/`dec_a` handle domain A (thermal), `enc_b`/`dec_b`
//! domain B (daylight). `G_AB = dec_b ∘ enc_a`, `G_BA = dec_a ∘ enc_b`.
//! `disc_a` scores domain-A images, `disc_b` domain-B images.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::TrainConfig;
use crate::data::{crop_tensor, preprocess, to_dynamic, AugmentParams, UnpairedDataset};
use crate::edges::{detect_edges, eta, sample_edge_patch, EdgeCache, EdgeMap};
use crate::error::{Error, Result};
use crate::losses::{
    accs_loss, ad_loss, adversarial_losses, coefficients, cycle_terms, l1_loss, sga_direction, sga_loss,
    total_objective, tv_loss, Gates, LossComponents,
};
use crate::networks::{Decoder, Discriminator, Encoder, Generator, INPUT_DIVISOR};
use crate::nn::{Adam, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning rate at a (fractional) epoch: `lr0` for the first half, then
/// linear decay to zero at `epochs`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let n = cfg.epochs as f64;
    if !(0.0..=n).contains(&epoch) {
        return Err(Error::EpochOutOfRange { epoch, epochs: cfg.epochs });
    }
    let half = n / 2.0;
    if epoch < half {
        Ok(cfg.lr0)
    } else {
        Ok(cfg.lr0 * (n - epoch) / half)
    }
}

/// SSIM and ACCS gates: both open from `ssim_accs_start_iter` on.
pub fn loss_gates(iteration: u64, cfg: &TrainConfig) -> Gates {
    let open = iteration >= cfg.ssim_accs_start_iter;
    Gates { ssim: open, accs: open }
}

/// Iterations in one epoch.
pub fn iters_per_epoch(cfg: &TrainConfig, data_sizes: (usize, usize)) -> usize {
    if cfg.iters_per_epoch > 0 {
        cfg.iters_per_epoch
    } else {
        data_sizes.0.max(data_sizes.1).max(1)
    }
}

/// Preprocessed training images with their precomputed edge maps.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub dataset: UnpairedDataset<T>,
    pub edges_a: Vec<EdgeMap>,
    pub edges_b: Vec<EdgeMap>,
    /// Edge-sharpness threshold derived from the domain-A intensity range.
    pub eta: f64,
}

impl<T: Scalar> TrainData<T> {
    /// Preprocesses every image and detects (or loads cached) edge maps.
    pub fn prepare(raw: &UnpairedDataset<T>, cfg: &TrainConfig) -> Result<Self> {
        let dataset = raw.map_images(|im| preprocess(im, &cfg.preprocess));
        let cache = cfg.edge_cache.as_ref().map(|d| EdgeCache::new(d, cfg.edges));
        let edges = |imgs: &[crate::data::Image<T>]| -> Result<Vec<EdgeMap>> {
            imgs.iter()
                .map(|im| match &cache {
                    Some(c) => c.get_or_compute(&im.pixels),
                    None => Ok(detect_edges(&im.pixels, &cfg.edges)),
                })
                .collect()
        };
        let edges_a = edges(&dataset.domain_a)?;
        let edges_b = edges(&dataset.domain_b)?;
        let eta = eta(dataset.i_max)?;
        Ok(Self { dataset, edges_a, edges_b, eta })
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.dataset.domain_a.len(), self.dataset.domain_b.len())
    }
}

/// Crops and flips an edge map like its image.
fn augment_edges(edges: &EdgeMap, p: &AugmentParams) -> EdgeMap {
    let t = p.apply(&edges.to_tensor::<f32>());
    EdgeMap { height: p.size, width: p.size, mask: t.data().iter().map(|&v| v > 0.5).collect() }
}

/// The six networks of the model.
#[derive(Clone, Debug)]
pub struct Models {
    pub enc_a: Encoder,
    pub dec_a: Decoder,
    pub enc_b: Encoder,
    pub dec_b: Decoder,
    pub disc_a: Discriminator,
    pub disc_b: Discriminator,
}

impl Models {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            enc_a: Encoder::new("enc_a", cfg.generator)?,
            dec_a: Decoder::new("dec_a", cfg.generator)?,
            enc_b: Encoder::new("enc_b", cfg.generator)?,
            dec_b: Decoder::new("dec_b", cfg.generator)?,
            disc_a: Discriminator::new("disc_a", cfg.ndf),
            disc_b: Discriminator::new("disc_b", cfg.ndf),
        })
    }

    pub fn g_ab(&self) -> Generator<'_> {
        Generator { encoder: &self.enc_a, decoder: &self.dec_b }
    }

    pub fn g_ba(&self) -> Generator<'_> {
        Generator { encoder: &self.enc_b, decoder: &self.dec_a }
    }
}

/// Translation direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    AtoB,
    BtoA,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2b" => Ok(Direction::AtoB),
            "b2a" => Ok(Direction::BtoA),
            _ => Err(Error::Config(format!("direction must be a2b or b2a, got `{s}`"))),
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub cfg: TrainConfig,
    pub models: Models,
    pub gen: ParamStore<T>,
    pub disc: ParamStore<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    /// Completed iterations.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

/// Loss values of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: f64,
    pub lr: f64,
    pub d_loss: f64,
    /// Unweighted components.
    pub raw: LossComponents<f64>,
    /// Components times their coefficients (gates included).
    pub weighted: [f64; 7],
    /// Generator objective as evaluated by the graph.
    pub total: f64,
    /// SGA directions skipped because the sampled image had no edges.
    pub sga_skipped: usize,
}

impl LossRecord {
    pub fn csv_header() -> String {
        let names = LossComponents::<f64>::NAMES;
        let mut cols = vec!["iteration".to_string(), "epoch".into(), "lr".into(), "d_loss".into()];
        cols.extend(names.iter().map(|n| n.to_string()));
        cols.extend(names.iter().map(|n| format!("w_{n}")));
        cols.push("total".into());
        cols.push("sga_skipped".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.iteration.to_string(), self.epoch.to_string(), self.lr.to_string(), self.d_loss.to_string()];
        cols.extend(self.raw.to_array().iter().map(f64::to_string));
        cols.extend(self.weighted.iter().map(f64::to_string));
        cols.push(self.total.to_string());
        cols.push(self.sga_skipped.to_string());
        cols.join(",")
    }
}

/// One sampled training pair.
struct Batch<T> {
    x_a: Tensor<T>,
    x_b: Tensor<T>,
    edges_a: EdgeMap,
    edges_b: EdgeMap,
}

fn check_finite(name: &str, value: f64, iteration: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component: name.to_string(), iteration, value })
    }
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state with parameters initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::new(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen = ParamStore::new();
        models.enc_a.init(&mut gen, &mut rng);
        models.dec_a.init(&mut gen, &mut rng);
        models.enc_b.init(&mut gen, &mut rng);
        models.dec_b.init(&mut gen, &mut rng);
        let mut disc = ParamStore::new();
        models.disc_a.init(&mut disc, &mut rng);
        models.disc_b.init(&mut disc, &mut rng);
        Ok(Self {
            opt_g: Adam::new(cfg.beta1, cfg.beta2),
            opt_d: Adam::new(cfg.beta1, cfg.beta2),
            cfg,
            models,
            gen,
            disc,
            iteration: 0,
            rng,
        })
    }

    /// Total iterations of the configured schedule.
    pub fn total_iterations(&self, data: &TrainData<T>) -> u64 {
        (self.cfg.epochs * iters_per_epoch(&self.cfg, data.sizes())) as u64
    }

    fn sample_batch(&mut self, data: &TrainData<T>) -> Result<Batch<T>> {
        let (i, j) = crate::data::sample_unpaired_indices(&data.dataset, &mut self.rng)?;
        let p = &self.cfg.preprocess;
        let img_a = &data.dataset.domain_a[i];
        let img_b = &data.dataset.domain_b[j];
        let pa = AugmentParams::sample(img_a.height(), img_a.width(), p.train_crop, p.hflip_prob, &mut self.rng)?;
        let pb = AugmentParams::sample(img_b.height(), img_b.width(), p.train_crop, p.hflip_prob, &mut self.rng)?;
        Ok(Batch {
            x_a: pa.apply(&img_a.to_rgb().pixels),
            x_b: pb.apply(&img_b.to_rgb().pixels),
            edges_a: augment_edges(&data.edges_a[i], &pa),
            edges_b: augment_edges(&data.edges_b[j], &pb),
        })
    }

    /// One iteration: discriminator update, then generator update.
    pub fn train_step(&mut self, data: &TrainData<T>) -> Result<LossRecord> {
        let ipe = iters_per_epoch(&self.cfg, data.sizes());
        let epoch = self.iteration as f64 / ipe as f64;
        let lr = lr_at(epoch.min(self.cfg.epochs as f64), &self.cfg)?;
        let gates = loss_gates(self.iteration, &self.cfg);
        let it = self.iteration;

        let batch = self.sample_batch(data)?;
        let l = self.cfg.patch_size;
        let patch_a = sample_edge_patch::<T>(&batch.edges_a, l, &mut self.rng);
        let patch_b = sample_edge_patch::<T>(&batch.edges_b, l, &mut self.rng);

        // Generator forward passes.
        let m = &self.models;
        let mut s = Session::<T>::new(true);
        let x_a = s.graph.constant(batch.x_a);
        let x_b = s.graph.constant(batch.x_b);
        let (fake_b, enc_ra) = m.g_ab().forward(&mut s, &self.gen, x_a)?;
        let (rec_a, enc_fb) = m.g_ba().forward(&mut s, &self.gen, fake_b)?;
        let (fake_a, enc_rb) = m.g_ba().forward(&mut s, &self.gen, x_b)?;
        let (rec_b, enc_fa) = m.g_ab().forward(&mut s, &self.gen, fake_a)?;

        // Discriminator update on detached fakes.
        m.disc_a.power_iterate(&mut self.disc);
        m.disc_b.power_iterate(&mut self.disc);
        let d_loss = {
            let mut ds = Session::<T>::new(true);
            let mut side = |disc: &Discriminator, real: &Tensor<T>, fake: &Tensor<T>| -> Result<Var> {
                let r = ds.graph.constant(real.clone());
                let f = ds.graph.constant(fake.clone());
                let sr = disc.forward(&mut ds, &self.disc, r);
                let sf = disc.forward(&mut ds, &self.disc, f);
                Ok(adversarial_losses(&mut ds.graph, &sr, &sf)?.1)
            };
            let la = side(&m.disc_a, s.graph.value(x_a), s.graph.value(fake_a))?;
            let lb = side(&m.disc_b, s.graph.value(x_b), s.graph.value(fake_b))?;
            let total = ds.graph.add(la, lb);
            let value = ds.graph.item(total).to_f64c();
            check_finite("d_loss", value, it)?;
            let mut grads = ds.graph.backward(total);
            let grads = ds.param_grads(&mut grads);
            self.opt_d.update(&mut self.disc, &grads, lr);
            value
        };

        // Generator objective with the updated discriminators frozen.
        s.set_trainable(false);
        let g = &mut s;
        let adv_dir = |g: &mut Session<T>, disc: &Discriminator, real: Var, fake: Var| -> Result<Var> {
            let sr = disc.forward(g, &self.disc, real);
            let sf = disc.forward(g, &self.disc, fake);
            Ok(adversarial_losses(&mut g.graph, &sr, &sf)?.0)
        };
        let adv_a = adv_dir(g, &m.disc_a, x_a, fake_a)?;
        let adv_b = adv_dir(g, &m.disc_b, x_b, fake_b)?;
        let gr = &mut g.graph;
        let adv = gr.add(adv_a, adv_b);
        let (l1_a, ss_a) = cycle_terms(gr, x_a, rec_a)?;
        let (l1_b, ss_b) = cycle_terms(gr, x_b, rec_b)?;
        let cyc_l1 = gr.add(l1_a, l1_b);
        let ssim = gr.add(ss_a, ss_b);
        let tv_a = tv_loss(gr, fake_a)?;
        let tv_b = tv_loss(gr, fake_b)?;
        let tv = gr.add(tv_a, tv_b);
        let t_ra = enc_ra.attention.tensor;
        let t_rb = enc_rb.attention.tensor;
        let ad_a = ad_loss(gr, t_ra, &self.cfg.weights);
        let ad_b = ad_loss(gr, t_rb, &self.cfg.weights);
        let ad = gr.add(ad_a, ad_b);
        let accs = accs_loss(gr, enc_ra.features, enc_rb.features, enc_fa.features, enc_fb.features, t_ra, t_rb)?;
        let mut sga_skipped = 0;
        let mut direction = |gr: &mut crate::autodiff::Graph<T>, fake: Var, patch: &Result<_>| -> Result<Option<Var>> {
            match patch {
                Ok(p) => sga_direction(gr, fake, p, data.eta).map(Some),
                Err(Error::NoEdges) => {
                    sga_skipped += 1;
                    Ok(None)
                }
                Err(e) => Err(Error::Config(format!("edge patch sampling failed: {e}"))),
            }
        };
        let sga_ab = direction(gr, fake_b, &patch_a)?;
        let sga_ba = direction(gr, fake_a, &patch_b)?;
        let sga = sga_loss(gr, &[sga_ab, sga_ba]);
        if sga_skipped > 0 {
            warn!("iteration {it}: {sga_skipped} SGA direction(s) skipped, no edges in the sampled image");
        }
        let comps = LossComponents { adv, cyc_l1, ssim, tv, ad, accs, sga };
        let total = total_objective(gr, &comps, &self.cfg.weights, gates);

        let values = comps.to_array().map(|v| gr.item(v).to_f64c());
        for (name, &v) in LossComponents::<f64>::NAMES.iter().zip(&values) {
            check_finite(name, v, it)?;
        }
        let total_value = gr.item(total).to_f64c();
        check_finite("total", total_value, it)?;
        let coef = coefficients(&self.cfg.weights, gates);
        let weighted = std::array::from_fn(|k| values[k] * coef[k]);

        let mut grads = gr.backward(total);
        let grads: BTreeMap<String, Tensor<T>> = s.param_grads(&mut grads);
        self.opt_g.update(&mut self.gen, &grads, lr);
        self.iteration += 1;

        let [adv, cyc_l1, ssim, tv, ad, accs, sga] = values;
        Ok(LossRecord {
            iteration: it,
            epoch,
            lr,
            d_loss,
            raw: LossComponents { adv, cyc_l1, ssim, tv, ad, accs, sga },
            weighted,
            total: total_value,
            sga_skipped,
        })
    }

    /// Translates one 3×H×W image. Sizes that are not multiples of
    /// [`INPUT_DIVISOR`] are edge-padded at the bottom and right, and the
    /// output is cropped back to H×W.
    pub fn translate(&self, x: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
        let (_, h, w) = x.chw();
        let padded = pad_to_multiple(x, INPUT_DIVISOR);
        let mut s = Session::<T>::new(false);
        let xv = s.graph.constant(padded);
        let g = match direction {
            Direction::AtoB => self.models.g_ab(),
            Direction::BtoA => self.models.g_ba(),
        };
        let (out, _) = g.forward(&mut s, &self.gen, xv)?;
        Ok(crop_tensor(s.graph.value(out), 0, 0, h, w))
    }

    /// Mean of the two L1 cycle-reconstruction errors on a fixed pair.
    pub fn cycle_error(&self, x_a: &Tensor<T>, x_b: &Tensor<T>) -> Result<f64> {
        let mut s = Session::<T>::new(false);
        let a = s.graph.constant(x_a.clone());
        let b = s.graph.constant(x_b.clone());
        let (fb, _) = self.models.g_ab().forward(&mut s, &self.gen, a)?;
        let (ra, _) = self.models.g_ba().forward(&mut s, &self.gen, fb)?;
        let (fa, _) = self.models.g_ba().forward(&mut s, &self.gen, b)?;
        let (rb, _) = self.models.g_ab().forward(&mut s, &self.gen, fa)?;
        let la = l1_loss(&mut s.graph, a, ra)?;
        let lb = l1_loss(&mut s.graph, b, rb)?;
        Ok((s.graph.item(la).to_f64c() + s.graph.item(lb).to_f64c()) / 2.0)
    }

    /// A 2×3 grid: `x_a, G_AB(x_a), G_BA(G_AB(x_a))` over
    /// `x_b, G_BA(x_b), G_AB(G_BA(x_b))`.
    pub fn sample_grid(&self, x_a: &Tensor<T>, x_b: &Tensor<T>) -> Result<Tensor<T>> {
        let fb = self.translate(x_a, Direction::AtoB)?;
        let ra = self.translate(&fb, Direction::BtoA)?;
        let fa = self.translate(x_b, Direction::BtoA)?;
        let rb = self.translate(&fa, Direction::AtoB)?;
        let tiles = [[x_a, &fb, &ra], [x_b, &fa, &rb]];
        let (c, h, w) = x_a.chw();
        Ok(Tensor::from_fn(&[c, 2 * h, 3 * w], |i| {
            let ch = i / (6 * h * w);
            let y = (i / (3 * w)) % (2 * h);
            let x = i % (3 * w);
            tiles[y / h][x / w].at3(ch, y % h, x % w)
        }))
    }
}

/// Replicates the last row and column until both sides are multiples of
/// `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(&[c, ph, pw], |i| {
        let ch = i / (ph * pw);
        let y = ((i / pw) % ph).min(h - 1);
        let xx = (i % pw).min(w - 1);
        x.at3(ch, y, xx)
    })
}

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn losses_csv(&self) -> PathBuf {
        self.logs().join("losses.csv")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.checkpoints(), self.samples(), self.logs(), self.reports()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

/// Appends loss records to a CSV file, writing the header when the file is
/// new or empty.
pub struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self { file, path: path.to_path_buf() };
        let empty = log.file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            log.write_line(&LossRecord::csv_header())?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, r: &LossRecord) -> Result<()> {
        self.write_line(&r.csv_row())
    }
}

/// Trains until `until` iterations are complete (the configured schedule
/// when `None`), writing logs, samples and checkpoints under `out` when
/// given. Returns the records of this call.
pub fn run<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData<T>,
    until: Option<u64>,
    out: Option<&OutputLayout>,
) -> Result<Vec<LossRecord>> {
    let end = until.unwrap_or_else(|| state.total_iterations(data)).min(state.total_iterations(data));
    let mut log = match out {
        Some(o) => {
            o.create()?;
            Some(LossLog::open(&o.losses_csv())?)
        }
        None => None,
    };
    let sample_pair = (data.dataset.domain_a[0].to_rgb(), data.dataset.domain_b[0].to_rgb());
    let mut records = Vec::new();
    while state.iteration < end {
        let r = state.train_step(data)?;
        if let Some(log) = log.as_mut() {
            log.append(&r)?;
        }
        let done = state.iteration;
        if let Some(o) = out {
            let cfg = &state.cfg;
            if cfg.sample_every > 0 && done.is_multiple_of(cfg.sample_every) {
                let grid = state.sample_grid(&sample_pair.0.pixels, &sample_pair.1.pixels)?;
                let path = o.samples().join(format!("iter_{done:07}.png"));
                to_dynamic(&grid).save(&path).map_err(|e| Error::Decode { path, reason: e.to_string() })?;
            }
            if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
                crate::checkpoint::save(state, &o.checkpoints().join(format!("iter_{done:07}.ckpt")))?;
            }
        }
        if done.is_multiple_of(100) {
            info!("iteration {done}/{end}: total {:.4}, d {:.4}", r.total, r.d_loss);
        }
        records.push(r);
    }
    if let Some(o) = out {
        crate::checkpoint::save(state, &o.latest_checkpoint())?;
    }
    Ok(records)
}
