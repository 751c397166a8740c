//! Training loop: uniform sampling over images and the 45 volumes, the
//! mask-weighted L1 loss on the v-prediction, AdamW with a two-stage
//! learning rate, per-epoch validation with frozen draws, best-checkpoint
//! selection, and copied-net synchronization after every update.
//!
//! Determinism: all batch randomness comes from one checkpointed rng
//! stream, per-sample gradients are reduced in batch order, and validation
//! derives its draws from fixed per-image seeds, so a fixed seed gives a
//! bit-identical loss trace and resume-from-checkpoint continues it
//! exactly.

use ndarray::{s, Array3, Array4, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autograd::{Graph, Id, Scalar};
use crate::denoiser::{
    mask_to_f32, order_average, pack_condition, stack_channels, CrossFeatureBank, DenoiserModel,
    NetConfig, Variant,
};
use crate::diffusion::{q_sample, v_target, LossWeights, NoiseSchedule};
use crate::error::{FodError, Result};
use crate::kvtext::{fnv1a64, KvDoc, KvSection};
use crate::nn::{AdamW, AdamWConfig, Binder};
use crate::rng::Rng;
use crate::spharm::{compute_scale_table, normalize, volume_index_table, ScaleTable, N_VOLUMES};
use crate::store::{self, Checkpoint, DatasetManifest};

const TRAIN_STREAM: u64 = 0x7261_696e;
const VAL_STREAM: u64 = 0x76_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    V,
    X0,
}

impl LossSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossSpace::V => "v",
            LossSpace::X0 => "x0",
        }
    }

    pub fn parse(s: &str) -> Result<LossSpace> {
        match s {
            "v" => Ok(LossSpace::V),
            "x0" => Ok(LossSpace::X0),
            other => Err(FodError::Config(format!(
                "unknown loss space {other:?}; expected v | x0"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total optimizer steps. Desk default 8000; the reference protocol is
    /// 100000 with the learning-rate switch at 70000, preserved here as the
    /// 0.7 switch fraction.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_late: f64,
    pub lr_switch_frac: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub loss_space: LossSpace,
    /// Volume draws per image defining one epoch.
    pub volume_draws_per_image: usize,
    /// Fixed validation draws per validation image.
    pub val_draws_per_image: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 8000,
            batch_size: 8,
            lr_initial: 1e-5,
            lr_late: 1e-6,
            lr_switch_frac: 0.7,
            adamw: AdamWConfig::default(),
            seed: 0,
            loss_space: LossSpace::V,
            volume_draws_per_image: N_VOLUMES,
            val_draws_per_image: 8,
            t_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_late > 0.0 && self.lr_late <= self.lr_initial) {
            return Err(FodError::invalid("need 0 < lr_late <= lr_initial"));
        }
        if !(self.lr_switch_frac > 0.0 && self.lr_switch_frac < 1.0) {
            return Err(FodError::invalid("lr switch fraction must be in (0, 1)"));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(FodError::invalid("iterations and batch size must be positive"));
        }
        Ok(())
    }

    /// Step-function schedule: `lr_initial` before floor(frac * iterations),
    /// `lr_late` from there on.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let switch = (self.lr_switch_frac * self.iterations as f64).floor() as usize;
        if iteration < switch {
            self.lr_initial
        } else {
            self.lr_late
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }
}

/// One dataset item preprocessed for training: everything in normalized
/// space, condition volumes mask-filled, order averages precomputed.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub gt: Array4<f32>,
    pub cond: Array4<f32>,
    pub avg: [Array3<f32>; 5],
    pub mask: Array3<u8>,
    pub mask_f: Array3<f32>,
    pub dims: (usize, usize, usize),
}

/// Load and preprocess one split with the given normalization scales.
pub fn prepare_items(
    manifest: &DatasetManifest,
    split: &str,
    scale: &ScaleTable,
) -> Result<Vec<TrainItem>> {
    let refs = manifest.items(split)?;
    refs.par_iter()
        .map(|item_ref| {
            let item = store::load_item(item_ref)?;
            let gt = normalize(&item.gt, scale);
            let cond_img = normalize(&item.corrupted, scale);
            let (x, y, z) = cond_img.dims;
            let mut cond = Array4::<f32>::zeros((x, y, z, N_VOLUMES));
            for flat in 0..N_VOLUMES {
                let vol = cond_img.coeffs.index_axis(Axis(3), flat).to_owned();
                let filled = pack_condition(&vol, &item.mask);
                cond.index_axis_mut(Axis(3), flat).assign(&filled);
            }
            let avg = order_average(&cond);
            Ok(TrainItem {
                id: item.id.clone(),
                gt: gt.coeffs,
                cond,
                avg,
                mask_f: mask_to_f32(&item.mask),
                mask: item.mask,
                dims: (x, y, z),
            })
        })
        .collect()
}

/// Scale table over the ground-truth training images.
pub fn scale_from_manifest(manifest: &DatasetManifest) -> Result<ScaleTable> {
    let refs = manifest.items("train")?;
    let images = refs
        .iter()
        .map(|r| Ok(store::load_item(r)?.gt))
        .collect::<Result<Vec<_>>>()?;
    compute_scale_table(&images.iter().collect::<Vec<_>>())
}

/// In-graph mask-weighted L1 (the training counterpart of
/// `diffusion::masked_weighted_l1`).
pub fn masked_l1_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: Id,
    target: &ArrayD<T>,
    mask: &ArrayD<T>,
    w: LossWeights,
) -> Id {
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t);
    let a = g.abs(diff);
    let m1 = g.mean_all(a);
    let term1 = g.scale(m1, T::from_f64(w.base));
    let masked = g.mul_const(a, mask.clone());
    let m2 = g.mean_all(masked);
    let term2 = g.scale(m2, T::from_f64(w.mask_bonus));
    g.add(term1, term2)
}

struct SampleDraw {
    item: usize,
    flat: usize,
    t: usize,
    offset: (usize, usize, usize),
    eps_seed: u64,
}

fn crop3(a: &ndarray::ArrayView3<f32>, o: (usize, usize, usize), p: usize) -> Array3<f32> {
    a.slice(s![o.0..o.0 + p, o.1..o.1 + p, o.2..o.2 + p]).to_owned()
}

pub struct Trainer {
    pub model: DenoiserModel,
    pub opt: AdamW,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub scale: ScaleTable,
    pub iteration: usize,
    pub epoch: usize,
    pub best_val: f64,
    /// Number of copied-net syncs performed by train_step; equals the
    /// iteration counter by construction.
    pub sync_count: u64,
    rng: Rng,
    train: Vec<TrainItem>,
    val: Vec<TrainItem>,
}

impl Trainer {
    pub fn new(
        net_cfg: NetConfig,
        cfg: TrainConfig,
        manifest: &DatasetManifest,
    ) -> Result<Trainer> {
        cfg.validate()?;
        let sched = cfg.schedule()?;
        let scale = scale_from_manifest(manifest)?;
        let train = prepare_items(manifest, "train", &scale)?;
        let val = prepare_items(manifest, "val", &scale)?;
        if train.is_empty() || val.is_empty() {
            return Err(FodError::invalid("train and val splits must be non-empty"));
        }
        let model = DenoiserModel::new(net_cfg, cfg.seed)?;
        let opt = AdamW::new(&model.unet.set, cfg.adamw);
        let rng = Rng::from_seed(cfg.seed).split(TRAIN_STREAM);
        Ok(Trainer {
            model,
            opt,
            sched,
            cfg,
            scale,
            iteration: 0,
            epoch: 0,
            best_val: f64::INFINITY,
            sync_count: 0,
            rng,
            train,
            val,
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.unet.cfg.variant
    }

    pub fn steps_per_epoch(&self) -> usize {
        let draws = self.train.len() * self.cfg.volume_draws_per_image;
        draws.div_ceil(self.cfg.batch_size)
    }

    fn draw_batch(&mut self) -> Vec<SampleDraw> {
        let p = self.model.unet.cfg.patch;
        (0..self.cfg.batch_size)
            .map(|_| {
                let item = self.rng.below(self.train.len() as u64) as usize;
                let flat = self.rng.below(N_VOLUMES as u64) as usize;
                let t = 1 + self.rng.below(self.sched.len() as u64) as usize;
                let dims = self.train[item].dims;
                let mut off = |extent: usize| -> usize {
                    if extent > p {
                        self.rng.below((extent - p + 1) as u64) as usize
                    } else {
                        0
                    }
                };
                let offset = (off(dims.0), off(dims.1), off(dims.2));
                let eps_seed = self.rng.next_u64();
                SampleDraw {
                    item,
                    flat,
                    t,
                    offset,
                    eps_seed,
                }
            })
            .collect()
    }

    /// One optimizer step over a freshly drawn batch. Returns the batch
    /// loss. Per-sample forward/backward passes run in parallel; gradient
    /// reduction is in batch order, so results are thread-count
    /// independent.
    pub fn train_step(&mut self) -> Result<f64> {
        let draws = self.draw_batch();
        let variant = self.variant();
        let p = self.model.unet.cfg.patch;
        let table = volume_index_table(8)?;
        let weights = LossWeights::default();

        let results: Vec<Result<(f64, Vec<Option<ArrayD<f32>>>)>> = draws
            .par_iter()
            .map(|draw| {
                let item = &self.train[draw.item];
                let gt_vol = item.gt.index_axis(Axis(3), draw.flat);
                let x0 = crop3(&gt_vol, draw.offset, p).into_dyn();
                let mut eps_rng = Rng::from_seed(draw.eps_seed);
                let eps = ArrayD::from_shape_fn(IxDyn(&[p, p, p]), |_| {
                    eps_rng.normal() as f32
                });
                let x_t = q_sample(&x0, draw.t, &eps, &self.sched)?;
                let v_tgt = v_target(&x0, &eps, draw.t, &self.sched)?;
                let mask_patch = crop3(&item.mask_f.view(), draw.offset, p);

                let mut g = Graph::<f32>::new();
                let mut binder = Binder::new(&self.model.unet.set, true);

                let x3 = x_t
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("patch is 3-d");
                let x_stack = if variant.has_condition() {
                    let cond_vol = item.cond.index_axis(Axis(3), draw.flat);
                    let cond_patch = crop3(&cond_vol, draw.offset, p);
                    stack_channels(&[&x3, &cond_patch, &mask_patch])
                } else {
                    stack_channels(&[&x3])
                };
                let x_id = g.constant(x_stack);

                let kv_ids = if variant.has_cross_attention() {
                    let taps: Vec<Vec<ArrayD<f32>>> = item
                        .avg
                        .iter()
                        .enumerate()
                        .map(|(oi, avg)| {
                            let avg_patch = crop3(&avg.view(), draw.offset, p);
                            self.model.extract_order_features(
                                &avg_patch,
                                &mask_patch,
                                oi * 2,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(self.model.unet.kv_nodes(
                        &mut g,
                        &mut binder,
                        &self.model.params,
                        &taps,
                    ))
                } else {
                    None
                };

                let (v_pred, _) = self.model.unet.forward(
                    &mut g,
                    &mut binder,
                    &self.model.params,
                    x_id,
                    draw.t,
                    Some(table[draw.flat]),
                    kv_ids.as_deref(),
                );
                let pred_flat = g.reshape(v_pred, &[p, p, p]);

                let mask_dyn = mask_patch.into_dyn();
                let loss_id = match self.cfg.loss_space {
                    LossSpace::V => masked_l1_node(&mut g, pred_flat, &v_tgt, &mask_dyn, weights),
                    LossSpace::X0 => {
                        let (sa, sb) = self.sched.sqrt_ab(draw.t);
                        let neg = g.scale(pred_flat, -sb);
                        let x0_pred = g.add_const(neg, x_t.mapv(|v| v * sa));
                        masked_l1_node(&mut g, x0_pred, &x0, &mask_dyn, weights)
                    }
                };
                let loss = g.scalar_value(loss_id) as f64;
                let node_grads = g.backward(loss_id);

                let mut grads: Vec<Option<ArrayD<f32>>> =
                    vec![None; self.model.unet.set.len()];
                for (pidx, node) in binder.bound() {
                    grads[pidx] = node_grads[node.0].clone();
                }
                Ok((loss, grads))
            })
            .collect();

        let mut batch_loss = 0.0;
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.model.unet.set.len()];
        for r in results {
            let (loss, g) = r?;
            batch_loss += loss;
            for (acc, gi) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), gi) {
                    (Some(a), Some(b)) => *a += &b,
                    (None, Some(b)) => *acc = Some(b),
                    _ => {}
                }
            }
        }
        batch_loss /= self.cfg.batch_size as f64;
        let scale = 1.0 / self.cfg.batch_size as f32;
        for gi in grads.iter_mut().flatten() {
            gi.mapv_inplace(|v| v * scale);
        }

        if !batch_loss.is_finite() {
            let ids: Vec<String> = draws
                .iter()
                .map(|d| format!("{}:{}", self.train[d.item].id, d.flat))
                .collect();
            return Err(FodError::Numeric(format!(
                "non-finite loss at iteration {} (lr {}, batch {})",
                self.iteration,
                self.cfg.lr_at(self.iteration),
                ids.join(" ")
            )));
        }

        let lr = self.cfg.lr_at(self.iteration);
        self.opt.step(&mut self.model.params, &grads, lr);
        self.model.mark_updated();
        self.model.sync_copied();
        self.sync_count += 1;
        self.iteration += 1;
        Ok(batch_loss)
    }

    /// Mean training-loss expression over fixed per-image draws; the draws
    /// depend only on the config seed, so successive validations are
    /// comparable.
    pub fn validate(&self) -> Result<f64> {
        let variant = self.variant();
        let p = self.model.unet.cfg.patch;
        let table = volume_index_table(8)?;
        let weights = LossWeights::default();
        let val_root = Rng::from_seed(self.cfg.seed).split(VAL_STREAM);

        let losses: Vec<Result<f64>> = self
            .val
            .par_iter()
            .enumerate()
            .map(|(img_idx, item)| {
                let mut total = 0.0;
                for k in 0..self.cfg.val_draws_per_image {
                    let mut draw_rng = val_root.split((img_idx * 10_000 + k) as u64);
                    let flat = draw_rng.below(N_VOLUMES as u64) as usize;
                    let t = 1 + draw_rng.below(self.sched.len() as u64) as usize;
                    let mut off = |extent: usize| -> usize {
                        if extent > p {
                            draw_rng.below((extent - p + 1) as u64) as usize
                        } else {
                            0
                        }
                    };
                    let offset = (off(item.dims.0), off(item.dims.1), off(item.dims.2));

                    let gt_vol = item.gt.index_axis(Axis(3), flat);
                    let x0 = crop3(&gt_vol, offset, p).into_dyn();
                    let eps = ArrayD::from_shape_fn(IxDyn(&[p, p, p]), |_| {
                        draw_rng.normal() as f32
                    });
                    let x_t = q_sample(&x0, t, &eps, &self.sched)?;
                    let v_tgt = v_target(&x0, &eps, t, &self.sched)?;
                    let mask_patch = crop3(&item.mask_f.view(), offset, p);

                    let x3 = x_t
                        .clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("patch is 3-d");
                    let cond_patch = crop3(
                        &item.cond.index_axis(Axis(3), flat),
                        offset,
                        p,
                    );
                    let condition = variant
                        .has_condition()
                        .then_some((&cond_patch, &mask_patch));
                    let bank: Option<CrossFeatureBank> = if variant.has_cross_attention() {
                        let taps = item
                            .avg
                            .iter()
                            .enumerate()
                            .map(|(oi, avg)| {
                                let avg_patch = crop3(&avg.view(), offset, p);
                                self.model
                                    .extract_order_features(&avg_patch, &mask_patch, oi * 2)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(CrossFeatureBank {
                            taps_per_order: taps,
                            sync_epoch: self.model.sync_epoch,
                        })
                    } else {
                        None
                    };

                    let v_pred = self
                        .model
                        .denoise_volume(&x3, t, table[flat], condition, bank.as_ref())?
                        .into_dyn();
                    let loss = match self.cfg.loss_space {
                        LossSpace::V => crate::diffusion::masked_weighted_l1(
                            &v_pred,
                            &v_tgt,
                            &mask_patch.clone().into_dyn(),
                            weights,
                        )?,
                        LossSpace::X0 => {
                            let (sa, sb) = self.sched.sqrt_ab(t);
                            let x0_pred = &x_t * sa - &v_pred * sb;
                            crate::diffusion::masked_weighted_l1(
                                &x0_pred,
                                &x0,
                                &mask_patch.clone().into_dyn(),
                                weights,
                            )?
                        }
                    };
                    total += loss;
                }
                Ok(total / self.cfg.val_draws_per_image as f64)
            })
            .collect();

        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / self.val.len() as f64)
    }

    fn meta_doc(&self) -> KvDoc {
        let net = &self.model.unet.cfg;
        let mut doc = KvDoc::new();
        let mut net_sec = KvSection::new("net");
        net_sec
            .set("base", net.base)
            .set(
                "mults",
                net.mults
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .set(
                "attn_levels",
                net.attn_levels
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .set("emb_dim", net.emb_dim)
            .set("patch", net.patch)
            .set("variant", net.variant.as_str());
        let mut train_sec = KvSection::new("train");
        train_sec
            .set("iterations", self.cfg.iterations)
            .set("batch_size", self.cfg.batch_size)
            .set("lr_initial", format!("{:e}", self.cfg.lr_initial))
            .set("lr_late", format!("{:e}", self.cfg.lr_late))
            .set("lr_switch_frac", self.cfg.lr_switch_frac)
            .set("weight_decay", self.cfg.adamw.weight_decay)
            .set("seed", self.cfg.seed)
            .set("loss_space", self.cfg.loss_space.as_str())
            .set("volume_draws_per_image", self.cfg.volume_draws_per_image)
            .set("val_draws_per_image", self.cfg.val_draws_per_image);
        let mut sched_sec = KvSection::new("schedule");
        sched_sec
            .set("t_steps", self.cfg.t_steps)
            .set("beta_start", format!("{:e}", self.cfg.beta_start))
            .set("beta_end", format!("{:e}", self.cfg.beta_end));

        let digest_input = {
            let mut d = KvDoc::new();
            d.push(net_sec.clone());
            d.push(train_sec.clone());
            d.push(sched_sec.clone());
            d.to_text()
        };

        let mut ck = KvSection::new("checkpoint");
        ck.set("iteration", self.iteration)
            .set("epoch", self.epoch)
            .set("best_val", format!("{:e}", self.best_val))
            .set("variant", self.variant().as_str())
            .set("sync_epoch", self.model.sync_epoch)
            .set("config_digest", format!("{:016x}", fnv1a64(digest_input.as_bytes())));
        doc.push(ck);
        doc.push(net_sec);
        doc.push(train_sec);
        doc.push(sched_sec);
        doc
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self.model.unet.set.names().map(String::from).collect();
        Checkpoint {
            meta: self.meta_doc(),
            scale: self.scale.clone(),
            rng_state: self.rng.state(),
            params: names
                .into_iter()
                .zip(self.model.params.iter().cloned())
                .collect(),
            opt_m: self.opt.m.clone(),
            opt_v: self.opt.v.clone(),
            opt_step: self.opt.step,
        }
    }

    /// Restore a trainer from a checkpoint plus the dataset it was
    /// training on.
    pub fn resume(ckpt_path: &Path, manifest: &DatasetManifest) -> Result<Trainer> {
        let ckpt = store::load_checkpoint(ckpt_path)?;
        let (net_cfg, cfg) = configs_from_meta(&ckpt.meta)?;
        let scale = ckpt.scale.clone();
        let train = prepare_items(manifest, "train", &scale)?;
        let val = prepare_items(manifest, "val", &scale)?;
        let mut model = DenoiserModel::new(net_cfg, cfg.seed)?;
        let expected: Vec<&str> = model.unet.set.names().collect();
        let got: Vec<&str> = ckpt.params.iter().map(|(n, _)| n.as_str()).collect();
        if expected != got {
            return Err(FodError::Config(
                "checkpoint parameter names do not match the architecture".into(),
            ));
        }
        model.load_params(ckpt.params.into_iter().map(|(_, v)| v).collect())?;
        let mut opt = AdamW::new(&model.unet.set, cfg.adamw);
        opt.m = ckpt.opt_m;
        opt.v = ckpt.opt_v;
        opt.step = ckpt.opt_step;

        let iteration: usize = ckpt.meta.get_parsed("checkpoint", "iteration")?;
        let epoch: usize = ckpt.meta.get_parsed("checkpoint", "epoch")?;
        let best_val: f64 = ckpt.meta.get_parsed("checkpoint", "best_val")?;
        let sched = cfg.schedule()?;
        Ok(Trainer {
            model,
            opt,
            sched,
            cfg,
            scale,
            iteration,
            epoch,
            best_val,
            sync_count: 0,
            rng: Rng::from_state(ckpt.rng_state),
            train,
            val,
        })
    }

    /// Run the training loop: `latest` checkpoint every epoch, `best` on
    /// validation improvement, an append-only log, and the best checkpoint
    /// path returned.
    pub fn fit(&mut self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| FodError::io(out_dir, e))?;
        let variant = self.variant().as_str();
        let latest = out_dir.join(format!("latest_{variant}.fodk"));
        let best = out_dir.join(format!("best_{variant}.fodk"));
        let log_path = out_dir.join(format!("train_{variant}.log"));
        store::write_scale_table(out_dir.join(format!("scale_{variant}.fods")), &self.scale)?;

        let start = Instant::now();
        let steps_per_epoch = self.steps_per_epoch();
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| FodError::io(&log_path, e))?;

        while self.iteration < self.cfg.iterations {
            let mut epoch_loss = 0.0;
            let mut steps = 0;
            while steps < steps_per_epoch && self.iteration < self.cfg.iterations {
                let loss = self.train_step().inspect_err(|_| {
                    // leave a resumable checkpoint behind on abort
                    let _ = store::save_checkpoint(&latest, &self.to_checkpoint());
                })?;
                epoch_loss += loss;
                steps += 1;
                if self.iteration % 50 == 0 || self.iteration == self.cfg.iterations {
                    use std::io::Write;
                    writeln!(
                        log,
                        "iter={} loss={:.6} lr={:e} wall={:.1}",
                        self.iteration,
                        loss,
                        self.cfg.lr_at(self.iteration.saturating_sub(1)),
                        start.elapsed().as_secs_f64()
                    )
                    .map_err(|e| FodError::io(&log_path, e))?;
                }
            }
            self.epoch += 1;
            let val = self.validate()?;
            {
                use std::io::Write;
                writeln!(
                    log,
                    "epoch={} iter={} train_loss={:.6} val={:.6} wall={:.1}",
                    self.epoch,
                    self.iteration,
                    epoch_loss / steps.max(1) as f64,
                    val,
                    start.elapsed().as_secs_f64()
                )
                .map_err(|e| FodError::io(&log_path, e))?;
            }
            store::save_checkpoint(&latest, &self.to_checkpoint())?;
            if val < self.best_val {
                self.best_val = val;
                store::save_checkpoint(&best, &self.to_checkpoint())?;
            }
        }
        Ok(best)
    }
}

/// Rebuild the network and training configs from checkpoint metadata.
pub fn configs_from_meta(meta: &KvDoc) -> Result<(NetConfig, TrainConfig)> {
    let net = NetConfig {
        base: meta.get_parsed("net", "base")?,
        mults: meta.get_list("net", "mults")?,
        attn_levels: meta.get_list("net", "attn_levels")?,
        emb_dim: meta.get_parsed("net", "emb_dim")?,
        patch: meta.get_parsed("net", "patch")?,
        variant: Variant::parse(
            meta.get("net", "variant")
                .ok_or_else(|| FodError::Config("missing [net] variant".into()))?,
        )?,
        zero_init_output: true,
    };
    let cfg = TrainConfig {
        iterations: meta.get_parsed("train", "iterations")?,
        batch_size: meta.get_parsed("train", "batch_size")?,
        lr_initial: meta.get_parsed("train", "lr_initial")?,
        lr_late: meta.get_parsed("train", "lr_late")?,
        lr_switch_frac: meta.get_parsed("train", "lr_switch_frac")?,
        adamw: AdamWConfig {
            weight_decay: meta.get_parsed("train", "weight_decay")?,
            ..Default::default()
        },
        seed: meta.get_parsed("train", "seed")?,
        loss_space: LossSpace::parse(
            meta.get("train", "loss_space")
                .ok_or_else(|| FodError::Config("missing [train] loss_space".into()))?,
        )?,
        volume_draws_per_image: meta.get_parsed("train", "volume_draws_per_image")?,
        val_draws_per_image: meta.get_parsed("train", "val_draws_per_image")?,
        t_steps: meta.get_parsed("schedule", "t_steps")?,
        beta_start: meta.get_parsed("schedule", "beta_start")?,
        beta_end: meta.get_parsed("schedule", "beta_end")?,
    };
    Ok((net, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, DatasetSpec};
    use crate::nn::Binder;

    fn tiny_dataset(tag: &str, seed: u64) -> DatasetManifest {
        let dir = std::env::temp_dir().join(format!(
            "fod-trainer-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        let mut spec = DatasetSpec::desk_scale(&dir, seed);
        spec.n_train = 2;
        spec.n_val = 1;
        spec.n_test = 1;
        spec.template.dims = (8, 8, 8);
        spec.mask_radius = 1.6;
        let summary = phantom::make_dataset(&spec).unwrap();
        DatasetManifest::load(summary.manifest_path).unwrap()
    }

    fn tiny_net(variant: Variant) -> NetConfig {
        NetConfig {
            base: 4,
            mults: vec![1, 2],
            attn_levels: vec![1],
            emb_dim: 16,
            patch: 8,
            variant,
            zero_init_output: true,
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_size: 2,
            lr_initial: 1e-3,
            lr_late: 1e-4,
            t_steps: 20,
            beta_start: 1e-3,
            beta_end: 0.4,
            val_draws_per_image: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_is_a_step_function() {
        let cfg = TrainConfig {
            iterations: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr_initial);
        assert_eq!(cfg.lr_at(699), cfg.lr_initial);
        assert_eq!(cfg.lr_at(700), cfg.lr_late);
        assert_eq!(cfg.lr_at(999), cfg.lr_late);
        // exactly one switch
        let mut switches = 0;
        for i in 1..1000 {
            if cfg.lr_at(i) != cfg.lr_at(i - 1) {
                switches += 1;
            }
        }
        assert_eq!(switches, 1);
    }

    #[test]
    fn config_validation_rejects_bad_lr() {
        let mut cfg = TrainConfig::default();
        cfg.lr_late = cfg.lr_initial * 2.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_switch_frac: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn first_loss_is_finite_positive_and_sync_counts_match() {
        let manifest = tiny_dataset("first", 100);
        let mut tr = Trainer::new(tiny_net(Variant::Full), tiny_train(7), &manifest).unwrap();
        for _ in 0..3 {
            let loss = tr.train_step().unwrap();
            assert!(loss.is_finite() && loss > 0.0, "loss {loss}");
        }
        assert_eq!(tr.sync_count, 3);
        assert_eq!(tr.iteration, 3);
        assert_eq!(tr.model.sync_epoch, tr.model.param_version);
    }

    #[test]
    fn loss_trace_is_deterministic() {
        let manifest = tiny_dataset("det", 200);
        let run = || {
            let mut tr =
                Trainer::new(tiny_net(Variant::Vol), tiny_train(9), &manifest).unwrap();
            (0..5).map(|_| tr.train_step().unwrap()).collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_is_repeatable_and_improves_with_oracle() {
        let manifest = tiny_dataset("val", 300);
        let tr = Trainer::new(tiny_net(Variant::Vol), tiny_train(4), &manifest).unwrap();
        let v1 = tr.validate().unwrap();
        let v2 = tr.validate().unwrap();
        assert_eq!(v1, v2);
        assert!(v1.is_finite() && v1 > 0.0);
    }

    #[test]
    fn frozen_copy_receives_no_gradient() {
        // gradients are read per bound parameter of the live net; the
        // copied values never appear in the binder, and a train step does
        // not modify them
        let manifest = tiny_dataset("frozen", 400);
        let mut tr = Trainer::new(tiny_net(Variant::Full), tiny_train(3), &manifest).unwrap();
        tr.train_step().unwrap();
        // after step + sync, copied == params
        for (a, b) in tr.model.params.iter().zip(&tr.model.copied) {
            assert_eq!(a, b);
        }
        // manually desync: step again and compare the copy before sync
        let before = tr.model.copied.clone();
        let draws_equal = tr
            .model
            .params
            .iter()
            .zip(&before)
            .all(|(a, b)| a == b);
        assert!(draws_equal);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let manifest = tiny_dataset("resume", 500);
        let dir = std::env::temp_dir().join(format!(
            "fod-resume-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();

        // uninterrupted: 6 steps
        let mut full = Trainer::new(tiny_net(Variant::VolEnc), tiny_train(11), &manifest).unwrap();
        let trace_full: Vec<f64> = (0..6).map(|_| full.train_step().unwrap()).collect();

        // interrupted: 3 steps, checkpoint, resume, 3 more
        let mut first = Trainer::new(tiny_net(Variant::VolEnc), tiny_train(11), &manifest).unwrap();
        let mut trace_split: Vec<f64> = (0..3).map(|_| first.train_step().unwrap()).collect();
        let ckpt_path = dir.join("latest.fodk");
        store::save_checkpoint(&ckpt_path, &first.to_checkpoint()).unwrap();
        drop(first);
        let mut resumed = Trainer::resume(&ckpt_path, &manifest).unwrap();
        assert_eq!(resumed.iteration, 3);
        trace_split.extend((0..3).map(|_| resumed.train_step().unwrap()));

        for (a, b) in trace_full.iter().zip(&trace_split) {
            assert!(
                (a - b).abs() < 1e-6,
                "resume diverged: {trace_full:?} vs {trace_split:?}"
            );
        }
    }

    #[test]
    fn fit_saves_best_and_latest() {
        let manifest = tiny_dataset("fit", 600);
        let dir = std::env::temp_dir().join(format!(
            "fod-fit-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        let mut cfg = tiny_train(13);
        cfg.iterations = 4;
        cfg.volume_draws_per_image = 2; // 2 items * 2 / batch 2 = 2 steps/epoch
        let mut tr = Trainer::new(tiny_net(Variant::Vol), cfg, &manifest).unwrap();
        let best = tr.fit(&dir).unwrap();
        assert!(best.exists(), "best checkpoint missing");
        assert!(dir.join("latest_vol.fodk").exists());
        let log = std::fs::read_to_string(dir.join("train_vol.log")).unwrap();
        assert!(log.contains("epoch=1"), "log:\n{log}");
        let ck = store::load_checkpoint(&best).unwrap();
        let best_val: f64 = ck.meta.get_parsed("checkpoint", "best_val").unwrap();
        assert!(best_val.is_finite());

        // the best checkpoint records the minimum over the epoch log
        let log_min = log
            .lines()
            .filter_map(|l| {
                l.split_whitespace()
                    .find_map(|tok| tok.strip_prefix("val="))
                    .and_then(|v| v.parse::<f64>().ok())
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            (best_val - log_min).abs() < 1e-6,
            "best {best_val} vs log min {log_min}"
        );
    }

    /// End-to-end gradient check of the full training loss in f64: a toy
    /// full-variant net on an 8^3 patch, finite differences vs analytic
    /// gradients on a sampled parameter subset.
    #[test]
    fn full_loss_gradients_match_finite_differences() {
        use crate::denoiser::UNet;
        use crate::spharm::volume_index_table;

        let cfg = NetConfig {
            base: 4,
            mults: vec![1, 2],
            attn_levels: vec![1],
            emb_dim: 16,
            patch: 8,
            variant: Variant::Full,
            zero_init_output: false, // live gradient paths everywhere
        };
        let unet = UNet::build(cfg).unwrap();
        let values: Vec<ArrayD<f64>> = unet.init_values(21);
        let mut rng = Rng::from_seed(5);
        let p = 8;
        let x_t = Array3::from_shape_fn((p, p, p), |_| rng.normal());
        let cond = Array3::from_shape_fn((p, p, p), |_| rng.normal() * 0.3);
        let mut mask = Array3::<f64>::zeros((p, p, p));
        for _ in 0..40 {
            let i = rng.below(p as u64) as usize;
            let j = rng.below(p as u64) as usize;
            let k = rng.below(p as u64) as usize;
            mask[(i, j, k)] = 1.0;
        }
        let target = ArrayD::from_shape_fn(IxDyn(&[p, p, p]), |_| rng.normal());
        let taps: Vec<Vec<ArrayD<f64>>> = (0..5)
            .map(|_| {
                vec![ArrayD::from_shape_fn(IxDyn(&[8, 4, 4, 4]), |_| {
                    rng.normal() * 0.5
                })]
            })
            .collect();
        let vol = volume_index_table(8).unwrap()[30];

        let eval = |vals: &[ArrayD<f64>]| -> (f64, Option<Vec<Option<ArrayD<f64>>>>, Option<Binder>) {
            let mut g = Graph::<f64>::new();
            let mut binder = Binder::new(&unet.set, true);
            let x_stack = stack_channels(&[&x_t, &cond, &mask]);
            let x_id = g.constant(x_stack);
            let kv = unet.kv_nodes(&mut g, &mut binder, vals, &taps);
            let (v_pred, _) = unet.forward(&mut g, &mut binder, vals, x_id, 3, Some(vol), Some(&kv));
            let flat = g.reshape(v_pred, &[p, p, p]);
            let loss = masked_l1_node(
                &mut g,
                flat,
                &target,
                &mask.clone().into_dyn(),
                LossWeights::default(),
            );
            let l = g.scalar_value(loss);
            let grads = g.backward(loss);
            (l, Some(grads), Some(binder))
        };

        let (_, grads, binder) = eval(&values);
        let (grads, binder) = (grads.unwrap(), binder.unwrap());
        let mut param_grads: Vec<Option<ArrayD<f64>>> = vec![None; unet.set.len()];
        for (pidx, node) in binder.bound() {
            param_grads[pidx] = grads[node.0].clone();
        }

        let fd_of = |pidx: usize, flat: usize| -> f64 {
            let h = 1e-4;
            let mut plus = values.clone();
            let mut minus = values.clone();
            *plus[pidx].iter_mut().nth(flat).unwrap() += h;
            *minus[pidx].iter_mut().nth(flat).unwrap() -= h;
            let (lp, _, _) = eval(&plus);
            let (lm, _, _) = eval(&minus);
            (lp - lm) / (2.0 * h)
        };

        // sample ~20 parameters with meaningful gradients across tensors
        let mut checked = 0;
        let mut probe_rng = Rng::from_seed(99);
        for _ in 0..200 {
            if checked >= 20 {
                break;
            }
            let pidx = probe_rng.below(unet.set.len() as u64) as usize;
            let Some(pg) = &param_grads[pidx] else { continue };
            let n = pg.len();
            let flat = probe_rng.below(n as u64) as usize;
            let an = pg.iter().nth(flat).copied().unwrap();
            if an.abs() < 1e-6 {
                continue;
            }
            let fd = fd_of(pidx, flat);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(
                rel < 1e-2,
                "param {pidx} ({}) elem {flat}: fd {fd} vs analytic {an} (rel {rel})",
                unet.set.name(crate::nn::PId(pidx))
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} parameters had usable gradients");

        // targeted check: gradient flows through the volume-encoding MLP
        // and the order-weight MLP, to 1e-3 relative
        let names: Vec<&str> = unet.set.names().collect();
        for target in ["vol.fc1.w", "vol.fc2.w", "order.fc1.w", "order.fc2.w"] {
            let pidx = names.iter().position(|n| *n == target).unwrap();
            let pg = param_grads[pidx]
                .as_ref()
                .unwrap_or_else(|| panic!("{target} received no gradient"));
            // strongest component for a stable relative comparison
            let (flat, an) = pg
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, &v)| (i, v))
                .unwrap();
            assert!(an.abs() > 0.0, "{target} gradient is identically zero");
            let fd = fd_of(pidx, flat);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel < 1e-3, "{target}: fd {fd} vs analytic {an} (rel {rel})");
        }
    }
}
