//! Run configuration: a sectioned key-value file covering dataset
//! generation, the network, training, and sampling, with CLI flag
//! overrides layered on top.

use std::path::{Path, PathBuf};

use crate::denoiser::{NetConfig, Variant};
use crate::error::{FodError, Result};
use crate::kvtext::{KvDoc, KvSection};
use crate::phantom::{DatasetSpec, PhantomConfig};
use crate::trainer::{LossSpace, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub dims: (usize, usize, usize),
    pub sigma: f32,
    pub severity_range: (f32, f32),
    pub mask_radius: f64,
    pub voxel_size: f32,
    pub kappa_range: (f64, f64),
    pub crossing_deg_range: (f64, f64),
    pub fiber_weight: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomConfig::default();
        DataConfig {
            n_train: 32,
            n_val: 4,
            n_test: 8,
            dims: p.dims,
            sigma: p.sigma,
            severity_range: (0.3, 1.0),
            mask_radius: 2.2,
            voxel_size: p.voxel_size,
            kappa_range: p.kappa_range,
            crossing_deg_range: p.crossing_deg_range,
            fiber_weight: p.fiber_weight,
        }
    }
}

#[allow(clippy::derivable_impls)] // explicit so the three defaults read together
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn dataset_spec(&self, out_dir: impl Into<PathBuf>, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            template: PhantomConfig {
                dims: self.dims,
                kappa_range: self.kappa_range,
                crossing_deg_range: self.crossing_deg_range,
                fiber_weight: self.fiber_weight,
                sigma: self.sigma,
                seed: 0,
                voxel_size: self.voxel_size,
            },
            severity_range: self.severity_range,
            mask_radius: self.mask_radius,
            seed,
            out_dir: out_dir.into(),
        }
    }
}

impl RunConfig {
    /// Parse a config file; missing keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FodError::io(path, e))?;
        let doc = KvDoc::parse(&text)?;
        let mut cfg = RunConfig::default();

        macro_rules! opt {
            ($target:expr, $sec:literal, $key:literal) => {
                if doc.get($sec, $key).is_some() {
                    $target = doc.get_parsed($sec, $key)?;
                }
            };
        }

        opt!(cfg.data.n_train, "data", "n_train");
        opt!(cfg.data.n_val, "data", "n_val");
        opt!(cfg.data.n_test, "data", "n_test");
        opt!(cfg.data.sigma, "data", "sigma");
        opt!(cfg.data.mask_radius, "data", "mask_radius");
        opt!(cfg.data.fiber_weight, "data", "fiber_weight");
        opt!(cfg.data.voxel_size, "data", "voxel_size");
        if doc.get("data", "dims").is_some() {
            let d: Vec<usize> = doc.get_list("data", "dims")?;
            if d.len() != 3 {
                return Err(FodError::Config("dims needs three values".into()));
            }
            cfg.data.dims = (d[0], d[1], d[2]);
        }
        if doc.get("data", "severity_range").is_some() {
            let r: Vec<f32> = doc.get_list("data", "severity_range")?;
            if r.len() != 2 {
                return Err(FodError::Config("severity_range needs two values".into()));
            }
            cfg.data.severity_range = (r[0], r[1]);
        }
        if doc.get("data", "kappa_range").is_some() {
            let r: Vec<f64> = doc.get_list("data", "kappa_range")?;
            cfg.data.kappa_range = (r[0], r[1]);
        }
        if doc.get("data", "crossing_deg_range").is_some() {
            let r: Vec<f64> = doc.get_list("data", "crossing_deg_range")?;
            cfg.data.crossing_deg_range = (r[0], r[1]);
        }

        opt!(cfg.net.base, "net", "base");
        opt!(cfg.net.emb_dim, "net", "emb_dim");
        opt!(cfg.net.patch, "net", "patch");
        if doc.get("net", "mults").is_some() {
            cfg.net.mults = doc.get_list("net", "mults")?;
        }
        if doc.get("net", "attn_levels").is_some() {
            cfg.net.attn_levels = doc.get_list("net", "attn_levels")?;
        }

        opt!(cfg.train.iterations, "train", "iterations");
        opt!(cfg.train.batch_size, "train", "batch_size");
        opt!(cfg.train.lr_initial, "train", "lr_initial");
        opt!(cfg.train.lr_late, "train", "lr_late");
        opt!(cfg.train.lr_switch_frac, "train", "lr_switch_frac");
        opt!(cfg.train.adamw.weight_decay, "train", "weight_decay");
        opt!(cfg.train.seed, "train", "seed");
        opt!(cfg.train.volume_draws_per_image, "train", "volume_draws_per_image");
        opt!(cfg.train.val_draws_per_image, "train", "val_draws_per_image");
        if let Some(ls) = doc.get("train", "loss_space") {
            cfg.train.loss_space = LossSpace::parse(ls)?;
        }
        opt!(cfg.train.t_steps, "schedule", "t_steps");
        opt!(cfg.train.beta_start, "schedule", "beta_start");
        opt!(cfg.train.beta_end, "schedule", "beta_end");

        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.net.variant = variant;
        self
    }

    /// Serialize the effective configuration (for inspection and digests).
    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let mut data = KvSection::new("data");
        data.set("n_train", self.data.n_train)
            .set("n_val", self.data.n_val)
            .set("n_test", self.data.n_test)
            .set(
                "dims",
                format!("{} {} {}", self.data.dims.0, self.data.dims.1, self.data.dims.2),
            )
            .set("sigma", format!("{:?}", self.data.sigma))
            .set(
                "severity_range",
                format!("{:?} {:?}", self.data.severity_range.0, self.data.severity_range.1),
            )
            .set("mask_radius", format!("{:?}", self.data.mask_radius))
            .set("fiber_weight", format!("{:?}", self.data.fiber_weight))
            .set("voxel_size", format!("{:?}", self.data.voxel_size))
            .set(
                "kappa_range",
                format!("{:?} {:?}", self.data.kappa_range.0, self.data.kappa_range.1),
            )
            .set(
                "crossing_deg_range",
                format!(
                    "{:?} {:?}",
                    self.data.crossing_deg_range.0, self.data.crossing_deg_range.1
                ),
            );
        doc.push(data);

        let mut net = KvSection::new("net");
        net.set("base", self.net.base)
            .set(
                "mults",
                self.net
                    .mults
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .set(
                "attn_levels",
                self.net
                    .attn_levels
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .set("emb_dim", self.net.emb_dim)
            .set("patch", self.net.patch);
        doc.push(net);

        let mut train = KvSection::new("train");
        train
            .set("iterations", self.train.iterations)
            .set("batch_size", self.train.batch_size)
            .set("lr_initial", format!("{:e}", self.train.lr_initial))
            .set("lr_late", format!("{:e}", self.train.lr_late))
            .set("lr_switch_frac", self.train.lr_switch_frac)
            .set("weight_decay", self.train.adamw.weight_decay)
            .set("seed", self.train.seed)
            .set("loss_space", self.train.loss_space.as_str())
            .set("volume_draws_per_image", self.train.volume_draws_per_image)
            .set("val_draws_per_image", self.train.val_draws_per_image);
        doc.push(train);

        let mut sched = KvSection::new("schedule");
        sched
            .set("t_steps", self.train.t_steps)
            .set("beta_start", format!("{:e}", self.train.beta_start))
            .set("beta_end", format!("{:e}", self.train.beta_end));
        doc.push(sched);
        doc
    }
}
