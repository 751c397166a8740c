//! The conditional 3-D U-Net denoiser: time and volume encodings packed
//! into the embedding pathway, the corrupted volume and mask as input
//! channels, and a frequency-balanced cross-attention pathway fed by
//! frozen copies of the network.
//!
//! Per ablation rung the network grows:
//!   - `uncond`:  input [x_t], time embedding only;
//!   - `vol`:     input [x_t, condition, mask];
//!   - `vol_enc`: adds the [order, volume-number] encoding, summed into the
//!     time-embedding pathway;
//!   - `full`:    adds cross-attention whose Key/Value come from per-order
//!     averaged condition volumes passed through a frozen copy of this
//!     network (time 0, order-representative volume encoding), re-weighted
//!     per order as F + e_m * J and merged by a 1x1 convolution.
//!
//! The copied network is refreshed from the live parameters after every
//! optimizer update; a (param_version, sync_epoch) counter pair guards
//! against feature extraction from a stale copy.

use ndarray::{Array3, Array4, ArrayD, IxDyn};

use crate::autograd::{Graph, Id, Scalar};
use crate::error::{FodError, Result};
use crate::nn::{
    embed_column, sinusoidal_embed, AttentionBlock, Binder, Conv1x1, Conv3dLayer, GroupNormLayer,
    LinearLayer, ParamSet, ResBlock,
};
use crate::rng::Rng;
use crate::spharm::{first_flat_of_order, order_of_flat, volume_index_table, VolumeIndex, EVEN_ORDERS, N_VOLUMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Uncond,
    Vol,
    VolEnc,
    Full,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Uncond => "uncond",
            Variant::Vol => "vol",
            Variant::VolEnc => "vol_enc",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "uncond" => Ok(Variant::Uncond),
            "vol" => Ok(Variant::Vol),
            "vol_enc" => Ok(Variant::VolEnc),
            "full" => Ok(Variant::Full),
            other => Err(FodError::Config(format!(
                "unknown variant {other:?}; expected uncond | vol | vol_enc | full"
            ))),
        }
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Uncond, Variant::Vol, Variant::VolEnc, Variant::Full]
    }

    pub fn has_condition(&self) -> bool {
        !matches!(self, Variant::Uncond)
    }

    pub fn has_volume_encoding(&self) -> bool {
        matches!(self, Variant::VolEnc | Variant::Full)
    }

    pub fn has_cross_attention(&self) -> bool {
        matches!(self, Variant::Full)
    }
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    /// Channels at the finest level.
    pub base: usize,
    /// Per-level channel multipliers; the length is the level count.
    pub mults: Vec<usize>,
    /// Levels that get attention (self, plus cross in the full variant).
    /// Must include the coarsest level.
    pub attn_levels: Vec<usize>,
    /// Embedding dimension for the time/volume pathway. Even.
    pub emb_dim: usize,
    /// Cube side of training patches and inference tiles.
    pub patch: usize,
    pub variant: Variant,
    /// Zero-initialize the output head and attention projections. Training
    /// keeps this on; gradient checks turn it off so every parameter has a
    /// live gradient path at init.
    pub zero_init_output: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base: 8,
            mults: vec![1, 2],
            attn_levels: vec![1],
            emb_dim: 64,
            patch: 12,
            variant: Variant::Full,
            zero_init_output: true,
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base * self.mults[level]
    }

    pub fn input_channels(&self) -> usize {
        if self.variant.has_condition() {
            3
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l < 2 {
            return Err(FodError::invalid("net needs at least 2 levels"));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(FodError::invalid("embedding dimension must be even"));
        }
        if self.attn_levels.is_empty() || !self.attn_levels.contains(&(l - 1)) {
            return Err(FodError::invalid(
                "attention must be present at the coarsest level",
            ));
        }
        if self.attn_levels.iter().any(|&a| a >= l) {
            return Err(FodError::invalid("attention level out of range"));
        }
        if self.patch % (1 << (l - 1)) != 0 || self.patch < 8 {
            return Err(FodError::invalid(format!(
                "patch {} must be >= 8 and divisible by {}",
                self.patch,
                1 << (l - 1)
            )));
        }
        Ok(())
    }

    fn attn_index(&self, level: usize) -> Option<usize> {
        self.attn_levels.iter().position(|&a| a == level)
    }
}

struct EncLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    cross: Option<AttentionBlock>,
    down: Option<Conv3dLayer>,
}

struct DecLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    cross: Option<AttentionBlock>,
    up: Option<Conv3dLayer>,
}

/// The U-Net structure: parameter ids plus layer wiring. Values are owned
/// by the caller (`DenoiserModel` holds a live and a frozen copy).
pub struct UNet {
    pub cfg: NetConfig,
    pub set: ParamSet,
    stem: Conv3dLayer,
    time1: LinearLayer,
    time2: LinearLayer,
    vol1: Option<LinearLayer>,
    vol2: Option<LinearLayer>,
    enc: Vec<EncLevel>,
    mid1: ResBlock,
    mid_attn: AttentionBlock,
    mid_cross: Option<AttentionBlock>,
    mid2: ResBlock,
    dec: Vec<DecLevel>,
    head_norm: GroupNormLayer,
    head_conv: Conv3dLayer,
    order1: Option<LinearLayer>,
    order2: Option<LinearLayer>,
    combine: Option<Vec<Conv1x1>>,
}

impl UNet {
    pub fn build(cfg: NetConfig) -> Result<UNet> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let e = cfg.emb_dim;
        let levels = cfg.levels();
        let zero = cfg.zero_init_output;

        let stem = Conv3dLayer::new(&mut set, "stem", cfg.input_channels(), cfg.channels(0), 1, false);
        let time1 = LinearLayer::new(&mut set, "time.fc1", e, e);
        let time2 = LinearLayer::new(&mut set, "time.fc2", e, e);
        let (vol1, vol2) = if cfg.variant.has_volume_encoding() {
            (
                Some(LinearLayer::new(&mut set, "vol.fc1", 2 * e, e)),
                Some(LinearLayer::new(&mut set, "vol.fc2", e, e)),
            )
        } else {
            (None, None)
        };

        let mut enc = Vec::new();
        for l in 0..levels {
            let c = cfg.channels(l);
            let attn_here = cfg.attn_index(l).is_some();
            enc.push(EncLevel {
                res: ResBlock::new(&mut set, &format!("enc{l}.res"), c, c, e),
                attn: attn_here
                    .then(|| AttentionBlock::new(&mut set, &format!("enc{l}.attn"), c, zero)),
                cross: (attn_here && cfg.variant.has_cross_attention())
                    .then(|| AttentionBlock::new(&mut set, &format!("enc{l}.cross"), c, zero)),
                down: (l + 1 < levels).then(|| {
                    Conv3dLayer::new(
                        &mut set,
                        &format!("enc{l}.down"),
                        c,
                        cfg.channels(l + 1),
                        2,
                        false,
                    )
                }),
            });
        }

        let cm = cfg.channels(levels - 1);
        let mid1 = ResBlock::new(&mut set, "mid.res1", cm, cm, e);
        let mid_attn = AttentionBlock::new(&mut set, "mid.attn", cm, zero);
        let mid_cross = cfg
            .variant
            .has_cross_attention()
            .then(|| AttentionBlock::new(&mut set, "mid.cross", cm, zero));
        let mid2 = ResBlock::new(&mut set, "mid.res2", cm, cm, e);

        let mut dec = Vec::new();
        for l in 0..levels {
            let c = cfg.channels(l);
            let attn_here = cfg.attn_index(l).is_some();
            dec.push(DecLevel {
                res: ResBlock::new(&mut set, &format!("dec{l}.res"), 2 * c, c, e),
                attn: attn_here
                    .then(|| AttentionBlock::new(&mut set, &format!("dec{l}.attn"), c, zero)),
                cross: (attn_here && cfg.variant.has_cross_attention())
                    .then(|| AttentionBlock::new(&mut set, &format!("dec{l}.cross"), c, zero)),
                up: (l > 0).then(|| {
                    Conv3dLayer::new(
                        &mut set,
                        &format!("dec{l}.up"),
                        c,
                        cfg.channels(l - 1),
                        1,
                        false,
                    )
                }),
            });
        }

        let head_norm = GroupNormLayer::new(&mut set, "head.norm", cfg.channels(0));
        let head_conv = Conv3dLayer::new(&mut set, "head.conv", cfg.channels(0), 1, 1, zero);

        let (order1, order2, combine) = if cfg.variant.has_cross_attention() {
            let o1 = LinearLayer::new(&mut set, "order.fc1", e, e / 2);
            let o2 = LinearLayer::new(&mut set, "order.fc2", e / 2, 1);
            let combine = cfg
                .attn_levels
                .iter()
                .map(|&l| {
                    Conv1x1::new(
                        &mut set,
                        &format!("combine{l}"),
                        5 * cfg.channels(l),
                        cfg.channels(l),
                        false,
                    )
                })
                .collect();
            (Some(o1), Some(o2), Some(combine))
        } else {
            (None, None, None)
        };

        Ok(UNet {
            cfg,
            set,
            stem,
            time1,
            time2,
            vol1,
            vol2,
            enc,
            mid1,
            mid_attn,
            mid_cross,
            mid2,
            dec,
            head_norm,
            head_conv,
            order1,
            order2,
            combine,
        })
    }

    pub fn init_values<T: Scalar>(&self, seed: u64) -> Vec<ArrayD<T>> {
        self.set.init_values(&Rng::from_seed(seed))
    }

    /// The time/volume embedding column [E, 1] as a graph node.
    fn embedding<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        t: usize,
        vol: Option<VolumeIndex>,
    ) -> Id {
        let e = self.cfg.emb_dim;
        let t_sin = sinusoidal_embed(t as f64, e).expect("emb_dim validated even");
        let t_col = g.constant(embed_column::<T>(&t_sin));
        let h = self.time1.forward(g, binder, values, t_col);
        let h = g.silu(h);
        let mut emb = self.time2.forward(g, binder, values, h);

        if let (Some(vol), Some(v1), Some(v2)) = (vol, &self.vol1, &self.vol2) {
            let mut sin = sinusoidal_embed(vol.order as f64, e).expect("even dim");
            sin.extend(sinusoidal_embed(vol.flat as f64, e).expect("even dim"));
            let v_col = g.constant(embed_column::<T>(&sin));
            let h = v1.forward(g, binder, values, v_col);
            let h = g.silu(h);
            let v_emb = v2.forward(g, binder, values, h);
            emb = g.add(emb, v_emb);
        }
        emb
    }

    /// Full forward pass. `x` is the channel-stacked input [C_in, D, H, W];
    /// `kv` holds one [C_l, S_l] Key/Value node per attention level
    /// (ascending). Returns the v-prediction [1, D, H, W] and the decoder
    /// self-attention output per attention level.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
        t: usize,
        vol: Option<VolumeIndex>,
        kv: Option<&[Id]>,
    ) -> (Id, Vec<Id>) {
        let vol_for_emb = if self.cfg.variant.has_volume_encoding() {
            vol
        } else {
            None
        };
        let emb = self.embedding(g, binder, values, t, vol_for_emb);

        let mut h = self.stem.forward(g, binder, values, x);
        let mut skips = Vec::with_capacity(self.enc.len());
        for (l, lvl) in self.enc.iter().enumerate() {
            h = lvl.res.forward(g, binder, values, h, emb);
            if let Some(attn) = &lvl.attn {
                h = attn.forward(g, binder, values, h, None);
                if let (Some(cross), Some(kv)) = (&lvl.cross, kv) {
                    let idx = self.cfg.attn_index(l).expect("attn level");
                    h = cross.forward(g, binder, values, h, Some(kv[idx]));
                }
            }
            skips.push(h);
            if let Some(down) = &lvl.down {
                h = down.forward(g, binder, values, h);
            }
        }

        h = self.mid1.forward(g, binder, values, h, emb);
        h = self.mid_attn.forward(g, binder, values, h, None);
        if let (Some(cross), Some(kv)) = (&self.mid_cross, kv) {
            let idx = self
                .cfg
                .attn_index(self.cfg.levels() - 1)
                .expect("coarsest level has attention");
            h = cross.forward(g, binder, values, h, Some(kv[idx]));
        }
        h = self.mid2.forward(g, binder, values, h, emb);

        let mut taps: Vec<Option<Id>> = vec![None; self.cfg.attn_levels.len()];
        for l in (0..self.cfg.levels()).rev() {
            let lvl = &self.dec[l];
            h = g.concat(&[h, skips[l]], 0);
            h = lvl.res.forward(g, binder, values, h, emb);
            if let Some(attn) = &lvl.attn {
                h = attn.forward(g, binder, values, h, None);
                let idx = self.cfg.attn_index(l).expect("attn level");
                taps[idx] = Some(h);
                if let (Some(cross), Some(kv)) = (&lvl.cross, kv) {
                    h = cross.forward(g, binder, values, h, Some(kv[idx]));
                }
            }
            if let Some(up) = &lvl.up {
                h = g.upsample2(h);
                h = up.forward(g, binder, values, h);
            }
        }

        let out = self.head_norm.forward(g, binder, values, h);
        let out = g.silu(out);
        let v_pred = self.head_conv.forward(g, binder, values, out);
        let taps = taps
            .into_iter()
            .map(|t| t.expect("every attention level is tapped in the decoder"))
            .collect();
        (v_pred, taps)
    }

    /// Combine per-order frozen features into one Key/Value map per
    /// attention level: E_m = F_m + e_m * J with e_m = MLP(sin(order)),
    /// stacked over orders and merged by a 1x1 convolution. The features
    /// enter as constants (no gradient into the copied net); e_m and the
    /// 1x1 merge are live parameters.
    pub fn kv_nodes<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        taps_per_order: &[Vec<ArrayD<T>>],
    ) -> Vec<Id> {
        let (o1, o2, combine) = match (&self.order1, &self.order2, &self.combine) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => panic!("kv_nodes requires the full variant"),
        };
        assert_eq!(taps_per_order.len(), 5, "one tap set per even order");

        // e_m per order as [1,1] nodes
        let e_nodes: Vec<Id> = EVEN_ORDERS
            .iter()
            .map(|&order| {
                let sin = sinusoidal_embed(order as f64, self.cfg.emb_dim).expect("even dim");
                let col = g.constant(embed_column::<T>(&sin));
                let h = o1.forward(g, binder, values, col);
                let h = g.silu(h);
                o2.forward(g, binder, values, h)
            })
            .collect();

        self.cfg
            .attn_levels
            .iter()
            .enumerate()
            .map(|(idx, _)| {
                let mut e_maps = Vec::with_capacity(5);
                for (m, taps) in taps_per_order.iter().enumerate() {
                    let f = &taps[idx];
                    let c = f.shape()[0];
                    let s: usize = f.shape()[1..].iter().product();
                    let f_flat = f
                        .to_owned()
                        .into_shape_with_order(IxDyn(&[c, s]))
                        .expect("tap reshape");
                    let f_const = g.constant(f_flat);
                    let ones_row = g.constant(ArrayD::ones(IxDyn(&[1, s])));
                    let ones_col = g.constant(ArrayD::ones(IxDyn(&[c, 1])));
                    let em_row = g.matmul(e_nodes[m], ones_row); // [1, S]
                    let em_map = g.matmul(ones_col, em_row); // [C, S]
                    e_maps.push(g.add(f_const, em_map));
                }
                let stacked = g.concat(&e_maps, 0); // [5C, S]
                combine[idx].forward(g, binder, values, stacked)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Condition packing and order averaging
// ---------------------------------------------------------------------------

/// Overwrite masked voxels with 1 so high-signal-loss regions are
/// distinguishable from the zero background; the mask itself travels as a
/// separate channel.
pub fn pack_condition(volume: &Array3<f32>, mask: &Array3<u8>) -> Array3<f32> {
    let mut out = volume.clone();
    for (idx, m) in mask.indexed_iter() {
        if *m == 1 {
            out[idx] = 1.0;
        }
    }
    out
}

/// Mean over each order's volumes: 45 -> 5. The single L=0 volume passes
/// through unchanged.
pub fn order_average(coeffs: &Array4<f32>) -> [Array3<f32>; 5] {
    let (x, y, z, v) = coeffs.dim();
    assert_eq!(v, N_VOLUMES);
    let orders = order_of_flat();
    let mut sums: [Array3<f32>; 5] = std::array::from_fn(|_| Array3::zeros((x, y, z)));
    let mut counts = [0usize; 5];
    for flat in 0..N_VOLUMES {
        let o = orders[flat] / 2;
        counts[o] += 1;
        let vol = coeffs.index_axis(ndarray::Axis(3), flat);
        sums[o] += &vol;
    }
    for (o, sum) in sums.iter_mut().enumerate() {
        if counts[o] > 1 {
            sum.mapv_inplace(|c| c / counts[o] as f32);
        }
    }
    sums
}

/// Per-order frozen feature maps at each attention resolution, extracted
/// from the copied network on the order-averaged condition volumes.
#[derive(Debug, Clone)]
pub struct CrossFeatureBank {
    /// [5 orders][attention levels] feature maps [C_l, r_l, r_l, r_l].
    pub taps_per_order: Vec<Vec<ArrayD<f32>>>,
    /// Sync epoch of the copied net the features came from.
    pub sync_epoch: u64,
}

// ---------------------------------------------------------------------------
// The model: live parameters plus the frozen copy
// ---------------------------------------------------------------------------

pub struct DenoiserModel {
    pub unet: UNet,
    pub params: Vec<ArrayD<f32>>,
    pub copied: Vec<ArrayD<f32>>,
    /// Incremented by every optimizer update.
    pub param_version: u64,
    /// param_version at the last sync of the copied net.
    pub sync_epoch: u64,
}

impl DenoiserModel {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<DenoiserModel> {
        let unet = UNet::build(cfg)?;
        let params: Vec<ArrayD<f32>> = unet.init_values(seed);
        let copied = params.clone();
        Ok(DenoiserModel {
            unet,
            params,
            copied,
            param_version: 0,
            sync_epoch: 0,
        })
    }

    /// Replace the live parameters (e.g. from a checkpoint); shapes must
    /// match the architecture.
    pub fn load_params(&mut self, values: Vec<ArrayD<f32>>) -> Result<()> {
        self.unet.set.check_values(&values)?;
        self.params = values;
        self.sync_copied();
        Ok(())
    }

    /// Copy live parameters into the frozen net and stamp the sync epoch.
    pub fn sync_copied(&mut self) {
        self.copied = self.params.clone();
        self.sync_epoch = self.param_version;
    }

    /// Record an optimizer update.
    pub fn mark_updated(&mut self) {
        self.param_version += 1;
    }

    fn check_sync(&self) -> Result<()> {
        if self.sync_epoch != self.param_version {
            return Err(FodError::Internal(format!(
                "copied net is stale: sync epoch {} vs parameter version {}",
                self.sync_epoch, self.param_version
            )));
        }
        Ok(())
    }

    /// Run the frozen copy on one order-averaged condition volume at t = 0
    /// with the order's representative volume encoding, and capture the
    /// decoder self-attention outputs.
    pub fn extract_order_features(
        &self,
        avg_volume: &Array3<f32>,
        mask: &Array3<f32>,
        order: usize,
    ) -> Result<Vec<ArrayD<f32>>> {
        self.check_sync()?;
        let rep_flat = first_flat_of_order()[order / 2];
        let vol = volume_index_table(8)?[rep_flat];
        let x = stack_channels(&[avg_volume, avg_volume, mask]);
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&self.unet.set, false);
        let x_id = g.constant(x);
        let (_, taps) = self
            .unet
            .forward(&mut g, &mut binder, &self.copied, x_id, 0, Some(vol), None);
        Ok(taps.into_iter().map(|id| g.value(id).clone()).collect())
    }

    /// Extract the full cross-attention feature bank from a condition
    /// image (normalized coefficients with mask fill applied).
    pub fn compute_bank(
        &self,
        cond_filled: &Array4<f32>,
        mask: &Array3<u8>,
    ) -> Result<CrossFeatureBank> {
        let mask_f = mask_to_f32(mask);
        let averages = order_average(cond_filled);
        let mut taps_per_order = Vec::with_capacity(5);
        for (i, avg) in averages.iter().enumerate() {
            taps_per_order.push(self.extract_order_features(avg, &mask_f, EVEN_ORDERS[i])?);
        }
        Ok(CrossFeatureBank {
            taps_per_order,
            sync_epoch: self.sync_epoch,
        })
    }

    /// Inference-path forward: one denoising prediction, no gradients.
    /// `condition` is (mask-filled condition volume, mask); `bank` supplies
    /// cross-attention features for the full variant.
    pub fn denoise_volume(
        &self,
        x_t: &Array3<f32>,
        t: usize,
        vol: VolumeIndex,
        condition: Option<(&Array3<f32>, &Array3<f32>)>,
        bank: Option<&CrossFeatureBank>,
    ) -> Result<Array3<f32>> {
        let variant = self.unet.cfg.variant;
        if variant.has_condition() != condition.is_some() {
            return Err(FodError::invalid(
                "condition presence does not match network variant",
            ));
        }
        if variant.has_cross_attention() && bank.is_none() {
            return Err(FodError::invalid("full variant requires a feature bank"));
        }
        let x = match condition {
            Some((cond, mask)) => stack_channels(&[x_t, cond, mask]),
            None => stack_channels(&[x_t]),
        };
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&self.unet.set, false);
        let x_id = g.constant(x);
        let kv_ids: Option<Vec<Id>> = bank.map(|bank| {
            self.unet
                .kv_nodes(&mut g, &mut binder, &self.params, &bank.taps_per_order)
        });
        let (v_pred, _) = self.unet.forward(
            &mut g,
            &mut binder,
            &self.params,
            x_id,
            t,
            Some(vol),
            kv_ids.as_deref(),
        );
        let dims = x_t.dim();
        let out = g
            .value(v_pred)
            .clone()
            .into_shape_with_order(IxDyn(&[dims.0, dims.1, dims.2]))
            .expect("v_pred spatial shape");
        Ok(out
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-d volume"))
    }

    /// The volume-encoding vector for one (order, volume) pair, computed
    /// from the live parameters.
    pub fn volume_embedding(&self, vol: VolumeIndex) -> Vec<f32> {
        let unet = &self.unet;
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&unet.set, false);
        let e = unet.cfg.emb_dim;
        let mut sin = sinusoidal_embed(vol.order as f64, e).expect("even dim");
        sin.extend(sinusoidal_embed(vol.flat as f64, e).expect("even dim"));
        let col = g.constant(embed_column::<f32>(&sin));
        let v1 = unet.vol1.as_ref().expect("volume encoding variant");
        let v2 = unet.vol2.as_ref().expect("volume encoding variant");
        let h = v1.forward(&mut g, &mut binder, &self.params, col);
        let h = g.silu(h);
        let out = v2.forward(&mut g, &mut binder, &self.params, h);
        g.value(out).iter().copied().collect()
    }
}

/// Stack [D,H,W] volumes into a [C, D, H, W] array.
pub fn stack_channels<T: Scalar>(volumes: &[&Array3<T>]) -> ArrayD<T> {
    let dims = volumes[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[volumes.len(), dims.0, dims.1, dims.2]));
    for (c, vol) in volumes.iter().enumerate() {
        assert_eq!(vol.dim(), dims, "channel shape mismatch");
        for ((i, j, k), &v) in vol.indexed_iter() {
            out[[c, i, j, k]] = v;
        }
    }
    out
}

pub fn mask_to_f32(mask: &Array3<u8>) -> Array3<f32> {
    mask.mapv(|m| m as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spharm::volume_index_table;

    fn toy_cfg(variant: Variant) -> NetConfig {
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

    fn randn3(rng: &mut Rng, n: usize) -> Array3<f32> {
        Array3::from_shape_fn((n, n, n), |_| rng.normal() as f32)
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_cfg(Variant::Full);
        cfg.mults = vec![1];
        assert!(cfg.validate().is_err());

        let mut cfg = toy_cfg(Variant::Full);
        cfg.attn_levels = vec![0]; // missing coarsest
        assert!(cfg.validate().is_err());

        let mut cfg = toy_cfg(Variant::Full);
        cfg.emb_dim = 15;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_cfg(Variant::Full);
        cfg.patch = 9;
        assert!(cfg.validate().is_err());

        assert!(toy_cfg(Variant::Uncond).validate().is_ok());
    }

    #[test]
    fn forward_shape_and_determinism() {
        for variant in Variant::all() {
            let model = DenoiserModel::new(toy_cfg(variant), 11).unwrap();
            let mut rng = Rng::from_seed(1);
            let x_t = randn3(&mut rng, 8);
            let cond = randn3(&mut rng, 8);
            let mask = Array3::<f32>::zeros((8, 8, 8));
            let vol = volume_index_table(8).unwrap()[17];
            let bank;
            let (c, b) = if variant.has_condition() {
                bank = if variant.has_cross_attention() {
                    let coeffs = Array4::<f32>::zeros((8, 8, 8, 45));
                    Some(model.compute_bank(&coeffs, &Array3::zeros((8, 8, 8))).unwrap())
                } else {
                    None
                };
                (Some((&cond, &mask)), bank.as_ref())
            } else {
                (None, None)
            };
            let out1 = model.denoise_volume(&x_t, 3, vol, c, b).unwrap();
            let out2 = model.denoise_volume(&x_t, 3, vol, c, b).unwrap();
            assert_eq!(out1.dim(), (8, 8, 8), "variant {variant:?}");
            assert_eq!(out1, out2);
            assert!(out1.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn volume_encodings_are_pairwise_distinct() {
        let model = DenoiserModel::new(toy_cfg(Variant::VolEnc), 5).unwrap();
        let table = volume_index_table(8).unwrap();
        let embs: Vec<Vec<f32>> = table.iter().map(|&v| model.volume_embedding(v)).collect();
        let mut min_dist = f32::INFINITY;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let d: f32 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0, "volume encodings collide: {min_dist}");

        // determinism: same pair twice
        let a = model.volume_embedding(table[7]);
        let b = model.volume_embedding(table[7]);
        assert_eq!(a, b);
    }

    #[test]
    fn pack_condition_fill_and_passthrough() {
        let mut vol = Array3::<f32>::zeros((4, 4, 4));
        vol[(0, 0, 0)] = -0.3;
        vol[(1, 1, 1)] = 0.7;
        let mut mask = Array3::<u8>::zeros((4, 4, 4));
        mask[(1, 1, 1)] = 1;
        let packed = pack_condition(&vol, &mask);
        assert_eq!(packed[(0, 0, 0)], -0.3);
        assert_eq!(packed[(1, 1, 1)], 1.0);

        // all-zero mask: identity; all-one mask: constant one
        let id = pack_condition(&vol, &Array3::zeros((4, 4, 4)));
        assert_eq!(id, vol);
        let ones = pack_condition(&vol, &Array3::from_elem((4, 4, 4), 1u8));
        assert!(ones.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn condition_pack_ignores_masked_content() {
        // changing values strictly inside the mask leaves the pack unchanged
        let mut rng = Rng::from_seed(9);
        let mut vol = randn3(&mut rng, 4);
        let mut mask = Array3::<u8>::zeros((4, 4, 4));
        mask[(2, 2, 2)] = 1;
        mask[(1, 2, 3)] = 1;
        let before = pack_condition(&vol, &mask);
        vol[(2, 2, 2)] = 99.0;
        vol[(1, 2, 3)] = -42.0;
        let after = pack_condition(&vol, &mask);
        assert_eq!(before, after);
    }

    #[test]
    fn order_average_means_and_l0_passthrough() {
        let mut rng = Rng::from_seed(3);
        let coeffs = Array4::from_shape_fn((3, 3, 3, 45), |_| rng.normal() as f32);
        let avg = order_average(&coeffs);

        // L=0 passthrough is bit-exact
        for ((i, j, k), &v) in avg[0].indexed_iter() {
            assert_eq!(v, coeffs[(i, j, k, 0)]);
        }
        // order 4 is the mean of volumes 6..=14
        for ((i, j, k), &v) in avg[2].indexed_iter() {
            let mean: f32 =
                (6..15).map(|f| coeffs[(i, j, k, f)]).sum::<f32>() / 9.0;
            assert!((v - mean).abs() < 1e-6);
        }
        // constant order-2 volumes average to the same constant
        let mut c2 = Array4::<f32>::zeros((2, 2, 2, 45));
        for f in 1..6 {
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        c2[(i, j, k, f)] = 0.42;
                    }
                }
            }
        }
        let avg2 = order_average(&c2);
        assert!(avg2[1].iter().all(|&v| (v - 0.42).abs() < 1e-7));
    }

    #[test]
    fn stale_copy_is_rejected() {
        let mut model = DenoiserModel::new(toy_cfg(Variant::Full), 2).unwrap();
        let avg = Array3::<f32>::zeros((8, 8, 8));
        let mask = Array3::<f32>::zeros((8, 8, 8));
        assert!(model.extract_order_features(&avg, &mask, 0).is_ok());
        model.mark_updated(); // optimizer stepped, no sync yet
        let err = model.extract_order_features(&avg, &mask, 0).unwrap_err();
        assert_eq!(err.category(), "internal");
        model.sync_copied();
        assert!(model.extract_order_features(&avg, &mask, 0).is_ok());
    }

    #[test]
    fn sync_makes_copies_bit_equal() {
        let mut model = DenoiserModel::new(toy_cfg(Variant::Full), 4).unwrap();
        // perturb live params, then sync
        for p in model.params.iter_mut() {
            p.mapv_inplace(|v| v + 0.125);
        }
        model.mark_updated();
        model.sync_copied();
        for (a, b) in model.params.iter().zip(&model.copied) {
            assert_eq!(a, b);
        }
        // further updates leave the copy untouched
        for p in model.params.iter_mut() {
            p.mapv_inplace(|v| v * 2.0);
        }
        let diff = model
            .params
            .iter()
            .zip(&model.copied)
            .any(|(a, b)| a != b);
        assert!(diff);
    }

    #[test]
    fn frozen_features_are_finite_on_zero_input() {
        let model = DenoiserModel::new(toy_cfg(Variant::Full), 8).unwrap();
        let avg = Array3::<f32>::zeros((8, 8, 8));
        let mask = Array3::<f32>::zeros((8, 8, 8));
        let taps = model.extract_order_features(&avg, &mask, 4).unwrap();
        assert_eq!(taps.len(), 1); // one attention level in the toy config
        for t in &taps {
            assert!(t.iter().all(|v| v.is_finite()));
            assert_eq!(t.shape(), &[8, 4, 4, 4]); // C=8 at level 1, spatial 4
        }
    }

    /// Eq. 2 with zero weights is the identity on features, and a
    /// one-hot 1x1 kernel can select any single order's map.
    #[test]
    fn order_combine_identity_and_selection() {
        let mut model = DenoiserModel::new(toy_cfg(Variant::Full), 6).unwrap();
        let unet = &model.unet;
        let c = unet.cfg.channels(1); // attn level 1
        let s = 4 * 4 * 4;

        // rig the order MLP to output 0 and the combine kernel to select
        // order index 2 (L = 4)
        let o2 = unet.order2.as_ref().unwrap();
        let idx_w = o2.w.0;
        let idx_b = o2.b.0;
        model.params[idx_w].fill(0.0);
        model.params[idx_b].fill(0.0);
        let combine = &unet.combine.as_ref().unwrap()[0];
        let sel = 2usize;
        model.params[combine.w.0].fill(0.0);
        for ch in 0..c {
            model.params[combine.w.0][[ch, sel * c + ch]] = 1.0;
        }
        model.params[combine.b.0].fill(0.0);

        let mut rng = Rng::from_seed(12);
        let taps_per_order: Vec<Vec<ArrayD<f32>>> = (0..5)
            .map(|_| {
                vec![ArrayD::from_shape_fn(IxDyn(&[c, 4, 4, 4]), |_| {
                    rng.normal() as f32
                })]
            })
            .collect();

        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&unet.set, false);
        let kv = unet.kv_nodes(&mut g, &mut binder, &model.params, &taps_per_order);
        let got = g.value(kv[0]);
        let expect = taps_per_order[sel][0]
            .clone()
            .into_shape_with_order(IxDyn(&[c, s]))
            .unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6, "selection broke: {a} vs {b}");
        }
    }

    /// With zero features and the order-MLP biased to 3, E_m = 3 * J.
    #[test]
    fn order_weight_fills_constant_map() {
        let mut model = DenoiserModel::new(toy_cfg(Variant::Full), 7).unwrap();
        let unet = &model.unet;
        let c = unet.cfg.channels(1);

        let o2 = unet.order2.as_ref().unwrap();
        model.params[o2.w.0].fill(0.0);
        model.params[o2.b.0].fill(3.0);
        // identity-select order 1 (L = 2)
        let combine = &unet.combine.as_ref().unwrap()[0];
        model.params[combine.w.0].fill(0.0);
        for ch in 0..c {
            model.params[combine.w.0][[ch, c + ch]] = 1.0;
        }
        model.params[combine.b.0].fill(0.0);

        let taps_per_order: Vec<Vec<ArrayD<f32>>> =
            (0..5).map(|_| vec![ArrayD::zeros(IxDyn(&[c, 4, 4, 4]))]).collect();
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(&unet.set, false);
        let kv = unet.kv_nodes(&mut g, &mut binder, &model.params, &taps_per_order);
        for v in g.value(kv[0]).iter() {
            assert!((v - 3.0).abs() < 1e-6, "expected 3*J, got {v}");
        }
    }
}
