//! Inference: generate all 45 FOD volumes inside the distortion mask by
//! full reverse diffusion conditioned on the low-signal-loss data, then
//! splice with the observed voxels and denormalize.
//!
//! Observed voxels are never overwritten: the output equals the corrupted
//! input bit-for-bit outside the mask. Per-volume rng streams are split by
//! flat volume index (and tile index below that), so the 45 generations
//! can run in any order or in parallel with identical results.
//!
//! Images larger than the network patch are processed tile-wise with
//! 4-voxel overlap and linear blending of tile outputs.

use ndarray::{s, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::denoiser::{pack_condition, CrossFeatureBank, DenoiserModel, Variant};
use crate::diffusion::{ddpm_step, NoiseSchedule};
use crate::error::{FodError, Result};
use crate::rng::Rng;
use crate::spharm::{normalize, FodImage, ScaleTable, VolumeIndex, N_VOLUMES};

pub const TILE_OVERLAP: usize = 4;

/// Anything that can predict v for one volume patch. `origin` is the tile's
/// corner in full-image coordinates (test oracles use it; the network does
/// not).
pub trait VolumeDenoiser: Sync {
    fn variant(&self) -> Variant;

    /// Cross-attention features for one condition tile (None unless the
    /// variant uses cross-attention).
    fn prepare_bank(
        &self,
        cond_tile: &Array4<f32>,
        mask_tile: &Array3<u8>,
    ) -> Result<Option<CrossFeatureBank>>;

    fn predict_v(
        &self,
        x_t: &Array3<f32>,
        t: usize,
        vol: VolumeIndex,
        origin: (usize, usize, usize),
        condition: Option<(&Array3<f32>, &Array3<f32>)>,
        bank: Option<&CrossFeatureBank>,
    ) -> Result<Array3<f32>>;

    /// Spatial tile side the denoiser expects.
    fn patch(&self) -> usize;
}

impl VolumeDenoiser for DenoiserModel {
    fn variant(&self) -> Variant {
        self.unet.cfg.variant
    }

    fn prepare_bank(
        &self,
        cond_tile: &Array4<f32>,
        mask_tile: &Array3<u8>,
    ) -> Result<Option<CrossFeatureBank>> {
        if self.unet.cfg.variant.has_cross_attention() {
            Ok(Some(self.compute_bank(cond_tile, mask_tile)?))
        } else {
            Ok(None)
        }
    }

    fn predict_v(
        &self,
        x_t: &Array3<f32>,
        t: usize,
        vol: VolumeIndex,
        _origin: (usize, usize, usize),
        condition: Option<(&Array3<f32>, &Array3<f32>)>,
        bank: Option<&CrossFeatureBank>,
    ) -> Result<Array3<f32>> {
        self.denoise_volume(x_t, t, vol, condition, bank)
    }

    fn patch(&self) -> usize {
        self.unet.cfg.patch
    }
}

/// Tile start offsets covering [0, extent) with `patch`-sized windows and
/// at least `overlap` voxels of overlap between consecutive tiles. A
/// too-small extent yields one full-extent tile.
pub fn tile_starts(extent: usize, patch: usize, overlap: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let stride = patch.saturating_sub(overlap).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= extent {
            starts.push(extent - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Per-axis blending weight inside a tile: ramps linearly across the
/// overlap and is flat in the interior.
fn axis_weight(i: usize, len: usize, overlap: usize) -> f64 {
    let cap = (overlap + 1) as f64;
    ((i + 1).min(len - i) as f64).min(cap)
}

struct Tile {
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
}

fn tiles_for(dims: (usize, usize, usize), patch: usize) -> Vec<Tile> {
    let (sx, sy, sz) = (
        tile_starts(dims.0, patch, TILE_OVERLAP),
        tile_starts(dims.1, patch, TILE_OVERLAP),
        tile_starts(dims.2, patch, TILE_OVERLAP),
    );
    let len = |extent: usize| extent.min(patch);
    let mut tiles = Vec::new();
    for &x in &sx {
        for &y in &sy {
            for &z in &sz {
                tiles.push(Tile {
                    origin: (x, y, z),
                    size: (len(dims.0), len(dims.1), len(dims.2)),
                });
            }
        }
    }
    tiles
}

fn crop4(a: &Array4<f32>, o: (usize, usize, usize), p: (usize, usize, usize)) -> Array4<f32> {
    a.slice(s![o.0..o.0 + p.0, o.1..o.1 + p.1, o.2..o.2 + p.2, ..])
        .to_owned()
}

fn crop3<A: Copy>(a: &Array3<A>, o: (usize, usize, usize), p: (usize, usize, usize)) -> Array3<A> {
    a.slice(s![o.0..o.0 + p.0, o.1..o.1 + p.1, o.2..o.2 + p.2])
        .to_owned()
}

/// Sample one volume over one tile: full reverse diffusion from pure noise.
#[allow(clippy::too_many_arguments)]
fn sample_tile(
    model: &impl VolumeDenoiser,
    vol: VolumeIndex,
    tile: &Tile,
    cond_vol: Option<&Array3<f32>>,
    mask_f: Option<&Array3<f32>>,
    bank: Option<&CrossFeatureBank>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Array3<f32>> {
    let (px, py, pz) = tile.size;
    let mut x = Array3::from_shape_fn((px, py, pz), |_| rng.normal() as f32);
    for t in (1..=sched.len()).rev() {
        let condition = match (cond_vol, mask_f) {
            (Some(c), Some(m)) => Some((c, m)),
            _ => None,
        };
        let v = model.predict_v(&x, t, vol, tile.origin, condition, bank)?;
        let x_dyn = x.into_dyn();
        let stepped = ddpm_step(&x_dyn, &v.into_dyn(), t, rng, sched)?;
        x = stepped
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-d tile");
    }
    Ok(x)
}

/// Generated volume (normalized space) assembled over tiles with linear
/// blending. `tile_banks[i]` matches `tiles_for(...)[i]`.
#[allow(clippy::too_many_arguments)]
fn generate_volume(
    model: &impl VolumeDenoiser,
    cond4: Option<&Array4<f32>>,
    mask_f: &Array3<f32>,
    dims: (usize, usize, usize),
    vol: VolumeIndex,
    sched: &NoiseSchedule,
    root: &Rng,
    tile_banks: &[Option<CrossFeatureBank>],
) -> Result<Array3<f32>> {
    let tiles = tiles_for(dims, model.patch());
    let mut acc = Array3::<f64>::zeros(dims);
    let mut weight = Array3::<f64>::zeros(dims);
    let vol_rng = root.split(vol.flat as u64);

    for (ti, tile) in tiles.iter().enumerate() {
        let mut rng = vol_rng.split(ti as u64);
        let cond_tile_vol = cond4.map(|c| {
            c.index_axis(Axis(3), vol.flat)
                .to_owned()
        });
        let cond_crop = cond_tile_vol
            .as_ref()
            .map(|c| crop3(c, tile.origin, tile.size));
        let mask_crop = crop3(mask_f, tile.origin, tile.size);
        let out = sample_tile(
            model,
            vol,
            tile,
            cond_crop.as_ref(),
            cond4.is_some().then_some(&mask_crop),
            tile_banks[ti].as_ref(),
            sched,
            &mut rng,
        )?;
        for ((i, j, k), &v) in out.indexed_iter() {
            let w = axis_weight(i, tile.size.0, TILE_OVERLAP)
                * axis_weight(j, tile.size.1, TILE_OVERLAP)
                * axis_weight(k, tile.size.2, TILE_OVERLAP);
            let (gi, gj, gk) = (tile.origin.0 + i, tile.origin.1 + j, tile.origin.2 + k);
            acc[(gi, gj, gk)] += w * v as f64;
            weight[(gi, gj, gk)] += w;
        }
    }
    Ok(Array3::from_shape_fn(dims, |idx| {
        (acc[idx] / weight[idx].max(1e-12)) as f32
    }))
}

fn build_condition(
    corrupted: &FodImage,
    mask: &Array3<u8>,
    scale: &ScaleTable,
) -> (Array4<f32>, Array3<f32>) {
    let norm = normalize(corrupted, scale);
    let (x, y, z) = norm.dims;
    let mut cond = Array4::<f32>::zeros((x, y, z, N_VOLUMES));
    for flat in 0..N_VOLUMES {
        let vol = norm.coeffs.index_axis(Axis(3), flat).to_owned();
        let filled = pack_condition(&vol, mask);
        cond.index_axis_mut(Axis(3), flat).assign(&filled);
    }
    let mask_f = mask.mapv(|m| m as f32);
    (cond, mask_f)
}

fn check_inputs(
    corrupted: &FodImage,
    mask: &Array3<u8>,
    scale: &ScaleTable,
) -> Result<()> {
    scale
        .validate()
        .map_err(|e| FodError::Config(format!("scale table: {e}")))?;
    if mask.dim() != corrupted.brain_mask.dim() {
        return Err(FodError::invalid("mask dims do not match image"));
    }
    for ((i, j, k), &m) in mask.indexed_iter() {
        if m == 1 && corrupted.brain_mask[(i, j, k)] == 0 {
            return Err(FodError::invalid(format!(
                "distortion mask exceeds brain at ({i},{j},{k})"
            )));
        }
    }
    Ok(())
}

/// Generate one volume (normalized space) for the whole image. Each call
/// builds its own feature bank; `restore_image` shares banks across the 45
/// volumes instead.
#[allow(clippy::too_many_arguments)]
pub fn restore_volume(
    model: &impl VolumeDenoiser,
    corrupted: &FodImage,
    mask: &Array3<u8>,
    vol: VolumeIndex,
    scale: &ScaleTable,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array3<f32>> {
    check_inputs(corrupted, mask, scale)?;
    let (cond4, mask_f) = build_condition(corrupted, mask, scale);
    let tiles = tiles_for(corrupted.dims, model.patch());
    let banks = tile_banks(model, &cond4, mask, &tiles)?;
    let root = Rng::from_seed(seed);
    let cond = model.variant().has_condition().then_some(&cond4);
    generate_volume(model, cond, &mask_f, corrupted.dims, vol, sched, &root, &banks)
}

fn tile_banks(
    model: &impl VolumeDenoiser,
    cond4: &Array4<f32>,
    mask: &Array3<u8>,
    tiles: &[Tile],
) -> Result<Vec<Option<CrossFeatureBank>>> {
    tiles
        .iter()
        .map(|tile| {
            if model.variant().has_cross_attention() {
                let cond_tile = crop4(cond4, tile.origin, tile.size);
                let mask_tile = crop3(mask, tile.origin, tile.size);
                model.prepare_bank(&cond_tile, &mask_tile)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Restore a full image: generate all 45 volumes inside the mask,
/// denormalize, and splice with the observed data. Voxels outside the mask
/// are returned bit-identical to the input.
pub fn restore_image(
    model: &impl VolumeDenoiser,
    corrupted: &FodImage,
    mask: &Array3<u8>,
    scale: &ScaleTable,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FodImage> {
    check_inputs(corrupted, mask, scale)?;
    let mut out = corrupted.clone();
    let masked: Vec<(usize, usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &m)| m == 1)
        .map(|(idx, _)| idx)
        .collect();
    if masked.is_empty() {
        return Ok(out);
    }

    let (cond4, mask_f) = build_condition(corrupted, mask, scale);
    let tiles = tiles_for(corrupted.dims, model.patch());
    let banks = tile_banks(model, &cond4, mask, &tiles)?;
    let root = Rng::from_seed(seed);
    let cond = model.variant().has_condition().then_some(&cond4);

    let table = crate::spharm::volume_index_table(8)?;
    let generated: Vec<Array3<f32>> = table
        .par_iter()
        .map(|&vol| {
            generate_volume(
                model,
                cond,
                &mask_f,
                corrupted.dims,
                vol,
                sched,
                &root,
                &banks,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let orders = crate::spharm::order_of_flat();
    for (flat, gen) in generated.iter().enumerate() {
        let s = scale.scale[orders[flat] / 2];
        for &(i, j, k) in &masked {
            out.coeffs[(i, j, k, flat)] = gen[(i, j, k)] * s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::NetConfig;
    use crate::phantom::{self, PhantomConfig};
    use crate::spharm::compute_scale_table;

    /// Analytic oracle: v = (sqrt(ab) x_t - x0) / sqrt(1 - ab) for the true
    /// normalized x0, cropped at the tile origin.
    struct OracleDenoiser {
        x0_by_vol: Array4<f32>,
        sched: NoiseSchedule,
        patch: usize,
    }

    impl VolumeDenoiser for OracleDenoiser {
        fn variant(&self) -> Variant {
            Variant::Vol
        }

        fn prepare_bank(
            &self,
            _cond: &Array4<f32>,
            _mask: &Array3<u8>,
        ) -> Result<Option<CrossFeatureBank>> {
            Ok(None)
        }

        fn predict_v(
            &self,
            x_t: &Array3<f32>,
            t: usize,
            vol: VolumeIndex,
            origin: (usize, usize, usize),
            _condition: Option<(&Array3<f32>, &Array3<f32>)>,
            _bank: Option<&CrossFeatureBank>,
        ) -> Result<Array3<f32>> {
            let (sa, sb) = self.sched.sqrt_ab(t);
            let dims = x_t.dim();
            let mut v = Array3::zeros(dims);
            for ((i, j, k), out) in v.indexed_iter_mut() {
                let x0 = self.x0_by_vol[(
                    origin.0 + i,
                    origin.1 + j,
                    origin.2 + k,
                    vol.flat,
                )];
                *out = (sa * x_t[(i, j, k)] - x0) / sb;
            }
            Ok(v)
        }

        fn patch(&self) -> usize {
            self.patch
        }
    }

    fn setup(patch: usize) -> (FodImage, FodImage, Array3<u8>, ScaleTable, OracleDenoiser) {
        let cfg = PhantomConfig {
            seed: 42,
            sigma: 0.01,
            ..Default::default()
        };
        let ph = phantom::make_phantom_full(&cfg).unwrap();
        let mut rng = Rng::from_seed(7);
        let dmask =
            phantom::place_mask(&ph.image, &ph.truth.regions, 2.2, 0.8, &mut rng).unwrap();
        let corrupted = phantom::apply_signal_loss(&ph.image, &dmask, &mut rng).unwrap();
        let scale = compute_scale_table(&[&ph.image]).unwrap();
        let gt_norm = normalize(&ph.image, &scale);
        let sched = NoiseSchedule::linear_scaled(60).unwrap();
        let oracle = OracleDenoiser {
            x0_by_vol: gt_norm.coeffs,
            sched: sched.clone(),
            patch,
        };
        (ph.image, corrupted, dmask.mask, scale, oracle)
    }

    #[test]
    fn tile_starts_cover_and_overlap() {
        assert_eq!(tile_starts(12, 12, 4), vec![0]);
        assert_eq!(tile_starts(8, 12, 4), vec![0]);
        let st = tile_starts(24, 12, 4);
        assert_eq!(st.first(), Some(&0));
        assert_eq!(st.last(), Some(&12));
        for w in st.windows(2) {
            assert!(w[1] - w[0] <= 12 - 4, "not enough overlap: {st:?}");
        }
    }

    #[test]
    fn oracle_restores_masked_region_whole_image() {
        let (gt, corrupted, mask, scale, oracle) = setup(12);
        let out = restore_image(&oracle, &corrupted, &mask, &scale, &oracle.sched.clone(), 3).unwrap();
        // outside the mask: bit-identical to the corrupted input
        for ((i, j, k, v), &c) in out.coeffs.indexed_iter() {
            if mask[(i, j, k)] == 0 {
                assert_eq!(c, corrupted.coeffs[(i, j, k, v)]);
            }
        }
        // inside the mask: close to ground truth (sampler tolerance scaled
        // by the per-order denormalization)
        let orders = crate::spharm::order_of_flat();
        for ((i, j, k, v), &c) in out.coeffs.indexed_iter() {
            if mask[(i, j, k)] == 1 {
                let tol = 0.05 * scale.scale[orders[v] / 2].max(1e-3);
                let err = (c - gt.coeffs[(i, j, k, v)]).abs();
                assert!(
                    err < tol,
                    "voxel ({i},{j},{k},{v}): err {err} vs tol {tol}"
                );
            }
        }
    }

    #[test]
    fn oracle_restores_with_tiling() {
        // patch 8 on a 12^3 image forces 8 tiles with blending
        let (gt, corrupted, mask, scale, oracle) = setup(8);
        let sched = oracle.sched.clone();
        let out = restore_image(&oracle, &corrupted, &mask, &scale, &sched, 5).unwrap();
        let orders = crate::spharm::order_of_flat();
        for ((i, j, k, v), &c) in out.coeffs.indexed_iter() {
            if mask[(i, j, k)] == 1 {
                let tol = 0.05 * scale.scale[orders[v] / 2].max(1e-3);
                let err = (c - gt.coeffs[(i, j, k, v)]).abs();
                assert!(err < tol, "tiled voxel ({i},{j},{k},{v}): err {err}");
            }
        }
    }

    #[test]
    fn restore_is_deterministic_and_mask_free_is_identity() {
        let (_, corrupted, mask, scale, oracle) = setup(12);
        let sched = oracle.sched.clone();
        let a = restore_image(&oracle, &corrupted, &mask, &scale, &sched, 11).unwrap();
        let b = restore_image(&oracle, &corrupted, &mask, &scale, &sched, 11).unwrap();
        assert_eq!(a.coeffs, b.coeffs);

        let empty = Array3::<u8>::zeros(corrupted.dims);
        let out = restore_image(&oracle, &corrupted, &empty, &scale, &sched, 11).unwrap();
        assert_eq!(out.coeffs, corrupted.coeffs);
    }

    #[test]
    fn untrained_model_output_is_finite_and_bounded() {
        let (_, corrupted, mask, scale, _) = setup(12);
        let model = DenoiserModel::new(
            NetConfig {
                base: 4,
                mults: vec![1, 2],
                attn_levels: vec![1],
                emb_dim: 16,
                patch: 12,
                variant: Variant::Full,
                zero_init_output: true,
            },
            9,
        )
        .unwrap();
        let sched = NoiseSchedule::linear_scaled(20).unwrap();
        let vol = crate::spharm::volume_index_table(8).unwrap()[3];
        let gen = restore_volume(&model, &corrupted, &mask, vol, &scale, &sched, 1).unwrap();
        assert!(gen.iter().all(|v| v.is_finite()));
        // normalized-space samples stay within the x0 clip plus posterior noise
        assert!(gen.iter().all(|v| v.abs() < 2.5), "generated values escaped the clip range");
    }

    #[test]
    fn restore_rejects_mask_outside_brain() {
        let (_, corrupted, _, scale, oracle) = setup(12);
        let mut bad = Array3::<u8>::zeros(corrupted.dims);
        bad[(0, 0, 0)] = 1; // corner voxel is outside the ellipsoid brain
        let sched = oracle.sched.clone();
        let err = restore_image(&oracle, &corrupted, &bad, &scale, &sched, 1).unwrap_err();
        assert_eq!(err.category(), "invalid-argument");
    }
}
