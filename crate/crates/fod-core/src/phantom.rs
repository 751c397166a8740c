//! Synthetic crossing-fiber phantoms: ground-truth FOD images with known
//! fiber geometry, parametric signal-loss corruption, and dataset emission.
//!
//! Each phantom holds an ellipsoidal "brain" with a single-fiber bundle in
//! its lower two y-thirds and a two-fiber crossing (45..90 degrees) in the
//! upper third. The single-fiber kernel is an axial Watson density
//! exp(kappa (d.u)^2), normalized on the sphere and projected onto the
//! even SPHARM basis by icosphere quadrature, so ground-truth peak
//! directions are known exactly.

use ndarray::Array3;
use rayon::prelude::*;
use std::path::PathBuf;
use std::sync::OnceLock;

use crate::error::{FodError, Result};
use crate::kvtext::{fnv1a64, KvDoc, KvSection};
use crate::rng::Rng;
use crate::spharm::{order_of_flat, spharm_basis, FodImage, N_VOLUMES};
use crate::sphere::{dot, orthogonal_unit, rotate, unit, weighted_quadrature};
use crate::store;

/// One fiber population in a voxel.
#[derive(Debug, Clone, Copy)]
pub struct FiberSpec {
    pub direction: [f64; 3],
    /// Fractional volume weight in (0, 1]; weights at a voxel sum to <= 1.
    pub weight: f64,
    /// Watson concentration; higher is sharper.
    pub concentration: f64,
}

pub const KAPPA_MIN: f64 = 5.0;
pub const KAPPA_MAX: f64 = 200.0;

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Sampling ranges for the fiber layout.
    pub kappa_range: (f64, f64),
    /// Crossing angle range in degrees.
    pub crossing_deg_range: (f64, f64),
    /// Total fiber weight per voxel (split evenly in crossing regions).
    /// Sets the absolute FOD amplitude scale; the default places typical
    /// peak amplitudes a factor 3-6 above the 0.5 peak-detection
    /// threshold, matching the regime the threshold is meant for.
    pub fiber_weight: f64,
    /// Coefficient noise level; std per order is sigma times that order's
    /// peak magnitude. Must be < 0.1.
    pub sigma: f32,
    pub seed: u64,
    pub voxel_size: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (12, 12, 12),
            kappa_range: (25.0, 60.0),
            crossing_deg_range: (45.0, 90.0),
            fiber_weight: 0.4,
            sigma: 0.02,
            seed: 0,
            voxel_size: 2.0,
        }
    }
}

/// Binary distortion mask plus the severity of the signal loss inside it.
#[derive(Debug, Clone)]
pub struct DistortionMask {
    pub mask: Array3<u8>,
    pub severity: f32,
}

impl DistortionMask {
    pub fn voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Region labels in `PhantomTruth::regions`.
pub const REGION_OUTSIDE: u8 = 0;
pub const REGION_SINGLE: u8 = 1;
pub const REGION_CROSSING: u8 = 2;

/// Known generating geometry of a phantom, for oracle-style checks.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub single_dir: [f64; 3],
    pub cross_dirs: [[f64; 3]; 2],
    pub crossing_deg: f64,
    pub kappa: f64,
    pub regions: Array3<u8>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: FodImage,
    pub truth: PhantomTruth,
}

/// Quadrature for Watson projection: area-weighted level-6 icosphere,
/// with the basis evaluated there. Built once per process. Coarser or
/// equal-weight rules leave orientation-dependent projection error above
/// the 1e-3 equivariance budget for sharp kernels.
struct Quadrature {
    dirs: Vec<[f64; 3]>,
    weights: Vec<f64>,
    basis: ndarray::Array2<f64>,
}

fn quadrature() -> &'static Quadrature {
    static CACHE: OnceLock<Quadrature> = OnceLock::new();
    CACHE.get_or_init(|| {
        let (dirs, weights) = weighted_quadrature(6);
        let basis = spharm_basis(&dirs, 8).expect("unit quadrature directions");
        Quadrature {
            dirs,
            weights,
            basis,
        }
    })
}

/// Project a weighted, normalized Watson density onto the 45 even SPHARM
/// coefficients. Linear in `weight`; rotating the fiber direction rotates
/// the reconstructed amplitude pattern.
pub fn fiber_to_coeffs(spec: &FiberSpec) -> Result<Vec<f64>> {
    let n2 = dot(spec.direction, spec.direction);
    if (n2 - 1.0).abs() > 1e-6 {
        return Err(FodError::invalid("fiber direction must be unit-norm"));
    }
    if !(spec.weight > 0.0 && spec.weight <= 1.0) {
        return Err(FodError::invalid("fiber weight must be in (0, 1]"));
    }
    if !(KAPPA_MIN..=KAPPA_MAX).contains(&spec.concentration) {
        return Err(FodError::invalid(format!(
            "concentration {} outside [{KAPPA_MIN}, {KAPPA_MAX}]",
            spec.concentration
        )));
    }
    let quad = quadrature();

    // exp(kappa (d.u)^2 - kappa) to keep values bounded; the offset cancels
    // in the normalization.
    let density: Vec<f64> = quad
        .dirs
        .iter()
        .map(|&d| {
            let t = dot(d, spec.direction);
            (spec.concentration * (t * t - 1.0)).exp()
        })
        .collect();
    let z: f64 = density
        .iter()
        .zip(&quad.weights)
        .map(|(f, w)| f * w)
        .sum::<f64>();

    let mut coeffs = vec![0.0f64; N_VOLUMES];
    for (i, &f) in density.iter().enumerate() {
        let fw = spec.weight * f / z * quad.weights[i];
        for (j, c) in coeffs.iter_mut().enumerate() {
            *c += fw * quad.basis[(i, j)];
        }
    }
    Ok(coeffs)
}

fn brain_ellipsoid(dims: (usize, usize, usize)) -> Array3<u8> {
    let (x, y, z) = dims;
    let c = [
        (x as f64 - 1.0) / 2.0,
        (y as f64 - 1.0) / 2.0,
        (z as f64 - 1.0) / 2.0,
    ];
    let r = [x as f64 * 0.48, y as f64 * 0.48, z as f64 * 0.48];
    let mut mask = Array3::<u8>::zeros(dims);
    for ((i, j, k), m) in mask.indexed_iter_mut() {
        let dx = (i as f64 - c[0]) / r[0];
        let dy = (j as f64 - c[1]) / r[1];
        let dz = (k as f64 - c[2]) / r[2];
        if dx * dx + dy * dy + dz * dz <= 1.0 {
            *m = 1;
        }
    }
    mask
}

pub fn make_phantom(config: &PhantomConfig) -> Result<FodImage> {
    Ok(make_phantom_full(config)?.image)
}

/// Generate a phantom together with its ground-truth geometry.
pub fn make_phantom_full(config: &PhantomConfig) -> Result<Phantom> {
    let (x, y, z) = config.dims;
    if x < 8 || y < 8 || z < 8 {
        return Err(FodError::invalid("phantom dims must be >= 8 per axis"));
    }
    if !(config.sigma >= 0.0 && config.sigma < 0.1) {
        return Err(FodError::invalid("sigma must be in [0, 0.1)"));
    }

    let root = Rng::from_seed(config.seed);
    let mut geom_rng = root.split(1);
    let mut noise_rng = root.split(2);

    let single_dir = geom_rng.unit_vector();
    let kappa = geom_rng.uniform_in(config.kappa_range.0, config.kappa_range.1);
    let crossing_deg = geom_rng.uniform_in(config.crossing_deg_range.0, config.crossing_deg_range.1);
    let spin = geom_rng.uniform_in(0.0, std::f64::consts::TAU);
    let axis = unit(rotate(orthogonal_unit(single_dir), single_dir, spin));
    let cross_dir = rotate(single_dir, axis, crossing_deg.to_radians());

    let w = config.fiber_weight;
    if !(w > 0.0 && w <= 1.0) {
        return Err(FodError::invalid("fiber_weight must be in (0, 1]"));
    }
    let single = fiber_to_coeffs(&FiberSpec {
        direction: single_dir,
        weight: w,
        concentration: kappa,
    })?;
    let cross_a = fiber_to_coeffs(&FiberSpec {
        direction: single_dir,
        weight: w / 2.0,
        concentration: kappa,
    })?;
    let cross_b = fiber_to_coeffs(&FiberSpec {
        direction: cross_dir,
        weight: w / 2.0,
        concentration: kappa,
    })?;
    let crossing: Vec<f64> = cross_a.iter().zip(&cross_b).map(|(a, b)| a + b).collect();

    let brain = brain_ellipsoid(config.dims);
    let mut image = FodImage::zeros(config.dims, config.voxel_size);
    image.brain_mask = brain.clone();
    let mut regions = Array3::<u8>::zeros(config.dims);
    let cross_start = 2 * y / 3;
    for ((i, j, k), r) in regions.indexed_iter_mut() {
        if brain[(i, j, k)] == 0 {
            continue;
        }
        let coeffs = if j >= cross_start {
            *r = REGION_CROSSING;
            &crossing
        } else {
            *r = REGION_SINGLE;
            &single
        };
        for v in 0..N_VOLUMES {
            image.coeffs[(i, j, k, v)] = coeffs[v] as f32;
        }
    }

    if config.sigma > 0.0 {
        let order_scale = per_order_peak(&image);
        let orders = order_of_flat();
        for ((i, j, k, v), c) in image.coeffs.indexed_iter_mut() {
            if brain[(i, j, k)] == 1 {
                let s = config.sigma as f64 * order_scale[orders[v] / 2];
                *c += (s * noise_rng.normal()) as f32;
            }
        }
    }

    Ok(Phantom {
        image,
        truth: PhantomTruth {
            single_dir,
            cross_dirs: [single_dir, cross_dir],
            crossing_deg,
            kappa,
            regions,
        },
    })
}

/// Max absolute coefficient per even order, over brain voxels.
fn per_order_peak(image: &FodImage) -> [f64; 5] {
    let orders = order_of_flat();
    let mut peak = [0.0f64; 5];
    for ((i, j, k, v), &c) in image.coeffs.indexed_iter() {
        if image.brain_mask[(i, j, k)] == 1 {
            let o = orders[v] / 2;
            peak[o] = peak[o].max(c.abs() as f64);
        }
    }
    peak
}

/// Place a ball-shaped distortion mask of the given radius at a random
/// fiber voxel, preferring centers whose ball lies entirely inside the
/// brain. The mask is always intersected with the brain.
pub fn place_mask(
    image: &FodImage,
    regions: &Array3<u8>,
    radius: f64,
    severity: f32,
    rng: &mut Rng,
) -> Result<DistortionMask> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(FodError::invalid("severity must be in [0, 1]"));
    }
    let dims = image.dims;
    let ball = |c: (usize, usize, usize)| {
        let mut m = Array3::<u8>::zeros(dims);
        for ((i, j, k), v) in m.indexed_iter_mut() {
            let dx = i as f64 - c.0 as f64;
            let dy = j as f64 - c.1 as f64;
            let dz = k as f64 - c.2 as f64;
            if dx * dx + dy * dy + dz * dz <= radius * radius
                && image.brain_mask[(i, j, k)] == 1
            {
                *v = 1;
            }
        }
        m
    };
    let fiber_voxels: Vec<(usize, usize, usize)> = regions
        .indexed_iter()
        .filter(|(_, &r)| r != REGION_OUTSIDE)
        .map(|(idx, _)| idx)
        .collect();
    if fiber_voxels.is_empty() {
        return Err(FodError::invalid("no fiber voxels to place a mask on"));
    }
    let interior: Vec<(usize, usize, usize)> = fiber_voxels
        .iter()
        .copied()
        .filter(|&(i, j, k)| {
            let r = radius.ceil() as i64;
            let all_in = |di: i64, dj: i64, dk: i64| {
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                ni >= 0
                    && nj >= 0
                    && nk >= 0
                    && (ni as usize) < dims.0
                    && (nj as usize) < dims.1
                    && (nk as usize) < dims.2
                    && image.brain_mask[(ni as usize, nj as usize, nk as usize)] == 1
            };
            (-r..=r).all(|di| {
                (-r..=r).all(|dj| {
                    (-r..=r).all(|dk| {
                        (di * di + dj * dj + dk * dk) as f64 > radius * radius
                            || all_in(di, dj, dk)
                    })
                })
            })
        })
        .collect();
    let pool = if interior.is_empty() { &fiber_voxels } else { &interior };
    let center = pool[rng.below(pool.len() as u64) as usize];
    Ok(DistortionMask {
        mask: ball(center),
        severity,
    })
}

/// Attenuation factors at severity 1: the L=0 volume keeps 10% of its
/// value, higher orders keep 5%.
pub const ATTEN_L0: f32 = 0.9;
pub const ATTEN_HIGH: f32 = 0.95;
/// Corruption noise std per unit severity, as a fraction of the order peak.
pub const CORRUPT_NOISE_FRAC: f64 = 0.02;

/// Simulate signal loss: attenuate coefficients inside the mask and add
/// severity-proportional noise. Voxels outside the mask are untouched, and
/// the mean L=0 value inside the mask strictly decreases for severity > 0
/// (the L=0 noise is de-meaned over the mask to make that exact).
pub fn apply_signal_loss(
    image: &FodImage,
    dmask: &DistortionMask,
    rng: &mut Rng,
) -> Result<FodImage> {
    if dmask.mask.dim() != image.brain_mask.dim() {
        return Err(FodError::invalid("mask dims do not match image"));
    }
    for ((i, j, k), &m) in dmask.mask.indexed_iter() {
        if m == 1 && image.brain_mask[(i, j, k)] == 0 {
            return Err(FodError::invalid(format!(
                "distortion mask exceeds brain at ({i},{j},{k})"
            )));
        }
    }
    let sev = dmask.severity;
    if sev == 0.0 {
        return Ok(image.clone());
    }

    let mut out = image.clone();
    let orders = order_of_flat();
    let order_scale = per_order_peak(image);
    let masked: Vec<(usize, usize, usize)> = dmask
        .mask
        .indexed_iter()
        .filter(|(_, &m)| m == 1)
        .map(|(idx, _)| idx)
        .collect();

    // Per-volume noise; the L=0 draw is centered over the mask.
    for v in 0..N_VOLUMES {
        let o = orders[v] / 2;
        let atten = if o == 0 {
            1.0 - ATTEN_L0 * sev
        } else {
            1.0 - ATTEN_HIGH * sev
        };
        let noise_std = CORRUPT_NOISE_FRAC * sev as f64 * order_scale[o];
        let mut draws: Vec<f64> = masked.iter().map(|_| noise_std * rng.normal()).collect();
        if o == 0 && !draws.is_empty() {
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            for d in draws.iter_mut() {
                *d -= mean;
            }
        }
        for (&(i, j, k), &d) in masked.iter().zip(&draws) {
            let c = &mut out.coeffs[(i, j, k, v)];
            *c = *c * atten + d as f32;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub template: PhantomConfig,
    pub severity_range: (f32, f32),
    pub mask_radius: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl DatasetSpec {
    pub fn desk_scale(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        DatasetSpec {
            n_train: 32,
            n_val: 4,
            n_test: 8,
            template: PhantomConfig::default(),
            severity_range: (0.3, 1.0),
            mask_radius: 2.2,
            seed,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub manifest_path: PathBuf,
    pub digest: u64,
    pub n_items: usize,
}

/// Generate phantoms, corrupt them, and write the dataset with a manifest.
/// Deterministic for a given seed: item rng streams are split by global
/// item index, so parallel generation yields identical bytes.
pub fn make_dataset(spec: &DatasetSpec) -> Result<DatasetSummary> {
    if spec.n_train < 1 || spec.n_val < 1 || spec.n_test < 1 {
        return Err(FodError::invalid("all split counts must be >= 1"));
    }
    std::fs::create_dir_all(&spec.out_dir).map_err(|e| FodError::io(&spec.out_dir, e))?;

    let splits = [
        ("train", spec.n_train),
        ("val", spec.n_val),
        ("test", spec.n_test),
    ];
    let mut jobs = Vec::new();
    let mut global = 0u64;
    for (split, count) in splits {
        for i in 0..count {
            jobs.push((split, i, global));
            global += 1;
        }
    }

    let root = Rng::from_seed(spec.seed);
    struct ItemRow {
        split: &'static str,
        id: String,
        severity: f32,
        seed: u64,
        crossing_deg: f64,
    }
    let rows: Vec<ItemRow> = jobs
        .par_iter()
        .map(|&(split, i, global)| -> Result<ItemRow> {
            let item_rng = root.split(1000 + global);
            let item_seed = item_rng.state()[4];
            let mut cfg = spec.template.clone();
            cfg.seed = item_seed;
            let phantom = make_phantom_full(&cfg)?;
            let mut mask_rng = item_rng.split(1);
            let severity = mask_rng.uniform_in(
                spec.severity_range.0 as f64,
                spec.severity_range.1 as f64,
            ) as f32;
            let dmask = place_mask(
                &phantom.image,
                &phantom.truth.regions,
                spec.mask_radius,
                severity,
                &mut mask_rng,
            )?;
            let mut corrupt_rng = item_rng.split(2);
            let corrupted = apply_signal_loss(&phantom.image, &dmask, &mut corrupt_rng)?;

            let id = format!("{split}_{i:03}");
            store::write_fod(spec.out_dir.join(format!("{id}_gt.fodc")), &phantom.image)?;
            store::write_fod(spec.out_dir.join(format!("{id}_cor.fodc")), &corrupted)?;
            store::write_mask(
                spec.out_dir.join(format!("{id}_mask.fodm")),
                &dmask.mask,
                severity,
            )?;
            store::write_mask(
                spec.out_dir.join(format!("{id}_brain.fodm")),
                &phantom.image.brain_mask,
                0.0,
            )?;
            Ok(ItemRow {
                split,
                id,
                severity,
                seed: item_seed,
                crossing_deg: phantom.truth.crossing_deg,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut doc = KvDoc::new();
    let mut head = KvSection::new("dataset");
    let (x, y, z) = spec.template.dims;
    head.set("seed", spec.seed)
        .set("dims", format!("{x} {y} {z}"))
        .set("voxel_size", format!("{:?}", spec.template.voxel_size))
        .set("sigma", format!("{:?}", spec.template.sigma))
        .set("mask_radius", format!("{:?}", spec.mask_radius))
        .set(
            "severity_range",
            format!("{:?} {:?}", spec.severity_range.0, spec.severity_range.1),
        )
        .set("n_train", spec.n_train)
        .set("n_val", spec.n_val)
        .set("n_test", spec.n_test);
    doc.push(head);
    for (split, _) in splits {
        let mut sec = KvSection::new(format!("split {split}"));
        let ids: Vec<&str> = rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect();
        sec.set("items", ids.join(" "));
        doc.push(sec);
    }
    for row in &rows {
        let mut sec = KvSection::new(format!("item {}", row.id));
        sec.set("gt", format!("{}_gt.fodc", row.id))
            .set("corrupted", format!("{}_cor.fodc", row.id))
            .set("mask", format!("{}_mask.fodm", row.id))
            .set("brain", format!("{}_brain.fodm", row.id))
            .set("severity", format!("{:?}", row.severity))
            .set("seed", row.seed)
            .set("crossing_deg", format!("{:.3}", row.crossing_deg));
        doc.push(sec);
    }

    let manifest_path = spec.out_dir.join("manifest.kv");
    let text = doc.to_text();
    std::fs::write(&manifest_path, &text).map_err(|e| FodError::io(&manifest_path, e))?;
    Ok(DatasetSummary {
        manifest_path,
        digest: fnv1a64(text.as_bytes()),
        n_items: rows.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spharm::{evaluate_fod, extract_peaks, PeakGrid};
    use crate::sphere::{antipodal_angle_deg, quadrature_directions};

    fn dense_argmax(coeffs: &[f32]) -> [f64; 3] {
        let dirs = quadrature_directions(4);
        let amps = evaluate_fod(coeffs, &dirs).unwrap();
        let mut best = 0;
        for i in 1..dirs.len() {
            if amps[i] > amps[best] {
                best = i;
            }
        }
        dirs[best]
    }

    #[test]
    fn watson_peaks_at_fiber_direction() {
        let spec = FiberSpec {
            direction: [0.0, 0.0, 1.0],
            weight: 1.0,
            concentration: 50.0,
        };
        let coeffs: Vec<f32> = fiber_to_coeffs(&spec)
            .unwrap()
            .iter()
            .map(|&c| c as f32)
            .collect();
        let peak = dense_argmax(&coeffs);
        assert!(
            antipodal_angle_deg(peak, [0.0, 0.0, 1.0]) < 3.0,
            "argmax at {peak:?}"
        );
    }

    #[test]
    fn weight_scaling_is_linear() {
        let base = FiberSpec {
            direction: [0.6, 0.0, 0.8],
            weight: 0.4,
            concentration: 40.0,
        };
        let doubled = FiberSpec {
            weight: 0.8,
            ..base
        };
        let a = fiber_to_coeffs(&base).unwrap();
        let b = fiber_to_coeffs(&doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn high_concentration_dominates_equator() {
        let spec = FiberSpec {
            direction: [0.0, 0.0, 1.0],
            weight: 1.0,
            concentration: 200.0,
        };
        let coeffs: Vec<f32> = fiber_to_coeffs(&spec)
            .unwrap()
            .iter()
            .map(|&c| c as f32)
            .collect();
        let amps = evaluate_fod(&coeffs, &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(
            amps[0] > 10.0 * amps[1].abs(),
            "pole {} vs equator {}",
            amps[0],
            amps[1]
        );
    }

    #[test]
    fn kappa_bounds_enforced() {
        let bad = FiberSpec {
            direction: [0.0, 0.0, 1.0],
            weight: 1.0,
            concentration: 300.0,
        };
        assert!(fiber_to_coeffs(&bad).is_err());
    }

    #[test]
    fn rotation_equivariance() {
        let u = [0.0, 0.0, 1.0];
        let axis = [1.0, 0.0, 0.0];
        let angle = std::f64::consts::FRAC_PI_2;
        let u_rot = rotate(u, axis, angle);
        let kappa = 35.0;
        let a = fiber_to_coeffs(&FiberSpec {
            direction: u,
            weight: 1.0,
            concentration: kappa,
        })
        .unwrap();
        let b = fiber_to_coeffs(&FiberSpec {
            direction: u_rot,
            weight: 1.0,
            concentration: kappa,
        })
        .unwrap();
        let a32: Vec<f32> = a.iter().map(|&c| c as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&c| c as f32).collect();

        let mut rng = Rng::from_seed(3);
        for _ in 0..50 {
            let d = rng.unit_vector();
            let d_rot = rotate(d, axis, angle);
            let amp_a = evaluate_fod(&a32, &[d]).unwrap()[0];
            let amp_b = evaluate_fod(&b32, &[d_rot]).unwrap()[0];
            assert!(
                (amp_a - amp_b).abs() < 1e-3,
                "equivariance broken: {amp_a} vs {amp_b}"
            );
        }
    }

    #[test]
    fn phantom_is_deterministic_and_clean_outside() {
        let cfg = PhantomConfig {
            seed: 99,
            ..Default::default()
        };
        let a = make_phantom(&cfg).unwrap();
        let b = make_phantom(&cfg).unwrap();
        assert_eq!(a.coeffs, b.coeffs);
        a.validate().unwrap();
        // a voxel outside the brain is exactly zero
        assert_eq!(a.brain_mask[(0, 0, 0)], 0);
        for v in 0..N_VOLUMES {
            assert_eq!(a.coeffs[(0, 0, 0, v)], 0.0);
        }
    }

    #[test]
    fn noiseless_single_fiber_recovers_direction_everywhere() {
        let cfg = PhantomConfig {
            sigma: 0.0,
            seed: 4,
            ..Default::default()
        };
        let phantom = make_phantom_full(&cfg).unwrap();
        let grid = PeakGrid::default_grid();
        let mut checked = 0;
        for ((i, j, k), &r) in phantom.truth.regions.indexed_iter() {
            if r != REGION_SINGLE {
                continue;
            }
            let coeffs = phantom.image.coeffs_at(i, j, k);
            let peaks = extract_peaks(&coeffs, &grid, 0.5, 3).unwrap();
            assert!(!peaks.is_empty(), "no peak at ({i},{j},{k})");
            let err = antipodal_angle_deg(peaks.directions[0], phantom.truth.single_dir);
            assert!(err < 3.0, "direction error {err} at ({i},{j},{k})");
            checked += 1;
        }
        assert!(checked > 50, "too few single-fiber voxels: {checked}");
    }

    #[test]
    fn signal_loss_identity_at_zero_severity() {
        let cfg = PhantomConfig {
            seed: 7,
            ..Default::default()
        };
        let phantom = make_phantom_full(&cfg).unwrap();
        let mut rng = Rng::from_seed(1);
        let dmask = place_mask(&phantom.image, &phantom.truth.regions, 2.0, 0.0, &mut rng).unwrap();
        let out = apply_signal_loss(&phantom.image, &dmask, &mut rng).unwrap();
        assert_eq!(out.coeffs, phantom.image.coeffs);
    }

    #[test]
    fn signal_loss_attenuates_l0_by_ninety_percent() {
        // severity 1: L=0 keeps 1 - 0.9 = 0.1 of its value before noise;
        // check against a hand-built image with noise disabled by zero peak
        // on other orders.
        let mut img = FodImage::zeros((8, 8, 8), 1.0);
        for i in 0..8usize {
            for j in 0..8usize {
                for k in 0..8usize {
                    img.brain_mask[(i, j, k)] = 1;
                    img.coeffs[(i, j, k, 0)] = 0.28;
                }
            }
        }
        let mut mask = Array3::<u8>::zeros((8, 8, 8));
        mask[(4, 4, 4)] = 1;
        mask[(4, 4, 5)] = 1;
        let dmask = DistortionMask { mask, severity: 1.0 };
        let mut rng = Rng::from_seed(5);
        let out = apply_signal_loss(&img, &dmask, &mut rng).unwrap();
        // the de-meaned two-voxel noise is +/- the same delta; their mean is
        // exactly the attenuated value
        let mean = (out.coeffs[(4, 4, 4, 0)] + out.coeffs[(4, 4, 5, 0)]) / 2.0;
        assert!((mean - 0.028).abs() < 1e-6, "mean {mean}");
        // voxels outside the mask untouched
        assert_eq!(out.coeffs[(0, 0, 0, 0)], 0.28);
    }

    #[test]
    fn signal_loss_reduces_mean_l0() {
        let cfg = PhantomConfig {
            seed: 21,
            ..Default::default()
        };
        let phantom = make_phantom_full(&cfg).unwrap();
        let mut rng = Rng::from_seed(2);
        let dmask =
            place_mask(&phantom.image, &phantom.truth.regions, 2.5, 0.5, &mut rng).unwrap();
        let out = apply_signal_loss(&phantom.image, &dmask, &mut rng).unwrap();
        let mut before = 0.0;
        let mut after = 0.0;
        let mut n = 0;
        for ((i, j, k), &m) in dmask.mask.indexed_iter() {
            if m == 1 {
                before += phantom.image.coeffs[(i, j, k, 0)] as f64;
                after += out.coeffs[(i, j, k, 0)] as f64;
                n += 1;
            }
        }
        assert!(n > 10, "mask too small: {n}");
        assert!(after < before, "mean L=0 did not decrease: {after} vs {before}");
    }

    #[test]
    fn mask_respects_brain() {
        let cfg = PhantomConfig {
            seed: 31,
            ..Default::default()
        };
        let phantom = make_phantom_full(&cfg).unwrap();
        let mut rng = Rng::from_seed(8);
        let dmask =
            place_mask(&phantom.image, &phantom.truth.regions, 3.0, 0.8, &mut rng).unwrap();
        assert!(dmask.voxel_count() > 0);
        for ((i, j, k), &m) in dmask.mask.indexed_iter() {
            if m == 1 {
                assert_eq!(phantom.image.brain_mask[(i, j, k)], 1);
            }
        }
    }

    #[test]
    fn dataset_emission_is_deterministic() {
        let dir_a = temp("a");
        let dir_b = temp("b");
        let mut spec = DatasetSpec::desk_scale(&dir_a, 77);
        spec.n_train = 4;
        spec.n_val = 1;
        spec.n_test = 2;
        spec.template.dims = (8, 8, 8);
        spec.mask_radius = 1.6;
        let sum_a = make_dataset(&spec).unwrap();
        spec.out_dir = dir_b.clone();
        let sum_b = make_dataset(&spec).unwrap();
        assert_eq!(sum_a.digest, sum_b.digest);
        // (4, 1, 2) -> 7 triples on disk across 3 splits
        assert_eq!(sum_a.n_items, 7);

        let manifest = store::DatasetManifest::load(&sum_a.manifest_path).unwrap();
        let mut total = 0;
        for (split, expect) in [("train", 4), ("val", 1), ("test", 2)] {
            let items = manifest.items(split).unwrap();
            assert_eq!(items.len(), expect, "split {split}");
            total += items.len();
            for item in items {
                assert!(item.gt.exists() && item.corrupted.exists() && item.mask.exists());
                let loaded = store::load_item(&item).unwrap();
                loaded.gt.validate().unwrap();
                assert_eq!(loaded.mask.dim(), loaded.gt.brain_mask.dim());
            }
        }
        assert_eq!(total, 7);
    }

    fn temp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "fod-phantom-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
