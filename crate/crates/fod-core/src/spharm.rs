//! Even-order real spherical harmonics: volume indexing, basis evaluation,
//! per-order normalization, peak extraction, and angular metrics.
//!
//! An FOD image stores, per voxel, the coefficients of an antipodally
//! symmetric spherical function in the orthonormal real SPHARM basis
//! restricted to even orders 0..=8 (45 coefficients). Within order `l` the
//! basis functions are indexed by m = -l..=l:
//!
//! ```text
//!   Y_{l,m} = sqrt(2) * K_l^|m| * P_l^|m|(cos theta) * sin(|m| phi)   m < 0
//!   Y_{l,0} =           K_l^0   * P_l^0  (cos theta)                  m = 0
//!   Y_{l,m} = sqrt(2) * K_l^m   * P_l^m  (cos theta) * cos(m phi)     m > 0
//! ```
//!
//! with K_l^m = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!) and the Condon-Shortley
//! phase carried by P_l^m. This basis is orthonormal under the uniform
//! sphere measure and exactly even, so B(d) = B(-d) for all directions.

use ndarray::{Array2, Array3, Array4};

use crate::error::{FodError, Result};
use crate::sphere::{antipodal_angle_deg, Tessellation};

/// Highest SPHARM order carried by FOD images.
pub const L_MAX: usize = 8;
/// Coefficient count for even orders 0..=8.
pub const N_VOLUMES: usize = 45;
/// The even orders, in volume order.
pub const EVEN_ORDERS: [usize; 5] = [0, 2, 4, 6, 8];

/// Address of one FOD volume: its order, position within the order, and
/// flat index into the coefficient axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeIndex {
    pub order: usize,
    pub m_index: usize,
    pub flat: usize,
}

impl VolumeIndex {
    /// Signed degree m = m_index - order.
    pub fn m(&self) -> i64 {
        self.m_index as i64 - self.order as i64
    }
}

/// Enumerate all volumes for even orders up to `l_max`, ordered by
/// ascending order then m_index, with contiguous flat indices from 0.
pub fn volume_index_table(l_max: usize) -> Result<Vec<VolumeIndex>> {
    if l_max % 2 != 0 {
        return Err(FodError::invalid(format!("l_max must be even, got {l_max}")));
    }
    let mut table = Vec::new();
    let mut flat = 0;
    for order in (0..=l_max).step_by(2) {
        for m_index in 0..(2 * order + 1) {
            table.push(VolumeIndex { order, m_index, flat });
            flat += 1;
        }
    }
    Ok(table)
}

/// Order of each flat volume index for l_max = 8.
pub fn order_of_flat() -> [usize; N_VOLUMES] {
    let mut orders = [0usize; N_VOLUMES];
    for v in volume_index_table(L_MAX).expect("static l_max") {
        orders[v.flat] = v.order;
    }
    orders
}

/// Flat index of the first volume of each even order: [0, 1, 6, 15, 28].
pub fn first_flat_of_order() -> [usize; 5] {
    let mut firsts = [0usize; 5];
    let mut flat = 0;
    for (i, order) in EVEN_ORDERS.iter().enumerate() {
        firsts[i] = flat;
        flat += 2 * order + 1;
    }
    firsts
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Associated Legendre P_l^m(x) for 0 <= m <= l <= L, Condon-Shortley
/// phase included. Returns values indexed by (l, m) in a flat vec.
fn assoc_legendre_all(l_max: usize, x: f64) -> Vec<f64> {
    let idx = |l: usize, m: usize| l * (l_max + 1) + m;
    let mut p = vec![0.0; (l_max + 1) * (l_max + 1)];
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    p[idx(0, 0)] = 1.0;
    for m in 1..=l_max {
        p[idx(m, m)] = -p[idx(m - 1, m - 1)] * (2 * m - 1) as f64 * somx2;
    }
    for m in 0..l_max {
        p[idx(m + 1, m)] = x * (2 * m + 1) as f64 * p[idx(m, m)];
    }
    for m in 0..=l_max {
        for l in (m + 2)..=l_max {
            p[idx(l, m)] = (x * (2 * l - 1) as f64 * p[idx(l - 1, m)]
                - (l + m - 1) as f64 * p[idx(l - 2, m)])
                / (l - m) as f64;
        }
    }
    p
}

fn norm_k(l: usize, m: usize) -> f64 {
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - m) / factorial(l + m))
        .sqrt()
}

/// Evaluate the even real SPHARM basis at `directions`.
///
/// Row d, column j holds Y_j(directions[d]) for the volume table of
/// `l_max`. Directions must be unit vectors.
pub fn spharm_basis(directions: &[[f64; 3]], l_max: usize) -> Result<Array2<f64>> {
    let table = volume_index_table(l_max)?;
    for (i, d) in directions.iter().enumerate() {
        let n2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        if (n2 - 1.0).abs() > 1e-6 {
            return Err(FodError::invalid(format!(
                "direction {i} is not unit-norm (|d|^2 = {n2})"
            )));
        }
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut basis = Array2::<f64>::zeros((directions.len(), table.len()));
    for (row, d) in directions.iter().enumerate() {
        let cos_theta = d[2].clamp(-1.0, 1.0);
        let phi = d[1].atan2(d[0]);
        let p = assoc_legendre_all(l_max, cos_theta);
        for v in &table {
            let l = v.order;
            let m = v.m();
            let am = m.unsigned_abs() as usize;
            let plm = p[l * (l_max + 1) + am];
            let k = norm_k(l, am);
            let val = if m < 0 {
                sqrt2 * k * plm * (am as f64 * phi).sin()
            } else if m == 0 {
                k * plm
            } else {
                sqrt2 * k * plm * (am as f64 * phi).cos()
            };
            basis[(row, v.flat)] = val;
        }
    }
    Ok(basis)
}

/// Amplitudes of a 45-coefficient FOD at the given directions.
pub fn evaluate_fod(coeffs: &[f32], directions: &[[f64; 3]]) -> Result<Vec<f64>> {
    if coeffs.len() != N_VOLUMES {
        return Err(FodError::invalid(format!(
            "expected {N_VOLUMES} coefficients, got {}",
            coeffs.len()
        )));
    }
    if !coeffs.iter().all(|c| c.is_finite()) {
        return Err(FodError::invalid("coefficients must be finite"));
    }
    let basis = spharm_basis(directions, L_MAX)?;
    let mut out = vec![0.0; directions.len()];
    for (row, amp) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..N_VOLUMES {
            acc += basis[(row, j)] * coeffs[j] as f64;
        }
        *amp = acc;
    }
    Ok(out)
}

/// 4D FOD image: X*Y*Z voxels, 45 coefficient volumes, plus a brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FodImage {
    pub dims: (usize, usize, usize),
    /// Coefficients, shape (X, Y, Z, 45).
    pub coeffs: Array4<f32>,
    /// Isotropic voxel size in mm; metadata only.
    pub voxel_size: f32,
    pub brain_mask: Array3<u8>,
}

impl FodImage {
    pub fn zeros(dims: (usize, usize, usize), voxel_size: f32) -> Self {
        FodImage {
            dims,
            coeffs: Array4::zeros((dims.0, dims.1, dims.2, N_VOLUMES)),
            voxel_size,
            brain_mask: Array3::zeros((dims.0, dims.1, dims.2)),
        }
    }

    /// Check the structural invariants: finite coefficients, exact zeros
    /// outside the brain mask, matching shapes.
    pub fn validate(&self) -> Result<()> {
        let (x, y, z) = self.dims;
        if self.coeffs.dim() != (x, y, z, N_VOLUMES) {
            return Err(FodError::invalid("coeffs shape does not match dims"));
        }
        if self.brain_mask.dim() != (x, y, z) {
            return Err(FodError::invalid("brain_mask shape does not match dims"));
        }
        for ((i, j, k, v), &c) in self.coeffs.indexed_iter() {
            if !c.is_finite() {
                return Err(FodError::invalid(format!(
                    "non-finite coefficient at ({i},{j},{k},{v})"
                )));
            }
            if self.brain_mask[(i, j, k)] == 0 && c != 0.0 {
                return Err(FodError::invalid(format!(
                    "nonzero coefficient outside brain at ({i},{j},{k},{v})"
                )));
            }
        }
        Ok(())
    }

    pub fn coeffs_at(&self, x: usize, y: usize, z: usize) -> Vec<f32> {
        (0..N_VOLUMES).map(|v| self.coeffs[(x, y, z, v)]).collect()
    }

    /// Derive a brain mask from the nonzero support of the coefficients.
    pub fn support_mask(coeffs: &Array4<f32>) -> Array3<u8> {
        let (x, y, z, _) = coeffs.dim();
        let mut mask = Array3::<u8>::zeros((x, y, z));
        for ((i, j, k, _), &c) in coeffs.indexed_iter() {
            if c != 0.0 {
                mask[(i, j, k)] = 1;
            }
        }
        mask
    }
}

/// Per-order normalization scales. Scale-only (no offset) so zero maps to
/// zero and brain-exterior voxels stay exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTable {
    /// One entry per even order 0,2,4,6,8.
    pub scale: [f32; 5],
}

pub const SCALE_FLOOR: f32 = 1e-8;

impl ScaleTable {
    pub fn identity() -> Self {
        ScaleTable { scale: [1.0; 5] }
    }

    pub fn scale_of_order(&self, order: usize) -> f32 {
        self.scale[order / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().all(|s| *s >= SCALE_FLOOR && s.is_finite()) {
            Ok(())
        } else {
            Err(FodError::invalid("scale table entries must be >= 1e-8 and finite"))
        }
    }
}

/// Compute normalization scales from a training set: the L=0 scale is the
/// maximum L=0 coefficient over brain voxels, higher orders use the maximum
/// absolute value over all volumes of that order. Values are clamped below
/// at 1e-8 so degenerate orders cannot produce division by zero.
pub fn compute_scale_table(training_images: &[&FodImage]) -> Result<ScaleTable> {
    if training_images.is_empty() {
        return Err(FodError::invalid("scale table needs at least one image"));
    }
    if training_images
        .iter()
        .all(|img| img.brain_mask.iter().all(|&m| m == 0))
    {
        return Err(FodError::invalid("scale table needs non-empty brain masks"));
    }
    let orders = order_of_flat();
    let mut scale = [f32::NEG_INFINITY; 5];
    scale[0] = 0.0;
    for img in training_images {
        for ((x, y, z, v), &c) in img.coeffs.indexed_iter() {
            if img.brain_mask[(x, y, z)] == 0 {
                continue;
            }
            let o = orders[v] / 2;
            if o == 0 {
                scale[0] = scale[0].max(c);
            } else {
                scale[o] = scale[o].max(c.abs());
            }
        }
    }
    for s in scale.iter_mut() {
        *s = s.max(SCALE_FLOOR);
    }
    Ok(ScaleTable { scale })
}

/// Divide every coefficient by its order's scale.
pub fn normalize(image: &FodImage, table: &ScaleTable) -> FodImage {
    scale_image(image, table, |c, s| c / s)
}

/// Multiply every coefficient back by its order's scale.
pub fn denormalize(image: &FodImage, table: &ScaleTable) -> FodImage {
    scale_image(image, table, |c, s| c * s)
}

fn scale_image(image: &FodImage, table: &ScaleTable, f: impl Fn(f32, f32) -> f32) -> FodImage {
    let orders = order_of_flat();
    let mut out = image.clone();
    for ((_, _, _, v), c) in out.coeffs.indexed_iter_mut() {
        *c = f(*c, table.scale[orders[v] / 2]);
    }
    out
}

/// Up to three FOD peaks: unit directions with amplitudes sorted
/// descending.
#[derive(Debug, Clone, Default)]
pub struct PeakSet {
    pub directions: Vec<[f64; 3]>,
    pub amplitudes: Vec<f64>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Default raw-amplitude threshold for peak extraction.
pub const PEAK_AMP_THRESHOLD: f64 = 0.5;
/// Minimum angular separation between reported peaks, degrees.
pub const PEAK_EXCLUSION_DEG: f64 = 25.0;
/// Maximum number of reported peaks.
pub const MAX_PEAKS: usize = 3;

/// A hemisphere tessellation with its precomputed basis matrix; the sampling
/// grid peak extraction runs on.
#[derive(Debug, Clone)]
pub struct PeakGrid {
    pub tess: Tessellation,
    basis: Array2<f64>,
}

impl PeakGrid {
    pub fn new(tess: Tessellation) -> Result<PeakGrid> {
        if tess.is_empty() {
            return Err(FodError::invalid("empty tessellation"));
        }
        let basis = spharm_basis(&tess.vertices, L_MAX)?;
        Ok(PeakGrid { tess, basis })
    }

    /// Level-4 icosphere grid, the default for evaluation.
    pub fn default_grid() -> PeakGrid {
        PeakGrid::new(Tessellation::hemisphere(4)).expect("level-4 grid is valid")
    }

    pub fn amplitudes(&self, coeffs: &[f32]) -> Vec<f64> {
        let n = self.tess.len();
        let mut amps = vec![0.0; n];
        for (i, amp) in amps.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..N_VOLUMES {
                acc += self.basis[(i, j)] * coeffs[j] as f64;
            }
            *amp = acc;
        }
        amps
    }
}

/// Extract FOD peaks: sample amplitudes on the grid, keep vertices that
/// strictly dominate their graph neighbors and exceed `amp_threshold`, then
/// greedily suppress candidates within `PEAK_EXCLUSION_DEG` of a stronger
/// one, returning at most `max_peaks` peaks sorted by amplitude.
pub fn extract_peaks(
    coeffs: &[f32],
    grid: &PeakGrid,
    amp_threshold: f64,
    max_peaks: usize,
) -> Result<PeakSet> {
    if coeffs.len() != N_VOLUMES {
        return Err(FodError::invalid(format!(
            "expected {N_VOLUMES} coefficients, got {}",
            coeffs.len()
        )));
    }
    let amps = grid.amplitudes(coeffs);
    let mut candidates: Vec<usize> = (0..grid.tess.len())
        .filter(|&i| {
            amps[i] > amp_threshold
                && grid.tess.neighbors[i].iter().all(|&j| amps[i] > amps[j])
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        amps[b].partial_cmp(&amps[a]).unwrap().then(a.cmp(&b))
    });

    let mut peaks = PeakSet::default();
    for &i in &candidates {
        if peaks.len() >= max_peaks {
            break;
        }
        let dir = grid.tess.vertices[i];
        let separated = peaks
            .directions
            .iter()
            .all(|&d| antipodal_angle_deg(d, dir) >= PEAK_EXCLUSION_DEG);
        if separated {
            peaks.directions.push(dir);
            peaks.amplitudes.push(amps[i]);
        }
    }
    Ok(peaks)
}

/// Smallest antipodally-symmetric angles (degrees) from the ground truth's
/// first and second peaks to any peak of `result`. An entry is `None` when
/// the corresponding ground-truth peak or any result peak is missing.
pub fn angular_difference(gt: &PeakSet, result: &PeakSet) -> (Option<f64>, Option<f64>) {
    let to_nearest = |target: [f64; 3]| -> Option<f64> {
        result
            .directions
            .iter()
            .map(|&d| antipodal_angle_deg(target, d))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    };
    let d1 = gt.directions.first().and_then(|&g| to_nearest(g));
    let d2 = gt.directions.get(1).and_then(|&g| to_nearest(g));
    (d1, d2)
}
