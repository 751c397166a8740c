//! Evaluation: per-order RMSE over masked voxels, peak angular differences,
//! FOD integrity, severity grouping, screening filters, and the ablation
//! comparison across denoiser variants.
//!
//! All aggregations run in a fixed voxel order with f64 accumulators, so
//! reports are reproducible to the bit.

use ndarray::Array3;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::denoiser::{DenoiserModel, Variant};
use crate::error::{FodError, Result};
use crate::kvtext::{KvDoc, KvSection};
use crate::restorer;
use crate::spharm::{
    angular_difference, extract_peaks, order_of_flat, FodImage, PeakGrid, EVEN_ORDERS,
    MAX_PEAKS, N_VOLUMES, PEAK_AMP_THRESHOLD,
};
use crate::store::{self, DatasetManifest};
use crate::trainer::configs_from_meta;

// ---------------------------------------------------------------------------
// RMSE
// ---------------------------------------------------------------------------

/// Squared-error sums per order, poolable across images.
#[derive(Debug, Clone, Default)]
pub struct RmseAccumulator {
    sq_sum: [f64; 5],
    count: [u64; 5],
}

impl RmseAccumulator {
    pub fn add_image(
        &mut self,
        gt: &FodImage,
        restored: &FodImage,
        mask: &Array3<u8>,
    ) -> Result<()> {
        if gt.dims != restored.dims {
            return Err(FodError::invalid("image dims mismatch"));
        }
        if !mask.iter().any(|&m| m == 1) {
            return Err(FodError::invalid("empty evaluation mask"));
        }
        let orders = order_of_flat();
        for ((i, j, k), &m) in mask.indexed_iter() {
            if m != 1 {
                continue;
            }
            for v in 0..N_VOLUMES {
                let d = restored.coeffs[(i, j, k, v)] as f64 - gt.coeffs[(i, j, k, v)] as f64;
                let o = orders[v] / 2;
                self.sq_sum[o] += d * d;
                self.count[o] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RmseAccumulator) {
        for o in 0..5 {
            self.sq_sum[o] += other.sq_sum[o];
            self.count[o] += other.count[o];
        }
    }

    pub fn report(&self) -> RmseReport {
        let mut per_order = [0.0; 5];
        for o in 0..5 {
            per_order[o] = if self.count[o] > 0 {
                (self.sq_sum[o] / self.count[o] as f64).sqrt()
            } else {
                0.0
            };
        }
        let total_sq: f64 = self.sq_sum.iter().sum();
        let total_n: u64 = self.count.iter().sum();
        RmseReport {
            per_order,
            overall: if total_n > 0 {
                (total_sq / total_n as f64).sqrt()
            } else {
                0.0
            },
        }
    }
}

/// Root-mean-squared error per even order plus the all-volume pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub per_order: [f64; 5],
    pub overall: f64,
}

/// RMSE over the masked voxels of one image pair, per order and overall,
/// on (denormalized) coefficients.
pub fn rmse_per_order(
    gt: &FodImage,
    restored: &FodImage,
    mask: &Array3<u8>,
) -> Result<RmseReport> {
    let mut acc = RmseAccumulator::default();
    acc.add_image(gt, restored, mask)?;
    Ok(acc.report())
}

// ---------------------------------------------------------------------------
// Angular differences
// ---------------------------------------------------------------------------

/// Streaming aggregate of per-voxel angular differences, poolable across
/// images.
#[derive(Debug, Clone, Default)]
pub struct AngularAccumulator {
    d1: Vec<f64>,
    d2: Vec<f64>,
    /// Masked voxels whose ground truth has a first (second) peak but were
    /// excluded because the restored FOD had no peaks.
    pub excluded_first: u64,
    pub excluded_second: u64,
    /// Masked voxels with no ground-truth peak at all.
    pub no_gt_peak: u64,
}

impl AngularAccumulator {
    pub fn add_image(
        &mut self,
        gt: &FodImage,
        restored: &FodImage,
        mask: &Array3<u8>,
        grid: &PeakGrid,
        threshold: f64,
    ) -> Result<()> {
        if gt.dims != restored.dims {
            return Err(FodError::invalid("image dims mismatch"));
        }
        // collect masked voxels in a fixed order, extract in parallel
        let voxels: Vec<(usize, usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &m)| m == 1)
            .map(|(idx, _)| idx)
            .collect();
        let per_voxel: Vec<(Option<f64>, Option<f64>, bool, bool, bool)> = voxels
            .par_iter()
            .map(|&(i, j, k)| {
                let gt_peaks =
                    extract_peaks(&gt.coeffs_at(i, j, k), grid, threshold, MAX_PEAKS)?;
                let res_peaks =
                    extract_peaks(&restored.coeffs_at(i, j, k), grid, threshold, MAX_PEAKS)?;
                if gt_peaks.is_empty() {
                    return Ok((None, None, false, false, true));
                }
                let (d1, d2) = angular_difference(&gt_peaks, &res_peaks);
                let excl1 = d1.is_none();
                let excl2 = gt_peaks.len() >= 2 && d2.is_none();
                Ok((d1, d2, excl1, excl2, false))
            })
            .collect::<Result<Vec<_>>>()?;
        for (d1, d2, excl1, excl2, no_gt) in per_voxel {
            if let Some(d) = d1 {
                self.d1.push(d);
            }
            if let Some(d) = d2 {
                self.d2.push(d);
            }
            self.excluded_first += excl1 as u64;
            self.excluded_second += excl2 as u64;
            self.no_gt_peak += no_gt as u64;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AngularAccumulator) {
        self.d1.extend_from_slice(&other.d1);
        self.d2.extend_from_slice(&other.d2);
        self.excluded_first += other.excluded_first;
        self.excluded_second += other.excluded_second;
        self.no_gt_peak += other.no_gt_peak;
    }

    pub fn report(&self) -> AngularReport {
        AngularReport {
            first: mean_std(&self.d1),
            second: mean_std(&self.d2),
            n_first: self.d1.len() as u64,
            n_second: self.d2.len() as u64,
            excluded_first: self.excluded_first,
            excluded_second: self.excluded_second,
            no_gt_peak: self.no_gt_peak,
        }
    }
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Angular differences (degrees) to the ground truth's first and second
/// peaks: mean and std over included voxels, with exclusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularReport {
    pub first: Option<(f64, f64)>,
    pub second: Option<(f64, f64)>,
    pub n_first: u64,
    pub n_second: u64,
    pub excluded_first: u64,
    pub excluded_second: u64,
    pub no_gt_peak: u64,
}

/// Per-voxel angular report for one image pair.
pub fn angular_report(
    gt: &FodImage,
    restored: &FodImage,
    mask: &Array3<u8>,
    threshold: f64,
) -> Result<AngularReport> {
    let grid = PeakGrid::default_grid();
    let mut acc = AngularAccumulator::default();
    acc.add_image(gt, restored, mask, &grid, threshold)?;
    Ok(acc.report())
}

// ---------------------------------------------------------------------------
// Integrity and screening
// ---------------------------------------------------------------------------

/// Mean of the L=0 volume over an ROI: the FOD-integrity proxy.
pub fn integrity(image: &FodImage, roi: &Array3<u8>) -> Result<f64> {
    if roi.dim() != image.brain_mask.dim() {
        return Err(FodError::invalid("roi dims mismatch"));
    }
    let mut sum = 0.0;
    let mut n = 0u64;
    for ((i, j, k), &m) in roi.indexed_iter() {
        if m == 1 {
            sum += image.coeffs[(i, j, k, 0)] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(FodError::invalid("empty roi"));
    }
    Ok(sum / n as f64)
}

/// Screening thresholds for selecting low-distortion cases: mean signal
/// loss below `max_signal_loss` and integrity above `min_integrity`.
#[derive(Debug, Clone, Copy)]
pub struct ScreeningThresholds {
    pub max_signal_loss: f64,
    pub min_integrity: f64,
}

impl Default for ScreeningThresholds {
    fn default() -> Self {
        ScreeningThresholds {
            max_signal_loss: 0.25,
            min_integrity: 0.09,
        }
    }
}

impl ScreeningThresholds {
    /// `signal_loss` is the lost integrity fraction: 1 - corrupted / intact.
    pub fn passes(&self, signal_loss: f64, integrity: f64) -> bool {
        signal_loss < self.max_signal_loss && integrity > self.min_integrity
    }
}

// ---------------------------------------------------------------------------
// Severity grouping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IntegrityRecord {
    pub id: String,
    pub severity: f64,
    pub integrity_before: f64,
    pub integrity_after: f64,
}

#[derive(Debug, Clone)]
pub struct GroupSummary {
    pub index: usize,
    pub n: usize,
    pub severity_range: (f64, f64),
    pub before: Distribution,
    pub after: Distribution,
}

#[derive(Debug, Clone)]
pub struct Distribution {
    pub mean: f64,
    pub std: f64,
    pub quartiles: [f64; 3],
}

fn distribution(values: &mut [f64]) -> Distribution {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mean, std) = mean_std(values).expect("non-empty group");
    let q = |p: f64| -> f64 {
        let pos = p * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    Distribution {
        mean,
        std,
        quartiles: [q(0.25), q(0.5), q(0.75)],
    }
}

/// Sort records by severity and split into `n_groups` contiguous groups as
/// equal as possible, the remainder going to the earlier groups.
pub fn severity_grouping(
    records: &[IntegrityRecord],
    n_groups: usize,
) -> Result<Vec<GroupSummary>> {
    if n_groups == 0 || records.len() < n_groups {
        return Err(FodError::invalid(format!(
            "need at least {n_groups} records, got {}",
            records.len()
        )));
    }
    let mut sorted: Vec<&IntegrityRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.severity
            .partial_cmp(&b.severity)
            .unwrap()
            .then_with(|| a.id.cmp(&b.id))
    });

    let base = sorted.len() / n_groups;
    let remainder = sorted.len() % n_groups;
    let mut out = Vec::with_capacity(n_groups);
    let mut cursor = 0;
    for gi in 0..n_groups {
        let size = base + usize::from(gi < remainder);
        let chunk = &sorted[cursor..cursor + size];
        cursor += size;
        let mut before: Vec<f64> = chunk.iter().map(|r| r.integrity_before).collect();
        let mut after: Vec<f64> = chunk.iter().map(|r| r.integrity_after).collect();
        out.push(GroupSummary {
            index: gi,
            n: size,
            severity_range: (
                chunk.first().map(|r| r.severity).unwrap_or(0.0),
                chunk.last().map(|r| r.severity).unwrap_or(0.0),
            ),
            before: distribution(&mut before),
            after: distribution(&mut after),
        });
    }
    Ok(out)
}

/// Max - min of the per-group means.
pub fn group_mean_spread(groups: &[GroupSummary], after: bool) -> f64 {
    let means: Vec<f64> = groups
        .iter()
        .map(|g| if after { g.after.mean } else { g.before.mean })
        .collect();
    let mx = means.iter().cloned().fold(f64::MIN, f64::max);
    let mn = means.iter().cloned().fold(f64::MAX, f64::min);
    mx - mn
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation and ablation comparison
// ---------------------------------------------------------------------------

/// Per-item evaluation record produced by `evaluate_checkpoint`.
#[derive(Debug, Clone)]
pub struct ItemEval {
    pub id: String,
    pub severity: f64,
    pub integrity_gt: f64,
    pub integrity_corrupted: f64,
    pub integrity_restored: f64,
    pub rmse_overall: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub variant: Variant,
    pub rmse: RmseReport,
    pub angular: AngularReport,
    pub items: Vec<ItemEval>,
}

/// Load a checkpoint, restore every test image, and aggregate the metrics.
/// Sampling always uses the schedule the checkpoint was trained with.
pub fn evaluate_checkpoint(
    ckpt_path: &Path,
    manifest: &DatasetManifest,
    split: &str,
    seed: u64,
) -> Result<EvalOutcome> {
    let ckpt = store::load_checkpoint(ckpt_path)?;
    let (net_cfg, train_cfg) = configs_from_meta(&ckpt.meta)?;
    let variant = net_cfg.variant;
    let mut model = DenoiserModel::new(net_cfg, train_cfg.seed)?;
    model.load_params(ckpt.params.into_iter().map(|(_, v)| v).collect())?;
    let scale = ckpt.scale;
    let sched = train_cfg.schedule()?;

    let grid = PeakGrid::default_grid();
    let mut rmse_acc = RmseAccumulator::default();
    let mut ang_acc = AngularAccumulator::default();
    let mut items = Vec::new();

    for item_ref in manifest.items(split)? {
        let item = store::load_item(&item_ref)?;
        let restored = restorer::restore_image(
            &model,
            &item.corrupted,
            &item.mask,
            &scale,
            &sched,
            seed ^ crate::kvtext::fnv1a64(item.id.as_bytes()),
        )?;
        let mut item_rmse = RmseAccumulator::default();
        item_rmse.add_image(&item.gt, &restored, &item.mask)?;
        rmse_acc.merge(&item_rmse);
        ang_acc.add_image(&item.gt, &restored, &item.mask, &grid, PEAK_AMP_THRESHOLD)?;
        items.push(ItemEval {
            id: item.id.clone(),
            severity: item.severity as f64,
            integrity_gt: integrity(&item.gt, &item.mask)?,
            integrity_corrupted: integrity(&item.corrupted, &item.mask)?,
            integrity_restored: integrity(&restored, &item.mask)?,
            rmse_overall: item_rmse.report().overall,
        });
    }
    Ok(EvalOutcome {
        variant,
        rmse: rmse_acc.report(),
        angular: ang_acc.report(),
        items,
    })
}

/// Evaluate the four ablation variants and emit comparison rows. All four
/// checkpoints must exist; missing ones are reported together.
pub fn run_baselines(
    checkpoints: &BTreeMap<&'static str, PathBuf>,
    manifest: &DatasetManifest,
    split: &str,
    seed: u64,
) -> Result<Vec<EvalOutcome>> {
    let missing: Vec<&str> = Variant::all()
        .iter()
        .map(|v| v.as_str())
        .filter(|name| {
            checkpoints
                .get(name)
                .map(|p| !p.exists())
                .unwrap_or(true)
        })
        .collect();
    if !missing.is_empty() {
        return Err(FodError::Config(format!(
            "missing variant checkpoints: {}",
            missing.join(", ")
        )));
    }
    Variant::all()
        .iter()
        .map(|v| {
            evaluate_checkpoint(&checkpoints[v.as_str()], manifest, split, seed)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report formatting
// ---------------------------------------------------------------------------

pub fn format_rmse_table(rows: &[EvalOutcome]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "L=0", "L=2", "L=4", "L=6", "L=8", "FODs"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            row.variant.as_str(),
            row.rmse.per_order[0],
            row.rmse.per_order[1],
            row.rmse.per_order[2],
            row.rmse.per_order[3],
            row.rmse.per_order[4],
            row.rmse.overall,
        ));
    }
    out
}

pub fn format_angular_table(rows: &[EvalOutcome]) -> String {
    let fmt = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => format!("{m:.1} +- {s:.1}"),
        None => "n/a".to_string(),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>16} {:>16} {:>10} {:>10}\n",
        "method", "1st peak (deg)", "2nd peak (deg)", "n1", "n2"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>10} {:>10}\n",
            row.variant.as_str(),
            fmt(row.angular.first),
            fmt(row.angular.second),
            row.angular.n_first,
            row.angular.n_second,
        ));
    }
    out
}

/// Machine-readable report document for one or more evaluated variants.
pub fn report_doc(rows: &[EvalOutcome]) -> KvDoc {
    let mut doc = KvDoc::new();
    for row in rows {
        let mut sec = KvSection::new(format!("rmse {}", row.variant.as_str()));
        for (o, order) in EVEN_ORDERS.iter().enumerate() {
            sec.set(format!("l{order}"), format!("{:.6}", row.rmse.per_order[o]));
        }
        sec.set("overall", format!("{:.6}", row.rmse.overall));
        doc.push(sec);

        let mut sec = KvSection::new(format!("angular {}", row.variant.as_str()));
        if let Some((m, s)) = row.angular.first {
            sec.set("first_mean_deg", format!("{m:.3}"))
                .set("first_std_deg", format!("{s:.3}"));
        }
        if let Some((m, s)) = row.angular.second {
            sec.set("second_mean_deg", format!("{m:.3}"))
                .set("second_std_deg", format!("{s:.3}"));
        }
        sec.set("n_first", row.angular.n_first)
            .set("n_second", row.angular.n_second)
            .set("excluded_first", row.angular.excluded_first)
            .set("excluded_second", row.angular.excluded_second)
            .set("no_gt_peak", row.angular.no_gt_peak);
        doc.push(sec);

        let mut sec = KvSection::new(format!("items {}", row.variant.as_str()));
        for item in &row.items {
            sec.set(
                &item.id,
                format!(
                    "severity={:.3} gt={:.5} corrupted={:.5} restored={:.5} rmse={:.5}",
                    item.severity,
                    item.integrity_gt,
                    item.integrity_corrupted,
                    item.integrity_restored,
                    item.rmse_overall
                ),
            );
        }
        doc.push(sec);
    }
    doc
}

/// Grouped box-style SVG of integrity distributions before/after
/// restoration, one pair of boxes per severity group.
pub fn write_integrity_svg(path: &Path, groups: &[GroupSummary]) -> Result<()> {
    let width = 120 * groups.len().max(1) + 80;
    let height = 320;
    let max_val = groups
        .iter()
        .flat_map(|g| [g.before.quartiles[2], g.after.quartiles[2], g.before.mean, g.after.mean])
        .fold(0.01f64, f64::max)
        * 1.2;
    let y = |v: f64| 280.0 - (v / max_val) * 240.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"40\" y1=\"280\" x2=\"{}\" y2=\"280\" stroke=\"black\"/>\n",
        width - 20
    ));
    for (gi, g) in groups.iter().enumerate() {
        let x0 = 60 + gi * 120;
        for (off, dist, color) in [(0usize, &g.before, "#888888"), (40, &g.after, "#d95f02")] {
            let x = x0 + off;
            let [q1, q2, q3] = dist.quartiles;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{:.1}\" width=\"30\" height=\"{:.1}\" fill=\"{color}\" fill-opacity=\"0.6\" stroke=\"{color}\"/>\n",
                y(q3),
                (y(q1) - y(q3)).max(1.0)
            ));
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                y(q2),
                x + 30,
                y(q2)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"300\" font-size=\"12\">G{} (n={})</text>\n",
            x0,
            gi + 1,
            g.n
        ));
    }
    svg.push_str(&format!(
        "<text x=\"40\" y=\"20\" font-size=\"12\">integrity by severity group: gray = corrupted, orange = restored (max {max_val:.3})</text>\n"
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| FodError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, PhantomConfig};
    use crate::rng::Rng;

    fn phantom_pair() -> (FodImage, FodImage, Array3<u8>) {
        let cfg = PhantomConfig {
            seed: 13,
            sigma: 0.01,
            ..Default::default()
        };
        let ph = phantom::make_phantom_full(&cfg).unwrap();
        let mut rng = Rng::from_seed(3);
        let dmask =
            phantom::place_mask(&ph.image, &ph.truth.regions, 2.2, 0.6, &mut rng).unwrap();
        let corrupted = phantom::apply_signal_loss(&ph.image, &dmask, &mut rng).unwrap();
        (ph.image, corrupted, dmask.mask)
    }

    #[test]
    fn rmse_identity_is_zero() {
        let (gt, _, mask) = phantom_pair();
        let r = rmse_per_order(&gt, &gt, &mask).unwrap();
        assert_eq!(r.per_order, [0.0; 5]);
        assert_eq!(r.overall, 0.0);
    }

    #[test]
    fn rmse_l0_only_perturbation() {
        let (gt, _, mask) = phantom_pair();
        let mut restored = gt.clone();
        for ((i, j, k), &m) in mask.indexed_iter() {
            if m == 1 {
                restored.coeffs[(i, j, k, 0)] += 0.01;
            }
        }
        let r = rmse_per_order(&gt, &restored, &mask).unwrap();
        assert!((r.per_order[0] - 0.01).abs() < 1e-6, "{}", r.per_order[0]);
        assert_eq!(r.per_order[4], 0.0);
        let expect_overall = 0.01 / (45f64).sqrt();
        assert!(
            (r.overall - expect_overall).abs() < 1e-6,
            "{} vs {expect_overall}",
            r.overall
        );
    }

    #[test]
    fn rmse_empty_mask_rejected() {
        let (gt, _, _) = phantom_pair();
        let empty = Array3::<u8>::zeros(gt.brain_mask.dim());
        assert!(rmse_per_order(&gt, &gt, &empty).is_err());
    }

    #[test]
    fn rmse_overall_pools_per_order() {
        let (gt, corrupted, mask) = phantom_pair();
        let r = rmse_per_order(&gt, &corrupted, &mask).unwrap();
        // overall^2 = volume-count-weighted mean of per-order^2
        let counts = [1.0, 5.0, 9.0, 13.0, 17.0];
        let weighted: f64 = (0..5)
            .map(|o| counts[o] / 45.0 * r.per_order[o] * r.per_order[o])
            .sum();
        assert!(
            (r.overall * r.overall - weighted).abs() < 1e-12,
            "{} vs {weighted}",
            r.overall * r.overall
        );
    }

    #[test]
    fn angular_identity_is_zero() {
        let (gt, _, mask) = phantom_pair();
        let rep = angular_report(&gt, &gt, &mask, PEAK_AMP_THRESHOLD).unwrap();
        let (m1, s1) = rep.first.expect("fiber voxels have peaks");
        assert!(m1 < 1e-3 && s1 < 1e-3, "{m1} {s1}"); // acos rounding at identical vertices
        assert_eq!(rep.excluded_first, 0);
    }

    #[test]
    fn angular_all_zero_restored_is_excluded() {
        let (gt, _, mask) = phantom_pair();
        let mut zero = gt.clone();
        zero.coeffs.fill(0.0);
        zero.brain_mask.fill(1);
        let rep = angular_report(&gt, &zero, &mask, PEAK_AMP_THRESHOLD).unwrap();
        assert_eq!(rep.first, None);
        assert_eq!(rep.n_first, 0);
        assert!(rep.excluded_first > 0);
    }

    #[test]
    fn integrity_mean_and_monotonicity() {
        let (gt, corrupted, mask) = phantom_pair();
        let before = integrity(&gt, &mask).unwrap();
        let after = integrity(&corrupted, &mask).unwrap();
        assert!(after < before, "{after} vs {before}");

        let mut img = FodImage::zeros((4, 4, 4), 1.0);
        img.brain_mask.fill(1);
        for c in img.coeffs.index_axis_mut(ndarray::Axis(3), 0).iter_mut() {
            *c = 0.42;
        }
        let roi = Array3::<u8>::from_elem((4, 4, 4), 1);
        assert!((integrity(&img, &roi).unwrap() - 0.42).abs() < 1e-7);

        let empty = Array3::<u8>::zeros((4, 4, 4));
        assert!(integrity(&img, &empty).is_err());
    }

    #[test]
    fn screening_defaults() {
        let s = ScreeningThresholds::default();
        assert!(s.passes(0.1, 0.2));
        assert!(!s.passes(0.3, 0.2));
        assert!(!s.passes(0.1, 0.05));
    }

    fn records(n: usize) -> Vec<IntegrityRecord> {
        (0..n)
            .map(|i| IntegrityRecord {
                id: format!("r{i:04}"),
                severity: i as f64 / n as f64,
                integrity_before: 0.2 - 0.1 * (i as f64 / n as f64),
                integrity_after: 0.19,
            })
            .collect()
    }

    #[test]
    fn grouping_sizes_follow_the_stated_rule() {
        let groups = severity_grouping(&records(1172), 5).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.n).collect();
        assert_eq!(sizes, vec![235, 235, 234, 234, 234]);

        let groups = severity_grouping(&records(10), 5).unwrap();
        let sizes: Vec<usize> = groups.iter().map(|g| g.n).collect();
        assert_eq!(sizes, vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn grouping_is_a_sorted_partition() {
        let recs = records(23);
        let groups = severity_grouping(&recs, 5).unwrap();
        let total: usize = groups.iter().map(|g| g.n).sum();
        assert_eq!(total, 23);
        for w in groups.windows(2) {
            assert!(w[0].severity_range.1 <= w[1].severity_range.0 + 1e-12);
        }
        assert!(severity_grouping(&records(4), 5).is_err());
    }

    #[test]
    fn grouping_spread_reflects_attenuation() {
        let groups = severity_grouping(&records(50), 5).unwrap();
        let before = group_mean_spread(&groups, false);
        let after = group_mean_spread(&groups, true);
        assert!(before > 0.05);
        assert!(after < 1e-9);
    }

    #[test]
    fn report_tables_have_expected_layout() {
        let rows = vec![EvalOutcome {
            variant: Variant::Full,
            rmse: RmseReport {
                per_order: [0.01, 0.02, 0.03, 0.04, 0.05],
                overall: 0.03,
            },
            angular: AngularReport {
                first: Some((2.0, 0.8)),
                second: Some((7.2, 1.4)),
                n_first: 100,
                n_second: 50,
                excluded_first: 3,
                excluded_second: 8,
                no_gt_peak: 1,
            },
            items: vec![],
        }];
        let rmse_table = format_rmse_table(&rows);
        let header = rmse_table.lines().next().unwrap();
        for col in ["L=0", "L=2", "L=4", "L=6", "L=8", "FODs"] {
            assert!(header.contains(col), "missing column {col}");
        }
        let ang = format_angular_table(&rows);
        assert!(ang.contains("1st peak"));
        assert!(ang.contains("2nd peak"));
        let doc = report_doc(&rows);
        assert_eq!(doc.get("rmse full", "overall"), Some("0.030000"));
    }

    #[test]
    fn identical_checkpoints_give_identical_rows() {
        use crate::denoiser::{NetConfig, Variant};
        use crate::phantom::DatasetSpec;
        use crate::trainer::{TrainConfig, Trainer};

        let dir = std::env::temp_dir().join(format!(
            "fod-eval-rows-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        let mut spec = DatasetSpec::desk_scale(&dir, 5);
        spec.n_train = 2;
        spec.n_val = 1;
        spec.n_test = 1;
        spec.template.dims = (8, 8, 8);
        spec.mask_radius = 1.6;
        let summary = crate::phantom::make_dataset(&spec).unwrap();
        let manifest = DatasetManifest::load(summary.manifest_path).unwrap();
        let net = NetConfig {
            base: 4,
            mults: vec![1, 2],
            attn_levels: vec![1],
            emb_dim: 16,
            patch: 8,
            variant: Variant::Vol,
            zero_init_output: true,
        };
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 2,
            lr_initial: 1e-3,
            lr_late: 1e-4,
            t_steps: 10,
            beta_start: 1e-3,
            beta_end: 0.6,
            val_draws_per_image: 2,
            seed: 3,
            ..Default::default()
        };
        let mut tr = Trainer::new(net, cfg, &manifest).unwrap();
        let best = tr.fit(&dir).unwrap();
        let copy = dir.join("copy.fodk");
        std::fs::copy(&best, &copy).unwrap();

        let a = evaluate_checkpoint(&best, &manifest, "test", 9).unwrap();
        let b = evaluate_checkpoint(&copy, &manifest, "test", 9).unwrap();
        assert_eq!(a.rmse, b.rmse);
        assert_eq!(a.angular, b.angular);
    }

    #[test]
    fn svg_is_written() {
        let groups = severity_grouping(&records(20), 5).unwrap();
        let path = std::env::temp_dir().join(format!(
            "fod-eval-{}-{}.svg",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        write_integrity_svg(&path, &groups).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("G5"));
    }
}
