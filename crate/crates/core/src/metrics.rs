//! Dice, average surface distance and HD95 on label volumes.
//!
//! Surfaces are 6-connected boundary voxels (foreground with a background or
//! out-of-bounds face neighbor) placed at voxel centers `index * spacing`.
//! Distances are Euclidean in mm. HD95 is the 95th percentile of the pooled
//! directed nearest-surface distances, interpolated linearly between closest
//! ranks: for sorted values `v[0..n]`, position `q/100 * (n - 1)`.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const HD_PERCENTILE: f64 = 95.0;

/// Boundary voxel centers in physical coordinates, in raster order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_dims(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Overlap of `class` between two label maps; 1.0 when both are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    Ok(dice_masks(&pred.class_mask(class), &gt.class_mask(class)))
}

pub fn dice_masks(a: &[bool], b: &[bool]) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

pub fn extract_surface(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> SurfaceSet {
    let [d, h, w] = dims;
    assert_eq!(mask.len(), d * h * w, "mask length does not match dims");
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if boundary {
                    points.push([
                        z as f64 * spacing[0],
                        y as f64 * spacing[1],
                        x as f64 * spacing[2],
                    ]);
                }
            }
        }
    }
    SurfaceSet { points }
}

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    dz * dz + dy * dy + dx * dx
}

/// Static 3-d tree for exact nearest-neighbor queries.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        Self { points, order }
    }

    fn build(points: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (lo, hi) = idx.split_at_mut(mid);
        Self::build(points, lo, depth + 1);
        Self::build(points, &mut hi[1..], depth + 1);
    }

    /// Smallest squared distance from `q` to any point.
    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, q, &mut best);
        best
    }

    fn search(&self, idx: &[usize], depth: usize, q: &[f64; 3], best: &mut f64) {
        if idx.is_empty() {
            return;
        }
        let mid = idx.len() / 2;
        let p = &self.points[idx[mid]];
        let d = squared_distance(p, q);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&idx[..mid], &idx[mid + 1..])
        } else {
            (&idx[mid + 1..], &idx[..mid])
        };
        self.search(near, depth + 1, q, best);
        // A squared sum of non-negative terms never rounds below any one term,
        // so this cut cannot discard the exact minimum.
        if diff * diff <= *best {
            self.search(far, depth + 1, q, best);
        }
    }
}

/// Directed nearest-surface distances from every point of `from` to `to`.
pub fn directed_distances(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    let tree = KdTree::new(&to.points);
    from.points.iter().map(|q| tree.nearest_sq(q).sqrt()).collect()
}

/// Linear interpolation between closest ranks over a sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    // Rank numerator kept scaled by 100 so integral percentiles give exact
    // fractional parts (0.95 * 19 would otherwise round off).
    let scaled = q * (sorted.len() - 1) as f64;
    let lo = (scaled / 100.0).floor() as usize;
    let frac = (scaled - lo as f64 * 100.0) / 100.0;
    let hi = (lo + 1).min(sorted.len() - 1);
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

/// Surface distances of one binary pair: `None` when either surface is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceScores {
    pub asd: f64,
    pub hd95: f64,
}

/// ASD from the two directed distance lists. Each list is summed in order and
/// the two sums are added, so swapping the arguments gives the same bits.
pub fn asd_from(ab: &[f64], ba: &[f64]) -> f64 {
    let sum_ab: f64 = ab.iter().sum();
    let sum_ba: f64 = ba.iter().sum();
    (sum_ab + sum_ba) / (ab.len() + ba.len()) as f64
}

pub fn hd95_from(ab: &[f64], ba: &[f64]) -> f64 {
    let pooled: Vec<f64> = ab.iter().chain(ba).copied().collect();
    percentile(&pooled, HD_PERCENTILE)
}

pub fn surface_scores(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<SurfaceScores> {
    let sa = extract_surface(a, dims, spacing);
    let sb = extract_surface(b, dims, spacing);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab = directed_distances(&sa, &sb);
    let ba = directed_distances(&sb, &sa);
    Some(SurfaceScores {
        asd: asd_from(&ab, &ba),
        hd95: hd95_from(&ab, &ba),
    })
}

fn masks(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<(Vec<bool>, Vec<bool>)> {
    check_dims(pred, gt)?;
    Ok((pred.class_mask(class), gt.class_mask(class)))
}

/// Average symmetric surface distance in mm; `None` if either mask is empty.
pub fn asd(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<f64>> {
    let (a, b) = masks(pred, gt, class)?;
    Ok(surface_scores(&a, &b, gt.dims(), gt.spacing()).map(|s| s.asd))
}

pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<f64>> {
    let (a, b) = masks(pred, gt, class)?;
    Ok(surface_scores(&a, &b, gt.dims(), gt.spacing()).map(|s| s.hd95))
}

/// Scores of one class in one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub case_id: String,
    pub class: u8,
    pub dice: f64,
    pub asd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Scores every foreground class `1..K` of one case.
pub fn score_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<Vec<CaseRow>> {
    check_dims(pred, gt)?;
    (1..num_classes as u8)
        .map(|class| {
            let (a, b) = masks(pred, gt, class)?;
            let s = surface_scores(&a, &b, gt.dims(), gt.spacing());
            Ok(CaseRow {
                case_id: case_id.to_string(),
                class,
                dice: dice_masks(&a, &b),
                asd_mm: s.map(|s| s.asd),
                hd95_mm: s.map(|s| s.hd95),
            })
        })
        .collect()
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ({:.3})", self.mean, self.std)
    }
}

/// Aggregates of one column group (a class, or all rows).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub dice: Summary,
    pub asd_mm: Option<Summary>,
    pub hd95_mm: Option<Summary>,
    /// Rows whose distance metrics were undefined.
    pub excluded: usize,
}

impl GroupSummary {
    fn of(rows: &[&CaseRow]) -> Option<Self> {
        let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd_mm).collect();
        let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95_mm).collect();
        Some(Self {
            dice: Summary::of(&dice)?,
            asd_mm: Summary::of(&asd),
            hd95_mm: Summary::of(&hd),
            excluded: rows.len() - asd.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<CaseRow>,
    pub per_class: Vec<(u8, GroupSummary)>,
    pub overall: GroupSummary,
    /// Cases that could not be scored, with the reason.
    pub errors: Vec<(String, String)>,
}

pub const CSV_HEADER: &str = "case_id,class,dice,asd_mm,hd95_mm";

impl MetricsReport {
    pub fn class_dice(&self, class: u8) -> Option<f64> {
        self.per_class
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, g)| g.dice.mean)
    }

    /// Mean Dice over foreground classes.
    pub fn mean_dice(&self) -> f64 {
        self.overall.dice.mean
    }

    /// One row per (case, class); undefined distances are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.case_id,
                r.class,
                r.dice,
                opt(r.asd_mm),
                opt(r.hd95_mm)
            );
        }
        out
    }

    /// Human-readable "mean (std)" table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>15} {:>15} {:>15} {:>8}", "class", "dice", "asd_mm", "hd95_mm", "excluded");
        let opt = |s: &Option<Summary>| s.map_or_else(|| "NA".to_string(), |s| s.to_string());
        let mut line = |label: String, g: &GroupSummary| {
            let _ = writeln!(
                out,
                "{:<8} {:>15} {:>15} {:>15} {:>8}",
                label,
                g.dice.to_string(),
                opt(&g.asd_mm),
                opt(&g.hd95_mm),
                g.excluded
            );
        };
        for (c, g) in &self.per_class {
            line(c.to_string(), g);
        }
        line("overall".to_string(), &self.overall);
        if !self.errors.is_empty() {
            let _ = writeln!(out, "{} case(s) failed:", self.errors.len());
            for (id, msg) in &self.errors {
                let _ = writeln!(out, "  {id}: {msg}");
            }
        }
        out
    }
}

/// Summarizes per-case rows; class groups appear in ascending class order.
pub fn aggregate(rows: Vec<CaseRow>) -> Result<MetricsReport> {
    let all: Vec<&CaseRow> = rows.iter().collect();
    let overall = GroupSummary::of(&all).ok_or_else(|| Error::Empty("no cases to aggregate".into()))?;
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let group: Vec<&CaseRow> = rows.iter().filter(|r| r.class == c).collect();
            (c, GroupSummary::of(&group).expect("non-empty class group"))
        })
        .collect();
    Ok(MetricsReport {
        rows,
        per_class,
        overall,
        errors: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> LabelVolume {
        let mut v = LabelVolume::filled(1, dims, spacing, 0);
        for &[z, y, x] in on {
            let i = v.index(0, z, y, x);
            v.data_mut()[i] = 1;
        }
        v
    }

    #[test]
    fn dice_examples() {
        let a = vol([1, 4, 4], [1.0; 3], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = vol([1, 4, 4], [1.0; 3], &[[0, 1, 0], [0, 1, 1], [0, 2, 0], [0, 2, 1]]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        let c = vol([1, 4, 4], [1.0; 3], &[[0, 3, 3]]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        let empty = vol([1, 4, 4], [1.0; 3], &[]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &a, 1).unwrap(), 0.0);
        assert!(dice(&a, &vol([1, 4, 3], [1.0; 3], &[]), 1).is_err());
    }

    #[test]
    fn surface_of_cube_and_voxel() {
        let mut cube = vec![false; 125];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    cube[(z * 5 + y) * 5 + x] = true;
                }
            }
        }
        let s = extract_surface(&cube, [5, 5, 5], [1.0; 3]);
        assert_eq!(s.len(), 26);
        assert!(!s.points.contains(&[2.0, 2.0, 2.0]));

        let mut one = vec![false; 27];
        one[13] = true;
        assert_eq!(extract_surface(&one, [3, 3, 3], [1.0; 3]).points, vec![[1.0, 1.0, 1.0]]);
        assert!(extract_surface(&[false; 27], [3, 3, 3], [1.0; 3]).is_empty());
    }

    #[test]
    fn distance_examples() {
        let a = vol([1, 1, 8], [1.0; 3], &[[0, 0, 1]]);
        let b = vol([1, 1, 8], [1.0; 3], &[[0, 0, 4]]);
        assert_eq!(asd(&a, &b, 1).unwrap(), Some(3.0));
        assert_eq!(asd(&a, &a, 1).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));

        let a = vol([1, 1, 4], [1.0, 1.0, 2.0], &[[0, 0, 1]]);
        let b = vol([1, 1, 4], [1.0, 1.0, 2.0], &[[0, 0, 2]]);
        assert_eq!(asd(&a, &b, 1).unwrap(), Some(2.0));

        let empty = vol([1, 1, 4], [1.0; 3], &[]);
        assert_eq!(asd(&a, &empty, 1).unwrap(), None);
        assert_eq!(hd95(&empty, &a, 1).unwrap(), None);
    }

    #[test]
    fn percentile_of_twenty() {
        let mut v = vec![0.0; 19];
        v.push(10.0);
        assert_eq!(percentile(&v, 95.0), 0.5);
        assert_eq!(percentile(&v, 100.0), 10.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn aggregate_and_render() {
        let row = |id: &str, d: f64| CaseRow {
            case_id: id.into(),
            class: 1,
            dice: d,
            asd_mm: Some(1.0),
            hd95_mm: None,
        };
        let r = aggregate(vec![row("a", 0.8), row("b", 0.9)]).unwrap();
        assert!((r.overall.dice.mean - 0.85).abs() < 1e-12);
        assert_eq!(r.overall.excluded, 0);
        assert!(r.overall.hd95_mm.is_none());
        let single = aggregate(vec![row("a", 0.8)]).unwrap();
        assert_eq!(single.overall.dice.to_string(), "0.800 (0.000)");
        let s = Summary {
            mean: 0.886,
            std: 0.076,
            count: 2,
        };
        assert_eq!(s.to_string(), "0.886 (0.076)");
        assert!(matches!(aggregate(Vec::new()), Err(Error::Empty(_))));
        assert!(r.to_csv().starts_with(CSV_HEADER));
        assert!(r.to_csv().contains("a,1,0.8,1,NA"));
    }
}
