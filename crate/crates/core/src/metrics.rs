//! Dice and Hausdorff metrics and the evaluation over every nonempty
//! modality subset.

use std::fmt::Write as _;

use crate::data::{apply_presence, MultiModalSample};
use crate::error::{Error, Result};
use crate::nn::Backbone;
use crate::tensor::Spatial;

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "masks of {} and {} pixels",
            pred.len(),
            truth.len()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        log::debug!("dice of two empty masks taken as 1");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdVariant {
    Max,
    Percentile95,
}

impl std::fmt::Display for HdVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "hd-max",
            Self::Percentile95 => "hd95",
        })
    }
}

impl std::str::FromStr for HdVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "hd-max" => Ok(Self::Max),
            "95" | "hd95" | "p95" => Ok(Self::Percentile95),
            other => Err(Error::Parse(format!("unknown Hausdorff variant `{other}`"))),
        }
    }
}

/// Foreground pixels with at least one background face-neighbour. Pixels
/// outside the grid count as background.
pub fn boundary(mask: &[bool], shape: Spatial) -> Vec<usize> {
    let mut out = Vec::new();
    for idx in 0..mask.len() {
        if !mask[idx] {
            continue;
        }
        let (z, y, x) = shape.coords(idx);
        let mut edge = y == 0 || y + 1 == shape.h || x == 0 || x + 1 == shape.w;
        if shape.d > 1 {
            edge |= z == 0 || z + 1 == shape.d;
        }
        if !edge {
            let mut neighbours = vec![
                shape.index(z, y - 1, x),
                shape.index(z, y + 1, x),
                shape.index(z, y, x - 1),
                shape.index(z, y, x + 1),
            ];
            if shape.d > 1 {
                neighbours.push(shape.index(z - 1, y, x));
                neighbours.push(shape.index(z + 1, y, x));
            }
            edge = neighbours.iter().any(|&n| !mask[n]);
        }
        if edge {
            out.push(idx);
        }
    }
    out
}

/// Lower envelope of parabolas: `out[q] = min_p s2 (q - p)^2 + f[p]`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        loop {
            let p = v[k as usize];
            let s = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64))
                / (2.0 * s2 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                if k < 0 {
                    break;
                }
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = s2 * d * d + f[v[j]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed pixel.
pub fn squared_distance_transform(seeds: &[usize], shape: Spatial, spacing: [f64; 3]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; shape.volume()];
    for &s in seeds {
        grid[s] = 0.0;
    }
    let dims = [shape.d, shape.h, shape.w];
    let strides = [shape.h * shape.w, shape.w, 1];
    for axis in [2usize, 1, 0] {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let s2 = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..shape.volume())
            .filter(|&i| (i / strides[axis]).is_multiple_of(n))
            .collect();
        for start in others {
            for (t, l) in line.iter_mut().enumerate() {
                *l = grid[start + t * strides[axis]];
            }
            edt_1d(&line, s2, &mut out);
            for (t, &o) in out.iter().enumerate() {
                grid[start + t * strides[axis]] = o;
            }
        }
    }
    grid
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

/// Symmetric boundary distance between two masks; `None` when either is
/// empty.
pub fn hausdorff(
    pred: &[bool],
    truth: &[bool],
    shape: Spatial,
    spacing: [f64; 3],
    variant: HdVariant,
) -> Result<Option<f64>> {
    if pred.len() != truth.len() || pred.len() != shape.volume() {
        return Err(Error::ShapeMismatch("mask sizes differ".into()));
    }
    let a = boundary(pred, shape);
    let b = boundary(truth, shape);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let to_b = squared_distance_transform(&b, shape, spacing);
    let to_a = squared_distance_transform(&a, shape, spacing);
    let mut dists: Vec<f64> = a.iter().map(|&i| to_b[i].sqrt()).collect();
    dists.extend(b.iter().map(|&i| to_a[i].sqrt()));
    Ok(Some(match variant {
        HdVariant::Max => dists.iter().cloned().fold(0.0, f64::max),
        HdVariant::Percentile95 => percentile(&dists, 95.0),
    }))
}

/// A (possibly merged) evaluation region: the union of its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub name: String,
    pub labels: Vec<u8>,
}

impl ClassGroup {
    pub fn mask(&self, label: &[u8]) -> Vec<bool> {
        label.iter().map(|k| self.labels.contains(k)).collect()
    }
}

/// Nested grouping: region `k` is every label `>= k`, mirroring regions
/// that enclose one another.
pub fn nested_groups(n_classes: usize) -> Vec<ClassGroup> {
    (1..n_classes)
        .map(|k| ClassGroup {
            name: format!("region{k}"),
            labels: (k as u8..n_classes as u8).collect(),
        })
        .collect()
}

/// One group per foreground class.
pub fn plain_groups(n_classes: usize) -> Vec<ClassGroup> {
    (1..n_classes)
        .map(|k| ClassGroup {
            name: format!("class{k}"),
            labels: vec![k as u8],
        })
        .collect()
}

/// Anything producing a label map from a (possibly modality-reduced) sample.
pub trait Segmenter {
    fn segment(&self, sample: &MultiModalSample) -> Result<Vec<u8>>;
}

impl Segmenter for Backbone {
    fn segment(&self, sample: &MultiModalSample) -> Result<Vec<u8>> {
        Ok(self.predict(&sample.input_tensors())?.argmax_channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScore {
    pub dice: f64,
    pub hd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRow {
    /// Modalities present, ascending.
    pub subset: Vec<usize>,
    pub cells: Vec<CellScore>,
}

impl SubsetRow {
    pub fn mean_dice(&self) -> f64 {
        self.cells.iter().map(|c| c.dice).sum::<f64>() / self.cells.len() as f64
    }

    pub fn mean_hd(&self) -> Option<f64> {
        mean_defined(self.cells.iter().map(|c| c.hd))
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_modalities: usize,
    pub groups: Vec<String>,
    pub hd_variant: HdVariant,
    pub rows: Vec<SubsetRow>,
}

impl EvalReport {
    pub fn row(&self, subset: &[usize]) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    /// Per-group mean over subsets.
    pub fn group_means(&self) -> Vec<CellScore> {
        (0..self.groups.len())
            .map(|g| CellScore {
                dice: self.rows.iter().map(|r| r.cells[g].dice).sum::<f64>() / self.rows.len() as f64,
                hd: mean_defined(self.rows.iter().map(|r| r.cells[g].hd)),
            })
            .collect()
    }

    /// Mean Dice over every subset and group.
    pub fn grand_dice(&self) -> f64 {
        self.rows.iter().map(SubsetRow::mean_dice).sum::<f64>() / self.rows.len() as f64
    }

    pub fn grand_hd(&self) -> Option<f64> {
        mean_defined(self.rows.iter().map(SubsetRow::mean_hd))
    }

    fn subset_key(&self, subset: &[usize]) -> String {
        (0..self.n_modalities)
            .map(|m| if subset.contains(&m) { '1' } else { '0' })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "# hd_variant={}", self.hd_variant);
        let mut header = vec!["subset".to_string()];
        header.extend(self.groups.iter().map(|g| format!("{g}_dice")));
        header.push("avg_dice".into());
        header.extend(self.groups.iter().map(|g| format!("{g}_hd")));
        header.push("avg_hd".into());
        out.push_str(&header.join(","));
        out.push('\n');
        let mut emit = |key: String, cells: &[CellScore], dice: f64, hd: Option<f64>| {
            let mut row = vec![key];
            row.extend(cells.iter().map(|c| fmt(Some(c.dice))));
            row.push(fmt(Some(dice)));
            row.extend(cells.iter().map(|c| fmt(c.hd)));
            row.push(fmt(hd));
            out.push_str(&row.join(","));
            out.push('\n');
        };
        for r in &self.rows {
            emit(self.subset_key(&r.subset), &r.cells, r.mean_dice(), r.mean_hd());
        }
        let means = self.group_means();
        emit("mean".into(), &means, self.grand_dice(), self.grand_hd());
        out
    }

    /// Subset indicators (● present, ○ absent) followed by Dice per group.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Dice per modality subset ({} reported in CSV)", self.hd_variant);
        for m in 0..self.n_modalities {
            let _ = write!(out, " M{m} ");
        }
        for g in &self.groups {
            let _ = write!(out, "| {g:>9} ");
        }
        let _ = writeln!(out, "| {:>9}", "avg");
        for r in &self.rows {
            for m in 0..self.n_modalities {
                let _ = write!(out, "  {} ", if r.subset.contains(&m) { '●' } else { '○' });
            }
            for c in &r.cells {
                let _ = write!(out, "| {:>9.4} ", c.dice);
            }
            let _ = writeln!(out, "| {:>9.4}", r.mean_dice());
        }
        out.push_str(&"    ".repeat(self.n_modalities));
        for c in self.group_means() {
            let _ = write!(out, "| {:>9.4} ", c.dice);
        }
        let _ = writeln!(out, "| {:>9.4}", self.grand_dice());
        out
    }
}

/// Every nonempty subset of `0..m`, ordered by bitmask.
pub fn nonempty_subsets(m: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << m))
        .map(|mask| (0..m).filter(|&i| mask & (1 << i) != 0).collect())
        .collect()
}

fn restrict(sample: &MultiModalSample, subset: &[usize]) -> Result<MultiModalSample> {
    let row: Vec<u8> = (0..sample.n_modalities())
        .map(|m| u8::from(subset.contains(&m)))
        .collect();
    for &m in subset {
        if sample.images.get(m).is_none_or(Option::is_none) {
            return Err(Error::InvalidArgument(format!(
                "evaluation sample lacks modality {m}"
            )));
        }
    }
    apply_presence(sample, &row)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub variant: HdVariant,
    pub spacing: [f64; 3],
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            variant: HdVariant::Percentile95,
            spacing: [1.0; 3],
        }
    }
}

fn score(pred: &[u8], truth: &[u8], shape: Spatial, group: &ClassGroup, opts: &EvalOptions) -> Result<CellScore> {
    let p = group.mask(pred);
    let t = group.mask(truth);
    Ok(CellScore {
        dice: dice_score(&p, &t)?,
        hd: hausdorff(&p, &t, shape, opts.spacing, opts.variant)?,
    })
}

fn aggregate(scores: &[CellScore]) -> CellScore {
    CellScore {
        dice: scores.iter().map(|s| s.dice).sum::<f64>() / scores.len() as f64,
        hd: mean_defined(scores.iter().map(|s| s.hd)),
    }
}

/// Scores one group on one subset, averaging over samples.
pub fn evaluate_subset_group<S: Segmenter + ?Sized>(
    model: &S,
    dataset: &[MultiModalSample],
    subset: &[usize],
    group: &ClassGroup,
    opts: &EvalOptions,
) -> Result<CellScore> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for s in dataset {
        let pred = model.segment(&restrict(s, subset)?)?;
        scores.push(score(&pred, &s.label, s.shape, group, opts)?);
    }
    Ok(aggregate(&scores))
}

/// Scores every group on every nonempty modality subset. Metrics are
/// computed per sample and averaged; undefined distances are skipped.
pub fn evaluate_combinations<S: Segmenter + ?Sized>(
    model: &S,
    dataset: &[MultiModalSample],
    groups: &[ClassGroup],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty evaluation dataset".into()))?;
    let m = first.n_modalities();
    let mut rows = Vec::new();
    for subset in nonempty_subsets(m) {
        let mut per_group: Vec<Vec<CellScore>> = vec![Vec::with_capacity(dataset.len()); groups.len()];
        for s in dataset {
            let pred = model.segment(&restrict(s, &subset)?)?;
            for (g, group) in groups.iter().enumerate() {
                per_group[g].push(score(&pred, &s.label, s.shape, group, opts)?);
            }
        }
        rows.push(SubsetRow {
            subset,
            cells: per_group.iter().map(|v| aggregate(v)).collect(),
        });
    }
    Ok(EvalReport {
        n_modalities: m,
        groups: groups.iter().map(|g| g.name.clone()).collect(),
        hd_variant: opts.variant,
        rows,
    })
}
