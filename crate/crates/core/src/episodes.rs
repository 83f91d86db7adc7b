//! Episodic task data: labeled datasets, C-way episodes with disjoint
//! support/query splits, synthetic domain-shifted Gaussian generators and an
//! IDX (MNIST-style) loader.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::{self, tag};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Multiplier on the cluster spread for contaminated ("strayed") draws.
pub const STRAYED_SPREAD_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.len() != dim {
                return Err(Error::Shape(format!(
                    "example {i} has dimension {}, dataset dimension is {dim}",
                    ex.input.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::Shape(format!(
                    "example {i} has label {} outside [0, {num_classes})",
                    ex.label
                )));
            }
        }
        Ok(Self {
            dim,
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, ex) in self.examples.iter().enumerate() {
            groups[ex.label].push(i);
        }
        groups
    }

    pub fn inputs(&self) -> Matrix {
        examples_to_matrix(&self.examples, self.dim)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Keeps only the listed classes, relabeled to `0..classes.len()` in the
    /// given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let mut relabel = vec![None; self.num_classes];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.num_classes {
                return Err(Error::Config(format!(
                    "class {old} not present (dataset has {} classes)",
                    self.num_classes
                )));
            }
            relabel[old] = Some(new);
        }
        let examples = self
            .examples
            .iter()
            .filter_map(|e| {
                relabel[e.label].map(|label| LabeledExample {
                    input: e.input.clone(),
                    label,
                })
            })
            .collect();
        Dataset::new(self.dim, classes.len(), examples)
    }
}

pub fn examples_to_matrix(examples: &[LabeledExample], dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(examples.len() * dim);
    for e in examples {
        data.extend_from_slice(&e.input);
    }
    Matrix::from_vec(examples.len(), dim, data).expect("examples share the dataset dimension")
}

/// Affine map `x -> A x + b` applied to novel-class raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            offset: vec![0.0; dim],
        }
    }

    /// A shift that squeezes every direction but one and pushes the whole
    /// distribution along a common offset, so novel classes pile up in one
    /// primary direction. `squash` in (0, 1] scales the non-dominant
    /// directions, `stretch` the dominant one, and `offset` is the length of
    /// the translation along the dominant direction. The dominant direction
    /// is drawn from `seed`.
    pub fn skewed(dim: usize, squash: f64, stretch: f64, offset: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::linalg::norm(&u);
        u.iter_mut().for_each(|v| *v /= n);
        // A = squash * (I - u u^T) + stretch * u u^T
        let mut matrix = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let uu = u[i] * u[j];
                let id = if i == j { 1.0 } else { 0.0 };
                matrix[(i, j)] = squash * (id - uu) + stretch * uu;
            }
        }
        let offset = u.iter().map(|v| v * offset).collect();
        Self { matrix, offset }
    }

    /// Per-axis scales spaced geometrically from `low` (first axis) to
    /// `high` (last axis), plus a common offset on every axis. The skew is
    /// aligned with the coordinate axes.
    pub fn axis_scaled(dim: usize, low: f64, high: f64, offset: f64) -> Self {
        let mut matrix = Matrix::zeros(dim, dim);
        for i in 0..dim {
            let t = if dim > 1 { i as f64 / (dim - 1) as f64 } else { 0.0 };
            matrix[(i, i)] = (low.ln() + t * (high.ln() - low.ln())).exp();
        }
        Self {
            matrix,
            offset: vec![offset; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.apply(x);
        crate::linalg::axpy(1.0, &self.offset, &mut y);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub dim: usize,
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    /// Per-class isotropic standard deviation.
    pub cluster_spread: f64,
    /// Standard deviation of the Gaussian the class means are drawn from.
    pub mean_scale: f64,
    pub domain_shift: DomainShift,
    /// Probability that a drawn novel-class point comes from the class
    /// Gaussian at `STRAYED_SPREAD_FACTOR` times the spread.
    pub contamination_rate: f64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config(format!(
                "cluster_spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::Config(format!(
                "mean_scale must be nonnegative, got {}",
                self.mean_scale
            )));
        }
        if !(0.0..0.5).contains(&self.contamination_rate) {
            return Err(Error::Config(format!(
                "contamination_rate must lie in [0, 0.5), got {}",
                self.contamination_rate
            )));
        }
        if self.domain_shift.matrix.shape() != (self.dim, self.dim)
            || self.domain_shift.offset.len() != self.dim
        {
            return Err(Error::Config(format!(
                "domain shift must be {0}x{0} with a length-{0} offset",
                self.dim
            )));
        }
        // geometric mean of the absolute eigenvalues, so strong but
        // invertible anisotropy in high dimension is not mistaken for
        // singularity
        let det = self.domain_shift.matrix.determinant()?;
        if det.abs().powf(1.0 / self.dim as f64) < 1e-9 {
            return Err(Error::Config("domain shift matrix is singular".into()));
        }
        Ok(())
    }
}

/// A generated dataset together with the population means it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Population mean of each class in raw-input space (after any shift).
    pub class_means: Matrix,
    /// Which examples were drawn from the widened ("strayed") Gaussian.
    pub strayed: Vec<bool>,
}

fn draw_means(rng: &mut impl Rng, classes: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Base classes: isotropic Gaussians around seeded means, no shift, no
/// contamination. Examples are ordered class-major.
pub fn generate_base_dataset(
    spec: &SyntheticDomainSpec,
    samples_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be at least 1".into()));
    }
    let mut mean_rng = seed::rng(seed::derive(seed, tag::BASE_MEANS));
    let means = draw_means(&mut mean_rng, spec.num_base_classes, spec.dim, spec.mean_scale);
    let mut rng = seed::rng(seed::derive(seed, tag::BASE_SAMPLES));
    let mut examples = Vec::with_capacity(spec.num_base_classes * samples_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let input = mean
                .iter()
                .map(|m| m + spec.cluster_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(LabeledExample { input, label });
        }
    }
    let n = examples.len();
    Ok(SyntheticDataset {
        dataset: Dataset::new(spec.dim, spec.num_base_classes, examples)?,
        class_means: Matrix::from_rows(&means)?,
        strayed: vec![false; n],
    })
}

/// Novel classes: Gaussians around their own seeded means, each draw
/// contaminated with probability `contamination_rate`, then passed through
/// the domain shift.
pub fn generate_novel_dataset(
    spec: &SyntheticDomainSpec,
    samples_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    if samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be at least 1".into()));
    }
    let mut mean_rng = seed::rng(seed::derive(seed, tag::NOVEL_MEANS));
    let means = draw_means(&mut mean_rng, spec.num_novel_classes, spec.dim, spec.mean_scale);
    let mut rng = seed::rng(seed::derive(seed, tag::NOVEL_SAMPLES));
    let mut examples = Vec::with_capacity(spec.num_novel_classes * samples_per_class);
    let mut strayed = Vec::with_capacity(examples.capacity());
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let stray = rng.random::<f64>() < spec.contamination_rate;
            let spread = if stray {
                STRAYED_SPREAD_FACTOR * spec.cluster_spread
            } else {
                spec.cluster_spread
            };
            let raw: Vec<f64> = mean
                .iter()
                .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(LabeledExample {
                input: spec.domain_shift.apply(&raw),
                label,
            });
            strayed.push(stray);
        }
    }
    let shifted: Vec<Vec<f64>> = means.iter().map(|m| spec.domain_shift.apply(m)).collect();
    Ok(SyntheticDataset {
        dataset: Dataset::new(spec.dim, spec.num_novel_classes, examples)?,
        class_means: Matrix::from_rows(&shifted)?,
        strayed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shots {
    Fixed(usize),
    /// Inclusive range, drawn uniformly per class.
    Range { min: usize, max: usize },
}

impl Shots {
    pub fn max(&self) -> usize {
        match *self {
            Shots::Fixed(k) => k,
            Shots::Range { max, .. } => max,
        }
    }

    pub fn min(&self) -> usize {
        match *self {
            Shots::Fixed(k) => k,
            Shots::Range { min, .. } => min,
        }
    }
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::Fixed(k) => write!(f, "{k}"),
            Shots::Range { min, max } => write!(f, "{min}-{max}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    pub num_ways: usize,
    pub shots_per_class: Vec<usize>,
    /// Source-dataset class of each episode class.
    pub classes: Vec<usize>,
    /// Source-dataset indices, aligned with `support` / `query`.
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |e| e.input.len())
    }

    pub fn support_inputs(&self) -> Matrix {
        examples_to_matrix(&self.support, self.dim())
    }

    pub fn query_inputs(&self) -> Matrix {
        examples_to_matrix(&self.query, self.dim())
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label).collect()
    }

    /// Checks the structural invariants: shot arithmetic, label ranges,
    /// per-class coverage and support/query disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.shots_per_class.len() != self.num_ways {
            return bad("shots_per_class length differs from num_ways".into());
        }
        if self.shots_per_class.iter().sum::<usize>() != self.support.len() {
            return bad("support size differs from the sum of shots".into());
        }
        let mut counts = vec![0usize; self.num_ways];
        for e in self.support.iter().chain(&self.query) {
            if e.label >= self.num_ways {
                return bad(format!("label {} outside [0, {})", e.label, self.num_ways));
            }
        }
        for e in &self.support {
            counts[e.label] += 1;
        }
        if counts != self.shots_per_class || counts.contains(&0) {
            return bad("per-class support counts disagree with shots_per_class".into());
        }
        let support: BTreeSet<_> = self.support_indices.iter().collect();
        if support.len() != self.support_indices.len() {
            return bad("duplicate support index".into());
        }
        if self.query_indices.iter().any(|i| support.contains(i)) {
            return bad("support and query overlap".into());
        }
        Ok(())
    }

    /// FNV-1a over the source indices and class choice; identical episodes
    /// share a fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.num_ways as u64);
        for &c in &self.classes {
            feed(c as u64);
        }
        feed(u64::MAX);
        for &i in &self.support_indices {
            feed(i as u64);
        }
        feed(u64::MAX);
        for &i in &self.query_indices {
            feed(i as u64);
        }
        h
    }
}

/// Draws a `num_ways`-way episode: classes without replacement, relabeled to
/// `0..num_ways` in draw order, then disjoint support and query examples per
/// class.
pub fn sample_episode(
    dataset: &Dataset,
    num_ways: usize,
    shots: Shots,
    query_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if num_ways == 0 {
        return Err(Error::EpisodeRequest("num_ways must be at least 1".into()));
    }
    if num_ways > dataset.num_classes {
        return Err(Error::EpisodeRequest(format!(
            "{num_ways}-way episode requested from a {}-class dataset",
            dataset.num_classes
        )));
    }
    if shots.min() == 0 || shots.min() > shots.max() {
        return Err(Error::EpisodeRequest(format!("invalid shots {shots}")));
    }
    let groups = dataset.class_indices();
    let required = shots.max() + query_per_class;
    if let Some((class, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < required) {
        return Err(Error::EpisodeSampling {
            class,
            available: g.len(),
            required,
        });
    }

    let mut rng = seed::rng(seed);
    let classes = index::sample(&mut rng, dataset.num_classes, num_ways).into_vec();
    let mut shots_per_class = Vec::with_capacity(num_ways);
    let mut picks = Vec::with_capacity(num_ways);
    for &class in &classes {
        let k = match shots {
            Shots::Fixed(k) => k,
            Shots::Range { min, max } => rng.random_range(min..=max),
        };
        let mut pool = groups[class].clone();
        let (chosen, _) = pool.partial_shuffle(&mut rng, k + query_per_class);
        picks.push(chosen.to_vec());
        shots_per_class.push(k);
    }

    let mut support = Vec::new();
    let mut support_indices = Vec::new();
    let mut query = Vec::new();
    let mut query_indices = Vec::new();
    for (label, (chosen, &k)) in picks.iter().zip(&shots_per_class).enumerate() {
        for (n, &idx) in chosen.iter().enumerate() {
            let ex = LabeledExample {
                input: dataset.examples[idx].input.clone(),
                label,
            };
            if n < k {
                support.push(ex);
                support_indices.push(idx);
            } else {
                query.push(ex);
                query_indices.push(idx);
            }
        }
    }

    Ok(Episode {
        support,
        query,
        num_ways,
        shots_per_class,
        classes,
        support_indices,
        query_indices,
    })
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated header: missing {what}"),
        })
}

/// Parses an IDX image/label file pair held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(images, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected image magic 0x{IDX_IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32_be(images, 4, "image count")? as usize;
    let rows = read_u32_be(images, 8, "row count")? as usize;
    let cols = read_u32_be(images, 12, "column count")? as usize;
    let dim = rows * cols;

    let magic = read_u32_be(labels, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected label magic 0x{IDX_LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let label_count = read_u32_be(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("label count {label_count} differs from image count {count}"),
        });
    }

    let pixels = images.get(16..).unwrap_or(&[]);
    if pixels.len() < count * dim {
        return Err(Error::Format {
            offset: images.len() as u64,
            message: format!(
                "truncated image payload: expected {} bytes, found {}",
                count * dim,
                pixels.len()
            ),
        });
    }
    let label_bytes = labels.get(8..).unwrap_or(&[]);
    if label_bytes.len() < count {
        return Err(Error::Format {
            offset: labels.len() as u64,
            message: format!(
                "truncated label payload: expected {count} bytes, found {}",
                label_bytes.len()
            ),
        });
    }

    let num_classes = label_bytes[..count].iter().max().map_or(0, |&m| m as usize + 1);
    let examples = (0..count)
        .map(|i| LabeledExample {
            input: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: label_bytes[i] as usize,
        })
        .collect();
    Dataset::new(dim, num_classes, examples)
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// One example per line: label, then the raw input values, comma-separated.
pub fn write_dataset_text<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for e in &dataset.examples {
        write!(out, "{}", e.label)?;
        for v in &e.input {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_dataset_text<R: BufRead>(input: R) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut dim = None;
    let mut offset = 0u64;
    for line in input.lines() {
        let line = line.map_err(|e| Error::Format {
            offset,
            message: e.to_string(),
        })?;
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format {
            offset: line_start,
            message,
        };
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad label: {e}")))?;
        let input = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("bad value: {e}")))?;
        match dim {
            None => dim = Some(input.len()),
            Some(d) if d != input.len() => {
                return Err(bad(format!("row has {} values, expected {d}", input.len())))
            }
            _ => {}
        }
        examples.push(LabeledExample { input, label });
    }
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    Dataset::new(dim.unwrap_or(0), num_classes, examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dim: usize, base: usize, novel: usize, spread: f64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            dim,
            num_base_classes: base,
            num_novel_classes: novel,
            cluster_spread: spread,
            mean_scale: 3.0,
            domain_shift: DomainShift::identity(dim),
            contamination_rate: 0.0,
        }
    }

    #[test]
    fn base_dataset_counts_and_labels() {
        let ds = generate_base_dataset(&spec(2, 2, 2, 0.1), 5, 7).unwrap();
        assert_eq!(ds.dataset.len(), 10);
        assert_eq!(ds.dataset.labels(), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(3, 4, 4, 0.5);
        let a = generate_base_dataset(&s, 20, 11).unwrap();
        let b = generate_base_dataset(&s, 20, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_novel_dataset(&s, 20, 11).unwrap();
        let d = generate_novel_dataset(&s, 20, 11).unwrap();
        assert_eq!(c, d);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn sample_means_converge_to_class_means() {
        let ds = generate_base_dataset(&spec(2, 3, 1, 1.0), 10_000, 5).unwrap();
        let groups = ds.dataset.class_indices();
        for (c, g) in groups.iter().enumerate() {
            for k in 0..2 {
                let mean: f64 =
                    g.iter().map(|&i| ds.dataset.examples[i].input[k]).sum::<f64>() / g.len() as f64;
                assert!((mean - ds.class_means[(c, k)]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn clean_points_stay_within_six_spreads() {
        let s = spec(4, 1, 2, 0.3);
        let ds = generate_novel_dataset(&s, 5_000, 9).unwrap();
        for e in &ds.dataset.examples {
            let m = ds.class_means.row(e.label);
            let dist = crate::linalg::norm(&crate::linalg::sub(&e.input, m));
            // 6 sigma per coordinate, 4 coordinates
            assert!(dist < 6.0 * 0.3 * 2.0);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(2, 2, 2, 0.0);
        assert!(matches!(generate_base_dataset(&s, 5, 1), Err(Error::Config(_))));
        s.cluster_spread = 1.0;
        s.contamination_rate = 0.5;
        assert!(generate_base_dataset(&s, 5, 1).is_err());
        s.contamination_rate = 0.1;
        s.domain_shift.matrix = Matrix::zeros(2, 2);
        assert!(generate_novel_dataset(&s, 5, 1).is_err());
        assert!(generate_base_dataset(&spec(2, 2, 2, 1.0), 0, 1).is_err());
    }

    #[test]
    fn axis_scaled_shift_spans_the_range() {
        let s = DomainShift::axis_scaled(3, 0.25, 4.0, 2.0);
        assert!((s.matrix[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((s.matrix[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((s.matrix[(2, 2)] - 4.0).abs() < 1e-12);
        assert_eq!(s.matrix[(0, 1)], 0.0);
        assert_eq!(s.apply(&[4.0, 1.0, 0.0]), vec![3.0, 3.0, 2.0]);
    }

    #[test]
    fn skewed_shift_is_nonsingular() {
        let shift = DomainShift::skewed(6, 0.2, 1.5, 4.0, 3);
        let det = shift.matrix.determinant().unwrap();
        // eigenvalues: squash (x5), stretch
        assert!((det - 0.2f64.powi(5) * 1.5).abs() < 1e-9);
        assert!((crate::linalg::norm(&shift.offset) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn episode_counts() {
        let ds = generate_novel_dataset(&spec(2, 1, 5, 0.5), 20, 1).unwrap();
        let ep = sample_episode(&ds.dataset, 5, Shots::Fixed(1), 15, 3).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        ep.validate().unwrap();
    }

    #[test]
    fn shot_ranges_are_reproducible() {
        let ds = generate_novel_dataset(&spec(2, 1, 6, 0.5), 30, 1).unwrap();
        let shots = Shots::Range { min: 1, max: 5 };
        let a = sample_episode(&ds.dataset, 5, shots, 5, 99).unwrap();
        let b = sample_episode(&ds.dataset, 5, shots, 5, 99).unwrap();
        assert_eq!(a.shots_per_class, b.shots_per_class);
        assert_eq!(a, b);
        assert!(a.shots_per_class.iter().all(|&k| (1..=5).contains(&k)));
        a.validate().unwrap();
    }

    #[test]
    fn deficient_class_is_named() {
        let counts = [10, 10, 4];
        let examples = counts
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| {
                (0..n).map(move |i| LabeledExample {
                    input: vec![i as f64],
                    label,
                })
            })
            .collect();
        let ds = Dataset::new(1, 3, examples).unwrap();
        match sample_episode(&ds, 2, Shots::Fixed(1), 5, 0) {
            Err(Error::EpisodeSampling {
                class,
                available,
                required,
            }) => assert_eq!((class, available, required), (2, 4, 6)),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn every_class_pair_is_eventually_drawn() {
        let ds = generate_novel_dataset(&spec(2, 1, 10, 0.5), 3, 1).unwrap();
        let mut pairs = BTreeSet::new();
        for seed in 0..600 {
            let ep = sample_episode(&ds.dataset, 2, Shots::Fixed(1), 1, seed).unwrap();
            let (a, b) = (ep.classes[0].min(ep.classes[1]), ep.classes[0].max(ep.classes[1]));
            pairs.insert((a, b));
        }
        assert_eq!(pairs.len(), 45);
    }

    fn idx_bytes(images: &[[u8; 4]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn idx_scaling_and_shape() {
        let (img, lab) = idx_bytes(&[[0, 255, 51, 0], [255, 255, 0, 0]], &[3, 1]);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.examples[0].input, vec![0.0, 1.0, 0.2, 0.0]);
        assert_eq!(ds.examples[1].label, 1);
    }

    #[test]
    fn idx_format_errors() {
        let (img, lab) = idx_bytes(&[[0; 4], [1; 4]], &[0, 1]);
        // label file carrying the image magic
        let mut wrong = lab.clone();
        wrong[..4].copy_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        let err = parse_idx(&img, &wrong).unwrap_err().to_string();
        assert!(err.contains("expected label magic"), "{err}");

        let err = parse_idx(&img[..img.len() - 1], &lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 23, .. }), "{err}");

        let (_, short_lab) = idx_bytes(&[], &[0]);
        let err = parse_idx(&img, &short_lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");

        assert!(parse_idx(&img[..6], &lab).is_err());
    }

    #[test]
    fn idx_files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_bytes(&[[9; 4]], &[0]);
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(load_idx_dataset(&dir.path().join("missing"), &lp).is_err());
    }

    #[test]
    fn text_export_round_trips() {
        let ds = generate_novel_dataset(&spec(3, 1, 2, 0.7), 4, 8).unwrap().dataset;
        let mut buf = Vec::new();
        write_dataset_text(&ds, &mut buf).unwrap();
        let back = read_dataset_text(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let err = read_dataset_text("0,1.0\n1,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 6, .. }));
    }

    #[test]
    fn select_classes_relabels() {
        let ds = generate_novel_dataset(&spec(2, 1, 4, 0.5), 3, 2).unwrap().dataset;
        let sub = ds.select_classes(&[3, 1]).unwrap();
        assert_eq!(sub.num_classes, 2);
        assert_eq!(sub.labels(), vec![1, 1, 1, 0, 0, 0]);
    }
}
