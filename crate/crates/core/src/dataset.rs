//! Long-tailed datasets: synthetic generation, class statistics, and the
//! `subtail-ds` text and binary file formats.
//!
//! Classes are always indexed by decreasing cardinality, so class `0` is the
//! largest head class and class `C - 1` is the smallest tail class.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csv::format_float;
use crate::seeded_rng;

const TEXT_MAGIC: &str = "subtail-ds v1";
const BINARY_MAGIC: &[u8] = b"subtail-ds-bin v1\n";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row-count mismatch: header declares {expected} rows, found {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("label out of range at row {row}: label {label} but C = {num_classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("trailing data after {rows} rows")]
    TrailingData { rows: usize },
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("class counts must be non-increasing: class {class} has {count} samples, more than class {prev}")]
    UnsortedClasses {
        class: usize,
        prev: usize,
        count: usize,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid split thresholds: many = {many}, few = {few} (need many > few >= 1)")]
    InvalidThresholds { many: usize, few: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labelled dataset whose classes are sorted by decreasing size.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    true_subclusters: Option<Vec<usize>>,
}

impl LongTailDataset {
    /// Builds a dataset and checks its invariants: every label is below
    /// `num_classes`, every class is non-empty, and class counts are
    /// non-increasing in the class index.
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        true_subclusters: Option<Vec<usize>>,
    ) -> Result<Self, DatasetError> {
        if inputs.nrows() != labels.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(sub) = &true_subclusters {
            if sub.len() != labels.len() {
                return Err(DatasetError::Inconsistent(format!(
                    "{} subcluster ids but {} labels",
                    sub.len(),
                    labels.len()
                )));
            }
        }
        let mut class_counts = vec![0usize; num_classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DatasetError::LabelOutOfRange {
                    row,
                    label,
                    num_classes,
                });
            }
            class_counts[label] += 1;
        }
        for (class, &count) in class_counts.iter().enumerate() {
            if count == 0 {
                return Err(DatasetError::EmptyClass { class });
            }
            if class > 0 && count > class_counts[class - 1] {
                return Err(DatasetError::UnsortedClasses {
                    class,
                    prev: class - 1,
                    count,
                });
            }
        }
        Ok(Self {
            inputs,
            labels,
            class_counts,
            true_subclusters,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn input(&self, row: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(row)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn true_subclusters(&self) -> Option<&[usize]> {
        self.true_subclusters.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Size of the smallest (tail) class, `n_C`.
    pub fn tail_count(&self) -> usize {
        self.class_counts.last().copied().unwrap_or(0)
    }

    /// Row indices grouped by class, in ascending row order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = self
            .class_counts
            .iter()
            .map(|&n| Vec::with_capacity(n))
            .collect();
        for (row, &label) in self.labels.iter().enumerate() {
            members[label].push(row);
        }
        members
    }

    /// `n_1 / n_C`.
    pub fn imbalance_ratio(&self) -> f64 {
        imbalance_ratio(&self.class_counts)
    }

    /// Writes the dataset, choosing the binary format for a `.bin` extension
    /// and the text format otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(&mut out)?;
        } else {
            self.write_text(&mut out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dataset file in either format; the format is detected from
    /// the leading magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::read_binary(&bytes[BINARY_MAGIC.len()..])
        } else {
            Self::read_text(BufReader::new(bytes.as_slice()))
        }
    }

    pub fn write_text(&self, out: &mut impl Write) -> Result<(), DatasetError> {
        writeln!(
            out,
            "{TEXT_MAGIC} n={} d={} C={} subclusters={}",
            self.len(),
            self.input_dim(),
            self.num_classes(),
            u8::from(self.true_subclusters.is_some())
        )?;
        let mut line = String::new();
        for (row, features) in self.inputs.rows().into_iter().enumerate() {
            line.clear();
            line.push_str(&self.labels[row].to_string());
            if let Some(sub) = &self.true_subclusters {
                line.push(',');
                line.push_str(&sub[row].to_string());
            }
            for &v in features {
                line.push(',');
                line.push_str(&format_float(v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads the text format. Every row, the last included, must end with a
    /// newline; an unterminated final row is reported as truncation.
    pub fn read_text(mut reader: impl BufRead) -> Result<Self, DatasetError> {
        let mut content = Vec::new();
        reader.read_to_end(&mut content)?;
        if content.is_empty() {
            return Err(DatasetError::MalformedHeader("empty file".into()));
        }
        let header_end = content.iter().position(|&b| b == b'\n').unwrap_or(content.len());
        let header = std::str::from_utf8(&content[..header_end])
            .map_err(|_| DatasetError::MalformedHeader("header is not UTF-8".into()))?;
        let header = parse_text_header(header.trim_end_matches('\r'))?;

        let width = header.dim + 1 + usize::from(header.has_subclusters);
        let mut inputs = Vec::with_capacity(header.rows * header.dim);
        let mut labels = Vec::with_capacity(header.rows);
        let mut subclusters = header.has_subclusters.then(|| Vec::with_capacity(header.rows));

        let body = content.get(header_end + 1..).unwrap_or(&[]);
        let mut lines: Vec<&[u8]> = body.split(|&b| b == b'\n').collect();
        // The chunk after the last newline is empty unless the file was cut.
        let truncated = !lines.pop().unwrap_or(&[]).is_empty();
        for (row, line) in lines.iter().enumerate() {
            parse_text_row(row, line, width, &header, &mut labels, &mut subclusters, &mut inputs)?;
        }
        if truncated {
            return Err(DatasetError::RowCountMismatch {
                expected: header.rows,
                found: labels.len(),
            });
        }
        if labels.len() != header.rows {
            return Err(DatasetError::RowCountMismatch {
                expected: header.rows,
                found: labels.len(),
            });
        }
        let inputs = Array2::from_shape_vec((header.rows, header.dim), inputs)
            .map_err(|e| DatasetError::Inconsistent(e.to_string()))?;
        Self::new(inputs, labels, header.classes, subclusters)
    }

    pub fn write_binary(&self, out: &mut impl Write) -> Result<(), DatasetError> {
        out.write_all(BINARY_MAGIC)?;
        for value in [
            self.len(),
            self.input_dim(),
            self.num_classes(),
            usize::from(self.true_subclusters.is_some()),
        ] {
            out.write_all(&to_u32(value)?.to_le_bytes())?;
        }
        for (row, features) in self.inputs.rows().into_iter().enumerate() {
            out.write_all(&to_u32(self.labels[row])?.to_le_bytes())?;
            if let Some(sub) = &self.true_subclusters {
                out.write_all(&to_u32(sub[row])?.to_le_bytes())?;
            }
            for &v in features {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 16 {
            return Err(DatasetError::MalformedHeader("binary header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (rows, dim, classes, flag) = (word(0), word(1), word(2), word(3));
        if flag > 1 {
            return Err(DatasetError::MalformedHeader(format!("subcluster flag {flag}")));
        }
        if dim == 0 || classes == 0 {
            return Err(DatasetError::MalformedHeader("zero dimension or class count".into()));
        }
        let has_sub = flag == 1;
        let row_bytes = 4 + 4 * usize::from(has_sub) + 8 * dim;
        let body = &bytes[16..];
        let found = body.len() / row_bytes;
        if found < rows {
            return Err(DatasetError::RowCountMismatch {
                expected: rows,
                found,
            });
        }
        if body.len() != rows * row_bytes {
            return Err(DatasetError::TrailingData { rows });
        }
        let mut inputs = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut subclusters = has_sub.then(|| Vec::with_capacity(rows));
        for chunk in body.chunks_exact(row_bytes) {
            let mut at = 0;
            let mut next_u32 = || {
                let v = u32::from_le_bytes(chunk[at..at + 4].try_into().unwrap()) as usize;
                at += 4;
                v
            };
            let label = next_u32();
            if label >= classes {
                return Err(DatasetError::LabelOutOfRange {
                    row: labels.len(),
                    label,
                    num_classes: classes,
                });
            }
            labels.push(label);
            if let Some(sub) = subclusters.as_mut() {
                sub.push(next_u32());
            }
            let offset = 4 + 4 * usize::from(has_sub);
            inputs.extend(
                chunk[offset..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
            );
        }
        let inputs = Array2::from_shape_vec((rows, dim), inputs)
            .map_err(|e| DatasetError::Inconsistent(e.to_string()))?;
        Self::new(inputs, labels, classes, subclusters)
    }
}

fn to_u32(value: usize) -> Result<u32, DatasetError> {
    u32::try_from(value)
        .map_err(|_| DatasetError::Inconsistent(format!("{value} does not fit in 4 bytes")))
}

struct TextHeader {
    rows: usize,
    dim: usize,
    classes: usize,
    has_subclusters: bool,
}

fn parse_text_header(line: &str) -> Result<TextHeader, DatasetError> {
    let bad = |why: &str| DatasetError::MalformedHeader(format!("{why}: {line:?}"));
    let rest = line
        .strip_prefix(TEXT_MAGIC)
        .ok_or_else(|| bad("missing `subtail-ds v1` magic"))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let keys = ["n", "d", "C", "subclusters"];
    if fields.len() != keys.len() {
        return Err(bad("expected n=, d=, C=, subclusters="));
    }
    let mut values = [0usize; 4];
    for ((field, key), slot) in fields.iter().zip(keys).zip(values.iter_mut()) {
        let value = field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .ok_or_else(|| bad(&format!("expected `{key}=`")))?;
        *slot = value
            .parse()
            .map_err(|_| bad(&format!("`{key}` is not an unsigned integer")))?;
    }
    let [rows, dim, classes, flag] = values;
    if flag > 1 {
        return Err(bad("subclusters must be 0 or 1"));
    }
    if dim == 0 || classes == 0 {
        return Err(bad("d and C must be positive"));
    }
    Ok(TextHeader {
        rows,
        dim,
        classes,
        has_subclusters: flag == 1,
    })
}

fn parse_text_row(
    row: usize,
    line: &[u8],
    width: usize,
    header: &TextHeader,
    labels: &mut Vec<usize>,
    subclusters: &mut Option<Vec<usize>>,
    inputs: &mut Vec<f64>,
) -> Result<(), DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedRow { row, reason };
    if labels.len() == header.rows {
        return Err(DatasetError::TrailingData { rows: header.rows });
    }
    let line = std::str::from_utf8(line).map_err(|_| malformed("not UTF-8".into()))?;
    let line = line.trim_end_matches('\r');
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != width {
        return Err(malformed(format!("expected {width} fields, found {}", fields.len())));
    }
    let parse_index = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| malformed(format!("bad integer {s:?}")))
    };
    let label = parse_index(fields[0])?;
    if label >= header.classes {
        return Err(DatasetError::LabelOutOfRange {
            row,
            label,
            num_classes: header.classes,
        });
    }
    let mut first_feature = 1;
    if let Some(sub) = subclusters.as_mut() {
        sub.push(parse_index(fields[1])?);
        first_feature = 2;
    }
    for field in &fields[first_feature..] {
        let v = field
            .trim()
            .parse::<f64>()
            .map_err(|_| malformed(format!("bad float {field:?}")))?;
        inputs.push(v);
    }
    labels.push(label);
    Ok(())
}

/// `max_k n_k / min_k n_k`.
pub fn imbalance_ratio(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        return f64::INFINITY;
    }
    max as f64 / min as f64
}

/// Per-class count profile `n_k = round(n_1 * rho^(-k / (C - 1)))`, clamped to at least 1.
pub fn exponential_profile(num_classes: usize, head_count: usize, imbalance_ratio: f64) -> Vec<usize> {
    if num_classes == 1 {
        return vec![head_count.max(1)];
    }
    (0..num_classes)
        .map(|k| {
            let exponent = -(k as f64) / (num_classes - 1) as f64;
            let n = (head_count as f64 * imbalance_ratio.powf(exponent)).round();
            (n as usize).max(1)
        })
        .collect()
}

/// Parameters of the synthetic long-tailed Gaussian-mixture generator.
///
/// Each class has a mean drawn uniformly on the sphere of radius
/// `class_radius`; each of its components is offset from the class mean by
/// a uniform direction scaled to `subcluster_radius`; samples add isotropic
/// noise of standard deviation `noise_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub head_count: usize,
    pub imbalance_ratio: f64,
    /// Mixture components for classes larger than `single_component_max`.
    pub subclusters_per_class: usize,
    /// Classes with at most this many samples are a single component.
    pub single_component_max: usize,
    pub input_dim: usize,
    pub class_radius: f64,
    pub subcluster_radius: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            head_count: 500,
            imbalance_ratio: 50.0,
            subclusters_per_class: 3,
            single_component_max: 10,
            input_dim: 16,
            class_radius: 4.0,
            subcluster_radius: 2.0,
            noise_sigma: 0.6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.input_dim < 2 {
            return bad(format!("input dimension must be >= 2, got {}", self.input_dim));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return bad(format!("imbalance ratio must be >= 1, got {}", self.imbalance_ratio));
        }
        if (self.head_count as f64) < self.imbalance_ratio {
            return bad(format!(
                "head count {} is smaller than the imbalance ratio {}",
                self.head_count, self.imbalance_ratio
            ));
        }
        if self.subclusters_per_class == 0 {
            return bad("subclusters_per_class must be >= 1".into());
        }
        for (name, v) in [
            ("class_radius", self.class_radius),
            ("subcluster_radius", self.subcluster_radius),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        exponential_profile(self.num_classes, self.head_count, self.imbalance_ratio)
    }

    fn components_for(&self, count: usize) -> usize {
        if count <= self.single_component_max {
            1
        } else {
            self.subclusters_per_class.min(count)
        }
    }
}

/// Draws a long-tailed training set from the mixture described by `config`.
pub fn generate(config: &GeneratorConfig) -> Result<LongTailDataset, DatasetError> {
    let mixture = Mixture::new(config)?;
    mixture.draw(config, &mixture.counts, 1)
}

/// Draws a long-tailed training set plus a class-balanced held-out set with
/// `test_per_class` samples per class from the same mixture. The training
/// set is identical to what [`generate`] returns.
pub fn generate_with_test(
    config: &GeneratorConfig,
    test_per_class: usize,
) -> Result<(LongTailDataset, LongTailDataset), DatasetError> {
    if test_per_class == 0 {
        return Err(DatasetError::InvalidConfig(
            "held-out set needs at least one sample per class".into(),
        ));
    }
    let mixture = Mixture::new(config)?;
    let train = mixture.draw(config, &mixture.counts, 1)?;
    let test = mixture.draw(config, &vec![test_per_class; mixture.counts.len()], 2)?;
    Ok((train, test))
}

struct Mixture {
    counts: Vec<usize>,
    /// `means[class][component]` is a point in input space.
    means: Vec<Vec<Vec<f64>>>,
}

impl Mixture {
    fn new(config: &GeneratorConfig) -> Result<Self, DatasetError> {
        config.validate()?;
        let counts = config.class_counts();
        let dim = config.input_dim;
        let mut rng = seeded_rng(config.seed, 0);
        let mut means = Vec::with_capacity(counts.len());
        for &count in &counts {
            let class_mean: Vec<f64> = random_direction(&mut rng, dim)
                .into_iter()
                .map(|v| v * config.class_radius)
                .collect();
            let comps: Vec<Vec<f64>> = (0..config.components_for(count))
                .map(|_| {
                    random_direction(&mut rng, dim)
                        .into_iter()
                        .zip(&class_mean)
                        .map(|(u, m)| m + u * config.subcluster_radius)
                        .collect()
                })
                .collect();
            means.push(comps);
        }
        Ok(Self { counts, means })
    }

    /// Samples `per_class[c]` points of each class, cycling through the
    /// class's components so they are equally represented.
    fn draw(
        &self,
        config: &GeneratorConfig,
        per_class: &[usize],
        stream: u64,
    ) -> Result<LongTailDataset, DatasetError> {
        let dim = config.input_dim;
        let mut rng = seeded_rng(config.seed, stream);
        let total: usize = per_class.iter().sum();
        let mut inputs = Vec::with_capacity(total * dim);
        let mut labels = Vec::with_capacity(total);
        let mut subs = Vec::with_capacity(total);
        for (class, comps) in self.means.iter().enumerate() {
            for j in 0..per_class[class] {
                let comp = j % comps.len();
                for &m in &comps[comp] {
                    let z: f64 = rng.sample(StandardNormal);
                    inputs.push(m + config.noise_sigma * z);
                }
                labels.push(class);
                subs.push(comp);
            }
        }
        let inputs = Array2::from_shape_vec((total, dim), inputs)
            .map_err(|e| DatasetError::Inconsistent(e.to_string()))?;
        LongTailDataset::new(inputs, labels, per_class.len(), Some(subs))
    }
}

fn random_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Many/Medium/Few class groups used for per-split reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Few];

    pub fn name(self) -> &'static str {
        match self {
            Split::Many => "many",
            Split::Medium => "medium",
            Split::Few => "few",
        }
    }
}

/// Class-count thresholds: `Many` if `n_k > many`, `Few` if `n_k < few`,
/// `Medium` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitThresholds {
    many: usize,
    few: usize,
}

impl SplitThresholds {
    pub fn new(many: usize, few: usize) -> Result<Self, DatasetError> {
        if many <= few || few < 1 {
            return Err(DatasetError::InvalidThresholds { many, few });
        }
        Ok(Self { many, few })
    }

    pub fn many(&self) -> usize {
        self.many
    }

    pub fn few(&self) -> usize {
        self.few
    }

    pub fn classify(&self, count: usize) -> Split {
        if count > self.many {
            Split::Many
        } else if count < self.few {
            Split::Few
        } else {
            Split::Medium
        }
    }
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self { many: 100, few: 20 }
    }
}

/// Tags every class of `counts` with its split.
pub fn split_labels(counts: &[usize], thresholds: SplitThresholds) -> Vec<Split> {
    counts.iter().map(|&n| thresholds.classify(n)).collect()
}
