//! Seeded synthetic data: long-tailed Gaussian-mixture ID sets, class-skewed
//! auxiliary outliers, disjoint test outliers, and the CSV file format.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::g17;
use crate::rng::{stream, tags};

/// Label carried by every outlier sample.
pub const OOD_LABEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodAux,
    OodTest,
}

impl Role {
    pub fn is_id(self) -> bool {
        matches!(self, Role::IdTrain | Role::IdTest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
    pub role: Role,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<i64>, role: Role) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::invalid(format!("{} feature rows but {} labels", features.len(), labels.len())));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if d == 0 || features.iter().any(|f| f.len() != d) {
                return Err(Error::invalid("feature rows must share one nonzero width"));
            }
        }
        let bad =
            if role.is_id() { labels.iter().position(|&l| l < 0) } else { labels.iter().position(|&l| l != OOD_LABEL) };
        if let Some(i) = bad {
            return Err(Error::invalid(format!(
                "row {i} has label {} which is not allowed for role {role:?}",
                labels[i]
            )));
        }
        Ok(Dataset { features, labels, role })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Class labels of an ID set as indices.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        if !self.role.is_id() {
            return Err(Error::invalid(format!("{:?} data has no class labels", self.role)));
        }
        Ok(self.labels.iter().map(|&l| l as usize).collect())
    }

    pub fn class_sizes(&self, num_classes: usize) -> Vec<usize> {
        let mut sizes = vec![0; num_classes];
        for &l in &self.labels {
            if l >= 0 && (l as usize) < num_classes {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            write!(out, "x{j},").unwrap();
        }
        out.push_str("label\n");
        for (x, l) in self.features.iter().zip(&self.labels) {
            for v in x {
                out.push_str(&g17(*v));
                out.push(',');
            }
            writeln!(out, "{l}").unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses the CSV format; `num_classes` bounds the admissible ID labels.
    pub fn from_csv(text: &str, source: &str, role: Role, num_classes: Option<usize>) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::empty(format!("{source} contains no header"))),
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => break (i + 1, l),
            }
        };
        let cols: Vec<&str> = header.1.split(',').map(str::trim).collect();
        let width = cols.len();
        let well_formed = width >= 2
            && cols[width - 1] == "label"
            && cols[..width - 1].iter().enumerate().all(|(j, c)| *c == format!("x{j}"));
        if !well_formed {
            return Err(parse_err(header.0, format!("expected header x0,...,x{{D-1}},label, got {:?}", header.1)));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(parse_err(lineno, format!("row has {} columns, header has {width}", fields.len())));
            }
            let x = fields[..width - 1]
                .iter()
                .map(|f| {
                    let v: f64 = f.trim().parse().map_err(|_| parse_err(lineno, format!("bad number {f:?}")))?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(parse_err(lineno, format!("non-finite feature {f:?}")))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let label_text = fields[width - 1].trim();
            let label: i64 = label_text.parse().map_err(|_| parse_err(lineno, format!("bad label {label_text:?}")))?;
            let upper = num_classes.map_or(i64::MAX, |k| k as i64 - 1);
            if label < OOD_LABEL || label > upper {
                return Err(parse_err(lineno, format!("label {label} outside {{-1, 0..K-1}}")));
            }
            let allowed = if role.is_id() { label >= 0 } else { label == OOD_LABEL };
            if !allowed {
                return Err(parse_err(lineno, format!("label {label} not allowed for role {role:?}")));
            }
            features.push(x);
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::empty(format!("{source} has a header but no samples")));
        }
        Dataset::new(features, labels, role)
    }

    pub fn load_csv(path: &Path, role: Role, num_classes: Option<usize>) -> Result<Self> {
        let text = crate::read_to_string(path)?;
        Self::from_csv(&text, &path.display().to_string(), role, num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dim: usize,
    pub num_classes: usize,
    /// Size of the largest (first) class.
    pub n_head: usize,
    /// Largest-to-smallest class size ratio.
    pub rho: f64,
    pub class_means: Vec<Vec<f64>>,
    pub class_scale: f64,
    /// Per-class size of the balanced test split.
    pub n_test_per_class: usize,
    pub seed: u64,
}

/// K means evenly spaced on a circle of `radius` in the first two coordinates.
pub fn circle_means(num_classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / num_classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * angle.cos();
            if dim > 1 {
                m[1] = radius * angle.sin();
            }
            m
        })
        .collect()
}

impl DatasetSpec {
    /// The default desk benchmark: 2-D, 5 classes on a radius-4 circle,
    /// sizes 1000 down to 10.
    pub fn benchmark(seed: u64) -> Self {
        DatasetSpec {
            dim: 2,
            num_classes: 5,
            n_head: 1000,
            rho: 100.0,
            class_means: circle_means(5, 2, 4.0),
            class_scale: 0.6,
            n_test_per_class: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid("dataset needs D >= 1 and K >= 2"));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!("imbalance ratio rho must be >= 1, got {}", self.rho)));
        }
        if !(self.class_scale > 0.0) {
            return Err(Error::invalid("class_scale must be > 0"));
        }
        if self.class_means.len() != self.num_classes || self.class_means.iter().any(|m| m.len() != self.dim) {
            return Err(Error::invalid("class_means must hold K points of dimension D"));
        }
        let sizes = self.class_sizes();
        if sizes.iter().any(|&n| n < 1) {
            return Err(Error::invalid(format!("long-tail sizes {sizes:?} leave an empty class")));
        }
        Ok(())
    }

    /// `round(n_head * rho^(-i / (K - 1)))` for class `i`.
    pub fn class_sizes(&self) -> Vec<usize> {
        let k = self.num_classes;
        (0..k)
            .map(|i| {
                let frac = i as f64 / (k - 1) as f64;
                (self.n_head as f64 * self.rho.powf(-frac)).round() as usize
            })
            .collect()
    }

    /// Class sizes normalized to a probability vector.
    pub fn size_affinity(&self) -> Vec<f64> {
        let sizes = self.class_sizes();
        let total: usize = sizes.iter().sum();
        sizes.into_iter().map(|n| n as f64 / total as f64).collect()
    }

    fn sample_class(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        self.class_means[class].iter().map(|m| m + self.class_scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn sample_sized(&self, sizes: &[usize], tag: u64, role: Role) -> Result<Dataset> {
        let mut rng = stream(self.seed, tag);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (class, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                features.push(self.sample_class(&mut rng, class));
                labels.push(class as i64);
            }
        }
        Dataset::new(features, labels, role)
    }

    /// A balanced labeled split drawn from its own stream (validation sets use this).
    pub fn balanced_split(&self, per_class: usize, tag: u64) -> Result<Dataset> {
        self.validate()?;
        if per_class == 0 {
            return Err(Error::invalid("balanced split needs at least one sample per class"));
        }
        self.sample_sized(&vec![per_class; self.num_classes], tag, Role::IdTest)
    }
}

/// Long-tailed training set plus a balanced test set.
pub fn gen_longtail_id(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = spec.sample_sized(&spec.class_sizes(), tags::ID_TRAIN, Role::IdTrain)?;
    let test = spec.balanced_split(spec.n_test_per_class, tags::ID_TEST)?;
    Ok((train, test))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn check_affinity(affinity: &[f64], k: usize) -> Result<()> {
    if affinity.len() != k {
        return Err(Error::invalid(format!("affinity has {} entries, expected K = {k}", affinity.len())));
    }
    if affinity.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
        return Err(Error::invalid("affinity entries must be finite and >= 0"));
    }
    let s: f64 = affinity.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("affinity sums to {s}, not 1")));
    }
    Ok(())
}

/// Outliers near the class clusters: class `c ~ affinity`, then a Gaussian at
/// `mean_c + offset_scale * u` for a random unit direction `u`.
pub fn gen_auxiliary_ood(
    spec: &DatasetSpec,
    affinity: &[f64],
    n: usize,
    offset_scale: f64,
    seed: u64,
) -> Result<Dataset> {
    gen_auxiliary_ood_stream(spec, affinity, n, offset_scale, seed, tags::OOD_AUX)
}

pub(crate) fn gen_auxiliary_ood_stream(
    spec: &DatasetSpec,
    affinity: &[f64],
    n: usize,
    offset_scale: f64,
    seed: u64,
    tag: u64,
) -> Result<Dataset> {
    spec.validate()?;
    check_affinity(affinity, spec.num_classes)?;
    if n == 0 {
        return Err(Error::empty("auxiliary OOD set of size 0"));
    }
    if !(offset_scale >= 0.0) || !offset_scale.is_finite() {
        return Err(Error::invalid("offset_scale must be finite and >= 0"));
    }
    let pick = WeightedIndex::new(affinity).map_err(|e| Error::invalid(format!("affinity: {e}")))?;
    let mut rng = stream(seed, tag);
    let features = (0..n)
        .map(|_| {
            let c = pick.sample(&mut rng);
            let u = random_unit(&mut rng, spec.dim);
            let mut x = spec.sample_class(&mut rng, c);
            for (xi, ui) in x.iter_mut().zip(u) {
                *xi += offset_scale * ui;
            }
            x
        })
        .collect();
    Dataset::new(features, vec![OOD_LABEL; n], Role::OodAux)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum TestOodRegime {
    /// Uniform in the box `[low, high]^D`.
    FarUniform { low: f64, high: f64 },
    /// Uniform on the sphere of `radius` around `center`.
    Ring { center: Vec<f64>, radius: f64 },
}

pub fn gen_test_ood(dim: usize, n: usize, regime: &TestOodRegime, seed: u64) -> Result<Dataset> {
    gen_test_ood_stream(dim, n, regime, seed, tags::OOD_TEST)
}

pub(crate) fn gen_test_ood_stream(
    dim: usize,
    n: usize,
    regime: &TestOodRegime,
    seed: u64,
    tag: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::empty("test OOD set of size 0"));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    let mut rng = stream(seed, tag);
    let features: Vec<Vec<f64>> = match regime {
        TestOodRegime::FarUniform { low, high } => {
            if !(low < high) || !low.is_finite() || !high.is_finite() {
                return Err(Error::invalid(format!("far_uniform box needs low < high, got [{low}, {high}]")));
            }
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(*low..*high)).collect()).collect()
        }
        TestOodRegime::Ring { center, radius } => {
            if center.len() != dim {
                return Err(Error::invalid(format!("ring center has {} coordinates, expected {dim}", center.len())));
            }
            if !(*radius >= 0.0) || !radius.is_finite() {
                return Err(Error::invalid(format!("ring radius must be >= 0, got {radius}")));
            }
            (0..n)
                .map(|_| {
                    let u = random_unit(&mut rng, dim);
                    center.iter().zip(u).map(|(c, ui)| c + radius * ui).collect()
                })
                .collect()
        }
    };
    Dataset::new(features, vec![OOD_LABEL; n], Role::OodTest)
}
