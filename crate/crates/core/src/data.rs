//! Datasets: the synthetic hierarchical benchmark, Dirichlet client
//! partitioning and the JSON dataset format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, StreamId};

/// Fraction of each client's samples kept for local training.
pub const TRAIN_FRACTION: f64 = 0.75;

const MAX_PARTITION_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Supercluster index of every class, when known.
    pub hierarchy: Option<Vec<usize>>,
    /// Free-text class descriptions keyed by class name.
    pub descriptions: Option<BTreeMap<String, Vec<String>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        count_labels(&self.labels, self.num_classes)
    }

    /// Checks the full-dataset invariants: shapes agree, labels are in range
    /// and every class is represented.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.rows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows for {} labels",
                self.inputs.rows(),
                self.labels.len()
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Format {
                field: "class_names".into(),
                message: format!(
                    "{} names for {} classes",
                    self.class_names.len(),
                    self.num_classes
                ),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidLabel {
                label,
                num_classes: self.num_classes,
            });
        }
        if let Some(c) = self.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Format {
                field: "samples".into(),
                message: format!("class {c} has no samples"),
            });
        }
        if let Some(h) = &self.hierarchy {
            if h.len() != self.num_classes {
                return Err(Error::Format {
                    field: "hierarchy".into(),
                    message: format!("{} entries for {} classes", h.len(), self.num_classes),
                });
            }
        }
        if let Some(desc) = &self.descriptions {
            if let Some(name) = desc.keys().find(|k| !self.class_names.contains(k)) {
                return Err(Error::Format {
                    field: "descriptions".into(),
                    message: format!("unknown class name {name:?}"),
                });
            }
        }
        self.inputs.ensure_finite("dataset inputs")
    }

    /// Rows `indices` as a new dataset sharing class metadata. Does not
    /// require every class to be present.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            hierarchy: self.hierarchy.clone(),
            descriptions: self.descriptions.clone(),
        }
    }

    /// Descriptions for every class in class order, or `None` if any class lacks them.
    pub fn descriptions_in_order(&self) -> Option<Vec<Vec<String>>> {
        let desc = self.descriptions.as_ref()?;
        self.class_names
            .iter()
            .map(|name| desc.get(name).cloned())
            .collect()
    }
}

pub fn count_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Shannon entropy (nats) of a label histogram. Empty histograms have zero entropy.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Parameters of the synthetic two-level benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySpec {
    pub superclusters: usize,
    pub classes_per_super: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Spread of class means around their supercluster mean.
    pub intra_spread: f64,
    /// Spread of supercluster means around the origin.
    pub super_spread: f64,
    /// Standard deviation of per-sample noise around the class mean.
    pub noise_std: f64,
    pub descriptions_per_class: usize,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            superclusters: 2,
            classes_per_super: 3,
            samples_per_class: 100,
            input_dim: 16,
            intra_spread: 0.5,
            super_spread: 1.5,
            noise_std: 0.5,
            descriptions_per_class: 3,
        }
    }
}

impl HierarchySpec {
    pub fn num_classes(&self) -> usize {
        self.superclusters * self.classes_per_super
    }
}

/// Generates class means as supercluster mean plus class offset and samples
/// around each class mean. Also emits toy descriptions in which classes of
/// the same supercluster share vocabulary.
pub fn generate_hierarchical_dataset(spec: &HierarchySpec, seed: u64) -> Result<Dataset> {
    if spec.superclusters == 0
        || spec.classes_per_super == 0
        || spec.samples_per_class == 0
        || spec.descriptions_per_class == 0
    {
        return Err(Error::Config("hierarchy counts must be at least 1".into()));
    }
    if spec.input_dim < 2 {
        return Err(Error::Config("input_dim must be at least 2".into()));
    }
    if !(spec.intra_spread > 0.0) || !(spec.noise_std > 0.0) {
        return Err(Error::InvalidGeometry(
            "intra_spread and noise_std must be positive".into(),
        ));
    }
    if !(spec.super_spread > spec.intra_spread) {
        return Err(Error::InvalidGeometry(format!(
            "super_spread ({}) must exceed intra_spread ({})",
            spec.super_spread, spec.intra_spread
        )));
    }

    let dim = spec.input_dim;
    let num_classes = spec.num_classes();
    let mut rng = RngStream::new(seed, StreamId::global("dataset"));
    let super_means = rng.normal_matrix(spec.superclusters, dim, spec.super_spread);

    let mut hierarchy = Vec::with_capacity(num_classes);
    let mut class_names = Vec::with_capacity(num_classes);
    let mut class_means = Matrix::zeros(num_classes, dim);
    for s in 0..spec.superclusters {
        for j in 0..spec.classes_per_super {
            let c = s * spec.classes_per_super + j;
            hierarchy.push(s);
            class_names.push(format!("group{s}_kind{c}"));
            for (k, m) in class_means.row_mut(c).iter_mut().enumerate() {
                *m = super_means[(s, k)] + spec.intra_spread * rng.normal();
            }
        }
    }

    let total = num_classes * spec.samples_per_class;
    let mut inputs = Matrix::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    for c in 0..num_classes {
        for _ in 0..spec.samples_per_class {
            let i = labels.len();
            for (k, x) in inputs.row_mut(i).iter_mut().enumerate() {
                *x = class_means[(c, k)] + spec.noise_std * rng.normal();
            }
            labels.push(c);
        }
    }

    let descriptions = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let texts = (0..spec.descriptions_per_class)
                .map(|j| toy_description(hierarchy[c], c, j))
                .collect();
            (name.clone(), texts)
        })
        .collect();

    let ds = Dataset {
        inputs,
        labels,
        num_classes,
        class_names,
        hierarchy: Some(hierarchy),
        descriptions: Some(descriptions),
    };
    ds.validate()?;
    Ok(ds)
}

const TOY_POOL: usize = 8;
const TOY_TOKENS_EACH: usize = 5;

/// Ten-token description mixing supercluster vocabulary with class vocabulary;
/// consecutive variants rotate through each pool.
fn toy_description(superclass: usize, class: usize, variant: usize) -> String {
    let mut words = Vec::with_capacity(2 * TOY_TOKENS_EACH);
    for i in 0..TOY_TOKENS_EACH {
        let slot = (variant * 3 + i) % TOY_POOL;
        words.push(format!("g{superclass}trait{slot}"));
        words.push(format!("k{class}mark{slot}"));
    }
    words.join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "Dirichlet alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be at least 1".into()));
        }
        Ok(())
    }
}

/// One client's local split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub num_classes: usize,
    pub train_inputs: Matrix,
    pub train_labels: Vec<usize>,
    pub test_inputs: Matrix,
    pub test_labels: Vec<usize>,
    /// Row indices into the partitioned dataset.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_class_counts: Vec<usize>,
}

impl ClientDataset {
    pub fn num_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn num_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn total_class_counts(&self) -> Vec<usize> {
        let mut counts = self.train_class_counts.clone();
        for &y in &self.test_labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.train_class_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
    }
}

/// Samples `Dir(alpha)` by normalizing independent `Gamma(alpha, 1)` draws.
pub fn sample_dirichlet(alpha: f64, n: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| rng.gamma(alpha)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        for x in &mut draws {
            *x /= total;
        }
    } else {
        // Every draw underflowed (tiny alpha): the limit is a point mass on one component.
        let winner = rng.below(n);
        draws = (0..n).map(|i| if i == winner { 1.0 } else { 0.0 }).collect();
    }
    draws
}

/// Integer counts summing to `total`, proportional to `weights`, by the
/// largest-remainder method (ties to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Canonical sample order: by label, then feature values, then original index.
fn canonical_order(dataset: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        dataset.labels[a]
            .cmp(&dataset.labels[b])
            .then_with(|| {
                let (ra, rb) = (dataset.inputs.row(a), dataset.inputs.row(b));
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

/// Splits `dataset` across `spec.num_clients` clients with per-class
/// Dirichlet proportions, then splits each client 75/25 per class.
pub fn dirichlet_partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot partition an empty dataset".into()));
    }
    let n = spec.num_clients;
    let order = canonical_order(dataset);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in order {
        by_class[dataset.labels[i]].push(i);
    }

    let mut last_empty = 0;
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = RngStream::for_stream(spec.seed, "partition", 0, attempt as u64);
        // client -> class -> sample indices
        let mut holdings: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); dataset.num_classes]; n];
        for (c, members) in by_class.iter().enumerate() {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let props = sample_dirichlet(spec.alpha, n, &mut rng);
            let counts = largest_remainder(&props, members.len());
            let mut start = 0;
            for (client, &k) in counts.iter().enumerate() {
                holdings[client][c] = members[start..start + k].to_vec();
                start += k;
            }
        }
        match holdings
            .iter()
            .position(|h| h.iter().all(|v| v.is_empty()))
        {
            Some(empty) => last_empty = empty,
            None => {
                return Ok(holdings
                    .into_iter()
                    .enumerate()
                    .map(|(id, h)| split_client(dataset, id, h))
                    .collect())
            }
        }
    }
    Err(Error::EmptyClient {
        client: last_empty,
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

/// Number of test samples for a class held `n` times: a quarter rounded,
/// at least one when `n >= 2`, none for singletons.
pub fn test_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (((1.0 - TRAIN_FRACTION) * n as f64).round() as usize).max(1)
    }
}

fn split_client(dataset: &Dataset, client_id: usize, holdings: Vec<Vec<usize>>) -> ClientDataset {
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for members in holdings {
        let n_test = test_count(members.len());
        let n_train = members.len() - n_test;
        train_indices.extend_from_slice(&members[..n_train]);
        test_indices.extend_from_slice(&members[n_train..]);
    }
    let train_labels: Vec<usize> = train_indices.iter().map(|&i| dataset.labels[i]).collect();
    let test_labels: Vec<usize> = test_indices.iter().map(|&i| dataset.labels[i]).collect();
    ClientDataset {
        client_id,
        num_classes: dataset.num_classes,
        train_inputs: dataset.inputs.select_rows(&train_indices),
        test_inputs: dataset.inputs.select_rows(&test_indices),
        train_class_counts: count_labels(&train_labels, dataset.num_classes),
        train_labels,
        test_labels,
        train_indices,
        test_indices,
    }
}

/// Carves a class-balanced held-out set of up to `per_class` samples per class,
/// always leaving at least one sample of each class behind. Returns
/// `(remaining, held_out)`.
pub fn carve_global_test(dataset: &Dataset, per_class: usize, seed: u64) -> (Dataset, Dataset) {
    let mut rng = RngStream::new(seed, StreamId::global("global-test"));
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in canonical_order(dataset) {
        by_class[dataset.labels[i]].push(i);
    }
    let mut held = Vec::new();
    let mut rest = Vec::new();
    for mut members in by_class {
        rng.shuffle(&mut members);
        let take = per_class.min(members.len().saturating_sub(1));
        held.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    rest.sort_unstable();
    held.sort_unstable();
    (dataset.subset(&rest), dataset.subset(&held))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    num_classes: usize,
    input_dim: usize,
    class_names: Vec<String>,
    hierarchy: Option<Vec<usize>>,
    samples: Vec<SampleRecord>,
    #[serde(default)]
    descriptions: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    x: Vec<f64>,
    y: usize,
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DatasetFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let mut data = Vec::with_capacity(file.samples.len() * file.input_dim);
    let mut labels = Vec::with_capacity(file.samples.len());
    for (i, s) in file.samples.iter().enumerate() {
        if s.x.len() != file.input_dim {
            return Err(Error::Format {
                field: format!("samples[{i}].x"),
                message: format!("{} values, input_dim is {}", s.x.len(), file.input_dim),
            });
        }
        data.extend_from_slice(&s.x);
        labels.push(s.y);
    }
    let ds = Dataset {
        inputs: Matrix::from_vec(labels.len(), file.input_dim, data)?,
        labels,
        num_classes: file.num_classes,
        class_names: file.class_names,
        hierarchy: file.hierarchy,
        descriptions: file.descriptions,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_json(dataset: &Dataset) -> Result<String> {
    let file = DatasetFile {
        num_classes: dataset.num_classes,
        input_dim: dataset.input_dim(),
        class_names: dataset.class_names.clone(),
        hierarchy: dataset.hierarchy.clone(),
        samples: dataset
            .inputs
            .row_iter()
            .zip(&dataset.labels)
            .map(|(x, &y)| SampleRecord { x: x.to_vec(), y })
            .collect(),
        descriptions: dataset.descriptions.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Format {
        field: "dataset".into(),
        message: e.to_string(),
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_json(dataset)?).map_err(|e| Error::io(path, e))
}
