use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vision::ModelParams;

/// One class mean reported by a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UplinkEntry {
    pub class: usize,
    pub prototype: Vec<f64>,
    pub count: usize,
}

/// Everything a client sends to the server in one round: per-class means
/// and sample counts, never raw samples or features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uplink {
    pub client: usize,
    pub entries: Vec<UplinkEntry>,
}

impl Uplink {
    pub fn floats(&self) -> u64 {
        self.entries.iter().map(|e| e.prototype.len() as u64).sum()
    }
}

/// Mean training feature of every class the client holds, in class order.
pub fn compute_local_prototypes(model: &ModelParams, data: &ClientDataset) -> Result<Vec<UplinkEntry>> {
    if data.num_train() == 0 {
        return Ok(Vec::new());
    }
    let features = model.forward_features(&data.train_inputs)?;
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; data.num_classes];
    let mut counts = vec![0usize; data.num_classes];
    for (row, &y) in features.row_iter().zip(&data.train_labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|&(_, (_, n))| n > 0)
        .map(|(class, (sum, count))| UplinkEntry {
            class,
            prototype: sum.into_iter().map(|s| s / count as f64).collect(),
            count,
        })
        .collect())
}

/// Server-side image prototypes `P̄^I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototypes {
    pub protos: Matrix,
    /// True once a class has been aggregated at least once.
    pub mask: Vec<bool>,
    /// Round of the most recent aggregation touching each class.
    pub last_updated: Vec<Option<usize>>,
}

/// Per-class client weights used by one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights {
    /// `weights[c]` lists `(client, weight)` pairs; empty for unreported classes.
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl GlobalPrototypes {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            protos: Matrix::zeros(num_classes, dim),
            mask: vec![false; num_classes],
            last_updated: vec![None; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mask.len()
    }

    pub fn num_present(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Sample-count-weighted mean of the reported prototypes of each class.
    /// Unreported classes keep their previous value. Clients are processed in
    /// id order, so the result does not depend on the order of `uplinks`.
    pub fn aggregate(&mut self, uplinks: &[Uplink], round: usize) -> Result<AggregationWeights> {
        if uplinks.is_empty() {
            return Err(Error::Protocol("aggregation needs at least one uplink".into()));
        }
        let (c_total, d) = self.protos.shape();
        let mut ordered: Vec<&Uplink> = uplinks.iter().collect();
        ordered.sort_by_key(|u| u.client);
        if ordered.windows(2).any(|w| w[0].client == w[1].client) {
            return Err(Error::Protocol("duplicate uplink from one client".into()));
        }

        let mut reports: Vec<Vec<(usize, &UplinkEntry)>> = vec![Vec::new(); c_total];
        for u in &ordered {
            let mut seen = vec![false; c_total];
            for e in &u.entries {
                if e.class >= c_total {
                    return Err(Error::InvalidLabel {
                        label: e.class,
                        num_classes: c_total,
                    });
                }
                if std::mem::replace(&mut seen[e.class], true) {
                    return Err(Error::Protocol(format!(
                        "client {} reported class {} twice",
                        u.client, e.class
                    )));
                }
                if e.prototype.len() != d {
                    return Err(Error::Shape(format!(
                        "client {} prototype of length {}, expected {d}",
                        u.client,
                        e.prototype.len()
                    )));
                }
                if e.prototype.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "client {} sent a non-finite prototype for class {}",
                        u.client, e.class
                    )));
                }
                reports[e.class].push((u.client, e));
            }
        }

        let mut weights = vec![Vec::new(); c_total];
        for (c, entries) in reports.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let total: usize = entries.iter().map(|(_, e)| e.count).sum();
            if total == 0 {
                return Err(Error::Protocol(format!(
                    "class {c} reported with a total sample count of zero"
                )));
            }
            let row = self.protos.row_mut(c);
            row.fill(0.0);
            for &(client, e) in entries {
                let w = e.count as f64 / total as f64;
                for (r, v) in row.iter_mut().zip(&e.prototype) {
                    *r += w * v;
                }
                weights[c].push((client, w));
            }
            self.mask[c] = true;
            self.last_updated[c] = Some(round);
        }
        Ok(AggregationWeights { weights })
    }
}
