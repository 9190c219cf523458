use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::{contrastive_anchor_grad, softmax_cross_entropy, squared_distance, Matrix, RngStream};
use crate::vision::{ModelParams, ParamGrads};

use super::config::participant_count;

/// Global prototypes a client aligns its features to.
#[derive(Clone, Copy, Debug)]
pub enum AlignmentTarget<'a> {
    None,
    /// Temperature-scaled cosine contrastive loss against every unmasked row.
    Contrastive {
        targets: &'a Matrix,
        mask: &'a [bool],
        tau: f64,
    },
    /// `‖f(x) − P_y‖² / d` pull towards the sample's own class.
    SquaredDistance {
        targets: &'a Matrix,
        mask: &'a [bool],
    },
}

impl AlignmentTarget<'_> {
    fn targets_and_mask(&self) -> Option<(&Matrix, &[bool])> {
        match *self {
            AlignmentTarget::None => None,
            AlignmentTarget::Contrastive { targets, mask, .. }
            | AlignmentTarget::SquaredDistance { targets, mask } => Some((targets, mask)),
        }
    }

    /// Loss and feature gradient of one sample, `None` when its class is masked.
    fn sample(&self, feature: &[f64], label: usize) -> Result<Option<(f64, Vec<f64>)>> {
        let Some((targets, mask)) = self.targets_and_mask() else {
            return Ok(None);
        };
        if !mask[label] {
            return Ok(None);
        }
        match *self {
            AlignmentTarget::Contrastive { tau, .. } => {
                if feature.iter().all(|&v| v == 0.0) {
                    // Cosine is undefined at the origin; every logit reads as zero.
                    let present = mask.iter().filter(|&&m| m).count() as f64;
                    return Ok(Some((present.ln(), vec![0.0; feature.len()])));
                }
                contrastive_anchor_grad(feature, targets, label, tau, Some(mask)).map(Some)
            }
            AlignmentTarget::SquaredDistance { .. } => {
                let d = feature.len() as f64;
                let (l, g) = squared_distance(feature, targets.row(label));
                Ok(Some((l / d, g.into_iter().map(|v| v / d).collect())))
            }
            AlignmentTarget::None => unreachable!(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub alignment: f64,
}

/// `CE + λ/B · Σ_b R_b` on one batch and its gradient w.r.t. every parameter.
pub fn client_loss_and_grads(
    model: &ModelParams,
    inputs: &Matrix,
    labels: &[usize],
    alignment: AlignmentTarget<'_>,
    lambda: f64,
) -> Result<(BatchLoss, ParamGrads)> {
    let cache = model.forward(inputs)?;
    let (ce, grad_logits) = softmax_cross_entropy(&cache.logits, labels)?;
    let batch = labels.len() as f64;
    let mut align = 0.0;
    let grad_features = if lambda != 0.0 && !matches!(alignment, AlignmentTarget::None) {
        if let Some((targets, mask)) = alignment.targets_and_mask() {
            if targets.shape() != (model.num_classes, model.feature_dim()) || mask.len() != model.num_classes {
                return Err(Error::Shape(format!(
                    "alignment targets {:?} with mask {} for a model with {} classes and width {}",
                    targets.shape(),
                    mask.len(),
                    model.num_classes,
                    model.feature_dim()
                )));
            }
        }
        let mut g = Matrix::zeros(cache.features.rows(), cache.features.cols());
        for (b, &y) in labels.iter().enumerate() {
            if let Some((l, ga)) = alignment.sample(cache.features.row(b), y)? {
                align += l / batch;
                for (o, v) in g.row_mut(b).iter_mut().zip(ga) {
                    *o = lambda * v / batch;
                }
            }
        }
        Some(g)
    } else {
        None
    };
    let grads = model.backward(&cache, grad_features.as_ref(), &grad_logits)?;
    Ok((
        BatchLoss {
            total: ce + lambda * align,
            cross_entropy: ce,
            alignment: align,
        },
        grads,
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalTrainReport {
    pub steps: usize,
    /// Mean of the per-batch total losses, `None` when no step ran.
    pub mean_loss: Option<f64>,
}

/// `epochs` passes of shuffled mini-batch gradient descent on the local
/// train split. With `λ = 0` the alignment term is skipped entirely.
pub fn client_local_train(
    model: &mut ModelParams,
    data: &ClientDataset,
    alignment: AlignmentTarget<'_>,
    cfg: &LocalTrainConfig,
    rng: &mut RngStream,
) -> Result<LocalTrainReport> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("local training needs batch_size >= 1 and lr > 0".into()));
    }
    let n = data.num_train();
    let mut report = LocalTrainReport::default();
    if n == 0 {
        return Ok(report);
    }
    let mut loss_sum = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x = data.train_inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.train_labels[i]).collect();
            let (loss, grads) = client_loss_and_grads(model, &x, &y, alignment, cfg.lambda)?;
            model.apply_gradients(&grads, cfg.lr)?;
            loss_sum += loss.total;
            report.steps += 1;
        }
    }
    if report.steps > 0 {
        report.mean_loss = Some(loss_sum / report.steps as f64);
    }
    Ok(report)
}

/// `⌈rate·N⌉` distinct clients drawn uniformly, returned in ascending order.
pub fn sample_participants(n: usize, rate: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("participation rate must lie in (0, 1], got {rate}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = participant_count(n, rate);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    let mut chosen = all[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, DEFAULT_STEP};
    use crate::vision::{Activation, ArchitectureSpec};

    fn toy(seed: u64) -> (ModelParams, Matrix, Vec<usize>, Matrix) {
        let mut rng = RngStream::for_stream(seed, "client-test", 0, 0);
        let arch = ArchitectureSpec {
            hidden_widths: vec![5],
            activation: Activation::Tanh,
            output_dim: 4,
        };
        let model = ModelParams::init(&arch, 3, 3, &mut rng).unwrap();
        let x = rng.normal_matrix(5, 3, 1.0);
        let y: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
        let targets = rng.normal_matrix(3, 4, 1.0);
        (model, x, y, targets)
    }

    fn total_loss_gradcheck(alignment: impl Fn(&Matrix) -> AlignmentTarget<'_>) {
        for seed in 0..5 {
            let (model, x, y, targets) = toy(seed);
            let align = alignment(&targets);
            let (_, grads) = client_loss_and_grads(&model, &x, &y, align, 0.7).unwrap();
            let flat = model.to_flat();
            let theta = Matrix::from_vec(1, flat.len(), flat).unwrap();
            let analytic = Matrix::from_vec(1, theta.cols(), grads.to_flat()).unwrap();
            let err = finite_difference_check(
                |p| {
                    let mut m = model.clone();
                    m.set_flat(p.as_slice())?;
                    Ok(client_loss_and_grads(&m, &x, &y, align, 0.7)?.0.total)
                },
                &theta,
                &analytic,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    const MASK: [bool; 3] = [true, true, true];

    #[test]
    fn contrastive_total_loss_gradient() {
        total_loss_gradcheck(|t| AlignmentTarget::Contrastive {
            targets: t,
            mask: &MASK,
            tau: 0.5,
        });
    }

    #[test]
    fn squared_distance_total_loss_gradient() {
        total_loss_gradcheck(|t| AlignmentTarget::SquaredDistance {
            targets: t,
            mask: &MASK,
        });
    }

    #[test]
    fn masked_class_contributes_cross_entropy_only() {
        let (model, x, _, targets) = toy(9);
        let y = vec![1; 5];
        let masked = [true, false, true];
        let (loss, g) = client_loss_and_grads(
            &model,
            &x,
            &y,
            AlignmentTarget::Contrastive {
                targets: &targets,
                mask: &masked,
                tau: 0.5,
            },
            3.0,
        )
        .unwrap();
        let (plain, g0) = client_loss_and_grads(&model, &x, &y, AlignmentTarget::None, 3.0).unwrap();
        assert_eq!(loss.alignment, 0.0);
        assert_eq!(loss.total, plain.total);
        assert_eq!(g, g0);
    }

    #[test]
    fn participants() {
        let mut rng = RngStream::for_stream(1, "participation", 0, 3);
        assert_eq!(sample_participants(6, 1.0, &mut rng).unwrap(), (0..6).collect::<Vec<_>>());
        let a = sample_participants(50, 0.2, &mut RngStream::for_stream(1, "p", 0, 3)).unwrap();
        let b = sample_participants(50, 0.2, &mut RngStream::for_stream(1, "p", 0, 3)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_participants(5, 0.0, &mut rng).is_err());
    }
}
