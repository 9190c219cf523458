//! Prototype-based comparison methods. They reuse the protocol plumbing and
//! differ only in what the server broadcasts.
//!
//! FedTGP-lite and AlignFed-lite are simplified reconstructions: a pull plus
//! squared-hinge objective for trainable server prototypes, and a fixed
//! spherical code with a linearly decaying alignment weight.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, RngStream};
use crate::protocol::{AlignmentKind, Broadcast, GlobalPrototypes, PrototypeSnapshot, ServerOutput, ServerStrategy};

pub const HYPERSPHERE_ITERATIONS: usize = 500;
const HYPERSPHERE_SHARPNESS: f64 = 4.0;
const HYPERSPHERE_STEP: f64 = 0.3;

fn normalize_rows(m: &mut Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateInput(format!("row {i} cannot be normalized")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Largest cosine between two distinct rows of a unit-row matrix.
pub fn max_pairwise_cosine(m: &Matrix) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            best = best.max(dot(m.row(i), m.row(j)));
        }
    }
    best
}

/// Unit-norm rows spread over the sphere by projected gradient descent on a
/// soft maximum of the pairwise cosines.
pub fn generate_hypersphere_prototypes(classes: usize, dim: usize, rng: &mut RngStream) -> Result<Matrix> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "hypersphere prototypes need C >= 2 and d >= 2, got C={classes}, d={dim}"
        )));
    }
    let mut x = rng.normal_matrix(classes, dim, 1.0);
    normalize_rows(&mut x)?;
    let pairs = (classes * (classes - 1) / 2) as f64;
    for _ in 0..HYPERSPHERE_ITERATIONS {
        let gram = x.matmul_t(&x)?;
        let mut top = f64::NEG_INFINITY;
        for i in 0..classes {
            for j in i + 1..classes {
                top = top.max(gram[(i, j)]);
            }
        }
        let mut w = Matrix::zeros(classes, classes);
        let mut z = 0.0;
        for i in 0..classes {
            for j in i + 1..classes {
                let e = (HYPERSPHERE_SHARPNESS * (gram[(i, j)] - top)).exp();
                w[(i, j)] = e;
                w[(j, i)] = e;
                z += e;
            }
        }
        // Soft-maximum gradient, rescaled by the mean number of pairs per row.
        let mut grad = w.matmul(&x)?;
        grad.scale(pairs / (z * classes as f64));
        for i in 0..classes {
            let radial = dot(grad.row(i), x.row(i));
            let xi = x.row(i).to_vec();
            for (g, v) in grad.row_mut(i).iter_mut().zip(&xi) {
                *g -= radial * v;
            }
        }
        x.axpy(-HYPERSPHERE_STEP, &grad)?;
        normalize_rows(&mut x)?;
    }
    Ok(x)
}

/// `Σ_c ‖T_c − P_c‖² + Σ_{c≠j} max(0, margin − ‖T_c − T_j‖)²` over classes in
/// `mask`, and its gradient w.r.t. `t` (zero rows elsewhere).
pub fn fedtgp_server_objective(
    t: &Matrix,
    centers: &Matrix,
    mask: &[bool],
    margin: f64,
) -> Result<(f64, Matrix)> {
    if t.shape() != centers.shape() || mask.len() != t.rows() {
        return Err(Error::Shape(format!(
            "prototypes {:?}, centers {:?}, mask {}",
            t.shape(),
            centers.shape(),
            mask.len()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let present: Vec<usize> = (0..mask.len()).filter(|&c| mask[c]).collect();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t.rows(), t.cols());
    for &c in &present {
        for (k, (&a, &b)) in t.row(c).iter().zip(centers.row(c)).enumerate() {
            loss += (a - b) * (a - b);
            grad[(c, k)] += 2.0 * (a - b);
        }
    }
    for (ii, &c) in present.iter().enumerate() {
        for &j in &present[ii + 1..] {
            let diff: Vec<f64> = t.row(c).iter().zip(t.row(j)).map(|(a, b)| a - b).collect();
            let dist = norm(&diff);
            let h = margin - dist;
            if h <= 0.0 {
                continue;
            }
            // The unordered pair appears twice in the sum over c ≠ j.
            loss += 2.0 * h * h;
            if dist == 0.0 {
                continue;
            }
            let s = 4.0 * h / dist;
            for (k, &dk) in diff.iter().enumerate() {
                grad[(c, k)] -= s * dk;
                grad[(j, k)] += s * dk;
            }
        }
    }
    Ok((loss, grad))
}

/// λ at `round` of `rounds`, linear from `start` (first round) to `end` (last round).
pub fn alignfed_lambda(start: f64, end: f64, round: usize, rounds: usize) -> f64 {
    if rounds <= 1 {
        return start;
    }
    let frac = round.min(rounds - 1) as f64 / (rounds - 1) as f64;
    start + (end - start) * frac
}

fn masked_floats(mask: &[bool], dim: usize) -> u64 {
    (mask.iter().filter(|&&m| m).count() * dim) as u64
}

fn image_snapshot(global: &GlobalPrototypes) -> PrototypeSnapshot {
    PrototypeSnapshot {
        name: "image".into(),
        prototypes: global.protos.clone(),
        mask: global.mask.clone(),
    }
}

/// Broadcasts the aggregated image prototypes themselves.
pub struct FedProto {
    pub lambda: f64,
}

impl ServerStrategy for FedProto {
    fn server_step(&mut self, global: &GlobalPrototypes, _round: usize) -> Result<ServerOutput> {
        Ok(ServerOutput {
            broadcast: Some(Broadcast {
                prototypes: global.protos.clone(),
                mask: global.mask.clone(),
                kind: AlignmentKind::SquaredDistance,
                lambda: self.lambda,
                floats_per_client: masked_floats(&global.mask, global.protos.cols()),
            }),
            server_loss: None,
        })
    }

    fn banks(&self, global: &GlobalPrototypes) -> Vec<PrototypeSnapshot> {
        vec![image_snapshot(global)]
    }
}

/// Trainable server prototypes pulled to the client centers and pushed apart.
pub struct FedTgp {
    pub lambda: f64,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    prototypes: Matrix,
    initialized: Vec<bool>,
}

impl FedTgp {
    pub fn new(num_classes: usize, dim: usize, lambda: f64, margin: f64, lr: f64, epochs: usize) -> Self {
        Self {
            lambda,
            margin,
            lr,
            epochs,
            prototypes: Matrix::zeros(num_classes, dim),
            initialized: vec![false; num_classes],
        }
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    /// Runs the server descent against `centers`; returns the loss before each step
    /// followed by the final loss.
    pub fn fit(&mut self, centers: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        for c in 0..mask.len() {
            if mask[c] && !self.initialized[c] {
                self.prototypes.row_mut(c).copy_from_slice(centers.row(c));
                self.initialized[c] = true;
            }
        }
        let mut losses = Vec::with_capacity(self.epochs + 1);
        for _ in 0..self.epochs {
            let (loss, grad) = fedtgp_server_objective(&self.prototypes, centers, mask, self.margin)?;
            losses.push(loss);
            self.prototypes.axpy(-self.lr, &grad)?;
            self.prototypes.ensure_finite("FedTGP server prototypes")?;
        }
        losses.push(fedtgp_server_objective(&self.prototypes, centers, mask, self.margin)?.0);
        Ok(losses)
    }
}

impl ServerStrategy for FedTgp {
    fn server_step(&mut self, global: &GlobalPrototypes, _round: usize) -> Result<ServerOutput> {
        let losses = self.fit(&global.protos, &global.mask)?;
        Ok(ServerOutput {
            broadcast: Some(Broadcast {
                prototypes: self.prototypes.clone(),
                mask: global.mask.clone(),
                kind: AlignmentKind::SquaredDistance,
                lambda: self.lambda,
                floats_per_client: masked_floats(&global.mask, self.prototypes.cols()),
            }),
            server_loss: losses.last().copied(),
        })
    }

    fn banks(&self, global: &GlobalPrototypes) -> Vec<PrototypeSnapshot> {
        vec![
            PrototypeSnapshot {
                name: "trainable".into(),
                prototypes: self.prototypes.clone(),
                mask: self.initialized.clone(),
            },
            image_snapshot(global),
        ]
    }
}

/// Fixed spherical code broadcast unchanged every round.
pub struct AlignFed {
    pub bank: Matrix,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub rounds: usize,
}

impl ServerStrategy for AlignFed {
    fn server_step(&mut self, _global: &GlobalPrototypes, round: usize) -> Result<ServerOutput> {
        let (c, d) = self.bank.shape();
        Ok(ServerOutput {
            broadcast: Some(Broadcast {
                prototypes: self.bank.clone(),
                mask: vec![true; c],
                kind: AlignmentKind::SquaredDistance,
                lambda: alignfed_lambda(self.lambda_start, self.lambda_end, round, self.rounds),
                floats_per_client: (c * d) as u64,
            }),
            server_loss: None,
        })
    }

    fn banks(&self, global: &GlobalPrototypes) -> Vec<PrototypeSnapshot> {
        vec![
            PrototypeSnapshot {
                name: "hypersphere".into(),
                prototypes: self.bank.clone(),
                mask: vec![true; self.bank.rows()],
            },
            image_snapshot(global),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, DEFAULT_STEP};

    #[test]
    fn two_points_are_antipodal() {
        let x = generate_hypersphere_prototypes(2, 5, &mut RngStream::for_stream(3, "hs", 0, 0)).unwrap();
        assert!((dot(x.row(0), x.row(1)) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn simplex_bound_and_unit_rows() {
        for (c, d) in [(3, 3), (4, 8), (6, 16), (8, 8)] {
            let x = generate_hypersphere_prototypes(c, d, &mut RngStream::for_stream(c as u64, "hs", 0, 0))
                .unwrap();
            for row in x.row_iter() {
                assert!((norm(row) - 1.0).abs() < 1e-9);
            }
            let bound = -1.0 / (c as f64 - 1.0);
            assert!(max_pairwise_cosine(&x) <= bound + 1e-3, "C={c} d={d}: {}", max_pairwise_cosine(&x));
        }
    }

    #[test]
    fn hypersphere_is_deterministic() {
        let a = generate_hypersphere_prototypes(5, 4, &mut RngStream::for_stream(1, "hs", 0, 0)).unwrap();
        let b = generate_hypersphere_prototypes(5, 4, &mut RngStream::for_stream(1, "hs", 0, 0)).unwrap();
        assert_eq!(a, b);
        assert!(generate_hypersphere_prototypes(1, 4, &mut RngStream::for_stream(1, "hs", 0, 0)).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = RngStream::for_stream(seed, "tgp", 0, 0);
            let t = rng.normal_matrix(3, 4, 1.0);
            let centers = rng.normal_matrix(3, 4, 1.0);
            let mask = [true, true, seed % 4 != 0];
            let (_, g) = fedtgp_server_objective(&t, &centers, &mask, 2.5).unwrap();
            let err = finite_difference_check(
                |p| Ok(fedtgp_server_objective(p, &centers, &mask, 2.5)?.0),
                &t,
                &g,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn hinge_regions() {
        let t = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.0]]).unwrap();
        let (loss, g) = fedtgp_server_objective(&t, &t, &[true, true], 5.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        let near = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let (loss, _) = fedtgp_server_objective(&near, &near, &[true, true], 0.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_margin_converges_to_centers() {
        let mut rng = RngStream::for_stream(4, "tgp", 0, 0);
        let centers = rng.normal_matrix(3, 4, 1.0);
        let start = rng.normal_matrix(3, 4, 1.0);
        let mut server = FedTgp::new(3, 4, 1.0, 0.0, 0.1, 200);
        server.initialized = vec![true; 3];
        server.prototypes = start;
        server.fit(&centers, &[true; 3]).unwrap();
        assert!(server.prototypes.max_abs_diff(&centers) < 1e-9);
    }

    #[test]
    fn lambda_schedule_endpoints() {
        assert_eq!(alignfed_lambda(20.0, 2.0, 0, 50), 20.0);
        assert_eq!(alignfed_lambda(20.0, 2.0, 49, 50), 2.0);
        assert!((alignfed_lambda(20.0, 2.0, 1, 3) - 11.0).abs() < 1e-12);
        assert_eq!(alignfed_lambda(20.0, 2.0, 0, 1), 20.0);
    }
}
