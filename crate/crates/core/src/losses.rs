//! Relation (pixel-to-region assignment) and consistency (embedding
//! matching) objectives, plus Sinkhorn-Knopp target balancing.
//!
//! Graph-level functions build differentiable scalars; the tensor-level
//! wrappers evaluate the same code on constants.

use fra_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FraError, Result};
use crate::heatmap_head::NORM_EPS;

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the global term in the consistency loss.
    pub lambda_c: f64,
    /// Weight of the relation loss in the overall objective.
    pub lambda_r: f64,
    /// Weight of the mean-entropy regularizer inside the relation term.
    pub lambda_memax: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.5, lambda_r: 0.1, lambda_memax: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(FraError::Config(format!("loss.lambda_c must lie in [0, 1], got {}", self.lambda_c)));
        }
        if !(self.lambda_r >= 0.0) || !self.lambda_r.is_finite() {
            return Err(FraError::Config(format!("loss.lambda_r must be >= 0, got {}", self.lambda_r)));
        }
        if !(self.lambda_memax >= 0.0) || !self.lambda_memax.is_finite() {
            return Err(FraError::Config(format!("loss.lambda_memax must be >= 0, got {}", self.lambda_memax)));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Balanced soft assignment of `P` rows to `N` clusters.
///
/// Starts from `exp(logits / eps)` and alternates cluster-wise and row-wise
/// normalization in the log domain. Each cluster is pushed toward total mass
/// `P / N`; the final row step makes every row a distribution.
pub fn sinkhorn_normalize<T: Scalar>(logits: &Tensor<T>, n_iters: usize, eps: f64) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(FraError::Domain(format!("sinkhorn expects [P, N] logits, got {:?}", logits.shape())));
    }
    if n_iters == 0 || !(eps > 0.0) {
        return Err(FraError::Domain(format!("sinkhorn needs n_iters >= 1 and eps > 0 (got {n_iters}, {eps})")));
    }
    if !logits.all_finite() {
        return Err(FraError::Numeric("sinkhorn logits contain non-finite values".into()));
    }
    let (p, n) = (logits.dim(0), logits.dim(1));
    if p == 0 || n == 0 {
        return Err(FraError::Domain("sinkhorn needs at least one row and one cluster".into()));
    }
    let mut lq: Vec<f64> = logits.data().iter().map(|v| v.as_f64() / eps).collect();
    let total = log_sum_exp(lq.iter().copied());
    lq.iter_mut().for_each(|v| *v -= total);
    let (log_p, log_n) = ((p as f64).ln(), (n as f64).ln());
    for _ in 0..n_iters {
        for c in 0..n {
            let s = log_sum_exp((0..p).map(|r| lq[r * n + c]));
            for r in 0..p {
                lq[r * n + c] -= s + log_n;
            }
        }
        for row in lq.chunks_mut(n) {
            let s = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= s + log_p);
        }
    }
    Ok(Tensor::new([p, n], lq.into_iter().map(|v| T::from_f64_lossy((v + log_p).exp())).collect()))
}

/// `-sum_m target[m] * log(student[m])` averaged over all leading positions.
/// `student` is a graph variable, `target` a constant of the same shape.
pub fn relation_ce_graph<T: Scalar>(g: &mut Graph<T>, student: Var, target: Var) -> Result<Var> {
    if g.shape(student) != g.shape(target) {
        return Err(FraError::Domain(format!(
            "relation loss shape mismatch: {:?} vs {:?}",
            g.shape(student),
            g.shape(target)
        )));
    }
    let n = *g.shape(student).last().unwrap_or(&1);
    let rows = g.value(student).numel() / n.max(1);
    let log = g.log_clamp(student, LOG_FLOOR);
    let prod = g.mul(log, target);
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / rows.max(1) as f64))
}

/// Cross-entropy of a single pair of distributions.
pub fn relation_ce<T: Scalar>(student: &[T], target: &[T]) -> Result<T> {
    if student.len() != target.len() {
        return Err(FraError::Domain("relation_ce: distributions differ in length".into()));
    }
    let mut g = Graph::inference();
    let s = g.constant(Tensor::new([1, student.len()], student.to_vec()));
    let t = g.constant(Tensor::new([1, target.len()], target.to_vec()));
    let ce = relation_ce_graph(&mut g, s, t)?;
    Ok(g.value(ce).item())
}

/// Symmetrized relation loss for fields laid out `[B, ..., N]` (any spatial
/// layout between batch and region axes): per-pixel `CE1 + CE2`, averaged
/// over pixels and batch.
pub fn semantic_relation_graph<T: Scalar>(
    g: &mut Graph<T>,
    student1: Var,
    target1: Var,
    student2: Var,
    target2: Var,
) -> Result<Var> {
    if g.shape(student1) != g.shape(student2) {
        return Err(FraError::Domain(format!(
            "views disagree in shape: {:?} vs {:?}",
            g.shape(student1),
            g.shape(student2)
        )));
    }
    let a = relation_ce_graph(g, student1, target1)?;
    let b = relation_ce_graph(g, student2, target2)?;
    Ok(g.add(a, b))
}

/// Tensor-level symmetrized relation loss on `[B, N, H, W]` assignment fields.
pub fn semantic_relation_loss<T: Scalar>(
    s1: &Tensor<T>,
    s_hat1: &Tensor<T>,
    s2: &Tensor<T>,
    s_hat2: &Tensor<T>,
) -> Result<T> {
    for t in [s1, s_hat1, s2, s_hat2] {
        if t.rank() != 4 || t.shape() != s1.shape() {
            return Err(FraError::Domain(format!(
                "relation fields must share one [B, N, H, W] shape, got {:?} and {:?}",
                s1.shape(),
                t.shape()
            )));
        }
    }
    let mut g = Graph::inference();
    let mut pixel_major = |t: &Tensor<T>| g.constant(t.permute(&[0, 2, 3, 1]));
    let (a, b, c, d) = (pixel_major(s1), pixel_major(s_hat1), pixel_major(s2), pixel_major(s_hat2));
    let l = semantic_relation_graph(&mut g, a, b, c, d)?;
    Ok(g.value(l).item())
}

/// `sum_m pbar[m] log pbar[m]` where `pbar` is the mean over every leading
/// position of `probs` (last axis = regions). This is minus the entropy of
/// the average assignment, in `[-log N, 0]`.
pub fn memax_graph<T: Scalar>(g: &mut Graph<T>, probs: Var) -> Var {
    let n = *g.shape(probs).last().expect("memax on scalar");
    let rows = g.value(probs).numel() / n;
    let flat = g.reshape(probs, &[rows, n]);
    let mean = g.mean_axis(flat, 0);
    let log = g.log_clamp(mean, LOG_FLOOR);
    let plogp = g.mul(mean, log);
    g.sum_all(plogp)
}

/// Tensor-level regularizer on `[P, N]` rows.
pub fn memax_regularizer<T: Scalar>(probs: &Tensor<T>) -> T {
    let mut g = Graph::inference();
    let p = g.constant(probs.clone());
    let m = memax_graph(&mut g, p);
    g.value(m).item()
}

/// Entropy of the average assignment (`-memax`).
pub fn cluster_usage_entropy<T: Scalar>(probs: &Tensor<T>) -> f64 {
    -memax_regularizer(probs).as_f64()
}

/// Components of one directional consistency term.
pub struct SimTerms {
    /// `-(lambda_c * global + (1 - lambda_c) * local)`.
    pub loss: Var,
    /// Batch-mean cosine between predicted and target global embeddings.
    pub global_cos: Var,
    /// Batch- and region-mean cosine between predicted and target local embeddings.
    pub local_cos: Var,
}

/// One directional consistency term. Inputs are already passed through the
/// predictors (`pred_*`) and targets are constants. Shapes: globals `[B, D]`,
/// locals `[B, N, D]`.
pub fn consistency_sim_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred_global: Var,
    target_global: Var,
    pred_local: Var,
    target_local: Var,
    lambda_c: f64,
) -> Result<SimTerms> {
    if g.shape(pred_global) != g.shape(target_global) || g.shape(pred_local) != g.shape(target_local) {
        return Err(FraError::Domain("consistency inputs disagree in shape".into()));
    }
    let gc = g.cosine(pred_global, target_global, NORM_EPS);
    let global_cos = g.mean_all(gc);
    let lc = g.cosine(pred_local, target_local, NORM_EPS);
    let local_cos = g.mean_all(lc);
    let a = g.scale(global_cos, -lambda_c);
    let loss = if lambda_c == 1.0 {
        a
    } else {
        let b = g.scale(local_cos, -(1.0 - lambda_c));
        g.add(a, b)
    };
    Ok(SimTerms { loss, global_cos, local_cos })
}

/// Tensor-level directional term with predictor closures applied to the
/// online embeddings.
pub fn consistency_sim<T: Scalar>(
    z1_global: &Tensor<T>,
    z2_global: &Tensor<T>,
    z1_locals: &Tensor<T>,
    z2_locals: &Tensor<T>,
    predict_global: impl Fn(&Tensor<T>) -> Tensor<T>,
    predict_local: impl Fn(&Tensor<T>) -> Tensor<T>,
    lambda_c: f64,
) -> Result<T> {
    let mut g = Graph::inference();
    let pg = g.constant(predict_global(z1_global));
    let tg = g.constant(z2_global.clone());
    let pl = g.constant(predict_local(z1_locals));
    let tl = g.constant(z2_locals.clone());
    let terms = consistency_sim_graph(&mut g, pg, tg, pl, tl, lambda_c)?;
    Ok(g.value(terms.loss).item())
}

/// `L_sim(1 -> 2) + L_sim(2 -> 1)`.
pub fn semantic_consistency_loss<T: Scalar>(sim_12: T, sim_21: T) -> T {
    sim_12 + sim_21
}

/// `L_c + lambda_r * L_r`.
pub fn total_loss<T: Scalar>(consistency: T, relation: T, lambda_r: f64) -> T {
    consistency + T::from_f64_lossy(lambda_r) * relation
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_closed_forms() {
        assert_eq!(relation_ce(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let u = vec![0.125f64; 8];
        let mut t = vec![0.0f64; 8];
        t[3] = 1.0;
        assert!((relation_ce(&u, &t).unwrap() - 8f64.ln()).abs() < 1e-12);
        let v = relation_ce(&[0.7f64, 0.3], &[0.5, 0.5]).unwrap();
        assert!((v - 0.780_32).abs() < 1e-5, "{v}");
    }

    #[test]
    fn ce_clamps_zero_probabilities() {
        let v = relation_ce(&[0.0f32, 1.0], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite());
        assert!((v as f64 - (-(1e-12f64).ln())).abs() < 1e-3);
    }

    #[test]
    fn memax_closed_forms() {
        let uniform = Tensor::<f64>::full([5, 8], 0.125);
        assert!((memax_regularizer(&uniform) + 8f64.ln()).abs() < 1e-12);
        let onehot = Tensor::<f64>::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        assert!(memax_regularizer(&onehot).abs() < 1e-9);
        let split = Tensor::<f64>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!((memax_regularizer(&split) + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(-1.5f64, 2.0, 0.1) + 1.3).abs() < 1e-12);
        assert_eq!(total_loss(-0.7f64, 5.0, 0.0), -0.7);
        assert_eq!(semantic_consistency_loss(-1.0f64, 0.0), -1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_c: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_r: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_memax: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let t = Tensor::<f64>::new([1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(sinkhorn_normalize(&t, 3, 0.05), Err(FraError::Numeric(_))));
        let t = Tensor::<f64>::zeros([2, 2]);
        assert!(sinkhorn_normalize(&t, 0, 0.05).is_err());
        assert!(sinkhorn_normalize(&t, 1, 0.0).is_err());
    }
}
