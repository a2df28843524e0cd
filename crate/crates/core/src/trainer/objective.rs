//! The symmetrized two-branch objective, shared by training, the gradient
//! audit (in `f64`) and the consistency-only reference path.

use fra_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::config::LossConfig;
use crate::error::Result;
use crate::losses::{consistency_sim_graph, memax_graph, semantic_relation_graph, sinkhorn_normalize};
use crate::networks::{BranchOutput, FraModel, ModelPair, Mode};

/// Graph handles for every logged quantity of one objective evaluation.
pub struct Objective {
    pub total: Var,
    pub consistency: Var,
    pub relation: Var,
    pub memax: Var,
    pub global_cos: Var,
    pub local_cos: Var,
    pub online: [BranchOutput; 2],
}

/// Scalar values of an [`Objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveValues {
    pub total: f64,
    pub consistency: f64,
    pub relation: f64,
    pub memax: f64,
    /// Entropy of the batch-mean student assignment (`-memax`).
    pub entropy: f64,
    pub global_cos: f64,
    pub local_cos: f64,
}

impl Objective {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> ObjectiveValues {
        let v = |x: Var| g.value(x).item().as_f64();
        let memax = v(self.memax);
        ObjectiveValues {
            total: v(self.total),
            consistency: v(self.consistency),
            relation: v(self.relation),
            memax,
            entropy: -memax,
            global_cos: v(self.global_cos),
            local_cos: v(self.local_cos),
        }
    }
}

/// Momentum-branch outputs, detached from the graph.
struct Targets {
    global: Var,
    locals: Var,
    /// Sinkhorn-balanced assignments `[B, HW, N]`.
    assignments: Var,
}

fn momentum_targets<T: Scalar>(
    g: &mut Graph<T>,
    model: &FraModel,
    momentum: &ParamStore<T>,
    view: Var,
    loss: &LossConfig,
) -> Result<Targets> {
    let out = model.branch(g, momentum, view, Mode::Train, loss.t_assign)?;
    let shape = g.shape(out.cosine).to_vec();
    let n = shape[2];
    let logits = g.value(out.cosine).map(|c| c / T::from_f64_lossy(loss.t_assign));
    let logits = logits.reshape([shape[0] * shape[1], n]);
    let balanced = sinkhorn_normalize(&logits, loss.sinkhorn_iters, loss.sinkhorn_epsilon)?.reshape(shape);
    Ok(Targets {
        global: g.detach(out.global),
        locals: g.detach(out.locals),
        assignments: g.constant(balanced),
    })
}

/// Builds the full objective for two views.
///
/// Each view passes through both branches. Consistency pairs the online
/// prediction of one view with the momentum embedding of the other view; the
/// relation term pairs each view's online heatmaps with the balanced momentum
/// assignments of the same view. The total is
/// `L_c + lambda_r * (L_r + lambda_memax * memax)`.
pub fn fra_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &FraModel,
    pair: &ModelPair<T>,
    views: [&Tensor<T>; 2],
    loss: &LossConfig,
) -> Result<Objective> {
    let inputs = [g.constant(views[0].clone()), g.constant(views[1].clone())];
    let t0 = momentum_targets(g, model, &pair.momentum, inputs[0], loss)?;
    let t1 = momentum_targets(g, model, &pair.momentum, inputs[1], loss)?;
    let targets = [t0, t1];

    let o0 = model.branch(g, &pair.online, inputs[0], Mode::Train, loss.t_assign)?;
    let o1 = model.branch(g, &pair.online, inputs[1], Mode::Train, loss.t_assign)?;
    let online = [o0, o1];

    let mut sims = Vec::with_capacity(2);
    for (i, j) in [(0, 1), (1, 0)] {
        let pg = model.predict_global(g, &pair.online, online[i].global, Mode::Train);
        let pl = if loss.lambda_c < 1.0 {
            model.predict_local(g, &pair.online, online[i].locals, Mode::Train)
        } else {
            // Local terms carry zero weight: compare detached copies so no
            // gradient reaches the local path.
            g.detach(online[i].locals)
        };
        sims.push(consistency_sim_graph(g, pg, targets[j].global, pl, targets[j].locals, loss.lambda_c)?);
    }
    let consistency = g.add(sims[0].loss, sims[1].loss);
    let gsum = g.add(sims[0].global_cos, sims[1].global_cos);
    let global_cos = g.scale(gsum, 0.5);
    let lsum = g.add(sims[0].local_cos, sims[1].local_cos);
    let local_cos = g.scale(lsum, 0.5);

    let relation = semantic_relation_graph(
        g,
        online[0].probs,
        targets[0].assignments,
        online[1].probs,
        targets[1].assignments,
    )?;
    let m0 = memax_graph(g, online[0].probs);
    let m1 = memax_graph(g, online[1].probs);
    let msum = g.add(m0, m1);
    let memax = g.scale(msum, 0.5);

    let total = if loss.lambda_r == 0.0 {
        consistency
    } else {
        let weighted_memax = g.scale(memax, loss.lambda_memax);
        let reg = g.add(relation, weighted_memax);
        let reg = g.scale(reg, loss.lambda_r);
        g.add(consistency, reg)
    };
    Ok(Objective { total, consistency, relation, memax, global_cos, local_cos, online })
}

/// Consistency-only objective on global embeddings: symmetrized negative
/// cosine between online predictions and momentum projections, with no
/// decoder head involved.
pub fn global_consistency_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &FraModel,
    pair: &ModelPair<T>,
    views: [&Tensor<T>; 2],
) -> Result<Var> {
    let mut targets = Vec::with_capacity(2);
    let mut preds = Vec::with_capacity(2);
    for v in views {
        let x = g.constant(v.clone());
        let m = model.encode(g, &pair.momentum, x, Mode::Train)?;
        let z = model.project_global(g, &pair.momentum, m.pooled, Mode::Train)?;
        targets.push(g.detach(z));
        let o = model.encode(g, &pair.online, x, Mode::Train)?;
        let z = model.project_global(g, &pair.online, o.pooled, Mode::Train)?;
        preds.push(model.predict_global(g, &pair.online, z, Mode::Train));
    }
    let c01 = g.cosine(preds[0], targets[1], crate::heatmap_head::NORM_EPS);
    let c01 = g.mean_all(c01);
    let c10 = g.cosine(preds[1], targets[0], crate::heatmap_head::NORM_EPS);
    let c10 = g.mean_all(c10);
    let s = g.add(c01, c10);
    Ok(g.neg(s))
}
