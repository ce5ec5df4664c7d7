use super::config::TrainConfig;
use crate::autodiff::{ParamSet, Tape};
use crate::error::{Error, Result};
use crate::gaf::{OccNet, SceneInput};
use crate::objectives::{occupancy_loss, AdamW, OptimConfig};
use crate::splat::{renormalize_quaternions, splat_occupancy, splat_var, GaussianSet, GaussianVars, LabelGrid, LogitGrid};

/// Loss curve of a joint run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Network parameters followed by the Gaussian attributes, so the network's
/// own indices stay valid on the joint set.
fn joint_params(net: &OccNet, gaussians: &GaussianSet) -> Result<(ParamSet, usize)> {
    let mut all = net.params.clone();
    let k = all.len();
    let g = gaussians.to_params();
    for (name, t) in g.names().iter().zip(g.tensors()) {
        all.insert(name.clone(), t.clone())?;
    }
    Ok((all, k))
}

fn split_params(all: &ParamSet, k: usize) -> Result<(ParamSet, GaussianSet)> {
    let (mut net, mut g) = (ParamSet::new(), ParamSet::new());
    for (i, (name, t)) in all.names().iter().zip(all.tensors()).enumerate() {
        if i < k {
            net.insert(name.clone(), t.clone())?;
        } else {
            g.insert(name.clone(), t.clone())?;
        }
    }
    Ok((net, GaussianSet::from_params(&g)?))
}

/// Loss of the refined, splatted Gaussians against `gt` on a fresh tape.
/// Returns the tape, the loss and the joint binding.
fn joint_loss(
    tape: &mut Tape,
    net: &OccNet,
    all: &ParamSet,
    k: usize,
    scene: &SceneInput,
    gt: &LabelGrid,
    radius_multiplier: f64,
) -> Result<(crate::autodiff::Var, crate::autodiff::BoundParams)> {
    let bound = all.bind(tape);
    let g = GaussianVars { mu: bound.var(k), rot: bound.var(k + 1), log_scale: bound.var(k + 2), sem: bound.var(k + 3) };
    let refined = net.forward(tape, &bound, scene, g)?;
    let logits = splat_var(tape, refined, &gt.spec, radius_multiplier)?;
    let loss = occupancy_loss(tape, logits, &gt.labels)?;
    Ok((loss, bound))
}

/// Train the fusion network and the Gaussians together against one
/// ground-truth grid. The Gaussians' attributes are not weight-decayed.
pub fn train_joint(net: &mut OccNet, gaussians: &GaussianSet, scene: &SceneInput, gt: &LabelGrid, cfg: &TrainConfig) -> Result<(GaussianSet, TrainLog)> {
    if gaussians.num_classes != net.num_classes || gt.num_classes != net.num_classes {
        return Err(Error::shape("train", format!("{} / {} / {} classes", gaussians.num_classes, net.num_classes, gt.num_classes)));
    }
    let optim = OptimConfig { total_iters: cfg.optim.total_iters.max(cfg.iterations).max(1), ..cfg.optim.clone() };
    optim.validate()?;
    let (mut all, k) = joint_params(net, gaussians)?;
    let mut opt = AdamW::new(optim, all.tensors());
    for i in k..all.len() {
        opt.set_decay(i, false);
        opt.set_lr_scale(i, cfg.gaussian_lr_scale);
    }
    let rot = k + 1;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut tape = Tape::new();
        let (loss, bound) = joint_loss(&mut tape, net, &all, k, scene, gt, cfg.radius_multiplier)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} at iteration {step}")));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let g = all.gradients(&bound, &grads);
        drop(tape);
        opt.step(all.tensors_mut(), &g)?;
        renormalize_quaternions(&mut all.tensors_mut()[rot]);
    }
    let (params, gset) = split_params(&all, k)?;
    net.params = params;
    Ok((gset, TrainLog { losses }))
}

/// Loss of the current model without updating it.
pub fn evaluate_loss(net: &OccNet, gaussians: &GaussianSet, scene: &SceneInput, gt: &LabelGrid, radius_multiplier: f64) -> Result<f64> {
    let (all, k) = joint_params(net, gaussians)?;
    let mut tape = Tape::new();
    let (loss, _) = joint_loss(&mut tape, net, &all, k, scene, gt, radius_multiplier)?;
    Ok(tape.value(loss).item())
}

/// Refined Gaussians and their splatted logits.
pub fn predict(net: &OccNet, gaussians: &GaussianSet, scene: &SceneInput, grid: &crate::scene::GridSpec, radius_multiplier: f64) -> Result<(GaussianSet, LogitGrid)> {
    let refined = net.refine(scene, gaussians)?;
    let logits = splat_occupancy(&refined, grid, radius_multiplier)?;
    if logits.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("predicted logits are not finite".into()));
    }
    Ok((refined, logits))
}
