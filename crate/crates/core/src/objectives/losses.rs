use crate::autodiff::{Function, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_rows(op: &'static str, values: &[f64], c: usize, labels: &[u8]) -> Result<()> {
    if c == 0 || values.len() != labels.len() * c {
        return Err(Error::shape(op, format!("{} values for {} labels x {c} classes", values.len(), labels.len())));
    }
    Ok(())
}

/// Mean `-log softmax(logits)[label]` over voxels whose label is not
/// `ignore`. Returns the loss and the per-row softmax.
fn ce_forward(logits: &[f64], c: usize, labels: &[u8], ignore: Option<u8>) -> Result<(f64, Vec<f64>, usize)> {
    check_rows("cross_entropy", logits, c, labels)?;
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, (row, &l)) in logits.chunks(c).zip(labels).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        for (k, x) in row.iter().enumerate() {
            probs[v * c + k] = (x - mx).exp() / z;
        }
        if Some(l) == ignore {
            continue;
        }
        if l as usize >= c {
            return Err(Error::Input(format!("label {l} outside 0..{c}")));
        }
        total += z.ln() + mx - row[l as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("cross entropy over zero labeled voxels".into()));
    }
    Ok((total / count as f64, probs, count))
}

pub fn cross_entropy(logits: &[f64], c: usize, labels: &[u8], ignore: Option<u8>) -> Result<f64> {
    Ok(ce_forward(logits, c, labels, ignore)?.0)
}

struct CrossEntropyFn {
    probs: Vec<f64>,
    labels: Vec<u8>,
    ignore: Option<u8>,
    c: usize,
    count: usize,
}

impl Function for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item() / self.count as f64;
        let mut d = vec![0.0; self.probs.len()];
        for (v, &l) in self.labels.iter().enumerate() {
            if Some(l) == self.ignore {
                continue;
            }
            for k in 0..self.c {
                let onehot = if k == l as usize { 1.0 } else { 0.0 };
                d[v * self.c + k] = g * (self.probs[v * self.c + k] - onehot);
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

/// Differentiable cross entropy of `[V, C]` logits.
pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[u8], ignore: Option<u8>) -> Result<Var> {
    let t = tape.value(logits);
    let c = t.last_dim();
    let (loss, probs, count) = ce_forward(t.data(), c, labels, ignore)?;
    let f = CrossEntropyFn { probs, labels: labels.to_vec(), ignore, c, count };
    Ok(tape.custom(&[logits], Tensor::scalar(loss), f))
}

/// Gradient of the Lovász extension of the Jaccard loss at a sorted
/// ground-truth indicator.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Per present class: the sort order of errors and the rank weights.
struct LovaszClass {
    class: usize,
    order: Vec<usize>,
    weights: Vec<f64>,
}

fn lovasz_forward(probs: &[f64], c: usize, labels: &[u8]) -> Result<(f64, Vec<LovaszClass>)> {
    check_rows("lovasz_softmax", probs, c, labels)?;
    let n = labels.len();
    let mut classes = Vec::new();
    let mut total = 0.0;
    for k in 0..c {
        if !labels.iter().any(|&l| l as usize == k) {
            continue;
        }
        let err: Vec<f64> = (0..n)
            .map(|i| {
                let p = probs[i * c + k];
                if labels[i] as usize == k { 1.0 - p } else { p }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        // descending errors; index order keeps ties deterministic
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let gt: Vec<bool> = order.iter().map(|&i| labels[i] as usize == k).collect();
        let weights = lovasz_grad(&gt);
        total += order.iter().zip(&weights).map(|(&i, w)| err[i] * w).sum::<f64>();
        classes.push(LovaszClass { class: k, order, weights });
    }
    if classes.is_empty() {
        return Ok((0.0, classes));
    }
    Ok((total / classes.len() as f64, classes))
}

/// Lovász-Softmax averaged over classes present in `labels`.
pub fn lovasz_softmax(probs: &[f64], c: usize, labels: &[u8]) -> Result<f64> {
    Ok(lovasz_forward(probs, c, labels)?.0)
}

struct LovaszFn {
    classes: Vec<LovaszClass>,
    labels: Vec<u8>,
    c: usize,
}

impl Function for LovaszFn {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut d = vec![0.0; inputs[0].len()];
        if !self.classes.is_empty() {
            let g = grad.item() / self.classes.len() as f64;
            for cl in &self.classes {
                for (&i, w) in cl.order.iter().zip(&cl.weights) {
                    let sign = if self.labels[i] as usize == cl.class { -1.0 } else { 1.0 };
                    d[i * self.c + cl.class] += g * sign * w;
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))]
    }
}

/// Differentiable Lovász-Softmax of `[V, C]` probabilities.
pub fn lovasz_softmax_var(tape: &mut Tape, probs: Var, labels: &[u8]) -> Result<Var> {
    let t = tape.value(probs);
    let c = t.last_dim();
    let (loss, classes) = lovasz_forward(t.data(), c, labels)?;
    Ok(tape.custom(&[probs], Tensor::scalar(loss), LovaszFn { classes, labels: labels.to_vec(), c }))
}

/// `CE(logits) + Lovász(softmax(logits))` with unit weights.
pub fn occupancy_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let ce = cross_entropy_var(tape, logits, labels, None)?;
    let probs = tape.softmax(logits);
    let lov = lovasz_softmax_var(tape, probs, labels)?;
    tape.add(ce, lov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck_many, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
        logits
            .chunks(c)
            .flat_map(|r| {
                let z: f64 = r.iter().map(|x| x.exp()).sum();
                r.iter().map(move |x| x.exp() / z)
            })
            .collect()
    }

    #[test]
    fn ce_closed_forms() {
        let labels = vec![0u8, 3, 5, 2];
        let uniform = vec![0.0; 4 * 6];
        assert!((cross_entropy(&uniform, 6, &labels, None).unwrap() - 6f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 4 * 6];
        for (v, &l) in labels.iter().enumerate() {
            sat[v * 6 + l as usize] = 30.0;
        }
        assert!(cross_entropy(&sat, 6, &labels, None).unwrap() < 1e-9);
        assert!(cross_entropy(&uniform, 6, &labels, Some(0)).is_ok());
        assert!(cross_entropy(&uniform[..6], 6, &[1], Some(1)).is_err());
    }

    #[test]
    fn ce_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let logits: Vec<f64> = (0..9 * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u8> = (0..9).map(|_| rng.random_range(0..c as u8)).collect();
        let mut want = 0.0;
        for v in 0..9 {
            let row = &logits[v * c..(v + 1) * c];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            want += lse - row[labels[v] as usize];
        }
        want /= 9.0;
        assert!((cross_entropy(&logits, c, &labels, None).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn lovasz_single_voxel() {
        let l = lovasz_softmax(&[0.7, 0.3], 2, &[1]).unwrap();
        assert!((l - 0.7).abs() < 1e-15);
    }

    #[test]
    fn lovasz_zero_on_perfect_prediction() {
        let labels = vec![0u8, 2, 1, 2, 0];
        let mut p = vec![0.0; 15];
        for (v, &l) in labels.iter().enumerate() {
            p[v * 3 + l as usize] = 1.0;
        }
        assert_eq!(lovasz_softmax(&p, 3, &labels).unwrap(), 0.0);
    }

    /// `|M| / |P u M|` for mispredicted set `m` and positives `p`.
    fn jaccard_loss(m: &[bool], p: &[bool]) -> f64 {
        let nm = m.iter().filter(|&&x| x).count();
        let union = m.iter().zip(p).filter(|(a, b)| **a || **b).count();
        if union == 0 { 0.0 } else { nm as f64 / union as f64 }
    }

    /// Lovász extension as the threshold integral of subset values.
    fn extension_oracle(err: &[f64], pos: &[bool]) -> f64 {
        let mut levels: Vec<f64> = err.to_vec();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut total = 0.0;
        for (k, &t) in levels.iter().enumerate() {
            let next = levels.get(k + 1).copied().unwrap_or(0.0);
            let set: Vec<bool> = err.iter().map(|&e| e >= t).collect();
            total += (t - next) * jaccard_loss(&set, pos);
        }
        total
    }

    #[test]
    fn lovasz_matches_subset_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 3;
        for _ in 0..200 {
            let logits: Vec<f64> = (0..4 * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probs = softmax_rows(&logits, c);
            let labels: Vec<u8> = (0..4).map(|_| rng.random_range(0..c as u8)).collect();
            let got = lovasz_softmax(&probs, c, &labels).unwrap();
            let mut want = 0.0;
            let mut present = 0;
            for k in 0..c {
                let pos: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
                if !pos.iter().any(|&x| x) {
                    continue;
                }
                present += 1;
                let err: Vec<f64> = (0..4).map(|i| if pos[i] { 1.0 - probs[i * c + k] } else { probs[i * c + k] }).collect();
                want += extension_oracle(&err, &pos);
            }
            want /= present as f64;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let v = 10;
        let logits = Tensor::new(vec![v, c], (0..v * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<u8> = (0..v).map(|_| rng.random_range(0..c as u8)).collect();
        let ce = gradcheck_many(
            |t, x| cross_entropy_var(t, x[0], &labels, Some(3)),
            std::slice::from_ref(&logits),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ce.max_error() < 1e-7, "{ce:?}");
        let both = gradcheck_many(
            |t, x| occupancy_loss(t, x[0], &labels),
            std::slice::from_ref(&logits),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(both.max_error() < 1e-4, "{both:?}");
    }
}
