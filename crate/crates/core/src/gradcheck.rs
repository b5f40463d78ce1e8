//! Central finite-difference checks of tape gradients.

use rand::Rng as _;

use crate::error::Result;
use crate::grad::{ImageLayout, NodeId, Reduction, Tape, Tensor};
use crate::losses::{contrastive_loss, supervised_loss, total_loss, unsupervised_loss, Anchor};
use crate::model::{forward_nodes, ModelConfig, ModelParams};
use crate::proto::PrototypeBank;
use crate::seeds::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest per-input `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// with Euclidean norms taken over each input tensor.
    pub max_relative_error: f64,
    /// Input holding the largest error.
    pub worst_input: usize,
}

/// Smallest norm used as a denominator, so that inputs whose gradient is
/// exactly zero compare by absolute error.
pub const NORM_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of the scalar built by `build` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheck { max_relative_error: 0.0, worst_input: 0 };
    let mut values = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every leaf has a gradient").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let original = values[k].data()[i];
            values[k].data_mut()[i] = original + h;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = original - h;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = original;
            *n = (plus - minus) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(NORM_FLOOR);
        if rel > worst.max_relative_error {
            worst = GradCheck { max_relative_error: rel, worst_input: k };
        }
    }
    Ok(worst)
}

/// Step used by the built-in suites.
pub const STEP: f64 = 1e-6;

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=4)
}

/// `sum(node * weights)` with fixed random weights, so every output element
/// reaches the scalar with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, node: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(node, w)?;
    Ok(tape.sum(prod))
}

/// Checks every differentiable tape primitive on one random instance with
/// tensors of at most 4 elements per axis.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = rng_for(seed, "gradcheck-primitives", 0);
    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
    let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
    let row = uniform(&mut rng, &[k], -1.0, 1.0);
    let same = uniform(&mut rng, &[m, k], -1.0, 1.0);
    let positive = uniform(&mut rng, &[m, k], 0.5, 2.0);
    let cube_shape = [dim(&mut rng), dim(&mut rng), dim(&mut rng)];
    let cube = uniform(&mut rng, &cube_shape, -2.0, 2.0);
    let cube_w = uniform(&mut rng, &cube_shape, -1.0, 1.0);
    let axis = rng.random_range(0..3);
    let w_mk = uniform(&mut rng, &[m, k], -1.0, 1.0);
    let w_mn = uniform(&mut rng, &[m, n], -1.0, 1.0);
    let w_km = uniform(&mut rng, &[k, m], -1.0, 1.0);
    let scale = rng.random_range(-2.0..2.0);

    let (batch, channels, height, width) = (rng.random_range(1..=2), dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let image = uniform(&mut rng, &[batch, channels, height, width], -1.0, 1.0);
    let patch_w = uniform(&mut rng, &[batch * height * width, channels * 9], -1.0, 1.0);
    let pixel_rows = uniform(&mut rng, &[batch * height * width, channels], -1.0, 1.0);
    let gather: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect();
    let w_gather = uniform(&mut rng, &[gather.len(), k], -1.0, 1.0);
    let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let w_pick = uniform(&mut rng, &[m], -1.0, 1.0);
    let (extra_rows, extra_cols) = (dim(&mut rng), dim(&mut rng));
    let other_rows = uniform(&mut rng, &[extra_rows, k], -1.0, 1.0);
    let other_cols = uniform(&mut rng, &[m, extra_cols], -1.0, 1.0);
    let w_rows = uniform(&mut rng, &[m + other_rows.shape()[0], k], -1.0, 1.0);
    let w_cols = uniform(&mut rng, &[m, k + other_cols.shape()[1]], -1.0, 1.0);
    let reduced_shape: Vec<usize> =
        cube_shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    let w_reduced = uniform(&mut rng, &reduced_shape, -1.0, 1.0);

    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>| -> Result<()> {
        out.push((name, check(inputs, STEP, f)?));
        Ok(())
    };
    run("matmul", &[a.clone(), b.clone()], &|t, x| {
        let y = t.matmul(x[0], x[1])?;
        weighted_sum(t, y, &w_mn)
    })?;
    run("transpose", std::slice::from_ref(&a), &|t, x| {
        let y = t.transpose(x[0])?;
        weighted_sum(t, y, &w_km)
    })?;
    run("reshape", std::slice::from_ref(&a), &|t, x| {
        let y = t.reshape(x[0], [m * k])?;
        weighted_sum(t, y, &w_mk.clone().reshape([m * k])?)
    })?;
    run("add_broadcast", &[a.clone(), row.clone()], &|t, x| {
        let y = t.add(x[0], x[1])?;
        let sq = t.mul(y, y)?;
        weighted_sum(t, sq, &w_mk)
    })?;
    run("mul_broadcast", &[a.clone(), row.clone()], &|t, x| {
        let y = t.mul(x[0], x[1])?;
        weighted_sum(t, y, &w_mk)
    })?;
    run("mul", &[a.clone(), same.clone()], &|t, x| {
        let y = t.mul(x[0], x[1])?;
        weighted_sum(t, y, &w_mk)
    })?;
    run("scale", std::slice::from_ref(&a), &|t, x| {
        let y = t.scale(x[0], scale);
        weighted_sum(t, y, &w_mk)
    })?;
    run("relu", std::slice::from_ref(&a), &|t, x| {
        let y = t.relu(x[0]);
        weighted_sum(t, y, &w_mk)
    })?;
    run("exp", std::slice::from_ref(&a), &|t, x| {
        let y = t.exp(x[0]);
        weighted_sum(t, y, &w_mk)
    })?;
    run("log", std::slice::from_ref(&positive), &|t, x| {
        let y = t.log(x[0]);
        weighted_sum(t, y, &w_mk)
    })?;
    run("softmax", std::slice::from_ref(&cube), &|t, x| {
        let y = t.softmax(x[0], axis)?;
        weighted_sum(t, y, &cube_w)
    })?;
    run("log_softmax", std::slice::from_ref(&cube), &|t, x| {
        let y = t.log_softmax(x[0], axis)?;
        weighted_sum(t, y, &cube_w)
    })?;
    run("l2_normalize", std::slice::from_ref(&cube), &|t, x| {
        let y = t.l2_normalize(x[0], axis)?;
        weighted_sum(t, y, &cube_w)
    })?;
    run("reduce_sum_axis", std::slice::from_ref(&cube), &|t, x| {
        let y = t.reduce(x[0], Reduction::Sum, Some(axis))?;
        weighted_sum(t, y, &w_reduced)
    })?;
    run("reduce_mean_axis", std::slice::from_ref(&cube), &|t, x| {
        let y = t.reduce(x[0], Reduction::Mean, Some(axis))?;
        weighted_sum(t, y, &w_reduced)
    })?;
    run("mean", std::slice::from_ref(&cube), &|t, x| {
        let sq = t.mul(x[0], x[0])?;
        Ok(t.mean(sq))
    })?;
    run("im2col_planar", std::slice::from_ref(&image), &|t, x| {
        let y = t.im2col(x[0], 3, ImageLayout::Planar)?;
        weighted_sum(t, y, &patch_w)
    })?;
    run("im2col_rows", std::slice::from_ref(&pixel_rows), &|t, x| {
        let y = t.im2col(x[0], 3, ImageLayout::Rows { batch, height, width })?;
        weighted_sum(t, y, &patch_w)
    })?;
    run("gather_rows", std::slice::from_ref(&a), &|t, x| {
        let y = t.gather_rows(x[0], gather.clone())?;
        weighted_sum(t, y, &w_gather)
    })?;
    run("pick", std::slice::from_ref(&a), &|t, x| {
        let y = t.pick(x[0], picks.clone())?;
        weighted_sum(t, y, &w_pick)
    })?;
    run("concat_rows", &[a.clone(), other_rows.clone()], &|t, x| {
        let y = t.concat(&[x[0], x[1]], 0)?;
        weighted_sum(t, y, &w_rows)
    })?;
    run("concat_cols", &[a.clone(), other_cols.clone()], &|t, x| {
        let y = t.concat(&[x[0], x[1]], 1)?;
        weighted_sum(t, y, &w_cols)
    })?;
    Ok(out)
}

/// Checks the supervised, unsupervised, contrastive and total losses against
/// every student parameter on a two-image, two-class, 4x4 batch.
pub fn loss_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = rng_for(seed, "gradcheck-losses", 0);
    let config = ModelConfig { in_channels: 3, width: 4, num_classes: 2, rep_dim: 4 };
    // zero biases put dead-patch pre-activations exactly on the relu kink
    let mut tensors = ModelParams::init(config, seed)?.tensors().to_vec();
    for bias in tensors.iter_mut().skip(1).step_by(2) {
        bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let params = ModelParams::from_tensors(config, tensors)?;
    let images = [uniform(&mut rng, &[3, 4, 4], 0.0, 1.0), uniform(&mut rng, &[3, 4, 4], 0.0, 1.0)];
    let rows = 2 * 16;
    let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2u8)).collect();
    let pseudo: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2u8)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.5)).collect();
    mask[rng.random_range(0..rows)] = true;

    let mut bank = PrototypeBank::new(2, config.rep_dim, 0.99)?;
    for class in 0..2 {
        let v: Vec<f64> = (0..config.rep_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        bank.set_prototype(class, &v.iter().map(|x| x / norm).collect::<Vec<_>>())?;
    }
    let anchors: Vec<Anchor> = (0..rng.random_range(2..=6))
        .map(|_| {
            let row = rng.random_range(0..rows);
            let class = pseudo[row] as usize;
            let pool: Vec<usize> = (0..rows).filter(|&r| pseudo[r] as usize != class).collect();
            let count = if pool.is_empty() { 0 } else { rng.random_range(1..=3) };
            let negatives = (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            Anchor { row, class, negatives }
        })
        .collect();
    let lambda = rng.random_range(0.05..1.0);

    let inputs: Vec<Tensor> = params.tensors().to_vec();
    let image_refs: Vec<&Tensor> = images.iter().collect();
    let forward = |t: &mut Tape, x: &[NodeId]| forward_nodes(t, &config, x.to_vec(), &image_refs);

    let mut out = Vec::new();
    out.push(("supervised", check(&inputs, STEP, |t, x| {
        let f = forward(t, x)?;
        supervised_loss(t, f.logits, &labels)
    })?));
    out.push(("unsupervised", check(&inputs, STEP, |t, x| {
        let f = forward(t, x)?;
        unsupervised_loss(t, f.logits, &pseudo, &mask)
    })?));
    out.push(("contrastive", check(&inputs, STEP, |t, x| {
        let f = forward(t, x)?;
        contrastive_loss(t, f.reps, &anchors, &bank, 0.5)
    })?));
    out.push(("total", check(&inputs, STEP, |t, x| {
        let f = forward(t, x)?;
        let s = supervised_loss(t, f.logits, &labels)?;
        let u = unsupervised_loss(t, f.logits, &pseudo, &mask)?;
        let c = contrastive_loss(t, f.reps, &anchors, &bank, 0.5)?;
        total_loss(t, s, u, c, lambda)
    })?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_a_wrong_gradient_fails() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check(std::slice::from_ref(&x), 1e-6, |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(ok.max_relative_error < 1e-8);

        // relu's gradient is zero on negatives; a smooth function built from it
        // across the kink is caught
        let kinked = check(&[Tensor::new([1], vec![1e-7]).unwrap()], 1e-6, |t, ids| {
            let r = t.relu(ids[0]);
            Ok(t.sum(r))
        })
        .unwrap();
        assert!(kinked.max_relative_error > 0.1);
    }

    #[test]
    fn built_in_suites_pass_on_one_instance() {
        for (name, r) in primitive_suite(3).unwrap().into_iter().chain(loss_suite(3).unwrap()) {
            assert!(r.max_relative_error < 1e-5, "{name}: {r:?}");
        }
    }
}
