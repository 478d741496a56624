//! Shared oracles and suite runners for the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

pub mod suites;

use gatspoof::autodiff::{Mode, ParamKind, ParamStore, Tape, Tensor, Var};
use gatspoof::gat::GatLayer;
use gatspoof::metrics::TdcfCosts;
use gatspoof::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, lo, hi)).unwrap()
}

/// Values in `[-1, 1)` at least `gap` away from `kink`.
pub fn away_from(rng: &mut impl Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let mut t = tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        let d = *v - kink;
        if d.abs() < gap {
            *v = kink + gap.copysign(d) + d;
        }
    }
    t
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> gatspoof::Result<Var> + 'a;

/// `sum(f(inputs) * w)` and, on request, its gradient w.r.t. every input.
fn weighted_loss(inputs: &[Tensor], f: &Graph<'_>, w: &[f64], grads: bool) -> Result<(f64, Vec<Vec<f64>>), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
    let shape = tape.shape(out).to_vec();
    let wv = tape.input(Tensor::new(shape, w.to_vec()).map_err(|e| e.to_string())?);
    let prod = tape.mul(out, wv).map_err(|e| e.to_string())?;
    let loss = tape.sum(prod);
    let value = tape.scalar_value(loss).map_err(|e| e.to_string())?;
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss).map_err(|e| e.to_string())?;
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, gs))
}

/// Largest relative error between backprop and central differences over
/// every element of every input. The output is reduced with fixed random
/// weights so the whole Jacobian is exercised.
pub fn grad_check(inputs: &[Tensor], f: &Graph<'_>, seed: u64) -> Result<f64, String> {
    let numel = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        tape.value(out).len()
    };
    let w = uniform(&mut rng(seed ^ 0x5eed), numel, 0.5, 1.5);
    let (_, analytic) = weighted_loss(inputs, f, &w, true)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = t.data()[j] + h;
            let up = weighted_loss(&probe, f, &w, false)?.0;
            probe[i].data_mut()[j] = t.data()[j] - h;
            let down = weighted_loss(&probe, f, &w, false)?.0;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    Ok(worst)
}

/// BCE of a GAT layer over node batch `nodes` `[B, N, D]`.
pub fn gat_bce(layer: &GatLayer, store: &ParamStore, tape: &mut Tape, nodes: Var, labels: &[f64], mode: Mode) -> gatspoof::Result<Var> {
    let z = layer.forward(tape, store, nodes, mode)?;
    tape.bce_with_logits(z, labels)
}

/// Coordinate-wise central-difference check of a GAT layer + BCE over all
/// trainable parameters and the node inputs.
pub fn gat_head_check(seed: u64, mode: Mode) -> Result<f64, String> {
    let mut r = rng(seed);
    let (b, n, d, dout) = (2, r.gen_range(2..6), r.gen_range(2..5), r.gen_range(2..4));
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, &mut r, "g", d, dout).map_err(|e| e.to_string())?;
    randomize_buffers(&mut store, &mut r);
    let nodes = tensor(&mut r, &[b, n, d], -1.0, 1.0);
    let labels = [1.0, 0.0];
    let loss_at = |store: &ParamStore, nodes: &Tensor| -> Result<f64, String> {
        let mut tape = Tape::new();
        let x = tape.input(nodes.clone());
        let l = gat_bce(&layer, store, &mut tape, x, &labels, mode).map_err(|e| e.to_string())?;
        tape.scalar_value(l).map_err(|e| e.to_string())
    };
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.clone(), true);
    let l = gat_bce(&layer, &store, &mut tape, x, &labels, mode).map_err(|e| e.to_string())?;
    let grads = tape.backward(l).map_err(|e| e.to_string())?;
    store.zero_grad();
    store.accumulate(&tape, &grads);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let x_grad = grads.get(x).ok_or("no input gradient")?.to_vec();
    let mut numeric = vec![0.0; nodes.numel()];
    for j in 0..nodes.numel() {
        let mut p = nodes.clone();
        p.data_mut()[j] += h;
        let up = loss_at(&store, &p)?;
        p.data_mut()[j] -= 2.0 * h;
        numeric[j] = (up - loss_at(&store, &p)?) / (2.0 * h);
    }
    worst = worst.max(rel_err(&x_grad, &numeric));
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.kind() == ParamKind::Trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = store.value(id)[j];
            store.value_mut(id)[j] = orig + h;
            let up = loss_at(&store, &nodes)?;
            store.value_mut(id)[j] = orig - h;
            let down = loss_at(&store, &nodes)?;
            store.value_mut(id)[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let e = rel_err(&analytic, &numeric);
        if e > worst {
            worst = e;
        }
    }
    Ok(worst)
}

/// Moves a fresh store to a generic point: non-trivial running statistics
/// so eval-mode batch norm is exercised, and random values for the
/// zero-initialised shifts and biases. At the all-zero initialisation some
/// gradients vanish exactly by symmetry, which no relative check can assess.
pub fn randomize_buffers(store: &mut ParamStore, r: &mut impl Rng) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name().to_string(), p.kind())).collect();
    for (id, name, kind) in ids {
        let zero = store.value(id).iter().all(|v| *v == 0.0);
        for v in store.value_mut(id) {
            *v = match kind {
                ParamKind::Buffer if name.ends_with("var") => r.gen_range(0.5..2.0),
                ParamKind::Buffer => r.gen_range(-0.5..0.5),
                ParamKind::Trainable if zero => r.gen_range(-0.5..0.5),
                ParamKind::Trainable => *v,
            };
        }
    }
}

/// Running statistics set to the batch statistics of `x`, then jittered, so
/// eval-mode activations stay on the scale the network was built for.
/// Uncalibrated statistics at random init saturate the logits, where the
/// loss is so large that central differences drown in rounding error.
pub fn calibrate_bn(model: &mut Model, x: &Tensor, r: &mut impl Rng) -> Result<(), String> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    model.forward(&mut tape, xv, Mode::Train).map_err(|e| e.to_string())?;
    model.store_mut().apply_bn_updates(&mut tape, 1.0);
    let ids: Vec<_> = model.store().iter().filter(|(_, p)| p.kind() == ParamKind::Buffer).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.store_mut().value_mut(id) {
            *v = *v * r.gen_range(0.8..1.25) + r.gen_range(-0.05..0.05) * v.abs().max(1e-3);
        }
    }
    Ok(())
}

fn model_loss(model: &Model, x: &Tensor, labels: &[f64], mode: Mode) -> Result<(f64, Tape, Var, Var), String> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = model.forward(&mut tape, xv, mode).map_err(|e| e.to_string())?;
    let l = tape.bce_with_logits(z, labels).map_err(|e| e.to_string())?;
    Ok((tape.scalar_value(l).map_err(|e| e.to_string())?, tape, xv, l))
}

/// Directional-derivative check of the full model + BCE: one direction per
/// trainable tensor, one over the input, one over all parameters jointly.
/// Each direction mixes the normalised gradient with a random unit vector.
/// The step is small because max pooling makes the loss piecewise smooth:
/// a larger step can cross a switch of the selected window element.
/// Returns the relative error of every check, labelled.
pub fn model_check(model: &mut Model, x: &Tensor, labels: &[f64], mode: Mode, seed: u64) -> Result<Vec<(String, f64)>, String> {
    let mut r = rng(seed);
    let (_, tape, xv, l) = model_loss(model, x, labels, mode)?;
    let grads = tape.backward(l).map_err(|e| e.to_string())?;
    let x_grad = grads.get(xv).ok_or("no input gradient")?.to_vec();
    model.store_mut().zero_grad();
    model.store_mut().accumulate(&tape, &grads);
    drop(grads);
    drop(tape);
    let ids: Vec<_> = model.store().iter().filter(|(_, p)| p.kind() == ParamKind::Trainable).map(|(id, _)| id).collect();
    let dir = |g: &[f64], r: &mut ChaCha8Rng| -> Vec<f64> {
        let rand = uniform(r, g.len(), -1.0, 1.0);
        let (gn, rn) = (norm(g).max(1e-300), norm(&rand));
        g.iter().zip(&rand).map(|(a, b)| if gn > 1e-300 { a / gn + b / rn } else { b / rn }).collect()
    };
    let h = 1e-6;
    let mut errors = Vec::new();
    let compare = |analytic: f64, up: f64, down: f64| -> f64 {
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-10 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        }
    };
    let v = dir(&x_grad, &mut r);
    let analytic: f64 = x_grad.iter().zip(&v).map(|(a, b)| a * b).sum();
    let shifted = |s: f64| {
        let mut t = x.clone();
        t.data_mut().iter_mut().zip(&v).for_each(|(a, b)| *a += s * b);
        t
    };
    let up = model_loss(model, &shifted(h), labels, mode)?.0;
    let down = model_loss(model, &shifted(-h), labels, mode)?.0;
    errors.push(("input".to_string(), compare(analytic, up, down)));
    let mut joint: Vec<(gatspoof::autodiff::ParamId, Vec<f64>)> = Vec::new();
    for &id in &ids {
        let g = model.store().grad(id).to_vec();
        let v = dir(&g, &mut r);
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let e = param_fd(model, &[(id, v.clone())], h, x, labels, mode)?;
        errors.push((model.store().get(id).name().to_string(), compare(analytic, e.0, e.1)));
        joint.push((id, uniform(&mut r, g.len(), -1.0, 1.0)));
    }
    let analytic: f64 = joint
        .iter()
        .map(|(id, v)| model.store().grad(*id).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let e = param_fd(model, &joint, h, x, labels, mode)?;
    errors.push(("all parameters".to_string(), compare(analytic, e.0, e.1)));
    Ok(errors)
}

fn param_fd(
    model: &mut Model,
    dirs: &[(gatspoof::autodiff::ParamId, Vec<f64>)],
    h: f64,
    x: &Tensor,
    labels: &[f64],
    mode: Mode,
) -> Result<(f64, f64), String> {
    let orig: Vec<Vec<f64>> = dirs.iter().map(|(id, _)| model.store().value(*id).to_vec()).collect();
    let at = |s: f64, model: &mut Model| -> Result<f64, String> {
        for ((id, v), o) in dirs.iter().zip(&orig) {
            let dst = model.store_mut().value_mut(*id);
            for ((d, o), v) in dst.iter_mut().zip(o).zip(v) {
                *d = o + s * v;
            }
        }
        Ok(model_loss(model, x, labels, mode)?.0)
    };
    let up = at(h, model)?;
    let down = at(-h, model)?;
    for ((id, _), o) in dirs.iter().zip(&orig) {
        model.store_mut().value_mut(*id).copy_from_slice(o);
    }
    Ok((up, down))
}

/// Operating points `(pm, pfa)` at `-inf` and every distinct score, counted
/// directly. A bona fide trial is missed when its score is `<= t`; a spoof
/// is falsely accepted when its score is `> t`.
pub fn sweep(bona: &[f64], spoof: &[f64]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut out = vec![(0.0, 1.0)];
    for t in ts {
        let pm = bona.iter().filter(|&&s| s <= t).count() as f64 / bona.len() as f64;
        let pf = spoof.iter().filter(|&&s| s > t).count() as f64 / spoof.len() as f64;
        out.push((pm, pf));
    }
    out
}

/// EER by sweep: the crossing of the segment between the last point with
/// `pm < pfa` and the first with `pm >= pfa`.
pub fn eer_oracle(bona: &[f64], spoof: &[f64]) -> f64 {
    let pts = sweep(bona, spoof);
    for k in 0..pts.len() {
        let (pm, pf) = pts[k];
        if pm >= pf {
            if k == 0 || pm == pf {
                return pm;
            }
            let (pm0, pf0) = pts[k - 1];
            // pm0 + s (pm - pm0) = pf0 + s (pf - pf0)
            let s = (pf0 - pm0) / ((pm - pm0) - (pf - pf0));
            return pm0 + s * (pm - pm0);
        }
    }
    unreachable!("the last point has pm = 1 and pfa = 0")
}

/// Normalised min t-DCF by sweep, with the cost coefficients derived from
/// the cost model directly.
pub fn min_tdcf_oracle(bona: &[f64], spoof: &[f64], c: &TdcfCosts) -> f64 {
    let c1 = c.pi_tar * (c.c_miss_cm - c.c_miss_asv * c.p_miss_asv) - c.pi_non * c.c_fa_asv * c.p_fa_asv;
    let c2 = c.c_fa_cm * c.pi_spoof * (1.0 - c.p_miss_spoof_asv);
    let best = sweep(bona, spoof).iter().map(|(pm, pf)| c1 * pm + c2 * pf).fold(f64::INFINITY, f64::min);
    best / c1.min(c2)
}

/// A random cost model whose coefficients are both positive.
pub fn random_costs(r: &mut impl Rng) -> TdcfCosts {
    loop {
        let pi_spoof = r.gen_range(0.01..0.3);
        let pi_non = r.gen_range(0.0..0.1);
        let c = TdcfCosts {
            pi_tar: 1.0 - pi_spoof - pi_non,
            pi_non,
            pi_spoof,
            c_miss_asv: r.gen_range(0.5..2.0),
            c_fa_asv: r.gen_range(1.0..20.0),
            c_miss_cm: r.gen_range(0.5..2.0),
            c_fa_cm: r.gen_range(1.0..20.0),
            p_fa_asv: r.gen_range(0.0..0.2),
            p_miss_asv: r.gen_range(0.0..0.2),
            p_miss_spoof_asv: r.gen_range(0.0..0.9),
        };
        if (c.pi_tar + c.pi_non + c.pi_spoof - 1.0).abs() <= 1e-12 && c.coefficients().is_ok() {
            return c;
        }
    }
}

/// Scores on a coarse grid so ties are common and order-preserving
/// transforms stay exact.
pub fn grid_scores(r: &mut impl Rng, n: usize, lo: i32, hi: i32) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi) as f64 / 8.0).collect()
}
