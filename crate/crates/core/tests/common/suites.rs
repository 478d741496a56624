//! One runner per acceptance criterion. Each returns a short summary on
//! success and the first violation on failure.

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use gatspoof::audio::{Key, TrialRecord};
use gatspoof::autodiff::{BnStats, Mode, ParamKind, ParamStore, Tape, Tensor};
use gatspoof::cli;
use gatspoof::encoder::{to_spectral_nodes, to_temporal_nodes, Encoder, EncoderConfig};
use gatspoof::features::{lfb, FeatureConfig, FeatureMap, FreqMask};
use gatspoof::fusion::{align, fit_svm, SvmConfig};
use gatspoof::gat::{attention_matrices, GatLayer};
use gatspoof::metrics::{eer, min_tdcf, per_attack_report, ScoreSet, TdcfCosts};
use gatspoof::model::{Model, ModelConfig, System};
use gatspoof::synth::{generate, SynthSpec};
use gatspoof::training::{Dataset, Example, Phase, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- shapes

/// Layer sizes of the reference table that the layer chain reaches exactly.
pub const TABLE_ROWS: [(&str, (usize, usize, usize)); 5] = [
    ("stem", (64, 64, 103)),
    ("maxpool", (64, 32, 52)),
    ("block1", (64, 32, 52)),
    ("block2", (128, 16, 26)),
    ("block3", (256, 8, 13)),
];

pub fn shape_chain() -> Outcome {
    let cfg = EncoderConfig::default();
    let chain = cfg.shape_chain(60, 202).map_err(err)?;
    for (layer, dims) in TABLE_ROWS {
        let got = chain.iter().find(|l| l.layer == layer).ok_or(format!("no {layer} stage"))?;
        ensure((got.channels, got.height, got.width) == dims, || format!("{layer}: got {got:?}, want {dims:?}"))?;
    }
    let last = chain.last().unwrap();
    ensure((last.channels, last.height, last.width) == (512, 3, 5), || format!("final stage {last:?}"))?;

    // A real forward pass at full width must visit the same sizes.
    let mut store = ParamStore::new();
    let enc = Encoder::new(&cfg, &mut store, &mut rng(0)).map_err(err)?;
    let mut tape = Tape::new();
    let x = tape.input(tensor(&mut rng(1), &[1, 1, 60, 202], -5.0, 5.0));
    let mut trace = Vec::new();
    let y = enc.forward_traced(&mut tape, &store, x, Mode::Eval, Some(&mut trace)).map_err(err)?;
    ensure(trace == chain, || format!("traced {trace:?} != chain {chain:?}"))?;
    ensure(tape.shape(y) == [1, 512, 3, 5], || format!("encoder output {:?}", tape.shape(y)))?;
    let t = to_temporal_nodes(&mut tape, y).map_err(err)?;
    let s = to_spectral_nodes(&mut tape, y).map_err(err)?;
    ensure(tape.shape(t) == [1, 5, 512], || format!("temporal nodes {:?}", tape.shape(t)))?;
    ensure(tape.shape(s) == [1, 3, 512], || format!("spectral nodes {:?}", tape.shape(s)))?;
    Ok(format!("{} stages match, nodes N=5 (temporal) / N=3 (spectral)", TABLE_ROWS.len() + 1))
}

// ------------------------------------------------------------- gradients

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type OpGraph = Box<Graph<'static>>;

fn shapes(shapes: &'static [&'static [usize]]) -> Gen {
    Box::new(move |r| shapes.iter().map(|s| tensor(r, s, -1.0, 1.0)).collect())
}

fn positive(shape: &'static [usize]) -> Gen {
    Box::new(move |r| vec![tensor(r, shape, 0.5, 2.0)])
}

fn kinked(shape: &'static [usize], kink: f64) -> Gen {
    Box::new(move |r| vec![away_from(r, shape, kink, 0.05)])
}

/// Well-separated values so no pooling window has a near tie.
fn spaced(shape: &'static [usize]) -> Gen {
    Box::new(move |r| {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        v.shuffle(r);
        v.iter_mut().for_each(|x| *x += r.gen_range(-0.02..0.02));
        vec![Tensor::new(shape.to_vec(), v).unwrap()]
    })
}

fn bn_case(x: &'static [usize], mode: Mode) -> (Gen, OpGraph) {
    let mut store = ParamStore::new();
    let c = x[1];
    let rm = store.add("rm", tensor(&mut rng(91), &[c], -0.5, 0.5), ParamKind::Buffer).unwrap();
    let rv = store.add("rv", tensor(&mut rng(92), &[c], 0.5, 2.0), ParamKind::Buffer).unwrap();
    let gen: Gen = Box::new(move |r| vec![tensor(r, x, -1.0, 1.0), tensor(r, &[c], 0.5, 1.5), tensor(r, &[c], -0.5, 0.5)]);
    let graph: OpGraph = Box::new(move |t, v| {
        let stats = BnStats {
            store: &store,
            running_mean: rm,
            running_var: rv,
        };
        t.batch_norm(v[0], v[1], v[2], stats, mode)
    });
    (gen, graph)
}

/// Every differentiable op with an input generator that keeps clear of
/// the op's non-differentiable points.
pub fn op_cases() -> Vec<(&'static str, Gen, OpGraph)> {
    let mut cases: Vec<(&'static str, Gen, OpGraph)> = vec![
        ("add", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("mul_last", shapes(&[&[2, 3, 4], &[4]]), Box::new(|t, v| t.mul_last(v[0], v[1]))),
        ("add_last", shapes(&[&[2, 3, 4], &[4]]), Box::new(|t, v| t.add_last(v[0], v[1]))),
        ("matmul", shapes(&[&[3, 4], &[4, 5]]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("bmm", shapes(&[&[2, 3, 4], &[2, 4, 5]]), Box::new(|t, v| t.bmm(v[0], v[1], false))),
        ("bmm_trans_b", shapes(&[&[2, 3, 4], &[2, 5, 4]]), Box::new(|t, v| t.bmm(v[0], v[1], true))),
        ("exp", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.exp(v[0])))),
        ("log", positive(&[3, 4]), Box::new(|t, v| Ok(t.log(v[0])))),
        ("sqrt", positive(&[3, 4]), Box::new(|t, v| Ok(t.sqrt(v[0])))),
        ("sigmoid", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("selu", kinked(&[3, 4], 0.0), Box::new(|t, v| Ok(t.selu(v[0])))),
        ("clamp_min", kinked(&[3, 4], 0.1), Box::new(|t, v| Ok(t.clamp_min(v[0], 0.1)))),
        ("softmax", shapes(&[&[3, 5]]), Box::new(|t, v| t.softmax(v[0]))),
        ("softmax_3d", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.softmax(v[0]))),
        ("sum", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", shapes(&[&[3, 4]]), Box::new(|t, v| Ok(t.mean(v[0])))),
        ("mean_axis0", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.mean_axis(v[0], 0))),
        ("mean_axis1", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.mean_axis(v[0], 1))),
        ("mean_axis2", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.mean_axis(v[0], 2))),
        ("reshape", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.reshape(v[0], &[4, 6]))),
        ("permute", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("concat_last", shapes(&[&[2, 3], &[2, 4]]), Box::new(|t, v| t.concat_last(v[0], v[1]))),
        (
            "conv2d",
            shapes(&[&[2, 2, 5, 6], &[3, 2, 3, 3]]),
            Box::new(|t, v| t.conv2d(v[0], v[1], (1, 2), (1, 1))),
        ),
        (
            "conv2d_strided",
            shapes(&[&[1, 3, 6, 5], &[2, 3, 2, 3]]),
            Box::new(|t, v| t.conv2d(v[0], v[1], (2, 1), (0, 2))),
        ),
        (
            "conv2d_pointwise",
            shapes(&[&[2, 3, 5, 5], &[4, 3, 1, 1]]),
            Box::new(|t, v| t.conv2d(v[0], v[1], (2, 2), (0, 0))),
        ),
        (
            "max_pool2d",
            spaced(&[1, 2, 6, 7]),
            Box::new(|t, v| t.max_pool2d(v[0], (3, 3), (2, 2), (1, 1))),
        ),
        (
            "adaptive_avg_pool2d",
            shapes(&[&[2, 2, 4, 7]]),
            Box::new(|t, v| t.adaptive_avg_pool2d(v[0], (3, 5))),
        ),
        (
            "bce_with_logits",
            Box::new(|r| vec![tensor(r, &[6], -3.0, 3.0)]),
            Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
        ),
    ];
    for (name, x, mode) in [
        ("batch_norm_train_2d", &[6usize, 3][..], Mode::Train),
        ("batch_norm_eval_2d", &[6, 3][..], Mode::Eval),
        ("batch_norm_train_4d", &[2, 3, 2, 2][..], Mode::Train),
        ("batch_norm_eval_4d", &[2, 3, 2, 2][..], Mode::Eval),
    ] {
        let (g, f) = bn_case(x, mode);
        cases.push((name, g, f));
    }
    cases
}

pub const GRAD_SEEDS: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

pub fn op_gradients() -> Outcome {
    let cases = op_cases();
    let mut worst: f64 = 0.0;
    for (name, gen, graph) in &cases {
        for seed in 0..GRAD_SEEDS {
            let inputs = gen(&mut rng(seed));
            let e = grad_check(&inputs, graph.as_ref(), seed)?;
            ensure(e < OP_TOL, || format!("{name} seed {seed}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("{} ops x {GRAD_SEEDS} seeds, worst {worst:.1e}", cases.len()))
}

pub fn small_model(system: System, seed: u64) -> Result<Model, String> {
    let cfg = ModelConfig {
        system,
        encoder: EncoderConfig::default().scaled_width(16),
        gat_dim: 8,
        attention_dim: 8,
    };
    Model::new(cfg, seed).map_err(err)
}

pub fn composed_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        for mode in [Mode::Train, Mode::Eval] {
            let e = gat_head_check(seed, mode)?;
            ensure(e < COMPOSED_TOL, || format!("GAT head + BCE seed {seed} {mode:?}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
        for system in [System::GatT, System::GatS] {
            let mut model = small_model(system, seed)?;
            let mut r = rng(seed + 100);
            randomize_buffers(model.store_mut(), &mut r);
            let x = tensor(&mut r, &[2, 1, 60, 125], -2.0, 2.0);
            let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
            if mode == Mode::Eval {
                calibrate_bn(&mut model, &x, &mut r)?;
            }
            for (what, e) in model_check(&mut model, &x, &[1.0, 0.0], mode, seed)? {
                ensure(e < COMPOSED_TOL, || format!("{system} + BCE seed {seed} {mode:?}, {what}: relative error {e:e}"))?;
                worst = worst.max(e);
            }
        }
    }
    Ok(format!("GAT head, GAT-T and GAT-S graphs x {GRAD_SEEDS} seeds, worst {worst:.1e}"))
}

// ------------------------------------------------------------- attention

pub struct AttentionCase {
    pub store: ParamStore,
    pub layer: GatLayer,
    pub nodes: Tensor,
}

pub fn attention_case(seed: u64) -> Result<AttentionCase, String> {
    let mut r = rng(seed);
    let (b, n, d) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..17));
    let mut store = ParamStore::new();
    let out_dim = r.gen_range(1..6);
    let layer = GatLayer::new(&mut store, &mut r, "g", d, out_dim).map_err(err)?;
    let spread = r.gen_range(0.1..3.0);
    for v in store.value_mut(layer.w_map) {
        *v *= spread;
    }
    randomize_buffers(&mut store, &mut r);
    let nodes = tensor(&mut r, &[b, n, d], -1.0, 1.0);
    Ok(AttentionCase { store, layer, nodes })
}

fn run_gat(c: &AttentionCase, nodes: &Tensor, mode: Mode) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut tape = Tape::new();
    let x = tape.input(nodes.clone());
    let out = c.layer.forward_detailed(&mut tape, &c.store, x, mode).map_err(err)?;
    Ok((tape.value(out.scores).to_vec(), tape.value(out.attention).to_vec()))
}

pub const ATTENTION_TRIALS: u64 = 1000;

pub fn attention() -> Outcome {
    let mut worst_col: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..ATTENTION_TRIALS {
        let c = attention_case(seed)?;
        let (b, n, d) = (c.nodes.shape()[0], c.nodes.shape()[1], c.nodes.shape()[2]);
        let (scores, att) = run_gat(&c, &c.nodes, Mode::Eval)?;
        for (g, m) in attention_matrices(&att, n).iter().enumerate() {
            for t in 0..n {
                let col = m.column(t);
                let s: f64 = col.iter().sum();
                worst_col = worst_col.max((s - 1.0).abs());
                ensure((s - 1.0).abs() <= 1e-6, || format!("trial {seed} graph {g} target {t}: column sums to {s}"))?;
                ensure(col.iter().all(|&a| a > 0.0), || format!("trial {seed}: non-positive attention {col:?}"))?;
            }
        }

        // Identical nodes: every weight is exactly uniform.
        let mut same = c.nodes.clone();
        let first: Vec<f64> = same.data()[..d].to_vec();
        for chunk in same.data_mut().chunks_mut(d) {
            chunk.copy_from_slice(&first);
        }
        let (_, att_same) = run_gat(&c, &same, Mode::Eval)?;
        let u = 1.0 / n as f64;
        ensure(att_same.iter().all(|&a| (a - u).abs() <= 1e-12), || format!("trial {seed}: identical nodes not uniform"))?;

        // Relabelling the nodes of each graph leaves the scores unchanged.
        let mut r = rng(seed ^ 0xabc);
        let mut permuted = c.nodes.clone();
        for g in 0..b {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut r);
            for (dst, &src) in order.iter().enumerate() {
                let from = c.nodes.data()[(g * n + src) * d..(g * n + src + 1) * d].to_vec();
                permuted.data_mut()[(g * n + dst) * d..(g * n + dst + 1) * d].copy_from_slice(&from);
            }
        }
        for mode in [Mode::Eval, Mode::Train] {
            if mode == Mode::Train && b * n < 2 {
                continue;
            }
            let base = if mode == Mode::Eval { scores.clone() } else { run_gat(&c, &c.nodes, mode)?.0 };
            let (perm_scores, _) = run_gat(&c, &permuted, mode)?;
            for (a, p) in base.iter().zip(&perm_scores) {
                worst_perm = worst_perm.max((a - p).abs());
                ensure((a - p).abs() <= 1e-6, || format!("trial {seed} {mode:?}: score {a} became {p} after permutation"))?;
            }
        }
    }
    Ok(format!(
        "{ATTENTION_TRIALS} trials; worst column error {worst_col:.1e}, worst permutation drift {worst_perm:.1e}"
    ))
}

// --------------------------------------------------------------- metrics

pub const METRIC_SETS: u64 = 100;

pub fn random_score_set(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let nb = r.gen_range(1..500);
    let ns = r.gen_range(1..500);
    if seed % 2 == 0 {
        let shift = r.gen_range(0..40);
        (grid_scores(&mut r, nb, -40 + shift, 80), grid_scores(&mut r, ns, -80, 40))
    } else {
        let shift = r.gen_range(0.0..3.0);
        (uniform(&mut r, nb, -2.0 + shift, 4.0), uniform(&mut r, ns, -4.0, 2.0))
    }
}

fn monotone_transforms() -> Vec<(&'static str, fn(f64) -> f64)> {
    vec![
        ("exp", |x| (x / 4.0).exp()),
        ("affine", |x| 3.0 * x - 7.0),
        ("cubic", |x| x * x * x + x),
        ("atan", |x| (x / 16.0).atan()),
    ]
}

fn record(utt: &str, attack: &str) -> TrialRecord {
    let key = if attack == "-" { Key::Bonafide } else { Key::Spoof };
    TrialRecord::new("spk", utt, attack, key).unwrap()
}

pub fn metrics() -> Outcome {
    let default_costs = TdcfCosts::default();
    let mut worst: f64 = 0.0;
    for seed in 0..METRIC_SETS {
        let (bona, spoof) = random_score_set(seed);
        let costs = random_costs(&mut rng(seed + 7));
        let e = eer(&bona, &spoof).map_err(err)?;
        let eo = eer_oracle(&bona, &spoof);
        ensure((e - eo).abs() <= 1e-12, || format!("set {seed}: eer {e} vs sweep {eo}"))?;
        worst = worst.max((e - eo).abs());
        for c in [&default_costs, &costs] {
            let t = min_tdcf(&bona, &spoof, c).map_err(err)?;
            let to = min_tdcf_oracle(&bona, &spoof, c);
            ensure((t - to).abs() <= 1e-12, || format!("set {seed}: min t-DCF {t} vs sweep {to}"))?;
            worst = worst.max((t - to).abs());
        }
        for (name, f) in monotone_transforms() {
            let tb: Vec<f64> = bona.iter().map(|&x| f(x)).collect();
            let ts: Vec<f64> = spoof.iter().map(|&x| f(x)).collect();
            ensure(eer(&tb, &ts).map_err(err)? == e, || format!("set {seed}: eer changed under {name}"))?;
            ensure(
                min_tdcf(&tb, &ts, &costs).map_err(err)? == min_tdcf(&bona, &spoof, &costs).map_err(err)?,
                || format!("set {seed}: min t-DCF changed under {name}"),
            )?;
        }
        let c = vec![0.25; bona.len()];
        let cs = vec![0.25; spoof.len()];
        for costs in [&default_costs, &costs] {
            let t = min_tdcf(&c, &cs, costs).map_err(err)?;
            ensure(t == 1.0, || format!("set {seed}: constant scores give min t-DCF {t}"))?;
        }
    }

    // Per-attack metrics pool one attack's spoofs with every bona fide trial.
    let mut r = rng(4242);
    let mut scores = Vec::new();
    let mut protocol = Vec::new();
    let bona = uniform(&mut r, 40, 0.0, 2.0);
    for (i, s) in bona.iter().enumerate() {
        protocol.push(record(&format!("B{i}"), "-"));
        scores.push((format!("B{i}"), *s));
    }
    let attacks = [("A01", -3.0, -1.0), ("A02", 0.5, 2.5), ("A05", 1.0, 4.0)];
    let mut by_attack = Vec::new();
    for (a, lo, hi) in attacks {
        let sp = uniform(&mut r, 25, lo, hi);
        for (i, s) in sp.iter().enumerate() {
            protocol.push(record(&format!("{a}_{i}"), a));
            scores.push((format!("{a}_{i}"), *s));
        }
        by_attack.push((a, sp));
    }
    scores.reverse();
    let set = ScoreSet::from_scores(&scores, &protocol).map_err(err)?;
    let report = per_attack_report(&set, &default_costs).map_err(err)?;
    let all_spoof: Vec<f64> = by_attack.iter().flat_map(|(_, s)| s.clone()).collect();
    ensure((report.pooled_eer - eer_oracle(&bona, &all_spoof)).abs() <= 1e-12, || "pooled EER".into())?;
    ensure(report.n_bonafide == 40 && report.n_spoof == 75, || "pooled counts".into())?;
    ensure(report.per_attack.len() == 3, || format!("attacks {:?}", report.per_attack.keys()))?;
    for (a, sp) in &by_attack {
        let m = report.per_attack.get(*a).ok_or(format!("missing {a}"))?;
        ensure(m.n_spoof == sp.len(), || format!("{a} count"))?;
        ensure((m.eer - eer_oracle(&bona, sp)).abs() <= 1e-12, || format!("{a} EER {}", m.eer))?;
        let to = min_tdcf_oracle(&bona, sp, &default_costs);
        ensure((m.min_tdcf - to).abs() <= 1e-12, || format!("{a} min t-DCF {} vs {to}", m.min_tdcf))?;
    }
    ensure(report.per_attack["A01"].eer == 0.0, || "separable attack should have EER 0".into())?;
    ensure(report.pooled_eer > 0.0, || "pooled EER should reflect the hard attacks".into())?;
    Ok(format!("{METRIC_SETS} random sets, worst deviation from sweep {worst:.1e}; per-attack pooling verified"))
}

// ---------------------------------------------------------------- overfit

pub fn synth_dataset(spec: &SynthSpec, features: &FeatureConfig) -> Result<Dataset, String> {
    let corpus = generate(spec).map_err(err)?;
    let items = corpus
        .iter()
        .map(|u| {
            Ok(Example {
                utt_id: u.record.utt_id.clone(),
                features: lfb(&u.waveform, features).map_err(err)?,
                key: u.record.key,
                attack_id: u.record.attack_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Dataset::new(items))
}

/// The 32-utterance synthetic corpus used for the capacity check.
pub fn overfit_corpus() -> Result<Dataset, String> {
    synth_dataset(
        &SynthSpec {
            seed: 7,
            ..SynthSpec::default()
        },
        &FeatureConfig::default(),
    )
}

pub fn overfit_budget(system: System) -> usize {
    if system == System::GatT {
        200
    } else {
        400
    }
}

/// Full-size model, lr 1e-4, Adam, batch 32. Returns the first step after
/// which eval-mode BCE on the training set is below 0.1 and its EER is 0.
pub fn overfit(system: System, data: &Dataset) -> Result<usize, String> {
    let model = Model::new(
        ModelConfig {
            system,
            ..ModelConfig::default()
        },
        1,
    )
    .map_err(err)?;
    let cfg = TrainConfig {
        system,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    ensure(cfg.lr == 1e-4, || "learning rate".into())?;
    let mut trainer = Trainer::new(model, cfg).map_err(err)?;
    let budget = overfit_budget(system);
    let mut last = String::new();
    while trainer.steps() < budget {
        let loss = trainer.train_epoch(data).map_err(err)?;
        let ev = trainer.evaluate(data).map_err(err)?;
        if ev.loss < 0.1 && ev.eer == 0.0 && loss < 0.1 {
            return Ok(trainer.steps());
        }
        last = format!("train-mode loss {loss:.4}, eval BCE {:.4}, EER {:.4}", ev.loss, ev.eer);
    }
    Err(format!("{system}: not fitted within {budget} steps ({last})"))
}

// ----------------------------------------------------------------- fusion

/// Two systems, each blind to the attack the other detects.
pub fn complementary_scores(seed: u64) -> (Vec<TrialRecord>, Vec<(String, Vec<(String, f64)>)>) {
    let mut r = rng(seed);
    let mut protocol = Vec::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut add = |id: String, attack: &str, sa: f64, sb: f64| {
        protocol.push(record(&id, attack));
        a.push((id.clone(), sa));
        b.push((id, sb));
    };
    for i in 0..60 {
        add(format!("B{i:03}"), "-", r.gen_range(1.0..2.0), r.gen_range(1.0..2.0));
    }
    for i in 0..60 {
        add(format!("X{i:03}"), "A01", r.gen_range(-1.0..0.0), r.gen_range(0.9..2.1));
    }
    for i in 0..60 {
        add(format!("Y{i:03}"), "A02", r.gen_range(0.9..2.1), r.gen_range(-1.0..0.0));
    }
    (protocol, vec![("a".into(), a), ("b".into(), b)])
}

fn ranks(scores: &[(String, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].1.total_cmp(&scores[j].1).then(i.cmp(&j)));
    let mut rank = vec![0; scores.len()];
    let mut k = 0;
    for (pos, &i) in idx.iter().enumerate() {
        if pos > 0 && scores[i].1 != scores[idx[pos - 1]].1 {
            k = pos;
        }
        rank[i] = k;
    }
    rank
}

pub fn fusion() -> Outcome {
    let svm = SvmConfig::default();
    let mut summary = String::new();
    for seed in 0..5 {
        let (protocol, systems) = complementary_scores(seed);
        let data = align(&systems, &protocol).map_err(err)?;
        let model = fit_svm(&data, &svm).map_err(err)?;
        let fused = model.fuse(&data).map_err(err)?;
        let fused_eer = ScoreSet::from_scores(&fused, &protocol).map_err(err)?.eer().map_err(err)?;
        let mut best_single = f64::INFINITY;
        for (_, s) in &systems {
            best_single = best_single.min(ScoreSet::from_scores(s, &protocol).map_err(err)?.eer().map_err(err)?);
        }
        ensure(fused_eer <= best_single, || format!("seed {seed}: fused EER {fused_eer} > best single {best_single}"))?;
        if seed == 0 {
            summary = format!("fused EER {fused_eer:.3} vs best single {best_single:.3}");
        }

        let base = ranks(&fused);
        let mut r = rng(seed + 50);
        for k in 0..systems.len() {
            for _ in 0..4 {
                let scale = r.gen_range(0.01..100.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                let shift = r.gen_range(-50.0..50.0);
                let mut rescaled = systems.clone();
                rescaled[k].1.iter_mut().for_each(|(_, s)| *s = scale * *s + shift);
                let data = align(&rescaled, &protocol).map_err(err)?;
                let refit = fit_svm(&data, &svm).map_err(err)?.fuse(&data).map_err(err)?;
                ensure(ranks(&refit) == base, || {
                    format!("seed {seed}: ranking changed after mapping system {k} by {scale}x + {shift}")
                })?;
            }
        }
    }
    Ok(format!("{summary}; ranking invariant under 40 affine rescalings"))
}

// ------------------------------------------------------------ determinism

pub fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut full = vec!["gatspoof"];
    full.extend_from_slice(args);
    cli::run(full, Vec::<(String, String)>::new(), &mut out).map_err(|e| format!("`{}`: {e}", args.join(" ")))?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

/// synth, extract, train for two epochs, score and evaluate inside `dir`.
pub fn cli_pipeline(dir: &Path, workers: usize) -> Result<(), String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let w = workers.to_string();
    let common = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["--seed".into(), "17".into(), "--workers".into(), w.clone()];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let call = |args: Vec<String>| run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>()).map(|_| ());
    let (train_dir, dev_dir) = (p("train"), p("dev"));
    call(common(&["synth", "--out-dir", &train_dir, "--bonafide", "8", "--spoof", "8"]))?;
    call(vec!["--seed".into(), "18".into(), "synth".into(), "--out-dir".into(), dev_dir.clone(), "--bonafide".into(), "4".into(), "--spoof".into(), "4".into()])?;
    for (set, d) in [("train", &train_dir), ("dev", &dev_dir)] {
        let protocol = format!("{d}/protocol.txt");
        let audio = format!("{d}/wav");
        call(common(&["extract", "--protocol", &protocol, "--audio-dir", &audio, "--out", &p(&format!("{set}.lfb"))]))?;
    }
    let sets = [
        format!("paths.train_protocol={train_dir}/protocol.txt"),
        format!("paths.train_features={}", p("train.lfb")),
        format!("paths.dev_protocol={dev_dir}/protocol.txt"),
        format!("paths.dev_features={}", p("dev.lfb")),
        format!("paths.checkpoint={}", p("model.ckpt")),
        format!("paths.log={}", p("train_log.csv")),
        "train.epochs=2".to_string(),
        "train.batch_size=8".to_string(),
    ];
    let mut train_args = common(&[]);
    for s in &sets {
        train_args.push("--set".into());
        train_args.push(s.clone());
    }
    train_args.push("train".into());
    call(train_args)?;
    let dev_protocol = format!("{dev_dir}/protocol.txt");
    call(common(&[
        "score",
        "--checkpoint",
        &p("model.ckpt"),
        "--protocol",
        &dev_protocol,
        "--features",
        &p("dev.lfb"),
        "--out",
        &p("scores.txt"),
    ]))?;
    call(common(&["evaluate", "--scores", &p("scores.txt"), "--protocol", &dev_protocol, "--report", &p("report.txt")]))
}

pub const DETERMINISM_FILES: [&str; 5] = ["scores.txt", "report.txt", "train_log.csv", "model.ckpt", "dev.lfb"];

pub fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    cli_pipeline(a.path(), 1)?;
    cli_pipeline(b.path(), 3)?;
    for f in DETERMINISM_FILES {
        let x = std::fs::read(a.path().join(f)).map_err(err)?;
        let y = std::fs::read(b.path().join(f)).map_err(err)?;
        ensure(!x.is_empty() && x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} byte-identical across runs with 1 and 3 workers", DETERMINISM_FILES.join(", ")))
}

// ----------------------------------------------------------- augmentation

pub struct Seen {
    pub phase: Phase,
    pub mask: Option<FreqMask>,
    pub utt_ids: Vec<String>,
    pub inputs: Vec<FeatureMap>,
}

/// Mean of the rows outside `[lo, hi)`, summed in row order.
fn visible_mean(f: &FeatureMap, lo: usize, hi: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for b in (0..f.n_bands()).filter(|b| *b < lo || *b >= hi) {
        sum += f.row(b).iter().sum::<f64>();
        count += f.n_frames();
    }
    sum / count as f64
}

pub fn augmentation() -> Outcome {
    let features = FeatureConfig::default();
    let short = 480 + 124 * 160;
    let train = synth_dataset(
        &SynthSpec {
            n_bonafide: 12,
            n_spoof: 12,
            seed: 21,
            len: short,
            ..SynthSpec::default()
        },
        &features,
    )?;
    let dev = synth_dataset(
        &SynthSpec {
            n_bonafide: 3,
            n_spoof: 3,
            seed: 22,
            len: short,
            ..SynthSpec::default()
        },
        &features,
    )?;
    let model = small_model(System::GatT, 5)?;
    let cfg = TrainConfig {
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let max_width = cfg.max_mask_width;
    let mut trainer = Trainer::new(model, cfg).map_err(err)?;
    let seen: Rc<RefCell<Vec<Seen>>> = Rc::default();
    let sink = seen.clone();
    trainer.set_observer(move |ev| {
        sink.borrow_mut().push(Seen {
            phase: ev.phase,
            mask: ev.mask,
            utt_ids: ev.utt_ids.iter().map(|s| s.to_string()).collect(),
            inputs: ev.inputs.to_vec(),
        })
    });
    let epochs = 4;
    for _ in 0..epochs {
        trainer.train_epoch(&train).map_err(err)?;
        trainer.evaluate(&dev).map_err(err)?;
    }
    let original = |set: &'_ Dataset, id: &str| -> FeatureMap {
        set.items.iter().find(|e| e.utt_id == id).unwrap().features.clone()
    };
    let seen = seen.borrow();
    let train_events: Vec<&Seen> = seen.iter().filter(|s| s.phase == Phase::Train).collect();
    let per_epoch = train.len().div_ceil(8);
    ensure(train_events.len() == epochs * per_epoch, || format!("{} training batches observed", train_events.len()))?;
    let mut distinct = Vec::new();
    for (i, ev) in train_events.iter().enumerate() {
        let m = ev.mask.ok_or(format!("training batch {i} has no mask"))?;
        ensure(m.width <= max_width, || format!("batch {i}: width {}", m.width))?;
        if !distinct.contains(&m) {
            distinct.push(m);
        }
        let (lo, hi) = (m.start_band, m.start_band + m.width);
        ensure(hi <= 60, || format!("batch {i}: mask {lo}..{hi} out of range"))?;
        for (id, x) in ev.utt_ids.iter().zip(&ev.inputs) {
            let o = &original(&train, id);
            for b in 0..o.n_bands() {
                if b < lo || b >= hi {
                    ensure(x.row(b) == o.row(b), || format!("batch {i} {id}: unmasked band {b} altered"))?;
                } else {
                    let fill = visible_mean(o, lo, hi);
                    ensure(
                        x.row(b).iter().all(|v| (v - fill).abs() <= 1e-9 * fill.abs().max(1.0)),
                        || format!("batch {i} {id}: band {b} not filled with the visible mean"),
                    )?;
                }
            }
        }
    }
    ensure(distinct.len() > 1, || "every batch drew the same mask".into())?;
    let eval_events: Vec<&Seen> = seen.iter().filter(|s| s.phase == Phase::Eval).collect();
    ensure(!eval_events.is_empty(), || "no evaluation batches observed".into())?;
    for ev in &eval_events {
        ensure(ev.mask.is_none(), || "mask present at evaluation".into())?;
        for (id, x) in ev.utt_ids.iter().zip(&ev.inputs) {
            ensure(*x == original(&dev, id), || format!("evaluation input {id} was altered"))?;
        }
    }
    Ok(format!(
        "{} training batches, one shared mask each ({} distinct, width <= {max_width}); {} evaluation batches unmasked",
        train_events.len(),
        distinct.len(),
        eval_events.len()
    ))
}
