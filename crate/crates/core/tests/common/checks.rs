//! Checks shared by the focused test files and the acceptance run. Each
//! returns a one-line summary on success and the first violation otherwise.

use std::collections::HashSet;

use anyseg::encoder::EncoderConfig;
use anyseg::eval::{enumerate_subsets, miou, subset_labels};
use anyseg::masm::{consistency_loss, map_similarity_value, rank_modalities, ScaleConsistency, MAPPED_EPS};
use anyseg::model::{FusionMode, Model, ModelConfig};
use anyseg::synth::{generate_scene, SceneSpec};
use anyseg::tensor::{PoolKind, Tape, Tensor, Var};
use anyseg::Result;
use rand::Rng;

use super::{check_gradient, random_tensor, rel_error, rng, weighted_sum};

pub type Outcome = std::result::Result<String, String>;

pub const CASES: u64 = 20;
pub const OP_TOL: f64 = 1e-4;
pub const OBJECTIVE_TOL: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One op under test: builds random inputs for a seed and the scalar
/// function whose gradient is checked.
fn op_case(name: &str, seed: u64) -> (Vec<Tensor<f64>>, Build) {
    let mut r = rng(seed.wrapping_mul(7919) ^ name.len() as u64);
    let c = r.gen_range(1..4);
    let h = r.gen_range(1..4);
    let w = r.gen_range(1..4);
    let chw = [c, h, w];
    let x = random_tensor(&mut r, &chw, -2.0, 2.0);
    let y = random_tensor(&mut r, &chw, -2.0, 2.0);
    let pos = random_tensor(&mut r, &chw, 0.5, 2.0);
    let ws = move |t: &mut Tape<f64>, v: Var| weighted_sum(t, v, seed);
    match name {
        "add" => (vec![x, y], Box::new(move |t, v| {
            let o = t.add(v[0], v[1])?;
            ws(t, o)
        })),
        "sub" => (vec![x, y], Box::new(move |t, v| {
            let o = t.sub(v[0], v[1])?;
            ws(t, o)
        })),
        "mul" => (vec![x, y], Box::new(move |t, v| {
            let o = t.mul(v[0], v[1])?;
            ws(t, o)
        })),
        "div" => (vec![x, pos], Box::new(move |t, v| {
            let o = t.div(v[0], v[1])?;
            ws(t, o)
        })),
        "maximum" => (vec![x, y], Box::new(move |t, v| {
            let o = t.maximum(v[0], v[1])?;
            ws(t, o)
        })),
        "add_scalar" => (vec![x], Box::new(move |t, v| {
            let o = t.add_scalar(v[0], 0.7)?;
            ws(t, o)
        })),
        "mul_scalar" => (vec![x], Box::new(move |t, v| {
            let o = t.mul_scalar(v[0], -1.3)?;
            ws(t, o)
        })),
        "sigmoid" => (vec![x], Box::new(move |t, v| {
            let o = t.sigmoid(v[0])?;
            ws(t, o)
        })),
        "gelu" => (vec![x], Box::new(move |t, v| {
            let o = t.gelu(v[0])?;
            ws(t, o)
        })),
        "exp" => (vec![x], Box::new(move |t, v| {
            let o = t.exp(v[0])?;
            ws(t, o)
        })),
        "log" => (vec![pos], Box::new(move |t, v| {
            let o = t.log(v[0])?;
            ws(t, o)
        })),
        "clamp" => (vec![x], Box::new(move |t, v| {
            let o = t.clamp(v[0], -1.0, 1.0)?;
            ws(t, o)
        })),
        "matmul" => {
            let k = r.gen_range(1..5);
            let a = random_tensor(&mut r, &[c, k], -1.0, 1.0);
            let b = random_tensor(&mut r, &[k, h], -1.0, 1.0);
            (vec![a, b], Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                ws(t, o)
            }))
        }
        "sum" => (vec![x], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![x], Box::new(|t, v| t.mean(v[0]))),
        "pool_avg" => (vec![x], Box::new(move |t, v| {
            let o = t.pool_global(v[0], PoolKind::Avg)?;
            ws(t, o)
        })),
        "pool_max" => (vec![x], Box::new(move |t, v| {
            let o = t.pool_global(v[0], PoolKind::Max)?;
            ws(t, o)
        })),
        "resample_bilinear" => {
            let (h2, w2) = (r.gen_range(1..7), r.gen_range(1..7));
            (vec![x], Box::new(move |t, v| {
                let o = t.resample_bilinear(v[0], h2, w2)?;
                ws(t, o)
            }))
        }
        "reshape" => (vec![x], Box::new(move |t, v| {
            let o = t.reshape(v[0], &[c * h * w])?;
            let o = t.sigmoid(o)?;
            ws(t, o)
        })),
        "concat" => (vec![x, y], Box::new(move |t, v| {
            let o = t.concat(&[v[0], v[1], v[0]])?;
            ws(t, o)
        })),
        "slice" => {
            let start = r.gen_range(0..c);
            let len = r.gen_range(1..=c - start);
            (vec![x], Box::new(move |t, v| {
                let o = t.slice(v[0], start, len)?;
                ws(t, o)
            }))
        }
        "scale_channels" => {
            let g = random_tensor(&mut r, &[c], -1.0, 1.0);
            (vec![x, g], Box::new(move |t, v| {
                let o = t.scale_channels(v[0], v[1])?;
                ws(t, o)
            }))
        }
        "scale_spatial" => {
            let g = random_tensor(&mut r, &[h, w], -1.0, 1.0);
            (vec![x, g], Box::new(move |t, v| {
                let o = t.scale_spatial(v[0], v[1])?;
                ws(t, o)
            }))
        }
        "conv1x1" => {
            let cout = r.gen_range(1..4);
            let wt = random_tensor(&mut r, &[cout, c], -1.0, 1.0);
            let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
            (vec![x, wt, b], Box::new(move |t, v| {
                let o = t.conv1x1(v[0], v[1], Some(v[2]))?;
                ws(t, o)
            }))
        }
        "space_to_depth" => {
            let k = r.gen_range(1..3);
            let img = random_tensor(&mut r, &[c, 2 * k, 2 * k], -1.0, 1.0);
            (vec![img], Box::new(move |t, v| {
                let o = t.space_to_depth(v[0], k)?;
                ws(t, o)
            }))
        }
        "layer_norm" => {
            let cc = c + 1;
            let xx = random_tensor(&mut r, &[cc, h, w], -2.0, 2.0);
            let g = random_tensor(&mut r, &[cc], 0.5, 1.5);
            let b = random_tensor(&mut r, &[cc], -0.5, 0.5);
            (vec![xx, g, b], Box::new(move |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2])?;
                ws(t, o)
            }))
        }
        "softmax" => (vec![x], Box::new(move |t, v| {
            let o = t.softmax(v[0])?;
            ws(t, o)
        })),
        "cosine" => (vec![x, y], Box::new(|t, v| t.cosine(v[0], v[1]))),
        "cross_entropy" => {
            let k = c + 1;
            let logits = random_tensor(&mut r, &[k, h, w], -2.0, 2.0);
            let mut labels: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..k as u8)).collect();
            if labels.len() > 1 {
                labels[0] = 255;
            }
            (vec![logits], Box::new(move |t, v| t.cross_entropy(v[0], &labels)))
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "add_scalar",
    "mul_scalar",
    "sigmoid",
    "gelu",
    "exp",
    "log",
    "clamp",
    "matmul",
    "sum",
    "mean",
    "pool_avg",
    "pool_max",
    "resample_bilinear",
    "reshape",
    "concat",
    "slice",
    "scale_channels",
    "scale_spatial",
    "conv1x1",
    "space_to_depth",
    "layer_norm",
    "softmax",
    "cosine",
    "cross_entropy",
];

/// Every op in [`OPS`] over [`CASES`] seeded inputs.
pub fn op_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_op = "";
    for op in OPS {
        for seed in 0..CASES {
            let (inputs, f) = op_case(op, seed);
            let err = check_gradient(f, &inputs);
            if !(err < OP_TOL) {
                return Err(format!("{op} seed {seed}: relative error {err:e}"));
            }
            if err > worst {
                worst = err;
                worst_op = op;
            }
        }
    }
    Ok(format!("{} ops x {CASES} cases, worst {worst:.2e} ({worst_op})", OPS.len()))
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        modalities: ["rgb", "depth", "event", "lidar"].map(String::from).to_vec(),
        classes: 3,
        encoder: EncoderConfig {
            stage_channels: [4, 4, 8, 8],
            ..EncoderConfig::default()
        },
        embed_dim: 8,
        input_norm: Default::default(),
    }
}

fn tiny_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        classes: 3,
        ..SceneSpec::default()
    }
}

/// dL/dθ for sampled parameters of the whole model (encoder, interaction
/// modules, head) against central differences of the full objective.
pub fn objective_gradients() -> Outcome {
    let spec = tiny_spec();
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let scene = generate_scene(seed, &spec).unwrap();
        let mut model = Model::<f64>::new(tiny_model_config(), seed).unwrap();
        let beta = 0.5 + seed as f64 / 10.0;
        let loss = |m: &Model<f64>| {
            let mut tape = Tape::new();
            let out = m.train_forward(&mut tape, &scene, FusionMode::Selection, beta).unwrap();
            tape.value(out.total).item().unwrap()
        };

        let mut tape = Tape::new();
        let out = model.train_forward(&mut tape, &scene, FusionMode::Selection, beta).unwrap();
        let lc = tape.value(out.consistency_loss).item().unwrap();
        if !(lc > 0.0) {
            return Err(format!("seed {seed}: consistency term inactive"));
        }
        let grads = tape.backward(out.total).unwrap();

        let mut r = rng(1000 + seed);
        let ids: Vec<_> = model.store.ids().collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..10 {
            let id = ids[r.gen_range(0..ids.len())];
            let j = r.gen_range(0..model.store.get(id).numel());
            analytic.push(grads.get(out.bound.var(id)).map_or(0.0, |g| g[j]));
            let base = model.store.get(id).clone();
            let h = 1e-6;
            let mut probe = |delta: f64| {
                let mut d = base.data().to_vec();
                d[j] += delta;
                model.store.set(id, Tensor::new(base.shape(), d).unwrap()).unwrap();
                let v = loss(&model);
                model.store.set(id, base.clone()).unwrap();
                v
            };
            let fp = probe(h);
            let fm = probe(-h);
            numeric.push((fp - fm) / (2.0 * h));
        }
        let err = rel_error(&analytic, &numeric);
        if !(err < OBJECTIVE_TOL) {
            return Err(format!("seed {seed}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{CASES} cases x 10 parameters, worst {worst:.2e}"))
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// The one permutation in which scores never increase and equal scores keep
/// ascending indices, found by checking all of them.
pub fn brute_force_order(scores: &[f64]) -> Vec<usize> {
    fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in perms(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    let valid: Vec<Vec<usize>> = perms((0..scores.len()).collect())
        .into_iter()
        .filter(|p| {
            p.windows(2)
                .all(|w| scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]))
        })
        .collect();
    assert_eq!(valid.len(), 1);
    valid.into_iter().next().unwrap()
}

pub fn ranking_oracle() -> Outcome {
    const N: u64 = 50;
    for case in 0..N {
        let mut r = rng(case);
        let shape = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let mut feats: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut r, &shape, -1.0, 1.0)).collect();
        if case % 5 == 0 {
            // exact ties
            feats[3] = feats[1].clone();
        }
        let mut tape = Tape::new();
        let vars: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let mean_data: Vec<f64> = (0..feats[0].numel())
            .map(|i| feats.iter().map(|f| f.data()[i]).sum::<f64>() / 4.0)
            .collect();
        let mean = tape.constant(Tensor::new(&shape, mean_data.clone()).unwrap());
        let got = rank_modalities(&tape, &vars, mean, 1).unwrap();

        let scores: Vec<f64> = feats.iter().map(|f| plain_cosine(f.data(), &mean_data)).collect();
        for (a, b) in got.scores.iter().zip(&scores) {
            if !((a - b).abs() < 1e-12) {
                return Err(format!("case {case}: cosine {a} vs {b}"));
            }
        }
        // rank on the library's own scores so near-equal floats cannot flip
        let order = brute_force_order(&got.scores);
        if got.robust != order[0] || got.fragile != order[3] || got.remaining != order[1..3] {
            return Err(format!("case {case}: got {got:?}, want order {order:?}"));
        }
    }
    Ok(format!("{N} four-modality cases agree"))
}

fn set_miou(pred: &[u8], truth: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| truth[i] != 255 && pred[i] == c).collect();
        let t: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        let union = p.union(&t).count();
        if union > 0 {
            ious.push(p.intersection(&t).count() as f64 / union as f64);
        }
    }
    100.0 * ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn miou_oracle() -> Outcome {
    const N: u64 = 100;
    let mut worst = 0.0f64;
    for case in 0..N {
        let mut r = rng(500 + case);
        let k = r.gen_range(2..7);
        let truth: Vec<u8> = (0..400)
            .map(|_| if r.gen_bool(0.1) { 255 } else { r.gen_range(0..k as u8) })
            .collect();
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| {
                if t != 255 && r.gen_bool(0.6) {
                    t
                } else {
                    r.gen_range(0..k as u8)
                }
            })
            .collect();
        let got = miou(&pred, &truth, k).unwrap();
        let want = set_miou(&pred, &truth, k);
        if !((got - want).abs() < 1e-9) {
            return Err(format!("case {case}: {got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{N} random 20x20 maps, worst |diff| {worst:.1e}"))
}

pub fn cross_entropy_oracle() -> Outcome {
    const N: u64 = 20;
    let mut worst = 0.0f64;
    for case in 0..N {
        let mut r = rng(900 + case);
        let (k, h, w) = (r.gen_range(2..6), r.gen_range(1..5), r.gen_range(1..5));
        let logits = random_tensor(&mut r, &[k, h, w], -4.0, 4.0);
        let mut labels: Vec<u8> = (0..h * w).map(|_| r.gen_range(0..k as u8)).collect();
        labels[0] = 255;
        if labels.iter().all(|&l| l == 255) {
            continue;
        }
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let out = anyseg::head::cross_entropy(&mut tape, v, &labels).unwrap();
        let got = tape.value(out).item().unwrap();

        let (mut total, mut n) = (0.0, 0);
        for (p, &label) in labels.iter().enumerate() {
            if label == 255 {
                continue;
            }
            let z: Vec<f64> = (0..k).map(|c| logits.data()[c * h * w + p]).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - z[label as usize];
            n += 1;
        }
        let want = total / n as f64;
        if !((got - want).abs() < 1e-10) {
            return Err(format!("case {case}: {got} vs {want}"));
        }
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{N} random maps, worst |diff| {worst:.1e}"))
}

pub fn lc(c1: f64, c2: f64, classes: usize) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(c1).unwrap());
    let b = tape.constant(Tensor::scalar(c2).unwrap());
    let terms = [ScaleConsistency { mapped: vec![a, b] }];
    let v = consistency_loss(&mut tape, &terms, classes).unwrap();
    tape.value(v).item().unwrap()
}

pub fn loss_identities() -> Outcome {
    let mut r = rng(77);
    for i in 0..1000 {
        let c1 = map_similarity_value(r.gen_range(-1.0..1.0));
        let c2 = map_similarity_value(r.gen_range(-1.0..1.0));
        let k = r.gen_range(1..30);
        if lc(c1, c1, k) != 0.0 || lc(c1, c2, k) != lc(c2, c1, k) || !(lc(c1, c2, k) >= 0.0) {
            return Err(format!("pair {i}: ({c1}, {c2}), K={k}"));
        }
    }
    let v = lc(1.0, MAPPED_EPS, 25);
    let want = 25.0 * 2f64.ln();
    if !((v - want).abs() < 1e-3) {
        return Err(format!("extreme pair gives {v}, want {want}"));
    }

    let spec = tiny_spec();
    for seed in 0..5 {
        let scene = generate_scene(seed, &spec).unwrap();
        let model = Model::<f64>::new(tiny_model_config(), seed).unwrap();
        let mut tape = Tape::new();
        let out = model.train_forward(&mut tape, &scene, FusionMode::Selection, 0.0).unwrap();
        let l = tape.value(out.total).item().unwrap();
        let l_m = tape.value(out.seg_loss).item().unwrap();
        let l_c = tape.value(out.consistency_loss).item().unwrap();
        if l.to_bits() != l_m.to_bits() || !(l_c > 0.0) {
            return Err(format!("seed {seed}: beta=0 gives L={l:e}, L_M={l_m:e}, L_C={l_c:e}"));
        }
    }
    Ok(format!("1000 pairs; extreme pair {v:.6} vs {want:.6}; beta=0 bit-exact on 5 models"))
}

pub fn subset_protocol() -> Outcome {
    let four: Vec<String> = ["rgb", "depth", "event", "lidar"].map(String::from).to_vec();
    let s4 = enumerate_subsets(4).unwrap();
    let l4 = subset_labels(&four, &s4);
    let want4 = ["R", "D", "E", "L", "RD", "RE", "RL", "DE", "DL", "EL", "RDE", "RDL", "REL", "DEL", "RDEL"];
    if s4.len() != 15 || l4 != want4 {
        return Err(format!("M=4 gives {l4:?}"));
    }
    let three: Vec<String> = ["frame", "event", "lidar"].map(String::from).to_vec();
    let s3 = enumerate_subsets(3).unwrap();
    let l3 = subset_labels(&three, &s3);
    if s3.len() != 7 || l3 != ["F", "E", "L", "FE", "FL", "EL", "FEL"] {
        return Err(format!("M=3 gives {l3:?}"));
    }
    Ok(format!("M=4: {}, M=3: {}", l4.join(" "), l3.join(" ")))
}
