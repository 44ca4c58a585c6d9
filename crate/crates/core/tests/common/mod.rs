//! Shared fixtures: a central-difference gradient checker and small model specs.
#![allow(dead_code)]

use growclip::data::Vocabulary;
use growclip::model::{build_model, ArchSpec, ForwardOptions, ModelView, Session, TokenBatch, BOS, EOS};
use growclip::objective::contrastive_loss;
use growclip::tensor::{Graph, Tensor, Var};
use growclip::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks every input of `f` against central differences of the scalar
/// `Σ f(inputs) ⊙ R` for a fixed random `R`. Returns the worst relative error.
pub fn check_op<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let project = |g: &mut Graph<f64>, out: Var, r: &Tensor<f64>| -> Var {
        let r = g.constant(r.clone());
        let p = g.mul(out, r).expect("projection shape");
        g.sum(p)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("op builds");
    let r = random_tensor(rng, g.shape(out));
    let loss = project(&mut g, out, &r);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("op builds");
        let l = project(&mut g, out, &r);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        let mut xs = inputs.clone();
        for (i, n) in numeric.iter_mut().enumerate() {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = x0;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(grad, &numeric));
    }
    worst
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Names of the ops covered by [`op_instance`].
pub const OPS: &[&str] = &[
    "add", "sub", "mul", "add_bcast", "scale", "scale_by", "exp", "clamp_max", "gelu", "matmul", "bmm",
    "bmm_trans", "softmax", "log_softmax", "layernorm", "l2_normalize", "gather_rows", "reshape", "permute",
    "transpose", "concat", "slice", "prefix", "sum", "mean", "conv2d", "contrastive_loss",
];

/// Worst relative error of one randomized instance of `op`.
pub fn op_instance(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5));
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape);
    let (x, y) = (t(&[r, c]), t(&[r, c]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    match op {
        "add" => check_op(&mut rng, vec![x, y], |g, v| g.add(v[0], v[1])),
        "sub" => check_op(&mut rng, vec![x, y], |g, v| g.sub(v[0], v[1])),
        "mul" => check_op(&mut rng, vec![x, y], |g, v| g.mul(v[0], v[1])),
        "add_bcast" => {
            let b = dim(&mut rng, 1, 3);
            let a = random_tensor(&mut rng, &[b, r, c]);
            check_op(&mut rng, vec![a, x], |g, v| g.add_bcast(v[0], v[1]))
        }
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            check_op(&mut rng, vec![x], move |g, v| g.scale(v[0], s))
        }
        "scale_by" => {
            let s = random_tensor(&mut rng, &[1]);
            check_op(&mut rng, vec![x, s], |g, v| g.scale_by(v[0], v[1]))
        }
        "exp" => check_op(&mut rng, vec![x], |g, v| g.exp(v[0])),
        "clamp_max" => {
            // Keep every element at least 0.05 from the kink.
            let x = Tensor::from_fn(&[r, c], |_| {
                let u: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { u } else { -u }
            });
            check_op(&mut rng, vec![x], |g, v| g.clamp_max(v[0], 0.0))
        }
        "gelu" => check_op(&mut rng, vec![x], |g, v| g.gelu(v[0])),
        "matmul" => {
            let n = dim(&mut rng, 1, 4);
            let b = random_tensor(&mut rng, &[c, n]);
            check_op(&mut rng, vec![x, b], |g, v| g.matmul(v[0], v[1]))
        }
        "bmm" | "bmm_trans" => {
            let (bs, n) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4));
            let trans = op == "bmm_trans";
            let a = random_tensor(&mut rng, &[bs, r, c]);
            let b = random_tensor(&mut rng, &if trans { [bs, n, c] } else { [bs, c, n] });
            check_op(&mut rng, vec![a, b], move |g, v| g.bmm(v[0], v[1], trans))
        }
        "softmax" => check_op(&mut rng, vec![x], |g, v| g.softmax(v[0])),
        "log_softmax" => check_op(&mut rng, vec![x], |g, v| g.log_softmax(v[0])),
        "layernorm" => {
            let d = dim(&mut rng, 2, 6);
            let x = random_tensor(&mut rng, &[r, d]);
            let gain = random_tensor(&mut rng, &[d]);
            let bias = random_tensor(&mut rng, &[d]);
            check_op(&mut rng, vec![x, gain, bias], |g, v| g.layernorm(v[0], v[1], v[2], 1e-5))
        }
        "l2_normalize" => check_op(&mut rng, vec![x], |g, v| g.l2_normalize(v[0])),
        "gather_rows" => {
            let n = dim(&mut rng, 1, 6);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
            check_op(&mut rng, vec![x], move |g, v| g.gather_rows(v[0], &idx))
        }
        "reshape" => check_op(&mut rng, vec![x], move |g, v| g.reshape(v[0], &[c, r])),
        "permute" => {
            let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3)];
            let mut axes = [0, 1, 2, 3];
            for i in (1..4).rev() {
                axes.swap(i, rng.random_range(0..=i));
            }
            let x = random_tensor(&mut rng, &shape);
            check_op(&mut rng, vec![x], move |g, v| g.permute(v[0], &axes))
        }
        "transpose" => check_op(&mut rng, vec![x], |g, v| g.transpose(v[0])),
        "concat" => {
            let axis = rng.random_range(0..2);
            let extra = dim(&mut rng, 1, 3);
            let z = random_tensor(&mut rng, &if axis == 0 { [extra, c] } else { [r, extra] });
            check_op(&mut rng, vec![x, y, z], move |g, v| g.concat(v, axis))
        }
        "slice" => {
            let (s0, s1) = (rng.random_range(0..r), rng.random_range(0..c));
            let (e0, e1) = (rng.random_range(1..=r - s0), rng.random_range(1..=c - s1));
            check_op(&mut rng, vec![x], move |g, v| g.slice(v[0], &[s0, s1], &[e0, e1]))
        }
        "prefix" => {
            let (e0, e1) = (rng.random_range(1..=r), rng.random_range(1..=c));
            check_op(&mut rng, vec![x], move |g, v| g.prefix(v[0], &[e0, e1]))
        }
        "sum" => check_op(&mut rng, vec![x], |g, v| Ok(g.sum(v[0]))),
        "mean" => check_op(&mut rng, vec![x], |g, v| Ok(g.mean(v[0]))),
        "conv2d" => {
            let (n, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
            let (k, stride, pad) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 2), rng.random_range(0..=1));
            let out = dim(&mut rng, 1, 3);
            let padded = (out - 1) * stride + k;
            let (h, pad) = if padded > 2 * pad { (padded - 2 * pad, pad) } else { (padded, 0) };
            let x = random_tensor(&mut rng, &[n, ci, h, h]);
            let w = random_tensor(&mut rng, &[co, ci, k, k]);
            check_op(&mut rng, vec![x, w], move |g, v| g.conv2d(v[0], v[1], stride, pad))
        }
        "contrastive_loss" => {
            let n = dim(&mut rng, 1, 5);
            let s = Tensor::from_fn(&[n, n], |_| rng.random_range(-3.0..3.0));
            check_op(&mut rng, vec![s], |g, v| contrastive_loss(g, v[0]))
        }
        other => panic!("unknown op {other}"),
    }
}

/// A two-block image and text encoder, optionally with a shared block.
pub fn tiny_spec(shared: usize) -> ArchSpec {
    let mut s = ArchSpec::base(Vocabulary::new().len());
    s.conv_layers_img = 2;
    s.blocks_img = 2;
    s.blocks_txt = 2;
    s.heads_img = 2;
    s.heads_txt = 2;
    s.blocks_shared = shared;
    s.head_dim_img = 2;
    s.head_dim_txt = 2;
    s.embed_dim = 4;
    s.image_size = 8;
    s.patch_size = 4;
    s.max_text_len = 6;
    s.stem_channels = 3;
    s
}

pub fn probe_images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
    random_tensor(rng, &[n, 3, size, size])
}

pub fn probe_tokens(rng: &mut ChaCha8Rng, n: usize, spec: &ArchSpec) -> TokenBatch {
    let vocab = Vocabulary::new().len();
    let seqs: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=spec.max_text_len - 2);
            let mut s = vec![BOS];
            s.extend((0..len).map(|_| rng.random_range(3..vocab)));
            s.push(EOS);
            s
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

fn model_loss(view: ModelView<'_, f64>, images: &Tensor<f64>, tokens: &TokenBatch, train: bool) -> (f64, Option<growclip::model::Gradients<f64>>) {
    let mut s = Session::new(view, ForwardOptions::default(), train);
    let i = s.encode_image(images).expect("image");
    let t = s.encode_text(tokens).expect("text");
    let sim = s.similarity(i, t).expect("similarity");
    let loss = contrastive_loss(&mut s.graph, sim).expect("loss");
    let value = s.graph.value(loss).item();
    if !train {
        return (value, None);
    }
    s.graph.backward(loss).expect("backward");
    (value, Some(s.gradients()))
}

/// Worst per-tensor relative error of the full forward + loss gradient of
/// `spec`, over every parameter element.
pub fn model_gradient_error(spec: &ArchSpec, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = build_model::<f64>(spec, seed).expect("model");
    // Break the exact symmetry of zero-initialized biases and unit gains.
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let images = probe_images(&mut rng, 3, spec.image_size);
    let tokens = probe_tokens(&mut rng, 3, spec);
    let (_, grads) = model_loss(ModelView::full(&store), &images, &tokens, true);
    let grads = grads.expect("gradients");
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = (0.0, String::new());
    for name in names {
        let n = store.tensor(&name).unwrap().numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = store.tensor(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = x0 + FD_STEP;
            let up = model_loss(ModelView::full(&store), &images, &tokens, false).0;
            store.get_mut(&name).unwrap().data_mut()[i] = x0 - FD_STEP;
            let down = model_loss(ModelView::full(&store), &images, &tokens, false).0;
            store.get_mut(&name).unwrap().data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let analytic = grads.get(&name).map(|g| g.grad.clone()).unwrap_or_else(|| vec![0.0; n]);
        let e = rel_error(&analytic, &numeric);
        if e >= worst.0 {
            worst = (e, name);
        }
    }
    worst
}
pub mod criteria;
