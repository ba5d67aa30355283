//! Shared oracles: finite-difference gradient checks and brute-force
//! metric recomputations written independently of the library code.
#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tailquant::loss::{masked_quantile_loss, weighted_mae, EventWeightConfig, MaeWeightConfig};
use tailquant::model::{increment_bound, sorted_head, BackboneConfig, HeadKind, Model, QuantileLevels};
use tailquant::{Graph, NodeId, Tensor};

pub const CASES: usize = 100;
pub const GRAD_TOL: f64 = 1e-4;

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both are ~0.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = l2(a).max(l2(n));
    if scale < 1e-9 {
        l2(&diff)
    } else {
        l2(&diff) / scale
    }
}

/// Fixed projection weights so every op reduces to a scalar loss
/// `Σ w ⊙ f(x)`.
fn project(g: &mut Graph, out: NodeId) -> NodeId {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn loss_value(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids);
    let l = project(&mut g, out);
    g.value(l).data()[0]
}

/// Relative error between reverse-mode and central-difference gradients
/// with respect to every element of every input.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids);
    let l = project(&mut g, out);
    g.backward(l).unwrap();
    let analytic: Vec<f64> = ids.iter().flat_map(|&i| g.grad_or_zero(i)).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let h = 1e-6 * x.abs().max(1.0);
            work[i].data_mut()[j] = x + h;
            let up = loss_value(&work, f);
            work[i].data_mut()[j] = x - h;
            let down = loss_value(&work, f);
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values whose pairwise gaps along the channel axis exceed `gap` at every
/// pixel.
pub fn distinct_channels(rng: &mut impl Rng, c: usize, h: usize, w: usize, gap: f64) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        loop {
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ok = (0..c).all(|a| (0..c).all(|b| a == b || (v[a] - v[b]).abs() > gap));
            if ok {
                for k in 0..c {
                    data[k * h * w + p] = v[k];
                }
                break;
            }
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

type Case = fn(&mut ChaCha8Rng) -> f64;

fn odd(rng: &mut impl Rng) -> usize {
    [1, 3, 5][rng.gen_range(0..3)]
}

fn tiny_model(head: HeadKind, seed: u64) -> Model {
    let cfg = BackboneConfig {
        in_channels: 2,
        blocks: 1,
        filters: 2,
        kernel: 3,
        head_kernel: 3,
        upsample: (2, 1),
        dropout: 0.0,
        deep_top_head: false,
    };
    Model::build(cfg, head, QuantileLevels::new(vec![0.5, 0.9, 0.99]).unwrap(), seed).unwrap()
}

/// Every graph operator plus the composite heads and objectives, each as a
/// random-case generator returning the gradient relative error.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    let cases: Vec<(&'static str, Case)> = vec![
        ("add", |r| gradcheck(&[uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 4], -2.0, 2.0)], &|g, x| g.add(x[0], x[1]).unwrap())),
        ("sub", |r| gradcheck(&[uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 4], -2.0, 2.0)], &|g, x| g.sub(x[0], x[1]).unwrap())),
        ("mul", |r| gradcheck(&[uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 4], -2.0, 2.0)], &|g, x| g.mul(x[0], x[1]).unwrap())),
        ("maximum", |r| {
            let a = uniform(r, &[2, 3, 4], -2.0, 2.0);
            let b = Tensor::new(
                vec![2, 3, 4],
                a.data()
                    .iter()
                    .map(|&v| v + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.01..1.0))
                    .collect(),
            )
            .unwrap();
            gradcheck(&[a, b], &|g, x| g.maximum(x[0], x[1]).unwrap())
        }),
        ("add_scalar", |r| {
            let s = r.gen_range(-3.0..3.0);
            gradcheck(&[uniform(r, &[3, 4], -2.0, 2.0)], &move |g, x| g.add_scalar(x[0], s))
        }),
        ("mul_scalar", |r| {
            let s = r.gen_range(-3.0..3.0);
            gradcheck(&[uniform(r, &[3, 4], -2.0, 2.0)], &move |g, x| g.mul_scalar(x[0], s))
        }),
        ("softplus", |r| gradcheck(&[uniform(r, &[2, 3, 4], -8.0, 8.0)], &|g, x| g.softplus(x[0]))),
        ("sigmoid", |r| gradcheck(&[uniform(r, &[2, 3, 4], -8.0, 8.0)], &|g, x| g.sigmoid(x[0]))),
        ("tanh", |r| gradcheck(&[uniform(r, &[2, 3, 4], -4.0, 4.0)], &|g, x| g.tanh(x[0]))),
        ("abs", |r| gradcheck(&[away_from(r, &[2, 3, 4], -2.0, 2.0, &[0.0], 1e-3)], &|g, x| g.abs(x[0]))),
        ("clip", |r| gradcheck(&[away_from(r, &[2, 3, 4], -2.0, 2.0, &[-0.5, 0.7], 1e-3)], &|g, x| g.clip(x[0], -0.5, 0.7))),
        ("pinball", |r| {
            let tau = r.gen_range(0.01..0.999);
            gradcheck(&[away_from(r, &[2, 3, 4], -2.0, 2.0, &[0.0], 1e-3)], &move |g, x| g.pinball(x[0], tau))
        }),
        ("sum", |r| gradcheck(&[uniform(r, &[2, 3, 4], -2.0, 2.0)], &|g, x| g.sum(x[0]))),
        ("max_all", |r| {
            let mut t = uniform(r, &[2, 3, 4], -2.0, 2.0);
            let k = r.gen_range(0..24);
            t.data_mut()[k] = 2.5;
            gradcheck(&[t], &|g, x| g.max_all(x[0]).unwrap())
        }),
        ("masked_mean", |r| {
            let mut mask: Vec<f64> = (0..12).map(|_| if r.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
            mask[r.gen_range(0..12)] = 1.0;
            gradcheck(&[uniform(r, &[2, 3, 4], -2.0, 2.0)], &move |g, x| g.masked_mean(x[0], &mask).unwrap())
        }),
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            gradcheck(&[uniform(r, &[m, k], -2.0, 2.0), uniform(r, &[k, n], -2.0, 2.0)], &|g, x| g.matmul(x[0], x[1]).unwrap())
        }),
        ("conv2d", |r| {
            let (c, o, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..6), r.gen_range(2..6));
            let (kh, kw) = (odd(r), odd(r));
            let inputs = [uniform(r, &[c, h, w], -1.0, 1.0), uniform(r, &[o, c, kh, kw], -1.0, 1.0), uniform(r, &[o], -1.0, 1.0)];
            gradcheck(&inputs, &|g, x| g.conv2d(x[0], x[1], Some(x[2])).unwrap())
        }),
        ("conv2d_no_bias", |r| {
            let (c, o) = (r.gen_range(1..3), r.gen_range(1..3));
            let k = odd(r);
            gradcheck(&[uniform(r, &[c, 4, 3], -1.0, 1.0), uniform(r, &[o, c, k, k], -1.0, 1.0)], &|g, x| g.conv2d(x[0], x[1], None).unwrap())
        }),
        ("prelu", |r| {
            let x = away_from(r, &[3, 3, 4], -2.0, 2.0, &[0.0], 1e-3);
            gradcheck(&[x, uniform(r, &[3], -0.5, 0.8)], &|g, x| g.prelu(x[0], x[1]).unwrap())
        }),
        ("upsample_bilinear", |r| {
            let (fr, fc) = (r.gen_range(1..4), r.gen_range(1..4));
            let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
            gradcheck(&[uniform(r, &[2, h, w], -2.0, 2.0)], &move |g, x| g.upsample_bilinear(x[0], fr, fc).unwrap())
        }),
        ("pixel_shuffle", |r| {
            let (fr, fc) = (r.gen_range(1..4), r.gen_range(1..4));
            gradcheck(&[uniform(r, &[2 * fr * fc, 2, 3], -2.0, 2.0)], &move |g, x| g.pixel_shuffle(x[0], fr, fc).unwrap())
        }),
        ("pixel_unshuffle", |r| {
            let (fr, fc) = (r.gen_range(1..4), r.gen_range(1..4));
            gradcheck(&[uniform(r, &[2, 2 * fr, 3 * fc], -2.0, 2.0)], &move |g, x| g.pixel_unshuffle(x[0], fr, fc).unwrap())
        }),
        ("spatial_dropout", |r| {
            let seed = r.next_u64();
            let rate = r.gen_range(0.1..0.7);
            gradcheck(&[uniform(r, &[5, 3, 3], -2.0, 2.0)], &move |g, x| {
                let mut d = ChaCha8Rng::seed_from_u64(seed);
                g.spatial_dropout(x[0], rate, Some(&mut d)).unwrap()
            })
        }),
        ("concat", |r| {
            gradcheck(&[uniform(r, &[1, 3, 3], -2.0, 2.0), uniform(r, &[2, 3, 3], -2.0, 2.0)], &|g, x| g.concat(&[x[0], x[1]]).unwrap())
        }),
        ("channel", |r| {
            let c = r.gen_range(0..3);
            gradcheck(&[uniform(r, &[3, 2, 4], -2.0, 2.0)], &move |g, x| g.channel(x[0], c).unwrap())
        }),
        ("sort_channels", |r| gradcheck(&[distinct_channels(r, 4, 3, 3, 1e-3)], &|g, x| g.sort_channels(x[0]).unwrap())),
        ("increment_bound", |r| gradcheck(&[uniform(r, &[4, 3, 3], -12.0, 12.0)], &|g, x| increment_bound(g, x[0]).unwrap())),
        ("sorted_head", |r| gradcheck(&[distinct_channels(r, 4, 3, 3, 1e-3)], &|g, x| sorted_head(g, x[0]).unwrap())),
        ("masked_quantile_loss", |r| {
            let levels = [0.5, 0.95, 0.99, 0.999];
            let target: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..2.0)).collect();
            let mut mask: Vec<f64> = (0..12).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
            mask[0] = 1.0;
            let mut pred = vec![0.0; 48];
            for k in 0..4 {
                for p in 0..12 {
                    pred[k * 12 + p] = target[p] + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.01..1.5);
                }
            }
            let pred = Tensor::new(vec![4, 3, 4], pred).unwrap();
            let cfg = EventWeightConfig::default();
            gradcheck(&[pred], &move |g, x| masked_quantile_loss(g, x[0], &target, &mask, &levels, &cfg).unwrap())
        }),
        ("weighted_mae", |r| {
            let target: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..2.0)).collect();
            let mm: Vec<f64> = target.iter().map(|t: &f64| t.exp_m1().max(0.0) * 10.0).collect();
            let mask = vec![1.0; 12];
            let pred: Vec<f64> = target
                .iter()
                .map(|t| t + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.01..1.5))
                .collect();
            let pred = Tensor::new(vec![1, 3, 4], pred).unwrap();
            let cfg = MaeWeightConfig::default();
            gradcheck(&[pred], &move |g, x| weighted_mae(g, x[0], &target, &mm, &mask, &cfg).unwrap())
        }),
    ];
    cases
}

/// Gradient of a full tiny model's quantile loss with respect to every
/// parameter.
pub fn model_gradcheck(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let head = HeadKind::ALL[r.gen_range(0..HeadKind::ALL.len())];
    let mut model = tiny_model(head, seed);
    // Zero-initialized biases would hide bias gradients behind PReLU kinks.
    for p in model.params.iter_mut() {
        for v in p.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    let x = uniform(&mut r, &[2, 3, 2], -1.5, 1.5);
    model_fd(&model, &x)
}

fn model_loss(model: &Model, x: &Tensor) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let f = model.record(&mut g, x, None).unwrap();
    let l = project(&mut g, f.output);
    g.backward(l).unwrap();
    let grads = f.params.iter().flat_map(|&p| g.grad_or_zero(p)).collect();
    (g.value(l).data()[0], grads)
}

fn model_fd(model: &Model, x: &Tensor) -> f64 {
    let (_, analytic) = model_loss(model, x);
    let mut m = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..m.params.len() {
        for j in 0..m.params[i].numel() {
            let v = m.params[i].data()[j];
            let h = 1e-6 * v.abs().max(1.0);
            m.params[i].data_mut()[j] = v + h;
            let up = model_loss(&m, x).0;
            m.params[i].data_mut()[j] = v - h;
            let down = model_loss(&m, x).0;
            m.params[i].data_mut()[j] = v;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Runs every operator case `CASES` times; returns the worst error per op.
pub fn run_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * i as u64));
            let worst = (0..CASES).map(|_| case(&mut rng)).fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}

// ---- brute-force metric oracles ----

pub fn bf_contingency(pred: &[f64], obs: &[f64], mask: &[f64], t: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for i in 0..pred.len() {
        if mask[i] == 0.0 {
            continue;
        }
        let f = pred[i] > t;
        let o = obs[i] > t;
        let slot = if f && o {
            0
        } else if f {
            1
        } else if o {
            2
        } else {
            3
        };
        c[slot] += 1;
    }
    c
}

/// SEDI from the direct formula with the `1/(2n)` clamp.
pub fn bf_sedi(c: [u64; 4]) -> f64 {
    let [a, b, cc, d] = c.map(|v| v as f64);
    if a + cc == 0.0 || b + d == 0.0 {
        return f64::NAN;
    }
    let n = a + b + cc + d;
    let eps = 1.0 / (2.0 * n);
    let h = (a / (a + cc)).max(eps).min(1.0 - eps);
    let f = (b / (b + d)).max(eps).min(1.0 - eps);
    let num = f.ln() - h.ln() + (1.0 - h).ln() - (1.0 - f).ln();
    let den = f.ln() + h.ln() + (1.0 - h).ln() + (1.0 - f).ln();
    num / den
}

/// Zero bin `[0, 0.1]` then 50 geometric bins up to 1200, open last bin.
pub fn bf_bin_edges() -> Vec<f64> {
    (0..=50).map(|i| 0.1 * 12_000f64.powf(i as f64 / 50.0)).collect()
}

pub fn bf_histogram(values: &[f64], mask: &[f64]) -> Vec<f64> {
    let edges = bf_bin_edges();
    let mut h = vec![0.0; 51];
    for (v, m) in values.iter().zip(mask) {
        if *m == 0.0 {
            continue;
        }
        let mut bin = 50;
        for (i, e) in edges.iter().enumerate() {
            if *v <= *e {
                bin = i;
                break;
            }
        }
        h[bin] += 1.0;
    }
    h
}

pub fn bf_kl(pred: &[f64], obs: &[f64], mask: &[f64], eps: f64) -> f64 {
    let p = bf_histogram(obs, mask);
    let q = bf_histogram(pred, mask);
    let (np, nq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let mut kl = 0.0;
    for i in 0..p.len() {
        let pi = (p[i] / np + eps) / (1.0 + 51.0 * eps);
        let qi = (q[i] / nq + eps) / (1.0 + 51.0 * eps);
        kl += pi * (pi / qi).ln();
    }
    kl
}

/// Masked mean over pixels of the level-averaged pinball loss; `planes`
/// holds one prediction vector per level.
pub fn bf_crps(planes: &[Vec<f64>], levels: &[f64], obs: &[f64], mask: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for p in 0..obs.len() {
        if mask[p] == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for (k, tau) in levels.iter().enumerate() {
            let e = obs[p] - planes[k][p];
            s += if e >= 0.0 { tau * e } else { (tau - 1.0) * e };
        }
        total += s / levels.len() as f64;
        n += 1.0;
    }
    total / n
}

/// Type-1 empirical quantile: the `⌈τn⌉`-th smallest value.
pub fn bf_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((tau * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Worst disagreement between library metrics and the brute-force oracles
/// over random instances.
#[derive(Debug, Default)]
pub struct OracleDiff {
    pub count_mismatches: u64,
    pub sedi: f64,
    pub kl: f64,
    pub crps: f64,
}

fn diff(a: f64, b: f64) -> f64 {
    if a.is_nan() && b.is_nan() {
        0.0
    } else if a.is_nan() || b.is_nan() {
        f64::INFINITY
    } else {
        (a - b).abs()
    }
}

fn rain(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.6) {
        0.0
    } else {
        (rng.gen_range(-1.0..1.0) * 2.0 + 1.0f64).exp() * if rng.gen_bool(0.05) { 30.0 } else { 1.0 }
    }
}

pub fn metric_oracles(instances: usize, seed: u64) -> OracleDiff {
    use tailquant::model::QuantilePrediction;
    use tailquant::verify::{contingency, crps_proxy, kl_divergence, sedi};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = [0.5, 0.95, 0.99, 0.999];
    let mut out = OracleDiff::default();
    for _ in 0..instances {
        let n = rng.gen_range(1..300);
        let obs: Vec<f64> = (0..n).map(|_| rain(&mut rng)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rain(&mut rng)).collect();
        let mut mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
        mask[rng.gen_range(0..n)] = 1.0;
        let t = [0.5, 1.0, 5.0, 20.0, 100.0][rng.gen_range(0..5)];

        let lib = contingency(&pred, &obs, &mask, t).unwrap();
        let bf = bf_contingency(&pred, &obs, &mask, t);
        if [lib.a, lib.b, lib.c, lib.d] != bf {
            out.count_mismatches += 1;
        }
        out.sedi = out.sedi.max(diff(sedi(&lib), bf_sedi(bf)));
        out.kl = out.kl.max(diff(kl_divergence(&pred, &obs, &mask).unwrap(), bf_kl(&pred, &obs, &mask, 1e-6)));

        let mut planes: Vec<Vec<f64>> = vec![pred.clone()];
        for _ in 1..levels.len() {
            let prev = planes.last().unwrap().clone();
            planes.push(prev.iter().map(|v| v + rng.gen_range(0.0..20.0)).collect());
        }
        let q = QuantilePrediction::new(levels.to_vec(), n, 1, planes.concat()).unwrap();
        let lib = crps_proxy(&q, &obs, &mask, &[0.0, f64::INFINITY]).unwrap().overall;
        out.crps = out.crps.max(diff(lib, bf_crps(&planes, &levels, &obs, &mask)));
    }
    out
}

/// A run small enough for end-to-end tests: 8×8 → 16×16, one block of 4
/// filters, two epochs.
pub fn small_run() -> tailquant::config::RunConfig {
    let mut run = tailquant::config::RunConfig::default();
    run.n = 60;
    run.world.coarse_shape = (8, 8);
    run.world.upsample = (2, 2);
    run.model = BackboneConfig {
        in_channels: 3,
        blocks: 1,
        filters: 4,
        kernel: 3,
        head_kernel: 3,
        upsample: (2, 2),
        dropout: 0.1,
        deep_top_head: false,
    };
    run.train.epochs = 2;
    run.train.batch_size = 8;
    run.augment.ratio = 0.05;
    run.seeds = vec![3];
    run.validate().unwrap();
    run
}

/// Every regular file below `dir`, by relative path, with its bytes.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
