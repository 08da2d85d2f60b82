//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops and shares no code with the
//! library beyond the parameter containers.

#![allow(dead_code)]

use gcg_core::attention::{gcg_forward, GcgConfig, GcgParams};
use gcg_core::{Rng, Tape, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Random `[n, h, w, d]` tensor in `[-1, 1]`.
pub fn random_map(n: usize, h: usize, w: usize, d: usize, rng: &mut Rng) -> Tensor {
    Tensor::uniform(&[n, h, w, d], -1.0, 1.0, rng)
}

/// GCG parameters with every entry, biases and norm affines included,
/// drawn at random so that no path is trivially zero or one.
pub fn random_params(depth: usize, cfg: &GcgConfig, rng: &mut Rng) -> GcgParams {
    let mut p = GcgParams::init("gcg", depth, cfg, rng);
    for q in p.params_mut() {
        for v in q.data_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }
    p
}

/// Softmax over positions of `r . w_c`, then the weighted spatial sum.
/// `r` is one sample, `[h*w][d]` row-major.
pub fn context_oracle(r: &[f64], hw: usize, d: usize, w_c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; hw];
    for p in 0..hw {
        for c in 0..d {
            logits[p] += r[p * d + c] * w_c[c];
        }
    }
    let mut m = f64::NEG_INFINITY;
    for &l in &logits {
        if l > m {
            m = l;
        }
    }
    let mut z = 0.0;
    let mut a = vec![0.0; hw];
    for p in 0..hw {
        a[p] = (logits[p] - m).exp();
        z += a[p];
    }
    for v in a.iter_mut() {
        *v /= z;
    }
    let mut ctx = vec![0.0; d];
    for p in 0..hw {
        for c in 0..d {
            ctx[c] += a[p] * r[p * d + c];
        }
    }
    (a, ctx)
}

/// `w2^T LN(relu(w1^T ctx))` with `w1: [d][k]`, `w2: [k][d]`.
pub fn channel_oracle(ctx: &[f64], w1: &[f64], scale: &[f64], shift: &[f64], w2: &[f64], d: usize, k: usize) -> Vec<f64> {
    let mut delta = vec![0.0; k];
    for j in 0..k {
        for c in 0..d {
            delta[j] += w1[c * k + j] * ctx[c];
        }
    }
    let relu: Vec<f64> = delta.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let mean = relu.iter().sum::<f64>() / k as f64;
    let var = relu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    let theta: Vec<f64> = (0..k)
        .map(|j| (relu[j] - mean) / (var + LN_EPS).sqrt() * scale[j] + shift[j])
        .collect();
    let mut out = vec![0.0; d];
    for c in 0..d {
        for j in 0..k {
            out[c] += w2[j * d + c] * theta[j];
        }
    }
    out
}

pub fn fuse_oracle(r: &[f64], hw: usize, d: usize, tc: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; hw * d];
    for p in 0..hw {
        for c in 0..d {
            out[p * d + c] = r[p * d + c] + tc[c];
        }
    }
    out
}

/// Per-position additive gate. Returns `(gate[hw], output[hw*d])`.
#[allow(clippy::too_many_arguments)]
pub fn gating_oracle(
    r: &[f64],
    rg: &[f64],
    hw: usize,
    d: usize,
    wx: &[f64],
    wg: &[f64],
    b: &[f64],
    psi: &[f64],
    b_psi: f64,
    dint: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gate = vec![0.0; hw];
    let mut out = vec![0.0; hw * d];
    for p in 0..hw {
        let mut s = b_psi;
        for j in 0..dint {
            let mut l = b[j];
            for c in 0..d {
                l += wx[c * dint + j] * r[p * d + c] + wg[c * dint + j] * rg[p * d + c];
            }
            if l > 0.0 {
                s += psi[j] * l;
            }
        }
        gate[p] = 1.0 / (1.0 + (-s).exp());
        for c in 0..d {
            out[p * d + c] = gate[p] * r[p * d + c];
        }
    }
    (gate, out)
}

/// Library outputs for one GCG forward pass: spatial map, context,
/// transformed context, guide, gate, output (all flattened).
pub struct LibGcg {
    pub spatial_map: Vec<f64>,
    pub context: Vec<f64>,
    pub transformed: Vec<f64>,
    pub guide: Vec<f64>,
    pub gate: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn run_library(r: &Tensor, p: &GcgParams, cfg: &GcgConfig) -> LibGcg {
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let vars = p.bind(&mut tape);
    let t = gcg_forward(&mut tape, rv, &vars, cfg).unwrap();
    LibGcg {
        spatial_map: tape.value(t.spatial_map).to_vec(),
        context: tape.value(t.context).to_vec(),
        transformed: tape.value(t.transformed_context).to_vec(),
        guide: tape.value(t.guide).to_vec(),
        gate: tape.value(t.gate).to_vec(),
        output: tape.value(t.output).to_vec(),
    }
}

/// Chains the four oracles over every sample of `r` (`[n, h, w, d]`).
pub fn run_oracle(r: &Tensor, p: &GcgParams) -> LibGcg {
    let s = r.shape();
    let (n, hw, d) = (s[0], s[1] * s[2], s[3]);
    let c = &p.context;
    let g = &p.gating;
    let k = c.ln_scale.data().len();
    let dint = g.gate_bias.data().len();
    let mut out = LibGcg {
        spatial_map: vec![],
        context: vec![],
        transformed: vec![],
        guide: vec![],
        gate: vec![],
        output: vec![],
    };
    for i in 0..n {
        let ri = &r.data()[i * hw * d..(i + 1) * hw * d];
        let (a, ctx) = context_oracle(ri, hw, d, c.context_conv.data());
        let tc = channel_oracle(
            &ctx,
            c.bottleneck_in.data(),
            c.ln_scale.data(),
            c.ln_shift.data(),
            c.bottleneck_out.data(),
            d,
            k,
        );
        let rg = fuse_oracle(ri, hw, d, &tc);
        let (gate, o) = gating_oracle(
            ri,
            &rg,
            hw,
            d,
            g.gate_x.data(),
            g.gate_g.data(),
            g.gate_bias.data(),
            g.psi.data(),
            g.psi_bias.data()[0],
            dint,
        );
        out.spatial_map.extend(a);
        out.context.extend(ctx);
        out.transformed.extend(tc);
        out.guide.extend(rg);
        out.gate.extend(gate);
        out.output.extend(o);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force metrics: `(accuracy, kappa, per-class (precision, recall,
/// f1, auc) as Option, macro (p, r, f1, auc), weighted (p, r, f1, auc))`.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub kappa: f64,
    pub per_class: Vec<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)>,
    pub macro_avg: [f64; 4],
    pub weighted_avg: [f64; 4],
}

pub fn brute_metrics(y: &[usize], probs: &[Vec<f64>]) -> BruteMetrics {
    let n = y.len();
    let c = probs[0].len();
    let pred: Vec<usize> = probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let correct = (0..n).filter(|&i| pred[i] == y[i]).count();
    let accuracy = correct as f64 / n as f64;
    // chance agreement from counts
    let mut pe = 0.0;
    for k in 0..c {
        let t = y.iter().filter(|&&v| v == k).count() as f64;
        let p = pred.iter().filter(|&&v| v == k).count() as f64;
        pe += t * p;
    }
    pe /= (n * n) as f64;
    let kappa = if (1.0 - pe).abs() < f64::EPSILON { 0.0 } else { (accuracy - pe) / (1.0 - pe) };

    let mut per_class = Vec::new();
    for k in 0..c {
        let tp = (0..n).filter(|&i| y[i] == k && pred[i] == k).count();
        let fp = (0..n).filter(|&i| y[i] != k && pred[i] == k).count();
        let fneg = (0..n).filter(|&i| y[i] == k && pred[i] != k).count();
        let support = tp + fneg;
        let precision = if tp + fp > 0 {
            Some(tp as f64 / (tp + fp) as f64)
        } else if support > 0 {
            Some(0.0)
        } else {
            None
        };
        let recall = (support > 0).then(|| tp as f64 / support as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) => Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }),
            _ => None,
        };
        // pairwise: wins + half ties over all positive/negative pairs
        let pos: Vec<f64> = (0..n).filter(|&i| y[i] == k).map(|i| probs[i][k]).collect();
        let neg: Vec<f64> = (0..n).filter(|&i| y[i] != k).map(|i| probs[i][k]).collect();
        let auc = (!pos.is_empty() && !neg.is_empty()).then(|| {
            let mut s = 0.0;
            for &a in &pos {
                for &b in &neg {
                    s += if a > b {
                        1.0
                    } else if a == b {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            s / (pos.len() * neg.len()) as f64
        });
        per_class.push((precision, recall, f1, auc));
    }

    let supports: Vec<usize> = (0..c).map(|k| y.iter().filter(|&&v| v == k).count()).collect();
    let mut macro_avg = [0.0; 4];
    let mut weighted_avg = [0.0; 4];
    for m in 0..4 {
        let (mut s, mut cnt, mut ws, mut wt) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..c {
            if supports[k] == 0 {
                continue;
            }
            let pc = per_class[k];
            let v = [pc.0, pc.1, pc.2, pc.3][m];
            if let Some(v) = v {
                s += v;
                cnt += 1.0;
                ws += v * supports[k] as f64;
                wt += supports[k] as f64;
            }
        }
        macro_avg[m] = if cnt > 0.0 { s / cnt } else { 0.0 };
        weighted_avg[m] = if wt > 0.0 { ws / wt } else { 0.0 };
    }
    BruteMetrics {
        accuracy,
        kappa,
        per_class,
        macro_avg,
        weighted_avg,
    }
}

/// Random small prediction set with occasional tied scores.
pub fn random_predictions(rng: &mut Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
    let c = rng.int_range(2, 4);
    let n = rng.int_range(2, 20);
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let probs = (0..n)
        .map(|_| {
            // coarse values make ties common
            let raw: Vec<f64> = (0..c).map(|_| rng.int_range(1, 5) as f64).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect();
    (y, probs)
}
