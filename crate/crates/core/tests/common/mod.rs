//! Independent float64 oracles shared by the integration tests and the
//! acceptance report. Nothing here calls into the library's numerics; the
//! library only supplies parameters and the values under test.
#![allow(dead_code)]

use dmm_core::codebook::{default_tau, Codebook};
use dmm_core::ndcore::{Tape, Tensor, Var};
use dmm_core::networks::{Dims, DmmModel, Mlp};
use dmm_core::train::{batch_gradients, TrainConfig};
use dmm_core::LossWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to float32 rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;
pub const SIGMOID_CLAMP: f64 = 1e-7;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error and probe count of one gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub probes: usize,
    pub redrawn: usize,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.probes += other.probes;
        self.redrawn += other.redrawn;
    }
}

// ---------------------------------------------------------------------------
// Primitive checks

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Sampler for input entries; keeps inputs away from kinks and poles.
    pub sample: fn(&mut ChaCha8Rng) -> f64,
    pub tape: fn(&mut Tape, &[Var]) -> Var,
    pub oracle: fn(&[Vec<f64>], &[Vec<usize>]) -> Vec<f64>,
}

fn away_from_zero(r: &mut ChaCha8Rng) -> f64 {
    let v: f64 = r.random_range(0.1..2.0);
    if r.random_bool(0.5) { v } else { -v }
}

fn positive(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(0.2..2.0)
}

fn any(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(-2.0..2.0)
}

fn in_clamp_band(r: &mut ChaCha8Rng) -> f64 {
    // Either well inside [-0.5, 0.5] or well outside it.
    let v: f64 = r.random_range(0.0..0.4);
    let v = if r.random_bool(0.5) { v } else { v + 0.7 };
    if r.random_bool(0.5) { v } else { -v }
}

fn mm(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            for j in 0..r {
                c[i * r + j] += a[i * q + k] * b[k * r + j];
            }
        }
    }
    c
}

fn sigmoid64(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            sample: any,
            tape: |t, v| t.matmul(v[0], v[1]).unwrap(),
            oracle: |x, _| mm(&x[0], &x[1], 3, 4, 2),
        },
        Primitive {
            name: "add",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: any,
            tape: |t, v| t.add(v[0], v[1]).unwrap(),
            oracle: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        },
        Primitive {
            name: "sub",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: any,
            tape: |t, v| t.sub(v[0], v[1]).unwrap(),
            oracle: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
        },
        Primitive {
            name: "mul",
            shapes: vec![vec![2, 3], vec![2, 3]],
            sample: any,
            tape: |t, v| t.mul(v[0], v[1]).unwrap(),
            oracle: |x, _| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        },
        Primitive {
            name: "mul_scalar_broadcast",
            shapes: vec![vec![2, 3], vec![1]],
            sample: any,
            tape: |t, v| t.mul(v[0], v[1]).unwrap(),
            oracle: |x, _| x[0].iter().map(|a| a * x[1][0]).collect(),
        },
        Primitive {
            name: "relu",
            shapes: vec![vec![3, 3]],
            sample: away_from_zero,
            tape: |t, v| t.relu(v[0]),
            oracle: |x, _| x[0].iter().map(|a| a.max(0.0)).collect(),
        },
        Primitive {
            name: "sigmoid",
            shapes: vec![vec![3, 3]],
            sample: any,
            tape: |t, v| t.sigmoid(v[0]),
            oracle: |x, _| x[0].iter().map(|&a| sigmoid64(a)).collect(),
        },
        Primitive {
            name: "log",
            shapes: vec![vec![3, 3]],
            sample: positive,
            tape: |t, v| t.log(v[0]),
            oracle: |x, _| x[0].iter().map(|a| a.ln()).collect(),
        },
        Primitive {
            name: "square",
            shapes: vec![vec![3, 3]],
            sample: any,
            tape: |t, v| t.square(v[0]),
            oracle: |x, _| x[0].iter().map(|a| a * a).collect(),
        },
        Primitive {
            name: "scale",
            shapes: vec![vec![2, 2]],
            sample: any,
            tape: |t, v| t.scale(v[0], -0.75),
            oracle: |x, _| x[0].iter().map(|a| -0.75 * a).collect(),
        },
        Primitive {
            name: "sum",
            shapes: vec![vec![2, 3]],
            sample: any,
            tape: |t, v| t.sum(v[0]),
            oracle: |x, _| vec![x[0].iter().sum()],
        },
        Primitive {
            name: "mean_axis1",
            shapes: vec![vec![3, 4]],
            sample: any,
            tape: |t, v| t.reduce(dmm_core::ndcore::Reduce::Mean, v[0], Some(1)).unwrap(),
            oracle: |x, _| x[0].chunks(4).map(|r| r.iter().sum::<f64>() / 4.0).collect(),
        },
        Primitive {
            name: "sum_axis0",
            shapes: vec![vec![3, 4]],
            sample: any,
            tape: |t, v| t.reduce(dmm_core::ndcore::Reduce::Sum, v[0], Some(0)).unwrap(),
            oracle: |x, _| (0..4).map(|j| (0..3).map(|i| x[0][i * 4 + j]).sum()).collect(),
        },
        Primitive {
            name: "transpose",
            shapes: vec![vec![2, 3]],
            sample: any,
            tape: |t, v| t.transpose(v[0]).unwrap(),
            oracle: |x, _| (0..6).map(|k| x[0][(k % 2) * 3 + k / 2]).collect(),
        },
        Primitive {
            name: "concat_cols",
            shapes: vec![vec![2, 2], vec![2, 3]],
            sample: any,
            tape: |t, v| t.concat_cols(v[0], v[1]).unwrap(),
            oracle: |x, _| {
                (0..2)
                    .flat_map(|r| x[0][r * 2..r * 2 + 2].iter().chain(&x[1][r * 3..r * 3 + 3]).copied().collect::<Vec<_>>())
                    .collect()
            },
        },
        Primitive {
            name: "slice_cols",
            shapes: vec![vec![3, 5]],
            sample: any,
            tape: |t, v| t.slice_cols(v[0], 1, 4).unwrap(),
            oracle: |x, _| (0..3).flat_map(|r| x[0][r * 5 + 1..r * 5 + 4].to_vec()).collect(),
        },
        Primitive {
            name: "clamp",
            shapes: vec![vec![3, 3]],
            sample: in_clamp_band,
            tape: |t, v| t.clamp(v[0], -0.5, 0.5),
            oracle: |x, _| x[0].iter().map(|a| a.clamp(-0.5, 0.5)).collect(),
        },
        Primitive {
            name: "log_softmax_rows",
            shapes: vec![vec![2, 4]],
            sample: any,
            tape: |t, v| t.log_softmax_rows(v[0]).unwrap(),
            oracle: |x, _| {
                x[0].chunks(4)
                    .flat_map(|r| {
                        let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                        r.iter().map(move |v| v - lse).collect::<Vec<_>>()
                    })
                    .collect()
            },
        },
        Primitive {
            name: "normalize_cols",
            shapes: vec![vec![3, 2]],
            sample: away_from_zero,
            tape: |t, v| t.normalize_cols(v[0]).unwrap(),
            oracle: |x, _| {
                let n: Vec<f64> = (0..2).map(|j| (0..3).map(|i| x[0][i * 2 + j].powi(2)).sum::<f64>().sqrt()).collect();
                (0..6).map(|k| x[0][k] / n[k % 2]).collect()
            },
        },
    ]
}

/// Compares tape gradients of `Σ wᵢ f(x)ᵢ` with central differences of the
/// float64 oracle, over several random draws of the inputs.
pub fn check_primitive(p: &Primitive, draws: usize, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut report = GradReport::default();
    for _ in 0..draws {
        let inputs: Vec<Vec<f64>> = p
            .shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| (p.sample)(&mut r)).collect())
            .collect();
        // The oracle sees the float32-rounded inputs the tape sees.
        let inputs: Vec<Vec<f64>> = inputs.iter().map(|v| v.iter().map(|&x| x as f32 as f64).collect()).collect();
        let out_len = (p.oracle)(&inputs, &p.shapes).len();
        let weights: Vec<f64> = (0..out_len).map(|_| r.random_range(-1.0..1.0)).collect();
        let objective = |xs: &[Vec<f64>]| -> f64 {
            (p.oracle)(xs, &p.shapes).iter().zip(&weights).map(|(a, w)| a * w).sum()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&p.shapes)
            .map(|(v, s)| tape.param(&Tensor::new(s, v.iter().map(|&x| x as f32).collect()).unwrap()))
            .collect();
        let out = (p.tape)(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = tape.constant(Tensor::new(&shape, weights.iter().map(|&x| x as f32).collect()).unwrap());
        let prod = tape.mul(out, w).unwrap();
        let root = tape.sum(prod);
        tape.backward(root).unwrap();

        for (a, var) in vars.iter().enumerate() {
            let grad = tape.grad(*var).unwrap().to_vec();
            for k in 0..inputs[a].len() {
                let mut plus = inputs.clone();
                plus[a][k] += FD_STEP;
                let mut minus = inputs.clone();
                minus[a][k] -= FD_STEP;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
                report.max_rel = report.max_rel.max(rel_err(grad[k] as f64, fd));
                report.probes += 1;
            }
        }
    }
    report
}

pub fn check_all_primitives(seed: u64) -> Vec<(&'static str, GradReport)> {
    primitives()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name, check_primitive(p, 3, seed + i as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Composed loss

pub fn tiny_dims() -> Dims {
    Dims {
        height: 4,
        width: 4,
        latent: 3,
        code_dim: 4,
        codes: 4,
        encoder_hidden: vec![6],
        generator_hidden: vec![5],
    }
}

pub fn tiny_config(weights: LossWeights) -> TrainConfig {
    TrainConfig {
        dims: tiny_dims(),
        weights,
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 3,
        learnable_classifier: true,
        ..TrainConfig::default()
    }
}

/// Model whose codes are random rather than orthonormal, so the covariance
/// penalty has surviving entries and a nonzero gradient.
pub fn tiny_model(seed: u64, config: &TrainConfig) -> DmmModel {
    let mut model = DmmModel::new(config.dims.clone(), config.kappa, seed).unwrap();
    let (m, n) = (config.dims.code_dim, config.dims.codes);
    let mut r = rng(seed ^ 0xC0DE);
    let codes = Tensor::from_fn(&[m, n], |_| r.random_range(-1.0..1.0));
    model.codebook = Codebook::from_codes(codes, default_tau(m), config.kappa).unwrap();
    model
}

pub fn tiny_batch(seed: u64, dims: &Dims, rows: usize) -> (Tensor, Tensor) {
    let p = dims.pixels();
    let mut r = rng(seed ^ 0xBA7C);
    let x = Tensor::from_fn(&[rows, p], |_| r.random_range(0.0..1.0));
    let y = Tensor::from_fn(&[rows, p], |_| r.random_bool(0.4) as u8 as f32);
    (x, y)
}

/// Every trainable tensor in optimizer order: networks, classifier, codes.
pub fn flat_params(model: &DmmModel) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = model
        .network_tensors()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    out.push(model.classifier.data().iter().map(|&v| v as f64).collect());
    out.push(model.codebook.codes().data().iter().map(|&v| v as f64).collect());
    out
}

fn mlp_layer_count(mlp: &Mlp) -> usize {
    mlp.layers.len()
}

/// ReLU activation pattern and covariance mask, used to reject probes whose
/// perturbation crosses a point of non-differentiability.
#[derive(PartialEq, Debug)]
pub struct Regime {
    relu: Vec<bool>,
    cov_mask: Vec<bool>,
    clamped: Vec<bool>,
}

struct Mlp64<'a> {
    /// `(weight in×out, bias 1×out)` pairs as slices of the flat params.
    layers: Vec<(&'a [f64], &'a [f64], usize, usize)>,
}

impl Mlp64<'_> {
    fn forward(&self, x: &[f64], rows: usize, regime: &mut Vec<bool>) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, &(w, b, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let mut out = mm(&h, w, rows, fan_in, fan_out);
            for (k, v) in out.iter_mut().enumerate() {
                *v += b[k % fan_out];
            }
            if i + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    regime.push(*v > 0.0);
                    *v = v.max(0.0);
                }
            }
            h = out;
        }
        h
    }
}

/// Float64 re-derivation of the training objective, as a function of the
/// flat parameters, with the quantization replaced by its straight-through
/// surrogate `q = z(θ) + (q₀ − z₀)`: `q₀` and `z₀` are the selected codes
/// and pair features at the unperturbed parameters. The gradient of this
/// surrogate is, by definition, the straight-through gradient.
pub struct ComposedOracle<'a> {
    pub model: &'a DmmModel,
    pub config: &'a TrainConfig,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub rows: usize,
    pub indices: Vec<usize>,
    pub q0: Vec<f64>,
    pub z0: Vec<f64>,
    pub warmup: bool,
}

impl<'a> ComposedOracle<'a> {
    pub fn new(model: &'a DmmModel, config: &'a TrainConfig, x: &Tensor, y: &Tensor, warmup: bool) -> Self {
        let rows = x.shape()[0];
        let params = flat_params(model);
        let mut oracle = Self {
            model,
            config,
            x: x.data().iter().map(|&v| v as f64).collect(),
            y: y.data().iter().map(|&v| v as f64).collect(),
            rows,
            indices: Vec::new(),
            q0: Vec::new(),
            z0: Vec::new(),
            warmup,
        };
        let z0 = oracle.pair_features(&params, &mut Vec::new());
        let (m, n) = (config.dims.code_dim, config.dims.codes);
        let codes = &params[params.len() - 1];
        let mut q0 = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let z = &z0[r * m..(r + 1) * m];
            // Brute-force nearest code, ties to the lower index.
            let mut best = (0, f64::INFINITY);
            for j in 0..n {
                let d: f64 = (0..m).map(|i| (codes[i * n + j] - z[i]).powi(2)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            oracle.indices.push(best.0);
            q0.extend((0..m).map(|i| codes[i * n + best.0]));
        }
        oracle.z0 = z0;
        oracle.q0 = q0;
        oracle
    }

    fn mlp<'p>(&self, params: &'p [Vec<f64>], first: usize, mlp: &Mlp) -> Mlp64<'p> {
        Mlp64 {
            layers: mlp
                .layers
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let (fi, fo) = (d.weight.shape()[0], d.weight.shape()[1]);
                    (&params[first + 2 * i][..], &params[first + 2 * i + 1][..], fi, fo)
                })
                .collect(),
        }
    }

    fn pair_features(&self, params: &[Vec<f64>], regime: &mut Vec<bool>) -> Vec<f64> {
        let p = self.config.dims.pixels();
        let start = 2 * mlp_layer_count(&self.model.input_encoder);
        let net = self.mlp(params, start, &self.model.pair_encoder);
        let mut xy = Vec::with_capacity(self.rows * 2 * p);
        for r in 0..self.rows {
            xy.extend_from_slice(&self.x[r * p..(r + 1) * p]);
            xy.extend_from_slice(&self.y[r * p..(r + 1) * p]);
        }
        net.forward(&xy, self.rows, regime)
    }

    /// Total objective and the regime it was evaluated in.
    pub fn eval(&self, params: &[Vec<f64>]) -> (f64, Regime) {
        let d = &self.config.dims;
        let (rows, p, m, n, lat) = (self.rows, d.pixels(), d.code_dim, d.codes, d.latent);
        let mut relu = Vec::new();

        let z = self.pair_features(params, &mut relu);
        let q: Vec<f64> = (0..rows * m).map(|k| z[k] + (self.q0[k] - self.z0[k])).collect();

        let input = self.mlp(params, 0, &self.model.input_encoder);
        let enc = input.forward(&self.x, rows, &mut relu);
        let width = lat + m;
        let mut joined = Vec::with_capacity(rows * width);
        for r in 0..rows {
            joined.extend_from_slice(&enc[r * width..r * width + lat]);
            joined.extend_from_slice(&q[r * m..(r + 1) * m]);
        }
        let gen_start = 2 * (mlp_layer_count(&self.model.input_encoder) + mlp_layer_count(&self.model.pair_encoder));
        let gen = self.mlp(params, gen_start, &self.model.generator);
        let logits = gen.forward(&joined, rows, &mut relu);

        let mut clamped = Vec::new();
        let mut recon = 0.0;
        for r in 0..rows {
            let mut s = 0.0;
            for k in 0..p {
                let raw = 1.0 / (1.0 + (-logits[r * p + k]).exp());
                clamped.push(!(SIGMOID_CLAMP..=1.0 - SIGMOID_CLAMP).contains(&raw));
                let yh = raw.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
                let t = self.y[r * p + k];
                s -= t * yh.ln() + (1.0 - t) * (1.0 - yh).ln();
            }
            let per_sample = s / p as f64;
            recon += if self.config.log_recon { per_sample.ln() } else { per_sample };
        }
        recon /= rows as f64;

        let cls = &params[params.len() - 2];
        let mut ce = 0.0;
        for r in 0..rows {
            let h = &enc[r * width + lat..(r + 1) * width];
            let logits: Vec<f64> = (0..n).map(|j| (0..m).map(|i| h[i] * cls[i * n + j]).sum()).collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce -= logits[self.indices[r]] - lse;
        }
        ce /= rows as f64;

        let zreg = (0..rows * m).map(|k| (z[k] - self.q0[k]).powi(2)).sum::<f64>() / rows as f64;

        let codes = &params[params.len() - 1];
        let tau = self.model.codebook.tau() as f64;
        let norms: Vec<f64> = (0..n).map(|j| (0..m).map(|i| codes[i * n + j].powi(2)).sum::<f64>().sqrt()).collect();
        let (mut cov_sum, mut survivors, mut cov_mask) = (0.0, 0usize, Vec::new());
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..m).map(|i| codes[i * n + a] * codes[i * n + b]).sum::<f64>() / (norms[a] * norms[b]);
                let g = dot - if a == b { 1.0 } else { 0.0 };
                let keep = g.abs() > tau;
                cov_mask.push(keep);
                if keep {
                    cov_sum += g * g;
                    survivors += 1;
                }
            }
        }
        let cov = if survivors == 0 { 0.0 } else { cov_sum / survivors as f64 };

        let w = &self.config.weights;
        let alpha = if self.warmup { 0.0 } else { w.alpha as f64 };
        let total = recon + alpha * ce + w.beta as f64 * zreg + w.gamma as f64 * cov;
        (total, Regime { relu, cov_mask, clamped })
    }
}

/// Tape gradients of the full objective against central differences of the
/// float64 surrogate at `probes` random parameter entries.
pub fn check_composed(seed: u64, probes: usize, config: &TrainConfig, warmup: bool) -> GradReport {
    let model = tiny_model(seed, config);
    let (x, y) = tiny_batch(seed, &config.dims, config.batch_size);
    let grads = batch_gradients(&model, config, &x, &y, warmup).unwrap();
    let mut tape_grads = grads.network.clone();
    tape_grads.push(grads.classifier.clone().unwrap_or_else(|| vec![0.0; model.classifier.numel()]));
    tape_grads.push(grads.codes.clone().unwrap_or_else(|| vec![0.0; model.codebook.codes().numel()]));

    let oracle = ComposedOracle::new(&model, config, &x, &y, warmup);
    assert_eq!(oracle.indices, grads.indices, "oracle and library disagree on code assignment");
    let base = flat_params(&model);
    let (_, base_regime) = oracle.eval(&base);

    let mut r = rng(seed ^ 0x9E0B);
    let mut report = GradReport::default();
    while report.probes < probes {
        let t = r.random_range(0..base.len());
        let k = r.random_range(0..base[t].len());
        let mut plus = base.clone();
        plus[t][k] += FD_STEP;
        let mut minus = base.clone();
        minus[t][k] -= FD_STEP;
        let (fp, rp) = oracle.eval(&plus);
        let (fm, rm) = oracle.eval(&minus);
        if rp != base_regime || rm != base_regime {
            report.redrawn += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * FD_STEP);
        report.max_rel = report.max_rel.max(rel_err(tape_grads[t][k] as f64, fd));
        report.probes += 1;
    }
    report
}

// ---------------------------------------------------------------------------
// ETF identity

/// `max |MᵀM − (N/(N−1)·I − 1/(N−1)·11ᵀ)|` in float64.
pub fn etf_identity_error(m: &Tensor) -> f64 {
    let (d, n) = m.dims2().unwrap();
    let x = m.data();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let g: f64 = (0..d).map(|i| x[i * n + a] as f64 * x[i * n + b] as f64).sum();
            let want = if a == b { 1.0 } else { -1.0 / (n as f64 - 1.0) };
            worst = worst.max((g - want).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Codebook oracles

/// Exhaustive scan: smallest squared distance, lowest index on ties.
pub fn brute_force_nearest(codes: &Tensor, feature: &[f32]) -> usize {
    let (m, n) = codes.dims2().unwrap();
    let mut best = (0, f64::INFINITY);
    for j in 0..n {
        let d: f64 = (0..m).map(|i| (codes.at2(i, j) as f64 - feature[i] as f64).powi(2)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Closed-form EMA step: `(counts, accum, codes)` after one update.
pub fn ema_closed_form(
    counts: &[f64],
    accum: &[f64],
    m: usize,
    kappa: f64,
    assignments: &[(usize, Vec<f64>)],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = counts.len();
    let mut c = vec![0.0; n];
    let mut s = vec![0.0; m * n];
    for (j, f) in assignments {
        c[*j] += 1.0;
        for i in 0..m {
            s[i * n + j] += f[i];
        }
    }
    let counts: Vec<f64> = (0..n).map(|j| kappa * counts[j] + (1.0 - kappa) * c[j]).collect();
    let accum: Vec<f64> = (0..m * n).map(|k| kappa * accum[k] + (1.0 - kappa) * s[k]).collect();
    let codes = (0..m * n).map(|k| accum[k] / counts[k % n]).collect();
    (counts, accum, codes)
}

/// Columns given as slices, packed into an `m × N` matrix.
pub fn columns(dim: usize, cols: &[&[f32]]) -> Tensor {
    let n = cols.len();
    Tensor::from_fn(&[dim, n], |k| cols[k % n][k / n])
}

pub fn unit_at_degrees(deg: &[f64]) -> Tensor {
    let n = deg.len();
    Tensor::from_fn(&[2, n], |k| {
        let a = deg[k % n].to_radians();
        if k / n == 0 { a.cos() as f32 } else { a.sin() as f32 }
    })
}

// ---------------------------------------------------------------------------
// Small end-to-end runs

pub fn small_run_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dims: Dims {
            height: 16,
            width: 16,
            latent: 8,
            code_dim: 4,
            codes: 4,
            encoder_hidden: vec![16],
            generator_hidden: vec![16],
        },
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 8,
        lr_schedule: vec![(0, 1e-3), (2, 5e-4)],
        seed,
        ..TrainConfig::default()
    }
}

pub fn small_dataset() -> dmm_core::DmmDataset {
    dmm_core::synthdata::gen_shapes(12, 16, 5).unwrap()
}

/// Largest absolute difference over every tensor a checkpoint carries.
pub fn max_param_diff(a: &dmm_core::Checkpoint, b: &dmm_core::Checkpoint) -> f64 {
    let diff = |x: &Tensor, y: &Tensor| -> f64 {
        assert_eq!(x.shape(), y.shape());
        x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max)
    };
    let mut worst = 0.0f64;
    for (x, y) in a.model.network_tensors().iter().zip(b.model.network_tensors()) {
        worst = worst.max(diff(x, y));
    }
    worst = worst.max(diff(&a.model.classifier, &b.model.classifier));
    worst = worst.max(diff(a.model.codebook.codes(), b.model.codebook.codes()));
    worst = worst.max(diff(a.model.codebook.accumulators(), b.model.codebook.accumulators()));
    for (x, y) in a.model.codebook.counts().iter().zip(b.model.codebook.counts()) {
        worst = worst.max((x - y).abs() as f64);
    }
    for (x, y) in a.optimizer.first_moments().iter().zip(b.optimizer.first_moments()) {
        worst = worst.max(x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max));
    }
    worst
}

// ---------------------------------------------------------------------------
// Gradient routing

use dmm_core::codebook::covariance_loss_on_tape;
use dmm_core::etf::cross_entropy_on_tape;
use dmm_core::losses::{recon_loss_on_tape, total_loss_on_tape, zreg_on_tape, LossTerms};
use dmm_core::networks::straight_through;
use dmm_core::optim::Adam;
use dmm_core::train::{TrainData, Trainer};

/// With `γ = 0` the codes receive an all-zero gradient and several Adam
/// steps leave them bit-identical.
pub fn codes_static_without_covariance(seed: u64) -> Result<(), String> {
    let config = tiny_config(LossWeights { alpha: 1.0, beta: 0.25, gamma: 0.0 });
    let model = tiny_model(seed, &config);
    let (x, y) = tiny_batch(seed, &config.dims, config.batch_size);
    let grads = batch_gradients(&model, &config, &x, &y, false).map_err(|e| e.to_string())?;
    let g = grads.codes.ok_or("codes were not trainable")?;
    if g.iter().any(|&v| v != 0.0) {
        return Err(format!("nonzero code gradient {g:?}"));
    }
    let mut codes = model.codebook.codes().data().to_vec();
    let before = codes.clone();
    let mut adam = Adam::new(&[codes.len()]);
    for _ in 0..5 {
        adam.begin_step();
        adam.update(0, 1e-2, &mut codes, &g).map_err(|e| e.to_string())?;
    }
    if codes != before {
        return Err("Adam moved the codes".into());
    }
    Ok(())
}

/// Gradients at the pair feature `z`, at the quantized `q`, and at every
/// pair encoder parameter, from a hand-recorded objective.
pub fn pair_and_quantized_grads(seed: u64, beta: f32) -> (Vec<f32>, Vec<f32>, Vec<Vec<f32>>) {
    let config = tiny_config(LossWeights { alpha: 1.0, beta, gamma: 0.5 });
    let model = tiny_model(seed, &config);
    let (x, y) = tiny_batch(seed, &config.dims, config.batch_size);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false, true);
    let xv = tape.constant(x);
    let yv = tape.constant(y.clone());
    let z = bound.encode_pair(&mut tape, xv, yv).unwrap();
    let (q, idx) = straight_through(&mut tape, z, &model.codebook).unwrap();
    let (l, h) = bound.encode_input(&mut tape, xv).unwrap();
    let y_hat = bound.generate(&mut tape, l, q).unwrap();
    let recon = recon_loss_on_tape(&mut tape, y_hat, &y, false).unwrap();
    let ce = cross_entropy_on_tape(&mut tape, h, bound.classifier, &idx).unwrap();
    let selected = tape.value(q).clone();
    let zreg = zreg_on_tape(&mut tape, z, &selected).unwrap();
    let cov = covariance_loss_on_tape(&mut tape, bound.codes, model.codebook.tau()).unwrap();
    let total = total_loss_on_tape(&mut tape, LossTerms { recon, ce, zreg, cov }, &config.weights, false).unwrap();
    tape.backward(total).unwrap();
    let pair = bound.pair_encoder.vars().map(|v| tape.grad(v).unwrap().to_vec()).collect();
    (tape.grad(z).unwrap().to_vec(), tape.grad(q).unwrap().to_vec(), pair)
}

/// Pair encoder gradients obtained by backpropagating `upstream` from `z`
/// alone.
pub fn replay_pair_encoder(seed: u64, upstream: Vec<f32>) -> Vec<Vec<f32>> {
    let config = tiny_config(LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.5 });
    let model = tiny_model(seed, &config);
    let (x, y) = tiny_batch(seed, &config.dims, config.batch_size);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false, false);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let z = bound.encode_pair(&mut tape, xv, yv).unwrap();
    let shape = tape.value(z).shape().to_vec();
    let w = tape.constant(Tensor::new(&shape, upstream).unwrap());
    let prod = tape.mul(z, w).unwrap();
    let root = tape.sum(prod);
    tape.backward(root).unwrap();
    bound.pair_encoder.vars().map(|v| tape.grad(v).unwrap().to_vec()).collect()
}

/// With `β = 0`, `∂L/∂z` equals `∂L/∂q` bit for bit and the pair encoder
/// sees nothing else.
pub fn pair_encoder_gets_only_copied_gradient(seed: u64) -> Result<(), String> {
    let (gz, gq, pair) = pair_and_quantized_grads(seed, 0.0);
    if gq.iter().all(|&v| v == 0.0) {
        return Err("degenerate case: zero upstream gradient".into());
    }
    if gz != gq {
        return Err("grad(z) differs from grad(q)".into());
    }
    if pair != replay_pair_encoder(seed, gq) {
        return Err("pair encoder gradients differ from the replayed copy".into());
    }
    Ok(())
}

/// The fixed frame collects no gradient and is untouched by training.
pub fn frame_receives_no_gradient(seed: u64) -> Result<(), String> {
    let mut config = tiny_config(LossWeights { alpha: 1.0, beta: 0.25, gamma: 0.01 });
    config.learnable_classifier = false;
    let model = tiny_model(seed, &config);
    let (x, y) = tiny_batch(seed, &config.dims, config.batch_size);
    if batch_gradients(&model, &config, &x, &y, false).unwrap().classifier.is_some() {
        return Err("classifier gradient reported for the fixed frame".into());
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false, true);
    let xv = tape.constant(x);
    let (_, h) = bound.encode_input(&mut tape, xv).unwrap();
    let ce = cross_entropy_on_tape(&mut tape, h, bound.classifier, &[0, 1, 2]).unwrap();
    tape.backward(ce).unwrap();
    if tape.grad(bound.classifier).is_some() {
        return Err("tape holds a gradient for the frame".into());
    }
    let ds = small_dataset();
    let data = TrainData::new(&ds).unwrap();
    let mut run = small_run_config(seed);
    run.epochs = 2;
    let mut trainer = Trainer::new(run).unwrap();
    let frame = trainer.model().etf.matrix().clone();
    trainer.run(&data, |_, _| Ok(())).unwrap();
    if trainer.model().classifier != frame || trainer.model().etf.matrix() != &frame {
        return Err("frame changed during training".into());
    }
    Ok(())
}
