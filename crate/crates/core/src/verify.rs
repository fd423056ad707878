//! Invariant suites behind the `verify` command and the gradient-check
//! catalogue shared with the test suites.

use std::time::Instant;

use crate::bmfe::{apply_mask, sample_mask, MaskSpec, NUM_BANDS};
use crate::data::synth::{DatasetSpec, Family};
use crate::head::{cosface_loss, cross_entropy, predict};
use crate::model::{perturb_lora, set_gates, FgiNet, ModelConfig};
use crate::nn::{BindMode, ParamId, ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::tensor::{grad_check, kernels, GradCheckReport, Result, Tape, Tensor, Var};
use crate::wavelet::{dwt2, haar_dwt, idwt2, stack_hf, SubBands};

/// How random inputs for a gradient-check case are drawn.
#[derive(Debug, Clone, Copy)]
enum Domain {
    /// Standard normal.
    Normal,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Normal, pushed at least 0.1 away from zero (kinks and poles).
    AwayFromZero,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

fn bn(t: &mut Tape, v: &[Var], batch_stats: bool) -> Result<Var> {
    let (mean, var) = if batch_stats {
        kernels::channel_stats(t.value(v[0]))
    } else {
        (vec![0.3, -0.2, 0.1], vec![1.5, 0.7, 2.0])
    };
    t.batchnorm2d(v[0], v[1], v[2], &mean, &var, 1e-5, batch_stats)
}

const CASES: &[Case] = &[
    Case { name: "add", shapes: &[&[3, 4], &[4]], domain: Domain::Normal, build: |t, v| t.add(v[0], v[1]) },
    Case { name: "sub", shapes: &[&[2, 3], &[2, 1]], domain: Domain::Normal, build: |t, v| t.sub(v[0], v[1]) },
    Case { name: "mul", shapes: &[&[3, 4], &[3, 1]], domain: Domain::Normal, build: |t, v| t.mul(v[0], v[1]) },
    Case { name: "div", shapes: &[&[2, 3], &[2, 3]], domain: Domain::AwayFromZero, build: |t, v| t.div(v[0], v[1]) },
    Case { name: "scale", shapes: &[&[5]], domain: Domain::Normal, build: |t, v| Ok(t.scale(v[0], -1.7)) },
    Case { name: "add_scalar", shapes: &[&[5]], domain: Domain::Normal, build: |t, v| Ok(t.add_scalar(v[0], 0.3)) },
    Case { name: "relu", shapes: &[&[12]], domain: Domain::AwayFromZero, build: |t, v| Ok(t.relu(v[0])) },
    Case { name: "gelu", shapes: &[&[12]], domain: Domain::Normal, build: |t, v| Ok(t.gelu(v[0])) },
    Case { name: "exp", shapes: &[&[6]], domain: Domain::Normal, build: |t, v| t.exp(v[0]) },
    Case { name: "log", shapes: &[&[6]], domain: Domain::Positive, build: |t, v| t.log(v[0]) },
    Case { name: "sqrt", shapes: &[&[6]], domain: Domain::Positive, build: |t, v| t.sqrt(v[0]) },
    Case { name: "sum", shapes: &[&[3, 4]], domain: Domain::Normal, build: |t, v| Ok(t.sum(v[0])) },
    Case { name: "mean", shapes: &[&[3, 4]], domain: Domain::Normal, build: |t, v| Ok(t.mean(v[0])) },
    Case { name: "sum_axis", shapes: &[&[2, 3, 4]], domain: Domain::Normal, build: |t, v| t.sum_axis(v[0], 1) },
    Case { name: "mean_axis", shapes: &[&[2, 3, 4]], domain: Domain::Normal, build: |t, v| t.mean_axis(v[0], 2) },
    Case { name: "matmul", shapes: &[&[4, 5], &[5, 3]], domain: Domain::Normal, build: |t, v| t.matmul(v[0], v[1]) },
    Case {
        name: "matmul_batched",
        shapes: &[&[2, 3, 4], &[1, 4, 2]],
        domain: Domain::Normal,
        build: |t, v| t.matmul(v[0], v[1]),
    },
    Case { name: "reshape", shapes: &[&[2, 6]], domain: Domain::Normal, build: |t, v| t.reshape(v[0], &[3, 4]) },
    Case {
        name: "permute",
        shapes: &[&[2, 3, 4]],
        domain: Domain::Normal,
        build: |t, v| t.permute(v[0], &[2, 0, 1]),
    },
    Case { name: "transpose", shapes: &[&[3, 5]], domain: Domain::Normal, build: |t, v| t.transpose(v[0]) },
    Case {
        name: "broadcast_to",
        shapes: &[&[1, 3]],
        domain: Domain::Normal,
        build: |t, v| t.broadcast_to(v[0], &[2, 4, 3]),
    },
    Case {
        name: "concat",
        shapes: &[&[2, 3], &[2, 2]],
        domain: Domain::Normal,
        build: |t, v| t.concat(&[v[0], v[1]], 1),
    },
    Case { name: "narrow", shapes: &[&[4, 5]], domain: Domain::Normal, build: |t, v| t.narrow(v[0], 1, 1, 3) },
    Case { name: "softmax", shapes: &[&[3, 5]], domain: Domain::Normal, build: |t, v| Ok(t.softmax(v[0])) },
    Case { name: "log_softmax", shapes: &[&[3, 5]], domain: Domain::Normal, build: |t, v| Ok(t.log_softmax(v[0])) },
    Case {
        name: "layernorm",
        shapes: &[&[3, 8], &[8], &[8]],
        domain: Domain::Normal,
        build: |t, v| t.layernorm(v[0], v[1], v[2], 1e-5),
    },
    Case {
        name: "batchnorm2d_train",
        shapes: &[&[2, 3, 4, 4], &[3], &[3]],
        domain: Domain::Normal,
        build: |t, v| bn(t, v, true),
    },
    Case {
        name: "batchnorm2d_eval",
        shapes: &[&[2, 3, 4, 4], &[3], &[3]],
        domain: Domain::Normal,
        build: |t, v| bn(t, v, false),
    },
    Case {
        name: "conv2d",
        shapes: &[&[2, 6, 6], &[3, 2, 3, 3], &[3]],
        domain: Domain::Normal,
        build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    },
    Case {
        name: "conv2d_strided",
        shapes: &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]],
        domain: Domain::Normal,
        build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    },
    Case {
        name: "mask_mul",
        shapes: &[&[2, 4]],
        domain: Domain::Normal,
        build: |t, v| t.mask_mul(v[0], Tensor::new(&[2, 4], vec![1., 0., 1., 1., 0., 0., 1., 0.]).unwrap()),
    },
    Case {
        name: "l2_normalize",
        shapes: &[&[3, 4]],
        domain: Domain::Normal,
        build: |t, v| t.l2_normalize(v[0], "l2_normalize"),
    },
    Case { name: "haar_dwt", shapes: &[&[1, 2, 4, 4]], domain: Domain::Normal, build: |t, v| haar_dwt(t, v[0]) },
];

/// Names of every differentiable op covered by [`op_gradcheck`].
pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

fn draw(domain: Domain, rng: &mut Rng) -> f64 {
    match domain {
        Domain::Normal => rng.normal(),
        Domain::Positive => rng.uniform_range(0.5, 2.0),
        Domain::AwayFromZero => {
            let z = rng.normal();
            z.signum() * (z.abs() + 0.1)
        }
    }
}

/// Splits a flat leaf into the case's input shapes.
fn unpack(t: &mut Tape, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut off = 0;
    let mut parts = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = t.narrow(x, 0, off, n)?;
        parts.push(t.reshape(piece, s)?);
        off += n;
    }
    Ok(parts)
}

/// Finite-difference check of one op against a random weighted sum of its
/// output, gradient taken with respect to every input jointly.
pub fn op_gradcheck(name: &str, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let case = CASES
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| crate::tensor::TensorError::InvalidArgument {
            op: "op_gradcheck",
            detail: format!("no gradient-check case '{name}'"),
        })?;
    let mut rng = Rng::stream(seed, 0, 0, Purpose::Data).fork(name.len() as u64);
    let total: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let x = Tensor::from_fn(&[total], |_| draw(case.domain, &mut rng));
    // Output shape is found by one forward pass; weights follow it.
    let mut probe = Tape::new();
    let xv = probe.constant(x.clone());
    let parts = unpack(&mut probe, xv, case.shapes)?;
    let y = (case.build)(&mut probe, &parts)?;
    let out_shape = probe.shape(y).to_vec();
    let weights = Tensor::from_fn(&out_shape, |_| rng.normal());
    grad_check(
        |t, xv| {
            let parts = unpack(t, xv, case.shapes)?;
            let y = (case.build)(t, &parts)?;
            let w = t.constant(weights.clone());
            let wy = t.mul(y, w)?;
            Ok(t.sum(wy))
        },
        &x,
        h,
        tol,
    )
}

/// The small model used for end-to-end gradient checks: embed 16, two blocks.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        lora_rank: 2,
        lora_scale: 4.0,
        stem_c1: 4,
        stem_c2: 8,
        rho: 0.4,
        mask_patch: 4,
        freq_dropout: 0.1,
        gate_init: 0.5,
        scale: 30.0,
        margin: 0.35,
        variant: "full".into(),
    }
}

/// Training-mode loss on a fixed batch with fixed mask and dropout streams.
pub fn model_loss(model: &FgiNet, store: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut s = Session::new(store, BindMode::None, true).with_stream(11, 0, 3);
    let x = s.tape.constant(images.clone());
    let out = model.forward(&mut s, x)?;
    let loss = model.loss(&mut s, &out, labels)?;
    Ok(s.tape.value(loss).item())
}

/// Result of comparing tape and finite-difference gradients on sampled
/// parameter entries.
#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Gradient check of the full training loss with respect to `count`
/// randomly chosen trainable parameter entries.
pub fn model_gradcheck(seed: u64, count: usize, h: f64) -> Result<ModelGradReport> {
    let cfg = gradcheck_model_config();
    let (model, mut store) = FgiNet::new(&cfg, seed)?;
    let mut rng = Rng::stream(seed, 1, 0, Purpose::Data);
    // Active adapters so their gradients are non-trivial.
    perturb_lora(&mut store, 0.1, &mut rng);
    let images = Tensor::from_fn(&[3, 3, 16, 16], |_| rng.uniform());
    let labels = [0, 1, 1];

    let mut s = Session::new(&store, BindMode::Trainable, true).with_stream(11, 0, 3);
    let x = s.tape.constant(images.clone());
    let out = model.forward(&mut s, x)?;
    let loss = model.loss(&mut s, &out, &labels)?;
    s.tape.backward(loss)?;
    let grads = s.param_grads();
    drop(s);

    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.param(id).trainable).collect();
    let mut report = ModelGradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for _ in 0..count {
        let id = trainable[rng.below(trainable.len() as u64) as usize];
        let idx = rng.below(store.get(id).len() as u64) as usize;
        let g = grads[id_index(&store, id)].as_ref().map_or(0.0, |g| g.data()[idx]);
        let orig = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = orig + h;
        let fp = model_loss(&model, &store, &images, &labels)?;
        store.get_mut(id).data_mut()[idx] = orig - h;
        let fm = model_loss(&model, &store, &images, &labels)?;
        store.get_mut(id).data_mut()[idx] = orig;
        let fd = (fp - fm) / (2.0 * h);
        // The floor keeps exactly-zero gradients (biases ahead of batch norm)
        // from turning rounding noise into relative error.
        let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{}[{idx}]: tape {g:e}, fd {fd:e}", store.param(id).name);
        }
        report.checked += 1;
    }
    Ok(report)
}

fn id_index(store: &ParamStore, id: ParamId) -> usize {
    store.ids().position(|i| i == id).expect("id belongs to store")
}

/// Deliberate defects for exercising the harness.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Faults {
    /// Multiplies every sub-band before reconstruction when set.
    pub haar_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const SUITES: [&str; 5] = ["wavelet", "masks", "gradcheck", "cosface", "identities"];

pub fn run_suite(name: &str, faults: Faults) -> Option<SuiteResult> {
    let started = Instant::now();
    let (name, outcome) = match name {
        "wavelet" => ("wavelet", wavelet_suite(faults)),
        "masks" => ("masks", mask_suite()),
        "gradcheck" => ("gradcheck", gradcheck_suite()),
        "cosface" => ("cosface", cosface_suite()),
        "identities" => ("identities", identity_suite()),
        _ => return None,
    };
    let (passed, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Some(SuiteResult {
        name,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    })
}

type Outcome = Result<(bool, String)>;

fn wavelet_suite(faults: Faults) -> Outcome {
    let mut max_err: f64 = 0.0;
    let mut max_parseval: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = Rng::stream(seed, 0, 0, Purpose::Data);
        let x = Tensor::from_fn(&[3, 64, 64], |_| rng.normal());
        let mut b = dwt2(&x)?;
        let energy = b.energy();
        if let Some(k) = faults.haar_scale {
            b = SubBands {
                ll: b.ll.map(|v| v * k),
                lh: b.lh.map(|v| v * k),
                hl: b.hl.map(|v| v * k),
                hh: b.hh.map(|v| v * k),
                ..b
            };
        }
        max_err = max_err.max(idwt2(&b)?.max_abs_diff(&x));
        max_parseval = max_parseval.max((energy - x.sq_norm()).abs() / x.sq_norm());
    }
    let hf = stack_hf(&dwt2(&Tensor::ones(&[3, 8, 8]))?)?;
    let ok = max_err <= 1e-10 && max_parseval <= 1e-8 && hf.data.shape() == [9, 4, 4];
    Ok((ok, format!("max reconstruction error {max_err:e}, max Parseval deviation {max_parseval:e}")))
}

fn mask_suite() -> Outcome {
    let spec = MaskSpec::new(0.4, 8, 112, 112)?;
    let mut rng = Rng::stream(0, 0, 0, Purpose::Mask);
    let cells = spec.grid.0 * spec.grid.1;
    let (mut kept, mut total) = (0.0, 0.0);
    // Per-band-pair sums for the Pearson correlation of co-located cells.
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let mut sx = [0.0; 3];
    let mut sxx = [0.0; 3];
    let mut sxy = [0.0; 3];
    for _ in 0..10_000 {
        let m = sample_mask(&spec, &mut rng);
        let d = m.m.data();
        kept += m.m.sum();
        total += d.len() as f64;
        for b in 0..NUM_BANDS {
            for k in 0..cells {
                sx[b] += d[b * cells + k];
                sxx[b] += d[b * cells + k] * d[b * cells + k];
            }
        }
        for (p, &(a, b)) in pairs.iter().enumerate() {
            sxy[p] += (0..cells).map(|k| d[a * cells + k] * d[b * cells + k]).sum::<f64>();
        }
    }
    let n = total / NUM_BANDS as f64;
    let corr = pairs.iter().enumerate().map(|(p, &(a, b))| {
        let cov = sxy[p] / n - (sx[a] / n) * (sx[b] / n);
        let va = sxx[a] / n - (sx[a] / n).powi(2);
        let vb = sxx[b] / n - (sx[b] / n).powi(2);
        cov / (va * vb).sqrt()
    });
    let max_corr = corr.fold(0.0f64, |m, c| m.max(c.abs()));
    let rate = kept / total;
    // Channel sharing on one masked stack.
    let mut r = Rng::stream(1, 0, 0, Purpose::Mask);
    let small = MaskSpec::new(0.5, 2, 8, 8)?;
    let stack = stack_hf(&dwt2(&Tensor::from_fn(&[3, 16, 16], |_| 1.0 + r.uniform()))?)?;
    let mask = sample_mask(&small, &mut r);
    let masked = apply_mask(&stack, &mask, &small)?;
    let plane = 64;
    let mut shared = true;
    for b in 0..NUM_BANDS {
        let zeros = |c: usize| -> Vec<bool> {
            masked.data.data()[(b * 3 + c) * plane..(b * 3 + c + 1) * plane]
                .iter()
                .map(|&v| v == 0.0)
                .collect()
        };
        shared &= zeros(0) == zeros(1) && zeros(1) == zeros(2);
    }
    let ok = (rate - 0.6).abs() <= 0.006 && shared && max_corr <= 0.05;
    Ok((
        ok,
        format!("keep rate {rate:.5}, max cross-band correlation {max_corr:.4}, channel sharing {shared}"),
    ))
}

fn gradcheck_suite() -> Outcome {
    let mut worst = (0.0, "");
    for name in op_names() {
        for seed in 0..50 {
            let r = op_gradcheck(name, seed, 1e-5, 1e-4)?;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, name);
            }
        }
    }
    let model = model_gradcheck(0, 20, 1e-4)?;
    let ok = worst.0 <= 1e-4 && model.max_rel_err <= 1e-3;
    Ok((
        ok,
        format!(
            "{} ops, worst {} at {:e}; model {:e} ({})",
            op_names().len(),
            worst.1,
            worst.0,
            model.max_rel_err,
            model.worst
        ),
    ))
}

fn cosface_suite() -> Outcome {
    let mut rng = Rng::stream(0, 0, 0, Purpose::Data);
    let mut max_ce_diff: f64 = 0.0;
    let mut monotone = true;
    let mut threshold_ok = true;
    for _ in 0..1000 {
        let c = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
        let y = rng.below(2) as usize;
        let loss_at = |m: f64| -> Result<f64> {
            let mut t = Tape::new();
            let cos = t.constant(Tensor::new(&[1, 2], c.to_vec())?);
            let l = cosface_loss(&mut t, cos, &[y], 30.0, m)?;
            Ok(t.value(l).item())
        };
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new(&[1, 2], vec![30.0 * c[0], 30.0 * c[1]])?);
        let ce = cross_entropy(&mut t, logits, &[y])?;
        max_ce_diff = max_ce_diff.max((loss_at(0.0)? - t.value(ce).item()).abs());
        monotone &= loss_at(0.35)? >= loss_at(0.1)?;
        threshold_ok &= (predict(c[0], c[1], 30.0).p_fake > 0.5) == (c[1] > c[0]);
    }
    let mut t = Tape::new();
    let cos = t.constant(Tensor::new(&[1, 2], vec![0.2, 0.2])?);
    let l = cosface_loss(&mut t, cos, &[0], 30.0, 0.35)?;
    let closed = (t.value(l).item() - (1.0 + 10.5f64.exp()).ln()).abs();
    let ok = max_ce_diff <= 1e-12 && closed <= 1e-9 && monotone && threshold_ok;
    Ok((
        ok,
        format!("m=0 vs CE {max_ce_diff:e}, closed form {closed:e}, monotone {monotone}, threshold rule {threshold_ok}"),
    ))
}

fn identity_suite() -> Outcome {
    let cfg = gradcheck_model_config();
    let (model, mut store) = FgiNet::new(&cfg, 3)?;
    let spec = DatasetSpec {
        n_train: 2,
        n_eval: 2,
        image_size: 16,
        train_family: Family::A,
        eval_families: vec![Family::A],
        amplitude: 0.1,
        seed: 0,
    };
    let imgs: Vec<Tensor> = spec.train_set().map_err(|e| crate::tensor::TensorError::InvalidArgument {
        op: "identity_suite",
        detail: e.to_string(),
    })?
    .into_iter()
    .map(|s| s.image)
    .collect();
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let batch = Tensor::concat(&refs, 0)?.reshape(&[imgs.len(), 3, 16, 16])?;
    let cls = |store: &ParamStore, freq: bool| -> Result<Tensor> {
        let mut s = Session::new(store, BindMode::None, false);
        let x = s.tape.constant(batch.clone());
        let tf = if freq { Some(model.bmfe.as_ref().unwrap().forward(&mut s, x)?) } else { None };
        let v = model.vit.forward(&mut s, x, tf, model.gates.as_ref())?;
        Ok(s.tape.value(v).clone())
    };
    // LoRA at initialization leaves the frozen backbone unchanged.
    let lora_diff = cls(&store, false)?.max_abs_diff(&frozen_backbone_cls(&model, &store, &batch)?);
    set_gates(&model, &mut store, 0.0);
    let gate_diff = cls(&store, true)?.max_abs_diff(&cls(&store, false)?);
    let ok = lora_diff <= 1e-12 && gate_diff <= 1e-12;
    Ok((ok, format!("LoRA-at-init {lora_diff:e}, zero-gate {gate_diff:e}")))
}

/// Class token of the backbone with every adapter removed.
fn frozen_backbone_cls(model: &FgiNet, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
    let mut stripped = store.clone();
    for p in stripped.params_mut() {
        if p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let mut s = Session::new(&stripped, BindMode::None, false);
    let x = s.tape.constant(batch.clone());
    let v = model.vit.forward(&mut s, x, None, None)?;
    Ok(s.tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds() {
        for name in op_names() {
            let r = op_gradcheck(name, 0, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    #[test]
    fn unknown_suite_is_none() {
        assert!(run_suite("nope", Faults::default()).is_none());
    }

    #[test]
    fn fault_breaks_reconstruction() {
        let r = run_suite("wavelet", Faults { haar_scale: Some(1.01) }).unwrap();
        assert!(!r.passed, "{}", r.detail);
        assert!(r.detail.contains("reconstruction error"));
    }
}
