use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{EvalMetrics, MetricsReport, Scored};
use super::optim::AdamW;
use super::TrainError;
use crate::data::{augment_train, Sample};
use crate::head::predict_from_logits;
use crate::model::FgiNet;
use crate::nn::{BindMode, ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::tensor::{Precision, Tensor};

/// A trained model with its parameters and report.
pub struct TrainRun {
    pub config: RunConfig,
    pub model: FgiNet,
    pub store: ParamStore,
    pub report: MetricsReport,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn batch_images<'a>(images: impl IntoIterator<Item = &'a Tensor>, precision: Precision) -> Result<Tensor, TrainError> {
    let refs: Vec<&Tensor> = images.into_iter().collect();
    let first = refs.first().ok_or(TrainError::EmptyEval)?.shape().to_vec();
    let mut shape = vec![refs.len()];
    shape.extend(&first);
    let flat = Tensor::concat(&refs, 0)?.reshape(&shape)?;
    Ok(flat.rounded(precision))
}

/// Trains on `train_set` and evaluates on each named set at the end. With
/// `out_dir`, writes `ckpt-epochN.bin` after every epoch.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    evals: &[(&str, &[Sample])],
    out_dir: Option<&Path>,
) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let (model, mut store) = FgiNet::new(&cfg.model, cfg.seed)?;
    store.round_to(cfg.precision);
    let mut opt = AdamW::new(cfg.optim, &store);
    let config_value = cfg.to_value();
    let mut loss_curve = Vec::new();
    let mut gate_history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::stream(cfg.seed, epoch, 0, Purpose::Shuffle).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let aug = Rng::stream(cfg.seed, epoch, step, Purpose::Augment);
            let images: Vec<Tensor> = chunk
                .iter()
                .enumerate()
                .map(|(i, &k)| augment_train(&train_set[k].image, &cfg.augment, &mut aug.fork(i as u64)))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&k| train_set[k].label).collect();
            let x = batch_images(&images, cfg.precision)?;

            let mut s = Session::new(&store, BindMode::Trainable, true).with_stream(cfg.seed, epoch, step);
            let xv = s.tape.constant(x);
            let out = model.forward(&mut s, xv)?;
            let loss = model.loss(&mut s, &out, &labels)?;
            let value = s.tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { step, value });
            }
            s.tape.backward(loss)?;
            let grads = s.param_grads();
            let updates = s.take_buffer_updates();
            drop(s);

            for (id, t) in updates {
                store.set_buffer(id, t.rounded(cfg.precision));
            }
            opt.step(&mut store, &grads, cfg.precision)?;
            loss_curve.push(value);
            step += 1;
        }
        gate_history.push(model.gate_values(&store));
        if let Some(dir) = out_dir {
            let path = dir.join(format!("ckpt-epoch{}.bin", epoch + 1));
            Checkpoint::capture(&store, config_value.clone(), step).save(&path)?;
            checkpoints.push(path);
        }
    }
    let eval = evals
        .iter()
        .map(|(name, set)| evaluate(&model, &store, name, set, cfg.batch_size, cfg.precision))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainRun {
        config: cfg.clone(),
        report: MetricsReport {
            config: config_value,
            steps: step,
            loss_curve,
            gate_history,
            eval,
        },
        model,
        store,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints,
    })
}

/// Margin-free scores for every sample, in eval mode (no masking, dropout
/// or augmentation).
pub fn score(
    model: &FgiNet,
    store: &ParamStore,
    samples: &[Sample],
    batch_size: usize,
    precision: Precision,
) -> Result<Vec<Scored>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = batch_images(chunk.iter().map(|s| &s.image), precision)?;
        let mut s = Session::new(store, BindMode::None, false);
        let xv = s.tape.constant(x);
        let fwd = model.forward(&mut s, xv)?;
        let logits = s.tape.value(fwd.head.logits).data();
        for (i, smp) in chunk.iter().enumerate() {
            let (lr, lf) = (logits[2 * i], logits[2 * i + 1]);
            let p = predict_from_logits(lr, lf);
            out.push(Scored {
                id: smp.id,
                label: smp.label,
                p_fake: p.p_fake,
                logit_real: lr,
                logit_fake: lf,
                predicted: p.label,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &FgiNet,
    store: &ParamStore,
    name: &str,
    samples: &[Sample],
    batch_size: usize,
    precision: Precision,
) -> Result<EvalMetrics, TrainError> {
    EvalMetrics::from_scored(name, &score(model, store, samples, batch_size, precision)?)
}

/// Rebuilds the model described by a checkpoint and restores its tensors.
pub fn load_model(path: &Path) -> Result<(RunConfig, FgiNet, ParamStore), TrainError> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::from_value(ck.header.config.clone())?;
    let (model, mut store) = FgiNet::new(&cfg.model, cfg.seed)?;
    ck.restore(&mut store)?;
    Ok((cfg, model, store))
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|e| TrainError::io(path, e))
}

pub fn write_gates_csv(path: &Path, gates: &[f64]) -> Result<(), TrainError> {
    let mut s = String::from("layer_index,alpha\n");
    for (l, a) in gates.iter().enumerate() {
        writeln!(s, "{l},{a}").unwrap();
    }
    write_text(path, &s)
}

pub fn write_logits_csv(path: &Path, scored: &[Scored]) -> Result<(), TrainError> {
    let mut s = String::from("id,label,p_fake,logit_real,logit_fake,predicted\n");
    for r in scored {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.id, r.label, r.p_fake, r.logit_real, r.logit_fake, r.predicted
        )
        .unwrap();
    }
    write_text(path, &s)
}

/// `config.json`, `metrics.json`, `gates.csv` and `timing.json`.
pub fn write_run_outputs(dir: &Path, run: &TrainRun) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let json = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("json");
    write_text(&dir.join("config.json"), &json(&run.report.config))?;
    write_text(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&run.report).expect("json"),
    )?;
    write_gates_csv(&dir.join("gates.csv"), run.report.final_gates())?;
    write_text(
        &dir.join("timing.json"),
        &json(&serde_json::json!({ "wall_clock_secs": run.wall_clock_secs })),
    )
}
