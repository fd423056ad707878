//! Module-level behaviour of the model components and the trainer, checked
//! against closed forms, hand compositions and finite differences.

use fginet::backbone::{Block, GateMode, GateVector, LoraConfig, Vit, VitConfig};
use fginet::bmfe::{global_avg_pool, BandMask, Bmfe, BmfeConfig, MaskSpec};
use fginet::head::{normalize_pair, Classifier, EmbedProjection};
use fginet::model::{perturb_lora, FgiNet, Variant};
use fginet::nn::{BindMode, ParamStore, Session};
use fginet::train::experiments::{run_ablation, run_generalization};
use fginet::train::{evaluate, train, RunConfig, TrainError};
use fginet::{Purpose, Rng, Tape, Tensor, Var};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::stream(seed, 5, 0, Purpose::Data);
    Tensor::from_fn(shape, |_| rng.normal())
}

fn weighted_sum(s: &mut Session, y: Var, seed: u64) -> Var {
    let shape = s.tape.shape(y).to_vec();
    let w = s.tape.constant(rand(&shape, seed));
    let p = s.tape.mul(y, w).unwrap();
    s.tape.sum(p)
}

/// Worst relative error between `grad` and central differences of `loss`
/// at `count` sampled entries of `x`.
fn fd_error(x: &Tensor, grad: &Tensor, loss: impl Fn(&Tensor) -> f64, count: usize, h: f64) -> f64 {
    let mut rng = Rng::stream(99, 0, 0, Purpose::Data);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let i = rng.below(x.len() as u64) as usize;
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
        let g = grad.data()[i];
        worst = worst.max((g - fd).abs() / (g.abs() + fd.abs()).max(1e-6));
    }
    worst
}

/// Loss and input gradient of `f` under a fresh session.
fn loss_and_grad(
    store: &ParamStore,
    training: bool,
    x: &Tensor,
    f: &dyn Fn(&mut Session, Var) -> Var,
) -> (f64, Tensor) {
    let mut s = Session::new(store, BindMode::None, training).with_stream(1, 0, 0);
    let xv = s.tape.leaf(x.clone(), true);
    let y = f(&mut s, xv);
    let l = weighted_sum(&mut s, y, 17);
    s.tape.backward(l).unwrap();
    (s.tape.value(l).item(), s.tape.grad(xv).unwrap().clone())
}

fn check_input_gradient(store: &ParamStore, training: bool, x: &Tensor, f: &dyn Fn(&mut Session, Var) -> Var) -> f64 {
    let (_, g) = loss_and_grad(store, training, x, f);
    fd_error(x, &g, |xp| loss_and_grad(store, training, xp, f).0, 30, 1e-5)
}

fn bmfe(c1: usize, c2: usize, rho: f64, dropout: f64) -> (Bmfe, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = BmfeConfig {
        in_channels: 3,
        image_size: 64,
        stem_c1: c1,
        stem_c2: c2,
        embed_dim: 16,
        rho,
        mask_patch: 8,
        dropout,
    };
    let b = Bmfe::new(&mut store, cfg, &mut Rng::stream(0, 0, 0, Purpose::Init)).unwrap();
    (b, store)
}

fn zero_param(store: &mut ParamStore, name: &str) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::zeros(&shape);
}

fn value_of(store: &ParamStore, training: bool, stream: u64, f: impl FnOnce(&mut Session) -> Var) -> Tensor {
    let mut s = Session::new(store, BindMode::None, training).with_stream(stream, 0, 0);
    let v = f(&mut s);
    s.tape.value(v).clone()
}

#[test]
fn stem_shapes_follow_stride_arithmetic() {
    let (b, store) = bmfe(64, 256, 0.4, 0.1);
    let z = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(rand(&[1, 9, 32, 32], 1));
        b.conv_stem(s, x).unwrap()
    });
    assert_eq!(z.shape(), [1, 256, 8, 8]);
    let mut s = Session::new(&store, BindMode::None, false);
    let odd = s.tape.constant(Tensor::zeros(&[1, 9, 30, 30]));
    assert!(b.conv_stem(&mut s, odd).is_err());
}

#[test]
fn zero_input_gives_zero_stem_and_token() {
    let (b, mut store) = bmfe(8, 16, 0.4, 0.1);
    for name in ["bmfe.conv1.bias", "bmfe.conv2.bias", "bmfe.proj.bias"] {
        zero_param(&mut store, name);
    }
    let z = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(Tensor::zeros(&[2, 9, 32, 32]));
        b.conv_stem(s, x).unwrap()
    });
    assert!(z.data().iter().all(|&v| v == 0.0));
    let t = value_of(&store, false, 0, |s| {
        let z = s.tape.constant(Tensor::zeros(&[2, 16, 8, 8]));
        b.pool_and_project(s, z, &mut Rng::stream(0, 0, 0, Purpose::Dropout)).unwrap()
    });
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_gradient_with_frozen_statistics() {
    let (b, store) = bmfe(4, 6, 0.4, 0.0);
    let x = rand(&[2, 9, 8, 8], 3);
    let err = check_input_gradient(&store, false, &x, &|s, xv| b.conv_stem(s, xv).unwrap());
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn pooling_constant_channels() {
    let store = ParamStore::new();
    let z = Tensor::from_fn(&[2, 3, 4, 5], |i| (i / 20) as f64 * 0.5 - 1.0);
    let v = value_of(&store, false, 0, |s| {
        let zv = s.tape.constant(z.clone());
        global_avg_pool(s, zv).unwrap()
    });
    let expect: Vec<f64> = (0..6).map(|c| c as f64 * 0.5 - 1.0).collect();
    assert_eq!(v.data(), &expect[..]);
}

#[test]
fn evaluation_token_ignores_the_stream() {
    let (b, store) = bmfe(8, 16, 0.4, 0.1);
    let img = rand(&[2, 3, 64, 64], 4).map(f64::abs);
    let run = |stream| {
        value_of(&store, false, stream, |s| {
            let x = s.tape.constant(img.clone());
            b.forward(s, x).unwrap()
        })
    };
    assert_eq!(run(1), run(1));
    assert_eq!(run(1), run(2));
}

#[test]
fn zero_ratio_training_skips_masking() {
    let (b, store) = bmfe(8, 16, 0.0, 0.0);
    let img = rand(&[2, 3, 64, 64], 5).map(f64::abs);
    let spec = MaskSpec::new(0.0, 8, 32, 32).unwrap();
    let plain = value_of(&store, true, 3, |s| {
        let x = s.tape.constant(img.clone());
        b.forward(s, x).unwrap()
    });
    let ones = [BandMask::ones(&spec), BandMask::ones(&spec)];
    let explicit = value_of(&store, true, 3, |s| {
        let x = s.tape.constant(img.clone());
        b.forward_with_masks(s, x, Some(&ones)).unwrap()
    });
    assert_eq!(plain, explicit);
}

#[test]
fn masking_streams_perturb_the_token() {
    let (b, store) = bmfe(8, 16, 0.4, 0.0);
    let img = rand(&[1, 3, 64, 64], 6).map(f64::abs);
    let run = |stream| {
        value_of(&store, true, stream, |s| {
            let x = s.tape.constant(img.clone());
            b.forward(s, x).unwrap()
        })
    };
    assert!(run(1).max_abs_diff(&run(2)) > 0.0);
}

fn vit_config(depth: usize) -> VitConfig {
    VitConfig {
        in_channels: 3,
        image_size: 32,
        patch_size: 8,
        embed_dim: 16,
        depth,
        heads: 2,
        mlp_ratio: 2,
    }
}

fn vit(depth: usize) -> (Vit, ParamStore) {
    let mut store = ParamStore::new();
    let lora = LoraConfig { rank: 2, scale: 4.0 };
    let v = Vit::new(&mut store, vit_config(depth), lora, &mut Rng::stream(0, 0, 0, Purpose::Init)).unwrap();
    (v, store)
}

#[test]
fn zero_image_patch_tokens_are_positions() {
    let (v, mut store) = vit(1);
    zero_param(&mut store, "vit.patch_embed.bias");
    let seq = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        v.patch_embed(s, x).unwrap()
    });
    assert_eq!(seq.shape(), [1, 17, 16]);
    let pos = store.get(v.pos);
    let cls = store.get(v.cls);
    assert_eq!(&seq.data()[16..], &pos.data()[16..]);
    for j in 0..16 {
        assert_eq!(seq.data()[j], cls.data()[j] + pos.data()[j]);
    }
}

#[test]
fn patch_embed_gradient() {
    let (v, store) = vit(1);
    let x = rand(&[1, 3, 32, 32], 7);
    let err = check_input_gradient(&store, false, &x, &|s, xv| v.patch_embed(s, xv).unwrap());
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn lora_gradients_reach_adapters_only() {
    let (v, mut store) = vit(1);
    perturb_lora(&mut store, 0.1, &mut Rng::stream(1, 0, 0, Purpose::Data));
    let q = &v.blocks[0].q;
    let mut s = Session::new(&store, BindMode::Trainable, true);
    let x = s.tape.constant(rand(&[3, 16], 8));
    let y = q.forward(&mut s, x).unwrap();
    let l = weighted_sum(&mut s, y, 2);
    s.tape.backward(l).unwrap();
    let grads = s.param_grads();
    let index = |name: &str| store.params().iter().position(|p| p.name == name).unwrap();
    assert!(grads[index("vit.block0.attn.q.weight")].is_none());
    for name in ["vit.block0.attn.q.lora_a", "vit.block0.attn.q.lora_b"] {
        assert!(grads[index(name)].as_ref().unwrap().sq_norm() > 0.0, "{name}");
    }
}

#[test]
fn lora_at_init_equals_base() {
    let (v, store) = vit(1);
    let q = &v.blocks[0].q;
    let x = rand(&[3, 16], 9);
    let with = value_of(&store, false, 0, |s| {
        let xv = s.tape.constant(x.clone());
        q.forward(s, xv).unwrap()
    });
    let base = value_of(&store, false, 0, |s| {
        let xv = s.tape.constant(x.clone());
        q.base.forward(s, xv).unwrap()
    });
    assert_eq!(with, base);
}

#[test]
fn attention_rows_are_stochastic() {
    let (v, store) = vit(1);
    let attn = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(rand(&[2, 5, 16], 10));
        v.blocks[0].forward_with_attention(s, x).unwrap().1
    });
    assert_eq!(attn.shape(), [2, 2, 5, 5]);
    for row in attn.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn single_token_block_is_value_path_plus_mlp() {
    let (v, mut store) = vit(1);
    perturb_lora(&mut store, 0.1, &mut Rng::stream(2, 0, 0, Purpose::Data));
    let b = &v.blocks[0];
    let x = rand(&[1, 1, 16], 11);
    let (out, attn) = {
        let mut s = Session::new(&store, BindMode::None, false);
        let xv = s.tape.constant(x.clone());
        let (o, a) = b.forward_with_attention(&mut s, xv).unwrap();
        (s.tape.value(o).clone(), s.tape.value(a).clone())
    };
    assert!(attn.data().iter().all(|&a| a == 1.0));
    let manual = value_of(&store, false, 0, |s| {
        let xv = s.tape.constant(x.clone());
        let n = b.ln1.forward(s, xv).unwrap();
        let val = b.v.forward(s, n).unwrap();
        let a = b.proj.forward(s, val).unwrap();
        let h = s.tape.add(xv, a).unwrap();
        let n2 = b.ln2.forward(s, h).unwrap();
        let m = b.fc1.forward(s, n2).unwrap();
        let m = s.tape.gelu(m);
        let m = b.fc2.forward(s, m).unwrap();
        s.tape.add(h, m).unwrap()
    });
    assert!(out.max_abs_diff(&manual) <= 1e-12);
}

#[test]
fn block_gradient_two_tokens_one_head() {
    let mut store = ParamStore::new();
    let cfg = VitConfig {
        embed_dim: 8,
        heads: 1,
        ..vit_config(1)
    };
    let lora = LoraConfig { rank: 2, scale: 4.0 };
    let b = Block::new(&mut store, "b", &cfg, lora, &mut Rng::stream(0, 0, 0, Purpose::Init));
    perturb_lora(&mut store, 0.1, &mut Rng::stream(3, 0, 0, Purpose::Data));
    let x = rand(&[1, 2, 8], 12);
    let err = check_input_gradient(&store, false, &x, &|s, xv| b.forward(s, xv).unwrap());
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gate_gradient_is_inner_product_with_token() {
    let mut t = Tape::new();
    let cls = t.leaf(rand(&[4], 1), true);
    let tf = t.leaf(rand(&[4], 2), true);
    let alpha = t.leaf(Tensor::scalar(0.3), true);
    let y = fginet::backbone::inject_gate(&mut t, cls, tf, alpha).unwrap();
    let up = rand(&[4], 3);
    let w = t.constant(up.clone());
    let p = t.mul(y, w).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    let inner: f64 = up.data().iter().zip(rand(&[4], 2).data()).map(|(a, b)| a * b).sum();
    assert!((t.grad(alpha).unwrap().item() - inner).abs() <= 1e-14);
}

fn gated(store: &mut ParamStore, depth: usize, init: f64) -> GateVector {
    GateVector::new(store, vec![GateMode::Learned; depth], init)
}

#[test]
fn manual_composition_matches_backbone() {
    let (v, mut store) = vit(2);
    let g = gated(&mut store, 2, 0.3);
    perturb_lora(&mut store, 0.1, &mut Rng::stream(4, 0, 0, Purpose::Data));
    let img = rand(&[2, 3, 32, 32], 13);
    let tf = rand(&[2, 16], 14);
    let full = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(img.clone());
        let t = s.tape.constant(tf.clone());
        v.forward(s, x, Some(t), Some(&g)).unwrap()
    });
    let manual = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(img.clone());
        let t = s.tape.constant(tf.clone());
        let mut seq = v.patch_embed(s, x).unwrap();
        for (l, block) in v.blocks.iter().enumerate() {
            seq = block.forward(s, seq).unwrap();
            let alpha = s.p(g.alphas[l].unwrap());
            seq = v.inject(s, seq, t, alpha).unwrap();
        }
        let cls = s.tape.narrow(seq, 1, 0, 1).unwrap();
        s.tape.reshape(cls, &[2, 16]).unwrap()
    });
    assert_eq!(full, manual);
}

#[test]
fn zero_token_makes_gates_irrelevant() {
    let (v, mut store) = vit(2);
    let g = gated(&mut store, 2, 0.3);
    let img = rand(&[1, 3, 32, 32], 15);
    let run = |store: &ParamStore| {
        value_of(store, false, 0, |s| {
            let x = s.tape.constant(img.clone());
            let t = s.tape.constant(Tensor::zeros(&[1, 16]));
            v.forward(s, x, Some(t), Some(&g)).unwrap()
        })
    };
    let a = run(&store);
    for id in g.alphas.iter().flatten() {
        *store.get_mut(*id) = Tensor::scalar(5.0);
    }
    assert_eq!(a, run(&store));
}

#[test]
fn injection_touches_only_the_class_token() {
    let (v, mut store) = vit(1);
    let g = gated(&mut store, 1, 0.5);
    let img = rand(&[1, 3, 32, 32], 16);
    let run = |seed| {
        value_of(&store, false, 0, |s| {
            let x = s.tape.constant(img.clone());
            let t = s.tape.constant(rand(&[1, 16], seed));
            v.forward_tokens(s, x, Some(t), Some(&g)).unwrap()
        })
    };
    let (a, b) = (run(1), run(2));
    assert_eq!(&a.data()[16..], &b.data()[16..]);
    assert!(a.data()[..16] != b.data()[..16]);
}

#[test]
fn embedding_zero_and_gradient() {
    let mut store = ParamStore::new();
    let e = EmbedProjection::new(&mut store, 16, 16, &mut Rng::stream(0, 0, 0, Purpose::Init));
    zero_param(&mut store, "head.embed.bias");
    let zero = value_of(&store, false, 0, |s| {
        let x = s.tape.constant(Tensor::zeros(&[2, 16]));
        e.forward(s, x).unwrap()
    });
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let x = rand(&[2, 16], 17);
    let once = value_of(&store, false, 0, |s| {
        let xv = s.tape.constant(x.clone());
        e.forward(s, xv).unwrap()
    });
    let twice = value_of(&store, false, 0, |s| {
        let xv = s.tape.constant(x.clone());
        e.forward(s, xv).unwrap()
    });
    assert_eq!(once, twice);
    let err = check_input_gradient(&store, false, &x, &|s, xv| e.forward(s, xv).unwrap());
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn cosine_is_one_when_parallel_and_scale_free() {
    let w = rand(&[2, 6], 18);
    let f = Tensor::new(&[1, 6], w.data()[6..].iter().map(|v| 2.5 * v).collect()).unwrap();
    let cos = |f: &Tensor| {
        let mut t = Tape::new();
        let (fv, wv) = (t.constant(f.clone()), t.constant(w.clone()));
        let p = normalize_pair(&mut t, fv, wv).unwrap();
        t.value(p.cos).clone()
    };
    assert!((cos(&f).data()[1] - 1.0).abs() <= 1e-12);
    let g = rand(&[1, 6], 19);
    for lambda in [1e-3, 0.7, 42.0] {
        assert!(cos(&g).max_abs_diff(&cos(&g.map(|v| v * lambda))) <= 1e-12);
    }
}

#[test]
fn variant_contracts() {
    let cfg = RunConfig::toy().model;
    assert_eq!("lgfi-all".parse::<Variant>().unwrap(), "full".parse::<Variant>().unwrap());
    assert!("nope".parse::<Variant>().is_err());

    let build = |id: &str| {
        let mut c = cfg.clone();
        c.variant = id.into();
        FgiNet::new(&c, 0).unwrap()
    };
    let (base, _) = build("baseline");
    assert!(base.bmfe.is_none() && base.gates.is_none());
    assert!(matches!(base.classifier, Classifier::Softmax(_)));

    let (full, full_store) = build("full");
    let (all, all_store) = build("lgfi-all");
    let names = |s: &ParamStore| s.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&full_store), names(&all_store));
    assert_eq!(full.gate_values(&full_store), all.gate_values(&all_store));

    let (ungated, store) = build("lfi-ungated");
    assert!(ungated.gate_params().iter().all(Option::is_none));
    assert!(ungated.gate_values(&store).iter().all(|&g| g == 1.0));
    assert!(!store.params().iter().any(|p| p.name.contains("gate")));

    let (early, store) = build("lgfi-early");
    let g = early.gate_values(&store);
    let active = g.iter().filter(|&&a| a != 0.0).count();
    assert!(active > 0 && active < g.len() && g[0] != 0.0 && g[g.len() - 1] == 0.0);
}

fn tiny(overrides: &[&str]) -> RunConfig {
    let mut o = vec!["n_train=16", "n_eval=8", "epochs=1", "batch_size=8"];
    o.extend_from_slice(overrides);
    RunConfig::toy().with_overrides(&o).unwrap()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = tiny(&["lr=0"]);
    let data = cfg.data.train_set().unwrap();
    let run = train(&cfg, &data, &[], None).unwrap();
    let (_, init) = FgiNet::new(&cfg.model, cfg.seed).unwrap();
    assert_eq!(run.store.params(), init.params());
    assert_ne!(run.store.buffers(), init.buffers());
}

#[test]
fn diverging_run_reports_its_step() {
    let cfg = tiny(&["lr=1e300", "epochs=3"]);
    let data = cfg.data.train_set().unwrap();
    match train(&cfg, &data, &[], None) {
        Err(TrainError::NonFinite { step, value }) => assert!(step >= 1 && !value.is_finite()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("loss stayed finite"),
    }
}

#[test]
fn evaluation_is_repeatable_and_rejects_empty_sets() {
    let cfg = tiny(&[]);
    let data = cfg.data.train_set().unwrap();
    let seen = cfg.data.eval_set(cfg.data.train_family).unwrap();
    let run = train(&cfg, &data, &[], None).unwrap();
    let a = evaluate(&run.model, &run.store, "seen", &seen, 8, cfg.precision).unwrap();
    let b = evaluate(&run.model, &run.store, "seen", &seen, 3, cfg.precision).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        evaluate(&run.model, &run.store, "empty", &[], 8, cfg.precision),
        Err(TrainError::EmptyEval)
    ));
}

#[test]
fn gate_history_has_one_entry_per_epoch() {
    let cfg = tiny(&["epochs=2"]);
    let data = cfg.data.train_set().unwrap();
    let run = train(&cfg, &data, &[], None).unwrap();
    assert_eq!(run.report.gate_history.len(), 2);
    assert!(run.report.gate_history.iter().all(|g| g.len() == cfg.model.depth));
    assert_eq!(run.report.loss_curve.len() as u64, run.report.steps);
}

#[test]
fn generalization_report_pairs_arms() {
    let cfg = tiny(&["rho=0.4"]);
    let rep = run_generalization(&cfg, &[0, 1]).unwrap();
    assert_eq!(rep.runs.len(), 4);
    assert_eq!((rep.unmasked.rho, rep.masked.rho), (0.0, 0.4));
    assert_eq!((rep.unmasked.runs, rep.masked.runs), (2, 2));
}

#[test]
fn ablation_rows_and_unknown_ids() {
    let cfg = tiny(&[]);
    let rows = run_ablation(&cfg, &["baseline", "lfi-ungated"]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].variant, "lfi-ungated");
    assert!(run_ablation(&cfg, &["baseline", "bogus"]).is_err());
}
