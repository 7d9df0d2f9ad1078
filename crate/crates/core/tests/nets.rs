use amaq::autodiff::{ParamStore, Tape, Tensor};
use amaq::harness::{make_task, Batch, Optimizer, OptimizerKind, Schedule, TaskName, TaskSpec};
use amaq::nets::{
    build_model, build_model_with_quant, build_monolith, site_specs, Arch, ModelConfig, ModelPartition, Payload,
    QuantSites, StageInput, StepCtx, Tuning, Upstream,
};
use amaq::quant::{bits_loss, Granularity, QuantAxis, QuantMode};

fn config(arch: Arch, tuning: Tuning) -> ModelConfig {
    ModelConfig {
        arch,
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        vocab_size: 32,
        max_seq_len: 16,
        split: (1, 3),
        tuning,
        quant_sites: QuantSites::BoundaryOnly,
        ff_mult: 2,
    }
}

const LORA: Tuning = Tuning::Lora {
    rank: 2,
    lora_alpha: 4.0,
};

fn amaq_mode() -> QuantMode {
    serde_json::from_str(
        r#"{"mode":"amaq","b_min":1,"b_max":16,"b_init":8,"target":4,"alpha":1.0,"beta":0.02,"clip":"mean_gate"}"#,
    )
    .unwrap()
}

fn batches(seq: usize) -> Vec<Batch> {
    let mut spec = TaskSpec::new(TaskName::CharLm);
    spec.seq_len = seq;
    spec.train_size = 64;
    spec.eval_size = 8;
    let task = make_task(&spec).unwrap();
    let sched = Schedule::new(0, 64, 4).unwrap();
    (0..20)
        .map(|s| Batch::from_examples(&task.train, &sched.batch_indices(s)))
        .collect()
}

fn split_step(parts: &mut [ModelPartition; 3], b: &Batch) -> f32 {
    let ctx = StepCtx {
        samples: &b.samples,
        train: true,
    };
    let [front, middle, back] = parts;
    let f = front
        .forward(
            StageInput::Tokens {
                ids: &b.ids,
                batch: b.batch,
                seq: b.seq,
            },
            ctx,
        )
        .unwrap();
    let fp = f.payload.clone().unwrap();
    let m = middle.forward(StageInput::Activation(&fp), ctx).unwrap();
    let mp = m.payload.clone().unwrap();
    let mut k = back.forward(StageInput::Activation(&mp), ctx).unwrap();
    let loss = k.tape.cross_entropy(k.output, &b.targets).unwrap();
    let value = k.tape.value(loss).data()[0];
    let g = back.backward(k, Upstream::Loss(loss), 0.0).unwrap().unwrap();
    let g = middle.backward(m, Upstream::Grad(&g), 0.0).unwrap().unwrap();
    assert!(front.backward(f, Upstream::Grad(&g), 0.0).unwrap().is_none());
    value
}

fn all_values(stores: &[&ParamStore]) -> Vec<Vec<f32>> {
    stores
        .iter()
        .flat_map(|s| s.iter().map(|(_, p)| p.value.data().to_vec()))
        .collect()
}

/// Unquantized split training and the unsplit model agree bit for bit.
fn split_matches_monolith(arch: Arch, tuning: Tuning) {
    let cfg = config(arch, tuning);
    let mut parts = build_model(&cfg, 7).unwrap();
    let mut mono = build_monolith(&cfg, 7).unwrap();
    assert_eq!(
        all_values(&[&parts[0].params, &parts[1].params, &parts[2].params]),
        all_values(&[&mono.params])
    );
    let mut opts: Vec<Optimizer> = (0..3).map(|_| Optimizer::new(OptimizerKind::default())).collect();
    let mut mono_opt = Optimizer::new(OptimizerKind::default());
    let bs = batches(8);
    for b in &bs {
        let split_loss = split_step(&mut parts, b);
        for (p, o) in parts.iter_mut().zip(&mut opts) {
            o.step(&mut p.params, 1e-2, 0.0);
        }
        let mut tape = Tape::new();
        let logits = mono.forward(&mut tape, &b.ids, b.batch, b.seq).unwrap();
        let loss = tape.cross_entropy(logits, &b.targets).unwrap();
        let mono_loss = tape.value(loss).data()[0];
        tape.backward(loss, &mut mono.params).unwrap();
        mono_opt.step(&mut mono.params, 1e-2, 0.0);
        assert_eq!(split_loss.to_bits(), mono_loss.to_bits());
    }
    assert_eq!(
        all_values(&[&parts[0].params, &parts[1].params, &parts[2].params]),
        all_values(&[&mono.params])
    );
}

#[test]
fn split_matches_monolith_mlp_lora() {
    split_matches_monolith(Arch::Mlp, LORA);
}

#[test]
fn split_matches_monolith_mlp_full() {
    split_matches_monolith(Arch::Mlp, Tuning::Full);
}

#[test]
fn split_matches_monolith_transformer_lora() {
    split_matches_monolith(Arch::Transformer, LORA);
}

#[test]
fn split_matches_monolith_transformer_full() {
    split_matches_monolith(Arch::Transformer, Tuning::Full);
}

#[test]
fn all_layers_gives_one_site_per_boundary() {
    let mut cfg = config(Arch::Transformer, LORA);
    cfg.quant_sites = QuantSites::AllLayers;
    let names: Vec<String> = site_specs(&cfg).into_iter().map(|s| s.name).collect();
    assert_eq!(names, ["act0", "act1", "act2", "act3", "act4"]);
    cfg.quant_sites = QuantSites::BoundaryOnly;
    let specs = site_specs(&cfg);
    assert_eq!(specs.len(), 2);
    assert!(specs.iter().all(|s| s.network));
}

#[test]
fn fresh_lora_model_equals_its_base() {
    let cfg = config(Arch::Transformer, LORA);
    let mono = build_monolith(&cfg, 3).unwrap();
    let mut stripped = build_monolith(&cfg, 3).unwrap();
    let adapters: Vec<_> = stripped
        .params
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b"))
        .map(|(id, _)| id)
        .collect();
    assert!(!adapters.is_empty());
    for id in adapters {
        let p = stripped.params.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let ids: Vec<usize> = (0..16).map(|i| i % 32).collect();
    let run = |m: &amaq::nets::Monolith| {
        let mut tape = Tape::new();
        let y = m.forward(&mut tape, &ids, 2, 8).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(&mono), run(&stripped));
}

#[test]
fn frozen_weights_get_no_grad_buffers() {
    let cfg = config(Arch::Transformer, LORA);
    let mut parts = build_model(&cfg, 1).unwrap();
    let bs = batches(8);
    split_step(&mut parts, &bs[0]);
    let mut trainable_with_grad = 0;
    for part in &parts {
        for (_, p) in part.params.iter() {
            if p.requires_grad {
                trainable_with_grad += usize::from(p.grad.is_some());
            } else {
                assert!(p.grad.is_none(), "{} got a gradient buffer", p.name);
            }
        }
    }
    assert!(trainable_with_grad > 0);
}

#[test]
fn front_output_shape() {
    let mut cfg = config(Arch::Transformer, LORA);
    cfg.d_model = 32;
    cfg.n_heads = 4;
    let mut parts = build_model(&cfg, 0).unwrap();
    let ids = vec![1usize; 32];
    let out = parts[0]
        .forward(
            StageInput::Tokens {
                ids: &ids,
                batch: 4,
                seq: 8,
            },
            StepCtx {
                samples: &[0, 1, 2, 3],
                train: false,
            },
        )
        .unwrap();
    assert_eq!(out.payload.unwrap().shape(), &[4, 8, 32]);
}

/// With a zero task gradient, each site's gate moves only by its own regularizer.
#[test]
fn gates_are_independent_per_site() {
    let mut cfg = config(Arch::Transformer, LORA);
    cfg.quant_sites = QuantSites::AllLayers;
    cfg.split = (3, 4);
    let mut parts = build_model_with_quant(&cfg, &amaq_mode(), 0).unwrap();
    let front = &mut parts[0];
    let names: Vec<String> = front.sites().iter().map(|s| s.name.clone()).collect();
    assert_eq!(names, ["act0", "act1", "act2", "act3"]);
    // perturb one gate so the sites differ
    let id = front.params.find("front.gate.act1.q").unwrap();
    front.params.get_mut(id).value.data_mut()[0] = 3.0;

    let ids: Vec<usize> = (0..16).collect();
    let out = front
        .forward(
            StageInput::Tokens {
                ids: &ids,
                batch: 2,
                seq: 8,
            },
            StepCtx {
                samples: &[0, 1],
                train: true,
            },
        )
        .unwrap();
    let zero = Payload::Raw(Tensor::zeros(&[2, 8, 16]));
    let weight = 0.5;
    let gates: Vec<_> = names.iter().map(|n| front.gating(n).unwrap()).collect();
    front.backward(out, Upstream::Grad(&zero), weight).unwrap();
    for (n, gp) in names.iter().zip(gates) {
        let id = front.params.find(&format!("front.gate.{n}.q")).unwrap();
        let got = front.params.grad(id).unwrap().data();
        let want = bits_loss(&gp).1;
        for (g, w) in got.iter().zip(want) {
            assert!((*g as f64 - weight * w).abs() < 1e-7, "{n}: {g} vs {}", weight * w);
        }
    }
}

#[test]
fn fixed_quant_site_carries_packet() {
    let cfg = config(Arch::Mlp, LORA);
    let mode = QuantMode::Fixed {
        bits: 4.0,
        granularity: Granularity::Channel,
    };
    let mut parts = build_model_with_quant(&cfg, &mode, 0).unwrap();
    let ids = vec![2usize; 8];
    let out = parts[0]
        .forward(
            StageInput::Tokens {
                ids: &ids,
                batch: 1,
                seq: 8,
            },
            StepCtx {
                samples: &[0],
                train: true,
            },
        )
        .unwrap();
    match out.payload.unwrap() {
        Payload::Quantized(p) => {
            assert!(p.wire_bits.iter().all(|&b| b == 4));
            assert_eq!(p.layout.axis, QuantAxis::Channel);
        }
        other => panic!("expected a quantized payload, got {other:?}"),
    }
}
