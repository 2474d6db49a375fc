mod common;

use common::{examples, micro, model, vocab};
use semgen::autodiff::{grad_check_params, ParamCheckOptions, Tape};
use semgen::config::{AblationPoint, ModelKind};
use semgen::data::{BOS, EOS, PAD};
use semgen::decoder::{sequence_log_prob, InitVariant};
use semgen::model::{sample_token, Example, Model, Task};
use semgen::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nll(model: &Model, batch: &[&Example], task: Task) -> (f64, usize) {
    let mut tape = Tape::with_params(&model.store);
    let out = model.forward(&mut tape, batch).unwrap();
    let t = out.task(task).unwrap();
    (tape.value(t.total).item(), t.tokens)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Scores one example step by step, outside of the batched path.
fn stepwise_log_prob(model: &Model, ex: &Example, task: Task) -> f64 {
    let mut tape = Tape::with_params(&model.store);
    let cond = model.condition(&mut tape, &[ex]).unwrap();
    let mut cursor = model.start(&mut tape, task, &cond).unwrap();
    sequence_log_prob(ex.target(task).unwrap(), BOS, EOS, |prev, _| {
        let logits = model.step(&mut tape, &cond, &mut cursor, &[prev])?;
        Ok(softmax(tape.value(logits).data()))
    })
    .unwrap()
}

#[test]
fn micro_nll_matches_stepwise_recomputation() {
    let v = vocab();
    for kind in ModelKind::ALL {
        let cfg = micro(kind);
        let m = model(cfg.clone(), &v, 3);
        let exs = examples(&cfg, &v);
        for task in m.tasks() {
            let ex = &exs[0];
            let (total, tokens) = nll(&m, &[ex], task);
            assert_eq!(tokens, ex.target(task).unwrap().len() + 1);
            let lp = stepwise_log_prob(&m, ex, task);
            assert!((total + lp).abs() < 1e-9, "{kind} {task:?}: {total} vs {}", -lp);
        }
    }
}

#[test]
fn batched_padding_is_masked() {
    let v = vocab();
    for kind in ModelKind::ALL {
        let cfg = micro(kind);
        let m = model(cfg.clone(), &v, 4);
        let exs = examples(&cfg, &v);
        let all: Vec<&Example> = exs.iter().collect();
        for task in m.tasks() {
            let (batched, tokens) = nll(&m, &all, task);
            let mut sum = 0.0;
            let mut count = 0;
            for ex in &exs {
                let (t, n) = nll(&m, &[ex], task);
                sum += t;
                count += n;
            }
            assert_eq!(tokens, count);
            assert!((batched - sum).abs() < 1e-9, "{kind}: {batched} vs {sum}");
        }
    }
}

#[test]
fn unconditioned_model_ignores_the_word() {
    let v = vocab();
    let mut cfg = micro(ModelKind::Single);
    cfg.gate = false;
    cfg.char_features = false;
    cfg.contextual = false;
    cfg.init = InitVariant::Zeros;
    let m = model(cfg.clone(), &v, 5);
    let mut exs = examples(&cfg, &v);
    // With a one-token context the attention output no longer depends on the
    // query, so nothing about the target word reaches the decoder.
    let ctx = vec![v.id("river")];
    let mut a = exs.remove(0);
    let mut b = a.clone();
    a.context = ctx.clone();
    b.context = ctx;
    b.word = "bank".into();
    b.word_id = v.id("bank");
    assert_ne!(a.word_id, b.word_id);
    assert_eq!(nll(&m, &[&a], Task::Definition), nll(&m, &[&b], Task::Definition));
}

#[test]
fn single_token_context_gives_distributions() {
    let v = vocab();
    let cfg = micro(ModelKind::Single);
    let m = model(cfg.clone(), &v, 6);
    let mut ex = examples(&cfg, &v).remove(0);
    ex.context.truncate(1);
    let mut tape = Tape::with_params(&m.store);
    let out = m.forward(&mut tape, &[&ex]).unwrap();
    let logits = tape.value(out.definition.unwrap().logits).clone();
    for r in 0..logits.rows() {
        let p = softmax(logits.row_slice(r));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| x > 0.0));
    }
}

#[test]
fn parameter_counts_follow_the_formula() {
    let v = vocab();
    for kind in ModelKind::ALL {
        for point in AblationPoint::grid() {
            let mut cfg = micro(kind);
            point.apply(&mut cfg);
            let m = model(cfg.clone(), &v, 1);
            let actual: usize = m.store.iter().map(|(_, p)| p.value.len()).sum();
            assert_eq!(actual, cfg.parameter_count(v.len()), "{kind} {}", point.label());
        }
    }
}

#[test]
fn gate_switch_removes_one_square_matrix_per_head() {
    let v = vocab();
    for kind in ModelKind::ALL {
        let on = micro(kind);
        let mut off = on.clone();
        off.gate = false;
        let heads = if kind.is_multi_task() { 2 } else { 1 };
        let u = on.input_dim();
        assert_eq!(on.parameter_count(v.len()) - off.parameter_count(v.len()), heads * u * u);
    }
}

#[test]
fn parallel_definition_branch_equals_single() {
    let v = vocab();
    let single = model(micro(ModelKind::Single), &v, 9);
    let parallel = model(micro(ModelKind::Parallel), &v, 9);
    for (_, p) in single.store.iter() {
        assert_eq!(parallel.store.by_name(&p.name).unwrap().value, p.value, "{}", p.name);
    }
    let exs = examples(&micro(ModelKind::Single), &v);
    let batch: Vec<&Example> = exs.iter().collect();
    let mut t1 = Tape::with_params(&single.store);
    let o1 = single.forward(&mut t1, &batch).unwrap();
    let l1 = o1.loss(&mut t1).unwrap();
    let mut t2 = Tape::with_params(&parallel.store);
    let o2 = parallel.forward(&mut t2, &batch).unwrap();
    let def = t2.value(o2.definition.as_ref().unwrap().mean).item();
    assert_eq!(t1.value(l1).item(), def);

    // Masking the usage term out of the sum leaves the single-task loss.
    let total = o2.multi_task_loss(&mut t2).unwrap();
    let usage = t2.value(o2.usage.as_ref().unwrap().mean).item();
    assert!((t2.value(total).item() - usage - t1.value(l1).item()).abs() < 1e-12);
    assert!(o1.multi_task_loss(&mut t1).is_err());
}

#[test]
fn multi_task_loss_is_an_unweighted_sum() {
    let v = vocab();
    let m = model(micro(ModelKind::Parallel), &v, 2);
    let exs = examples(&micro(ModelKind::Parallel), &v);
    let mut tape = Tape::with_params(&m.store);
    let mut out = m.forward(&mut tape, &[&exs[0]]).unwrap();
    let two = tape.constant(Tensor::scalar(2.0));
    let three = tape.constant(Tensor::scalar(3.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    out.definition.as_mut().unwrap().mean = two;
    out.usage.as_mut().unwrap().mean = three;
    let l = out.multi_task_loss(&mut tape).unwrap();
    assert_eq!(tape.value(l).item(), 5.0);
    out.usage.as_mut().unwrap().mean = zero;
    let l = out.multi_task_loss(&mut tape).unwrap();
    assert_eq!(tape.value(l).item(), 2.0);
}

#[test]
fn usage_head_does_not_touch_definition_loss() {
    let v = vocab();
    let cfg = micro(ModelKind::Parallel);
    let mut m = model(cfg.clone(), &v, 8);
    let exs = examples(&cfg, &v);
    let batch: Vec<&Example> = exs.iter().collect();
    let before = nll(&m, &batch, Task::Definition);
    let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("usage.")).map(|(id, _)| id).collect();
    assert!(!ids.is_empty());
    for id in ids {
        for x in m.store.get_mut(id).value.data_mut() {
            *x += 0.37;
        }
    }
    assert_eq!(nll(&m, &batch, Task::Definition), before);
}

#[test]
fn shortcut_wiring() {
    let v = vocab();
    for kind in [ModelKind::HierDu, ModelKind::HierUd] {
        let cfg = micro(kind);
        let m = model(cfg.clone(), &v, 3);
        let u = cfg.input_dim();
        let w_p = m.store.by_name("shortcut.w_p").unwrap();
        assert_eq!(w_p.value.shape(), &[u + cfg.state_dim, u]);
        let upper = if kind == ModelKind::HierDu { "usage" } else { "def" };
        let w_z = m.store.by_name(&format!("{upper}.gru1.w_z")).unwrap();
        assert_eq!(w_z.value.shape()[0], u);
    }
}

#[test]
fn zeroed_shortcut_block_cuts_the_lower_decoder() {
    let v = vocab();
    let cfg = micro(ModelKind::HierDu);
    let mut m = model(cfg.clone(), &v, 12);
    let u = cfg.input_dim();
    let id = m.store.id("shortcut.w_p").unwrap();
    // Rows u.. multiply s' in the shortcut.
    m.store.get_mut(id).value.data_mut()[u * u..].fill(0.0);
    let exs = examples(&cfg, &v);
    let batch: Vec<&Example> = exs.iter().collect();
    let before = nll(&m, &batch, Task::Usage);
    let def_before = nll(&m, &batch, Task::Definition);
    let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("def.gru")).map(|(id, _)| id).collect();
    for id in ids {
        for x in m.store.get_mut(id).value.data_mut() {
            *x -= 0.21;
        }
    }
    assert_eq!(nll(&m, &batch, Task::Usage), before);
    assert_ne!(nll(&m, &batch, Task::Definition), def_before);
}

#[test]
fn hierarchical_directions_differ() {
    let v = vocab();
    let du = model(micro(ModelKind::HierDu), &v, 21);
    let ud = model(micro(ModelKind::HierUd), &v, 21);
    let exs = examples(&micro(ModelKind::HierDu), &v);
    let batch: Vec<&Example> = exs.iter().collect();
    for task in [Task::Definition, Task::Usage] {
        let a = nll(&du, &batch, task);
        let b = nll(&ud, &batch, task);
        assert!(a.0.is_finite() && b.0.is_finite());
        assert_ne!(a.0, b.0, "{task:?}");
    }
}

#[test]
fn multi_task_needs_usage() {
    let v = vocab();
    let cfg = micro(ModelKind::Parallel);
    let m = model(cfg.clone(), &v, 1);
    let mut ex = examples(&cfg, &v).remove(0);
    ex.usage = None;
    let mut tape = Tape::with_params(&m.store);
    assert!(m.forward(&mut tape, &[&ex]).is_err());
}

fn check_kind(kind: ModelKind) -> f64 {
    let v = vocab();
    let cfg = micro(kind);
    let m = model(cfg.clone(), &v, 31);
    let exs = examples(&cfg, &v);
    let batch: Vec<&Example> = exs.iter().take(2).collect();
    let opts = ParamCheckOptions {
        max_coords_per_param: Some(4),
        ..ParamCheckOptions::default()
    };
    grad_check_params(&m.store, opts, |t| {
        let out = m.forward(t, &batch)?;
        out.loss(t)
    })
    .unwrap()
}

#[test]
fn gradient_check_every_kind() {
    for kind in ModelKind::ALL {
        let err = check_kind(kind);
        assert!(err < 1e-3, "{kind}: {err}");
    }
}

#[test]
fn store_round_trip_and_mismatch() {
    let v = vocab();
    let cfg = micro(ModelKind::HierUd);
    let m = model(cfg.clone(), &v, 2);
    let back = Model::from_store(cfg.clone(), v.len(), m.store.clone()).unwrap();
    assert_eq!(back.store, m.store);
    let mut other = cfg.clone();
    other.state_dim = 5;
    assert!(Model::from_store(other, v.len(), m.store.clone()).is_err());
    let mut other = cfg;
    other.kind = ModelKind::Parallel;
    assert!(Model::from_store(other, v.len(), m.store.clone()).is_err());
}

#[test]
fn warm_start_copies_decoder_and_checks_shapes() {
    let v = vocab();
    let pre = model(micro(ModelKind::Single), &v, 40);
    let mut target = model(micro(ModelKind::Parallel), &v, 41);
    let copied = target.warm_start(&pre.store).unwrap();
    assert!(copied > 0);
    let src = &pre.store.by_name("def.w_d").unwrap().value;
    assert_eq!(&target.store.by_name("usage.w_d").unwrap().value, src);
    assert_eq!(&target.store.by_name("def.w_d").unwrap().value, src);

    let mut wide = micro(ModelKind::Single);
    wide.state_dim = 6;
    let mut target = model(wide, &v, 41);
    assert!(target.warm_start(&pre.store).is_err());
}

#[test]
fn generation_is_seeded() {
    let v = vocab();
    for kind in ModelKind::ALL {
        let cfg = micro(kind);
        let m = model(cfg.clone(), &v, 13);
        let ex = &examples(&cfg, &v)[0];
        let a = m.generate(ex, 1.0, 8, 99).unwrap();
        let b = m.generate(ex, 1.0, 8, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.definition.len() <= 8);
        assert_eq!(a.usage.is_some(), kind.is_multi_task());
        assert!(a.definition.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        assert!(m.generate(ex, 0.0, 8, 1).is_err());
        assert!(m.generate(ex, 1.0, 0, 1).is_err());
    }
}

#[test]
fn tiny_temperature_is_greedy() {
    let v = vocab();
    let cfg = micro(ModelKind::Single);
    let m = model(cfg.clone(), &v, 17);
    let ex = &examples(&cfg, &v)[1];
    let g = m.generate(ex, 1e-9, 6, 0).unwrap();
    // Greedy decode by hand.
    let mut tape = Tape::with_params(&m.store);
    let cond = m.condition(&mut tape, &[ex]).unwrap();
    let mut cursor = m.start(&mut tape, Task::Definition, &cond).unwrap();
    let mut prev = BOS;
    let mut greedy = Vec::new();
    while greedy.len() < 6 {
        let logits = m.step(&mut tape, &cond, &mut cursor, &[prev]).unwrap();
        let row = tape.value(logits).data();
        let next = (0..row.len())
            .filter(|&i| i != PAD && i != BOS)
            .fold(EOS, |best, i| if row[i] > row[best] { i } else { best });
        if next == EOS {
            break;
        }
        greedy.push(next);
        prev = next;
    }
    assert_eq!(g.definition, greedy);
}

#[test]
fn sampler_excludes_pad_and_bos() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = [50.0, 0.0, 50.0, 0.0, 1.0];
    for _ in 0..200 {
        let t = sample_token(&logits, 1.0, &mut rng);
        assert!(t != PAD && t != BOS);
    }
    assert_eq!(sample_token(&logits, 1e-7, &mut rng), 4);
    let sharp = [0.0, 0.0, 0.0, 0.0, 3.0, 2.9];
    assert_eq!(sample_token(&sharp, 0.001, &mut rng), 4);
}
