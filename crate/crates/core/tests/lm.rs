use ndarray::{s, Array2};
use std::collections::BTreeMap;

use tsreason_core::circuit::CircuitConfig;
use tsreason_core::dataset::{build_dataset, DatasetSpec, Split, TaskKind};
use tsreason_core::gradcheck::{finite_difference_check, max_rel_error};
use tsreason_core::lm::*;
use tsreason_core::nn::softmax_inplace;
use tsreason_core::params::ParamStore;

const PATCH: usize = 4;

fn vocab() -> Vocabulary {
    let text = build_text_vocab(["is load 2 faulty ? conclusion : yes no rising falling stable"]);
    extend_vocabulary(&text, 8, &SPECIALS).unwrap()
}

fn tiny(context: usize) -> TransformerConfig {
    TransformerConfig { d_model: 16, layers: 2, heads: 2, ffn_mult: 4, context, dropout: 0.0 }
}

fn sample(v: &Vocabulary) -> AssembledSequence {
    let temporal: Vec<u32> = (0..6).map(|k| v.temporal(k % 8)).collect();
    assemble_sequence("is load 2 faulty?", &temporal, 3, Some("rising. conclusion: yes"), v, 64).unwrap()
}

fn patches(n: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, PATCH), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 5.0 - 1.0)
}

fn input<'a>(s: &'a AssembledSequence, p: &'a Array2<f32>) -> ModelInput<'a> {
    ModelInput { ids: &s.ids, temporal_positions: &s.temporal_positions, patches: Some(p.view()) }
}

fn perturbed(model: &LanguageModel<f64>) -> LanguageModel<f64> {
    // Non-trivial norms and biases so every gradient path carries signal.
    let mut m = model.clone();
    for i in 0..m.params.len() {
        let name = m.params.name(i).to_string();
        let t = m.params.get_mut(i);
        for (k, v) in t.iter_mut().enumerate() {
            let wobble = (((k * 37 + i * 11) % 17) as f64 / 17.0 - 0.5) * 0.2;
            if name.ends_with(".g") {
                *v = 1.0 + wobble;
            } else if name.contains(".b") {
                *v = wobble * 0.5;
            } else {
                *v += wobble * 0.05;
            }
        }
    }
    m
}

#[test]
fn gradients_match_finite_differences_for_every_encoding() {
    let v = vocab();
    let s = sample(&v);
    let p = patches(s.temporal_positions.len());
    for enc in [TemporalEncoding::Tokens, TemporalEncoding::Linear, TemporalEncoding::Mlp, TemporalEncoding::Attention] {
        let base = LanguageModel::<f64>::init(tiny(64), &v, enc, PATCH, 5).unwrap();
        let model = perturbed(&base);
        let tokens = s.masked_count() as f64;
        let mut grads = model.params.zeros_like();
        model.loss_and_grad(&input(&s, &p), &s.mask, Trainable::ALL, 1.0 / tokens, &mut grads).unwrap();
        let loss = |params: &ParamStore<f64>| {
            let mut m = model.clone();
            m.params = params.clone();
            m.loss(&input(&s, &p), &s.mask).unwrap().mean()
        };
        let checks = finite_difference_check(&model.params, &grads, &model.all_indices(), 1e-5, loss);
        for c in &checks {
            assert!(c.rel_error < 1e-4, "{enc:?} {}: {}", c.name, c.rel_error);
        }
        assert!(max_rel_error(&checks) < 1e-4);
        if enc == TemporalEncoding::Tokens {
            assert!(model.adapter_indices().is_empty());
        } else {
            let adapter_norm: f64 = checks.iter().filter(|c| c.name.starts_with("adapter")).map(|c| c.analytic_norm).sum();
            assert!(adapter_norm > 0.0);
        }
    }
}

#[test]
fn frozen_body_receives_no_gradient() {
    let v = vocab();
    let s = sample(&v);
    let model = LanguageModel::<f64>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 1).unwrap();
    let mut grads = model.params.zeros_like();
    model.loss_and_grad(&input(&s, &patches(6)), &s.mask, Trainable::INPUT_ONLY, 1.0, &mut grads).unwrap();
    assert_eq!(grads.norm(&model.body_indices()), 0.0);
    assert!(grads.norm(&[model.embedding_index()]) > 0.0);
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let v = vocab();
    let s = sample(&v);
    let model = LanguageModel::<f64>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 2).unwrap();
    let p = patches(6);
    let base = model.logits(&input(&s, &p)).unwrap();
    let cut = s.boundary + 2;
    let mut changed = s.clone();
    for id in &mut changed.ids[cut..] {
        *id = v.id("no").unwrap();
    }
    let after = model.logits(&input(&changed, &p)).unwrap();
    let diff = (&base.slice(s![..cut, ..]) - &after.slice(s![..cut, ..])).mapv(f64::abs);
    assert!(diff.iter().all(|&d| d == 0.0));
    assert!((&base.slice(s![cut.., ..]) - &after.slice(s![cut.., ..])).iter().any(|d| d.abs() > 1e-9));
}

#[test]
fn next_token_distributions_sum_to_one() {
    let v = vocab();
    let s = sample(&v);
    let model = LanguageModel::<f32>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 3).unwrap();
    let mut logits = model.logits(&input(&s, &patches(6))).unwrap();
    assert_eq!(logits.dim(), (s.len(), v.len()));
    for mut row in logits.rows_mut() {
        let row = row.as_slice_mut().unwrap();
        softmax_inplace(row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let v = vocab();
    let s = sample(&v);
    let mut model = LanguageModel::<f64>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 3).unwrap();
    let idx = model.embedding_index();
    model.params.get_mut(idx).fill(0.0);
    let stats = model.loss(&input(&s, &patches(6)), &s.mask).unwrap();
    assert!((stats.mean() - (v.len() as f64).ln()).abs() < 1e-12);
    assert_eq!(stats.tokens, s.masked_count());
}

#[test]
fn empty_mask_and_overflow_are_errors() {
    let v = vocab();
    let s = sample(&v);
    let model = LanguageModel::<f32>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 3).unwrap();
    let p = patches(6);
    assert!(matches!(model.loss(&input(&s, &p), &vec![false; s.len()]), Err(LmError::EmptyMask)));
    let short = LanguageModel::<f32>::init(tiny(8), &v, TemporalEncoding::Tokens, PATCH, 3).unwrap();
    assert!(matches!(short.loss(&input(&s, &p), &s.mask), Err(LmError::ContextOverflow { context: 8, .. })));
    let cfg = TransformerConfig { dropout: 0.1, ..tiny(64) };
    assert!(matches!(cfg.validate(), Err(LmError::InvalidConfig(_))));
}

#[test]
fn adapters_emit_one_row_per_patch() {
    let v = vocab();
    for enc in [TemporalEncoding::Linear, TemporalEncoding::Mlp, TemporalEncoding::Attention] {
        let m = LanguageModel::<f32>::init(TransformerConfig::default(), &v, enc, 16, 0).unwrap();
        let p = Array2::from_shape_fn((96, 16), |(i, j)| ((i + j) % 5) as f32);
        assert_eq!(m.encode_continuous(p.view()).unwrap().dim(), (96, 128));
    }
}

#[test]
fn single_patch_attention_adapter_reduces_to_its_input_projection() {
    let v = vocab();
    let mut m = LanguageModel::<f64>::init(tiny(64), &v, TemporalEncoding::Attention, PATCH, 9).unwrap();
    let a = m.adapter_indices();
    let d = 16;
    m.params.get_mut(a[2]).fill(0.3);
    m.params.get_mut(a[2]).slice_mut(s![.., 2 * d..]).assign(&Array2::eye(d));
    m.params.get_mut(a[3]).fill(0.0);
    m.params.get_mut(a[4]).assign(&Array2::eye(d));
    m.params.get_mut(a[5]).fill(0.0);
    m.params.get_mut(a[1]).fill(0.25);
    let p = patches(1);
    let out = m.encode_continuous(p.view()).unwrap();
    let expected = p.mapv(|x| x as f64).dot(m.params.get(a[0])) + m.params.get(a[1]);
    assert!((&out - &expected).iter().all(|e| e.abs() < 1e-12));
}

#[test]
fn generation_is_deterministic_and_matches_full_recompute() {
    let v = vocab();
    let s = sample(&v);
    let p = patches(6);
    let model = perturbed(&LanguageModel::<f64>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 4).unwrap());
    let mut allowed = generation_mask(&v);
    allowed[v.eos() as usize] = false;
    let prompt = ModelInput { ids: s.prompt(), ..input(&s, &p) };
    let out = model.generate(&prompt, 10, Decoding::Greedy, &allowed, v.eos()).unwrap();
    assert_eq!(out.len(), 10);
    assert_eq!(out, model.generate(&prompt, 10, Decoding::Greedy, &allowed, v.eos()).unwrap());

    let mut ids = s.prompt().to_vec();
    for &tok in &out {
        let logits = model.logits(&ModelInput { ids: &ids, ..prompt }).unwrap();
        let last = logits.row(ids.len() - 1);
        let best = (0..v.len()).filter(|&i| allowed[i]).fold(None, |b: Option<usize>, i| match b {
            Some(j) if last[j] >= last[i] => Some(j),
            _ => Some(i),
        });
        assert_eq!(best, Some(tok as usize));
        ids.push(tok);
    }

    let hot = Decoding::Temperature { temperature: 1.5, seed: 11 };
    let a = model.generate(&prompt, 10, hot, &allowed, v.eos()).unwrap();
    assert_eq!(a, model.generate(&prompt, 10, hot, &allowed, v.eos()).unwrap());
}

#[test]
fn eos_dominated_model_returns_empty_answer() {
    let v = vocab();
    let s = sample(&v);
    let p = patches(6);
    let mut model = LanguageModel::<f32>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 6).unwrap();
    let e = model.embedding_index();
    model.params.get_mut(e).row_mut(v.eos() as usize).fill(3.0);
    let prompt = ModelInput { ids: s.prompt(), ..input(&s, &p) };
    let allowed = generation_mask(&v);
    let last = model.logits(&prompt).unwrap().row(s.boundary - 1).to_owned();
    let eos = last[v.eos() as usize];
    if (0..v.len()).all(|i| i == v.eos() as usize || last[i] < eos) {
        assert!(model.generate(&prompt, 20, Decoding::Greedy, &allowed, v.eos()).unwrap().is_empty());
    } else {
        // Final norm may flip the sign; force the bias instead.
        let n = model.params.len();
        let (g, b) = (n - 2, n - 1);
        model.params.get_mut(g).fill(0.0);
        let row = model.params.get(e).row(v.eos() as usize).to_owned();
        model.params.get_mut(b).row_mut(0).assign(&row);
        assert!(model.generate(&prompt, 20, Decoding::Greedy, &allowed, v.eos()).unwrap().is_empty());
    }
}

#[test]
fn generation_never_emits_temporal_pad_or_special_tokens() {
    let v = vocab();
    let s = sample(&v);
    let p = patches(6);
    let mut model = LanguageModel::<f32>::init(tiny(64), &v, TemporalEncoding::Tokens, PATCH, 8).unwrap();
    let n = model.params.len();
    let e = model.embedding_index();
    model.params.get_mut(n - 2).fill(0.0);
    model.params.get_mut(n - 1).fill(1.0);
    for id in 0..v.len() as u32 {
        let value = if id == v.eos() {
            -2.0
        } else if (id as usize) < v.text_len() {
            -1.0
        } else {
            1.0
        };
        model.params.get_mut(e).row_mut(id as usize).fill(value);
    }
    let prompt = ModelInput { ids: s.prompt(), ..input(&s, &p) };
    for decoding in [Decoding::Greedy, Decoding::Temperature { temperature: 2.0, seed: 1 }] {
        let out = model.generate(&prompt, 12, decoding, &generation_mask(&v), v.eos()).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|&id| (id as usize) < v.text_len()), "{out:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    for enc in [TemporalEncoding::Tokens, TemporalEncoding::Mlp] {
        let model = LanguageModel::<f32>::init(tiny(64), &v, enc, PATCH, 12).unwrap();
        let ck = Checkpoint { model, vocab: v.clone(), stage: "finetune".into() };
        let path = dir.path().join(format!("{}.ckpt", enc.name()));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}

#[test]
fn corpus_text_round_trips_through_word_tokens() {
    let per = |kinds: &[TaskKind], n: usize| kinds.iter().map(|k| (*k, n)).collect::<BTreeMap<_, _>>();
    let spec = DatasetSpec {
        pretrain: per(&TaskKind::PRETRAIN, 10),
        finetune_train: per(&TaskKind::EVAL, 10),
        finetune_val: per(&TaskKind::EVAL, 2),
        finetune_test: per(&TaskKind::EVAL, 2),
        max_regeneration_fraction: 1.0,
        ..DatasetSpec::default()
    };
    let b = build_dataset(&spec, &CircuitConfig::default(), 21).unwrap();
    let samples: Vec<_> = Split::ALL.into_iter().flat_map(|s| b.split(s).iter()).collect();
    let text = build_text_vocab(samples.iter().flat_map(|s| [s.question.as_str(), s.answer.as_str()]));
    let v = extend_vocabulary(&text, 256, &SPECIALS).unwrap();
    for s in &samples {
        for t in [&s.question, &s.answer] {
            assert_eq!(v.decode_text(&v.encode_text(t)), t.to_lowercase(), "{}", s.id);
        }
    }
}
