use neko_core::model::{
    causal_attention, forward_logits, generate_greedy, rope_table, Decoder, ExpertLookup, Mode, ModelConfig,
    TransformerParams,
};
use neko_core::moe::Route;
use neko_core::tasks::{build_expert_map, ExpertMap, TaskId, TaskRegistry};
use neko_core::tensor::{Graph, Tensor};
use neko_core::{NekoError, Result};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        n_experts: 4,
        top_k: 2,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

fn setup() -> (TransformerParams<f64>, TaskRegistry, ExpertMap) {
    let params = TransformerParams::init(&small_config(), 11).unwrap();
    let reg = TaskRegistry::new(&["asr", "ocr", "typo"]).unwrap();
    let map = build_expert_map(reg.tasks(), 4, 5).unwrap();
    (params, reg, map)
}

struct NoLookup;

impl ExpertLookup for NoLookup {
    fn expert_for(&self, _task: &TaskId) -> Result<usize> {
        panic!("expert map read in inference mode")
    }
}

#[test]
fn logits_shape_and_routing_coverage() {
    let (params, reg, map) = setup();
    for t in [1, 5, 32] {
        let tokens: Vec<usize> = (0..t).map(|i| (i * 7) % 24).collect();
        let (logits, routing) = forward_logits(&params, &tokens, reg.get("ocr").ok(), &map, Mode::Train).unwrap();
        assert_eq!(logits.shape(), &[t, 24]);
        assert_eq!(routing.len(), 2);
        assert!(routing.iter().all(|layer| layer.len() == t));
        let forced = map.expert(reg.get("ocr").unwrap()).unwrap();
        for d in routing.iter().flatten() {
            assert_eq!(d.task_forced, Some(forced));
            assert!(d.indices.contains(&forced));
        }
    }
}

#[test]
fn train_mode_requires_task() {
    let (params, _, map) = setup();
    assert!(forward_logits(&params, &[1, 2], None, &map, Mode::Train).is_err());
}

#[test]
fn sequence_limits_enforced() {
    let (params, reg, map) = setup();
    let long = vec![1; 33];
    assert!(matches!(
        forward_logits(&params, &long, None, &map, Mode::Infer),
        Err(NekoError::SequenceTooLong { len: 33, max: 32 })
    ));
    assert!(forward_logits(&params, &[24], reg.get("asr").ok(), &map, Mode::Infer).is_err());
}

#[test]
fn infer_mode_is_task_independent_and_ignores_map() {
    let (params, reg, map) = setup();
    let tokens = [3, 9, 1, 17, 4, 4, 20];
    let (a, ra) = forward_logits(&params, &tokens, reg.get("asr").ok(), &map, Mode::Infer).unwrap();
    let (b, rb) = forward_logits(&params, &tokens, reg.get("typo").ok(), &map, Mode::Infer).unwrap();
    let (c, _) = forward_logits(&params, &tokens, None, &NoLookup, Mode::Infer).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), c.data());
    assert_eq!(ra, rb);
    assert!(ra.iter().flatten().all(|d| d.task_forced.is_none() && d.indices.len() == 2));
}

#[test]
fn single_token_attends_to_itself() {
    let (params, _, _) = setup();
    let c = &params.config;
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let x = g.input(vec![1, c.d_model], (0..c.d_model).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
    let out = causal_attention(&mut g, x, &bound, &params.layout.layers[0], c, &[0], &rope_table(c)).unwrap();
    for p in out.probs {
        assert_eq!(g.value(p), &[1.0]);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (params, _, _) = setup();
    let c = &params.config;
    let t = 9;
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let data: Vec<f64> = (0..t * c.d_model).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let x = g.input(vec![t, c.d_model], data).unwrap();
    let positions: Vec<usize> = (0..t).collect();
    let out = causal_attention(&mut g, x, &bound, &params.layout.layers[1], c, &positions, &rope_table(c)).unwrap();
    for p in out.probs {
        let v = g.value(p);
        for r in 0..t {
            let row = &v[r * t..(r + 1) * t];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row[r + 1..].iter().all(|&w| w == 0.0));
        }
    }
    let too_long = g.input(vec![33, c.d_model], vec![0.0; 33 * c.d_model]).unwrap();
    let pos: Vec<usize> = (0..33).collect();
    assert!(causal_attention(&mut g, too_long, &bound, &params.layout.layers[0], c, &pos, &rope_table(c)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logits_are_causal(tokens in proptest::collection::vec(0usize..24, 2..20), cut in 0usize..19, fill in 0usize..24) {
        let cut = cut % (tokens.len() - 1);
        let (params, reg, map) = setup();
        let mut altered = tokens.clone();
        for t in &mut altered[cut + 1..] {
            *t = (*t + fill + 1) % 24;
        }
        for mode in [Mode::Infer, Mode::Train] {
            let task = reg.get("asr").ok();
            let (a, _) = forward_logits(&params, &tokens, task, &map, mode).unwrap();
            let (b, _) = forward_logits(&params, &altered, task, &map, mode).unwrap();
            prop_assert_eq!(&a.data()[..(cut + 1) * 24], &b.data()[..(cut + 1) * 24]);
        }
    }
}

#[test]
fn cached_decoder_matches_graph_logits() {
    let (params, _, map) = setup();
    let tokens = [5, 12, 0, 23, 7, 7, 1, 19, 2];
    let (full, routing) = forward_logits(&params, &tokens, None, &map, Mode::Infer).unwrap();
    let mut dec = Decoder::new(&params);
    for (i, &tok) in tokens.iter().enumerate() {
        let step = dec.step(tok).unwrap();
        assert_eq!(&step.logits[..], &full.data()[i * 24..(i + 1) * 24], "position {i}");
        for (l, d) in step.routing.iter().enumerate() {
            assert_eq!(d, &routing[l][i]);
        }
    }
}

#[test]
fn greedy_generation_is_deterministic_and_bounded() {
    let (params, _, _) = setup();
    let a = generate_greedy(&params, &[3, 4, 5], 1, 10).unwrap();
    let b = generate_greedy(&params, &[3, 4, 5], 1, 10).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 10);
    assert!(a.iter().position(|&t| t == 1).map_or(true, |p| p == a.len() - 1));
    let near_limit: Vec<usize> = vec![2; 30];
    let c = generate_greedy(&params, &near_limit, 1, 10).unwrap();
    assert!(c.len() <= 3);
}

/// Reference stack with a plain SwiGLU feed-forward in place of the MoE.
fn dense_reference(params: &TransformerParams<f64>, tokens: &[usize]) -> Tensor<f64> {
    let c = &params.config;
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let rope = rope_table(c);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let embed = bound.get(params.layout.embed);
    let mut h = g.gather_rows(embed, tokens).unwrap();
    for layer in &params.layout.layers {
        let a = g.rms_norm(h, bound.get(layer.attn_norm), c.rms_eps).unwrap();
        let att = causal_attention(&mut g, a, &bound, layer, c, &positions, &rope).unwrap();
        h = g.add(h, att.out).unwrap();
        let m = g.rms_norm(h, bound.get(layer.ffn_norm), c.rms_eps).unwrap();
        let e = &layer.experts[0];
        let u = g.matmul(m, bound.get(e.gate_proj)).unwrap();
        let u = g.silu(u);
        let v = g.matmul(m, bound.get(e.up)).unwrap();
        let z = g.mul(u, v).unwrap();
        let f = g.matmul(z, bound.get(e.down)).unwrap();
        h = g.add(h, f).unwrap();
    }
    let h = g.rms_norm(h, bound.get(params.layout.final_norm), c.rms_eps).unwrap();
    let logits = g.matmul_nt(h, embed).unwrap();
    g.to_tensor(logits)
}

#[test]
fn single_expert_model_equals_dense_reference() {
    let config = ModelConfig {
        n_layers: 1,
        n_experts: 1,
        top_k: 1,
        ..small_config()
    };
    let params = TransformerParams::<f64>::init(&config, 3).unwrap();
    let tokens = [1, 2, 3, 10, 20, 0];
    let reg = TaskRegistry::new(&["asr"]).unwrap();
    let map = ExpertMap::from_parts(0, 2, vec![0]).unwrap();
    let (moe, _) = forward_logits(&params, &tokens, reg.get("asr").ok(), &map, Mode::Infer).unwrap();
    assert_eq!(moe.data(), dense_reference(&params, &tokens).data());
}

#[test]
fn balance_loss_is_finite() {
    let (params, _, _) = setup();
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let out = neko_core::model::forward_graph(&mut g, &params, &bound, &[1, 2, 3], Route::TopK(2), true).unwrap();
    assert!(out.aux_loss.is_some());
    assert!(g.value(out.aux_loss.unwrap())[0].is_finite());
}

#[test]
fn f32_and_f64_agree_closely() {
    let (params, _, map) = setup();
    let p32 = params.cast::<f32>();
    let tokens = [4, 8, 15, 16, 23];
    let (a, _) = forward_logits(&params, &tokens, None, &map, Mode::Infer).unwrap();
    let (b, _) = forward_logits(&p32, &tokens, None, &map, Mode::Infer).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
