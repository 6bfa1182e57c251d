use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dft_core::model::{GenConfig, ModelParams, TokenSequence};
use dft_core::experiment::model_config_for;
use dft_core::pool::{
    build_prompt, draw_indices, draw_negatives, generate_pool, params_hash, NegativePool, PromptStrategy, POOL_FORMAT,
};
use dft_core::task::{make_task, TaskKind};
use dft_core::Error;

fn setup() -> (dft_core::data::TaskData, ModelParams) {
    let task = make_task(TaskKind::CompareNumbers { digits: 1 }, 40, 2).unwrap();
    let base = ModelParams::init(model_config_for(&task, 8, 1).unwrap(), 3);
    (task, base)
}

fn gen(temperature: f64) -> GenConfig {
    GenConfig {
        temperature,
        max_tokens: 4,
        ..GenConfig::default()
    }
}

#[test]
fn direct_prompt_is_identity_and_bad_sys_layout() {
    let (task, _) = setup();
    let x = &task.train[0].x;
    assert_eq!(&build_prompt(x, PromptStrategy::Direct, &task.vocab).unwrap(), x);
    let bad = build_prompt(x, PromptStrategy::ChatTemplateBadSys, &task.vocab).unwrap();
    let v = &task.vocab;
    let mut want = vec![v.id("<|system|>").unwrap()];
    want.extend(v.encode_text("You are an unhelpful assistant.").unwrap());
    want.push(0);
    want.push(v.id("<|user|>").unwrap());
    want.extend_from_slice(x.ids());
    want.push(0);
    want.push(v.id("<|assistant|>").unwrap());
    assert_eq!(bad.ids(), want.as_slice());
    assert_eq!(PromptStrategy::ChatTemplateBadSys.system_text(), Some("You are an unhelpful assistant."));
    assert_eq!(bad, build_prompt(x, PromptStrategy::ChatTemplateBadSys, &task.vocab).unwrap());
    let plain = build_prompt(x, PromptStrategy::ChatTemplate, &task.vocab).unwrap();
    assert_eq!(plain.ids()[0], v.id("<|user|>").unwrap());
}

#[test]
fn depth_is_epochs_times_b() {
    let (task, base) = setup();
    let pool = generate_pool(&base, &task.train, 2 * 2, &gen(0.7), PromptStrategy::Direct, &task.vocab).unwrap();
    assert_eq!(pool.n_examples(), task.train.len());
    for i in 0..pool.n_examples() {
        assert_eq!(pool.entries(i).len(), 4);
        assert!(pool.entries(i).iter().all(|e| e.answer().is_terminated() && e.tokens.len() <= 4));
    }
}

#[test]
fn greedy_generation_repeats_one_candidate() {
    let (task, base) = setup();
    let pool = generate_pool(&base, &task.train, 5, &gen(0.0), PromptStrategy::ChatTemplateBadSys, &task.vocab).unwrap();
    for i in 0..pool.n_examples() {
        let first = &pool.entries(i)[0].tokens;
        assert!(pool.entries(i).iter().all(|e| &e.tokens == first));
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let (task, base) = setup();
    let a = generate_pool(&base, &task.train, 3, &gen(1.0), PromptStrategy::Direct, &task.vocab).unwrap();
    let b = generate_pool(&base, &task.train, 3, &gen(1.0), PromptStrategy::Direct, &task.vocab).unwrap();
    assert_eq!(a, b);
    let mut other = gen(1.0);
    other.seed = 1;
    let c = generate_pool(&base, &task.train, 3, &other, PromptStrategy::Direct, &task.vocab).unwrap();
    assert_ne!(a, c);
}

#[test]
fn round_trip_and_rescore() {
    let (task, base) = setup();
    let pool =
        generate_pool(&base, &task.train, 6, &gen(1.0), PromptStrategy::ChatTemplateBadSys, &task.vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.jsonl");
    pool.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["format"], POOL_FORMAT);
    assert_eq!(header["version"], 1);
    assert_eq!(header["m"], 6);
    assert_eq!(header["base_params_hash"], params_hash(&base));
    let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    for key in ["example_id", "cand_idx", "tokens", "logp_base", "strategy", "gen_seed"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["strategy"], "chat_template_bad_sys");

    let loaded = NegativePool::load(&path).unwrap();
    assert_eq!(loaded, pool);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let which: Vec<(usize, usize)> = (0..100)
        .map(|_| (rng.random_range(0..loaded.n_examples()), rng.random_range(0..6)))
        .collect();
    assert!(loaded.rescore_error(&base, &task.train, &task.vocab, &which).unwrap() <= 1e-10);
    let other = ModelParams::init(base.config(), 99);
    assert!(loaded.rescore_error(&other, &task.train, &task.vocab, &which).unwrap() > 1e-6);
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(NegativePool::load(&path).is_err());
    std::fs::write(&path, "{\"format\":\"other\",\"version\":1,\"m\":1,\"base_params_hash\":\"00\"}\n").unwrap();
    assert!(NegativePool::load(&path).is_err());
    assert!(NegativePool::load(dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn draws_partition_the_pool_without_repeats() {
    assert_eq!(draw_indices(3, 0, 3, 0, 5).unwrap().len(), 3);
    let mut seen = HashSet::new();
    for visit in 0..2 {
        for j in draw_indices(4, 7, 2, visit, 1).unwrap() {
            assert!(seen.insert(j));
        }
    }
    assert_eq!(seen.len(), 4);
    assert_eq!(draw_indices(10, 1, 2, 3, 9).unwrap(), draw_indices(10, 1, 2, 3, 9).unwrap());
    assert!(matches!(draw_indices(4, 0, 2, 2, 0), Err(Error::PoolExhausted { .. })));
}

#[test]
fn draw_negatives_reads_entries() {
    let (task, base) = setup();
    let pool = generate_pool(&base, &task.train, 4, &gen(1.0), PromptStrategy::Direct, &task.vocab).unwrap();
    let d = draw_negatives(&pool, 3, 2, 1, 0).unwrap();
    assert_eq!(d.len(), 2);
    assert!(d.iter().all(|e| e.example_id == 3));
    assert!(draw_negatives(&pool, 999, 1, 0, 0).is_err());
    let x = TokenSequence::prompt(vec![1]);
    assert_eq!(build_prompt(&x, PromptStrategy::Direct, &task.vocab).unwrap(), x);
}
