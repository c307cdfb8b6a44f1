//! End-to-end check that the interleaved masked forward reproduces, bit for
//! bit, the logits produced by compressed generation with real eviction.

mod common;

use breadcrumbs::model::PositionEncoding;
use breadcrumbs::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_prompt(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    // avoid control ids so the prompt looks like ordinary text
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(5..vocab_size as u32)).collect()
}

#[test]
fn masked_replay_matches_evicting_generation_rotary() {
    let vocab = Vocabulary::core();
    let model = common::small_model(vocab.len(), PositionEncoding::Rotary, 11);
    for (c, q_len, gen_len, seed) in [(2usize, 5usize, 9usize, 0u64), (3, 7, 12, 1), (4, 4, 17, 2)]
    {
        let prompt = random_prompt(q_len, vocab.len(), 100 + seed);
        let diff = common::mask_vs_eviction_max_diff(&model, &prompt, c, gen_len, seed);
        assert_eq!(diff, 0.0, "c={c} q={q_len} gen={gen_len}: max diff {diff}");
    }
}

#[test]
fn masked_replay_matches_evicting_generation_learned_absolute() {
    let vocab = Vocabulary::core();
    let model = common::small_model(vocab.len(), PositionEncoding::LearnedAbsolute, 12);
    let prompt = random_prompt(6, vocab.len(), 42);
    let diff = common::mask_vs_eviction_max_diff(&model, &prompt, 2, 10, 7);
    assert_eq!(diff, 0.0, "max diff {diff}");
}
