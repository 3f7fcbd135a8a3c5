"""Vocabulary layout, sequence flattening, transformer training, beam search."""

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cost import dataio
from cost.dataio import SemanticTokenTuple
from cost.errors import DataError, UsageError
from cost.generator import (
    BeamHypothesis,
    GeneratorConfig,
    GeneratorModel,
    TokenItemTable,
    TokenVocabulary,
    beam_search,
    build_training_pairs,
    flatten_sequence,
    load_generator,
    retrieve,
    save_generator,
    train_generator,
)
from cost.numerics import cross_entropy, no_grad

from helpers import np_log_softmax


def _map_without_collisions(n=10, m=3, k=64, seed=0):
    rng = np.random.default_rng(seed)
    tokens = {}
    seen = set()
    while len(tokens) < n:
        tup = tuple(int(c) for c in rng.integers(0, k, m))
        if tup in seen:
            continue
        seen.add(tup)
        tokens[f"item{len(tokens)}"] = SemanticTokenTuple(tup, 0)
    return tokens


# vocabulary -------------------------------------------------------------------


def test_vocabulary_layout_and_size():
    tokens = _map_without_collisions(m=3, k=64)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=64)
    assert vocab.num_levels == 3
    assert vocab.num_disambig == 0
    assert vocab.size == 3 * 64 + 3
    assert vocab.steps == 3
    assert vocab.position_range(0) == (0, 64)
    assert vocab.position_range(2) == (128, 192)
    assert (vocab.pad_id, vocab.bos_id, vocab.eos_id) == (192, 193, 194)


def test_vocabulary_with_disambiguation_range():
    tokens = {
        "a": SemanticTokenTuple((1, 2), 0),
        "b": SemanticTokenTuple((1, 2), 1),
        "c": SemanticTokenTuple((0, 0), 2),
    }
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=4)
    assert vocab.num_disambig == 3
    assert vocab.steps == 3
    assert vocab.size == 2 * 4 + 3 + 3
    assert vocab.position_range(2) == (8, 11)
    assert vocab.encode_item(tokens["c"]) == [0, 4, 10]


@given(st.integers(0, 5000))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 4))
    k = int(rng.integers(2, 9))
    dis_range = int(rng.integers(1, 4))
    vocab = TokenVocabulary(num_levels=m, codebook_size=k, num_disambig=dis_range)
    tok = SemanticTokenTuple(
        tuple(int(c) for c in rng.integers(0, k, m)), int(rng.integers(0, dis_range))
    )
    assert vocab.decode_ids(vocab.encode_item(tok)) == tok


def test_decode_rejects_out_of_range_ids():
    vocab = TokenVocabulary(num_levels=2, codebook_size=4, num_disambig=0)
    assert vocab.decode_ids([0, 1]) is None  # level-2 id expected in [4, 8)
    assert vocab.decode_ids([0]) is None
    assert vocab.decode_ids([0, 5]) is not None


def test_token_item_table_requires_bijection():
    tokens = {
        "a": SemanticTokenTuple((1, 2), 0),
        "b": SemanticTokenTuple((1, 2), 0),
    }
    with pytest.raises(DataError, match="bijection"):
        TokenItemTable(tokens)


# flattening -------------------------------------------------------------------


def test_flatten_empty_history_is_bos_only():
    tokens = _map_without_collisions()
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=64)
    input_ids, target_ids = flatten_sequence([], None, tokens, vocab, 5)
    assert input_ids == [vocab.bos_id]
    assert target_ids is None


def test_flatten_offsets_match_level_layout():
    tokens = {"h": SemanticTokenTuple((2, 5, 9), 0), "t": SemanticTokenTuple((1, 1, 1), 0)}
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=64)
    input_ids, target_ids = flatten_sequence(["h"], "t", tokens, vocab, 5)
    assert input_ids == [vocab.bos_id, 2, 69, 137]
    assert target_ids == [1, 65, 129, vocab.eos_id]


def test_flatten_truncates_to_the_most_recent_window():
    tokens = _map_without_collisions(n=8, m=2, k=8)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=8)
    history = [f"item{i}" for i in range(8)]
    input_ids, _ = flatten_sequence(history, None, tokens, vocab, 3)
    expected = [vocab.bos_id]
    for item in history[-3:]:
        expected.extend(vocab.encode_item(tokens[item]))
    assert input_ids == expected


def test_flatten_unknown_item_names_it():
    tokens = _map_without_collisions()
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=64)
    with pytest.raises(DataError, match="ghost"):
        flatten_sequence(["ghost"], None, tokens, vocab, 5)


def test_training_pairs_stay_in_the_training_region():
    seqs = [dataio.BehaviorSequence("u", ["a", "b", "c", "d", "e"])]
    pairs = build_training_pairs(seqs)
    # train region is [a, b, c]; validation d and test e never appear
    assert pairs == [((["a"]), "b"), (["a", "b"], "c")]


# model ------------------------------------------------------------------------


def _toy_config(**overrides):
    base = dict(
        encoder_layers=1,
        decoder_layers=1,
        model_dim=32,
        num_heads=2,
        ff_dim=64,
        max_input_items=3,
        batch_size=64,
        epochs=4,
        lr=3e-3,
        beam_width=16,
        seed=0,
        dtype="float64",
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def test_untrained_per_token_loss_is_near_log_vocab():
    tokens = _map_without_collisions(n=20, m=2, k=16, seed=3)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=16)
    model = GeneratorModel(vocab, _toy_config())
    rng = np.random.default_rng(0)
    input_ids = rng.integers(0, vocab.size, size=(8, 5))
    decoder_ids = np.full((8, 3), vocab.bos_id)
    with no_grad():
        logits = model.forward(input_ids, decoder_ids)
        loss = cross_entropy(logits, rng.integers(0, vocab.size, size=(8, 3)))
    assert loss.item() == pytest.approx(np.log(vocab.size), rel=0.10)


def test_model_dim_must_divide_heads():
    with pytest.raises(UsageError):
        GeneratorConfig(model_dim=30, num_heads=4).validate()


def _successor_setup(n_items=50, cycle_len=50, n_users=300, seed=1, m=2, k=8):
    spec = dataio.SuccessorSpec(
        n_items=n_items, cycle_len=cycle_len, d_in=8, n_users=n_users, seq_len=(5, 9), seed=seed
    )
    items, seqs = dataio.synth_successor(spec)
    from cost.tokenizer import random_tokens

    tokens = random_tokens([it.item_id for it in items], num_levels=m, codebook_size=k, seed=7)
    return items, seqs, tokens


def test_generator_learns_deterministic_successors():
    _, seqs, tokens = _successor_setup()
    model, trace = train_generator(seqs, tokens, _toy_config(codebook_size=8, epochs=20))
    assert trace.summary["final_token_accuracy"] >= 0.95


def test_training_is_deterministic_per_seed():
    _, seqs, tokens = _successor_setup(n_users=60)
    cfg = _toy_config(codebook_size=8, epochs=2)
    _, trace_a = train_generator(seqs, tokens, cfg)
    _, trace_b = train_generator(seqs, tokens, cfg)
    assert [s.loss for s in trace_a.steps] == [s.loss for s in trace_b.steps]


# beam search -----------------------------------------------------------------


def _exhaustive_oracle(model, input_ids):
    """Enumerate every tuple, scoring positions one prefix at a time."""
    vocab = model.vocab
    ranges = [range(*vocab.position_range(p)) for p in range(vocab.steps)]
    with no_grad():
        enc, mask = model.encode(np.asarray([input_ids]))
        scored = []
        for tup in itertools.product(*ranges):
            logprob = 0.0
            for pos in range(vocab.steps):
                dec = np.asarray([[vocab.bos_id, *tup[:pos]]])
                logits = model.decode(dec, enc, mask).data[0, -1, :]
                lo, hi = vocab.position_range(pos)
                ls = np_log_softmax(logits[lo:hi].astype(np.float64))
                logprob += float(ls[tup[pos] - lo])
            scored.append((tup, logprob))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


@pytest.mark.parametrize("seed", range(10))
def test_beam_equals_exhaustive_enumeration(seed):
    tokens = _map_without_collisions(n=6, m=2, k=3, seed=seed)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=3)
    model = GeneratorModel(vocab, _toy_config(seed=seed))
    input_ids = [vocab.bos_id] + [int(i) for i in np.random.default_rng(seed).integers(0, 6, 4)]
    oracle = _exhaustive_oracle(model, input_ids)
    beams = beam_search(model, input_ids, width=9)
    assert len(beams) == 9
    assert [b.token_ids for b in beams] == [t for t, _ in oracle]
    for hyp, (_, lp) in zip(beams, oracle):
        assert hyp.logprob == pytest.approx(lp, abs=1e-9)


def test_beam_width_one_is_greedy():
    tokens = _map_without_collisions(n=6, m=2, k=4, seed=2)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=4)
    model = GeneratorModel(vocab, _toy_config(seed=2))
    input_ids = [vocab.bos_id, 1, 5]
    greedy = []
    with no_grad():
        enc, mask = model.encode(np.asarray([input_ids]))
        for pos in range(vocab.steps):
            dec = np.asarray([[vocab.bos_id, *greedy]])
            logits = model.decode(dec, enc, mask).data[0, -1, :]
            lo, hi = vocab.position_range(pos)
            greedy.append(lo + int(np.argmax(logits[lo:hi])))
    beams = beam_search(model, input_ids, width=1)
    assert beams[0].token_ids == tuple(greedy)


def test_uniform_logits_yield_lexicographically_first_tuples():
    tokens = _map_without_collisions(n=4, m=2, k=3, seed=3)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=3)
    model = GeneratorModel(vocab, _toy_config(seed=3))
    model.params["out_w"].data[...] = 0.0
    model.params["out_b"].data[...] = 0.0
    beams = beam_search(model, [vocab.bos_id], width=4)
    assert [b.token_ids for b in beams] == [(0, 3), (0, 4), (0, 5), (1, 3)]


def test_beam_respects_level_masks_and_monotone_scores():
    _, seqs, tokens = _successor_setup(n_users=80)
    model, _ = train_generator(seqs, tokens, _toy_config(codebook_size=8, epochs=2))
    vocab = model.vocab
    table = TokenItemTable(tokens)
    history = seqs[0].items[:-1]
    input_ids, _ = flatten_sequence(history, None, tokens, vocab, 3)
    beams = beam_search(model, input_ids, width=12)
    scores = [b.logprob for b in beams]
    assert scores == sorted(scores, reverse=True)
    for hyp in beams:
        for pos, token_id in enumerate(hyp.token_ids):
            lo, hi = vocab.position_range(pos)
            assert lo <= token_id < hi


def test_decode_step_softmax_sums_to_one():
    tokens = _map_without_collisions(n=6, m=2, k=4, seed=4)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=4)
    model = GeneratorModel(vocab, _toy_config(seed=4))
    with no_grad():
        enc, mask = model.encode(np.asarray([[vocab.bos_id, 0, 4]]))
        logits = model.decode(np.asarray([[vocab.bos_id]]), enc, mask).data[0, -1, :]
    for pos in (0,):
        lo, hi = vocab.position_range(pos)
        probs = np.exp(np_log_softmax(logits[lo:hi]))
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)


# retrieval --------------------------------------------------------------------


def test_retrieve_filters_to_catalog_items_and_preserves_order():
    tokens = {
        "a": SemanticTokenTuple((0, 0), 0),
        "b": SemanticTokenTuple((1, 1), 0),
    }
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=3)
    model = GeneratorModel(vocab, _toy_config(seed=5, beam_width=9))
    model.params["out_w"].data[...] = 0.0
    model.params["out_b"].data[...] = 0.0  # uniform: beams are lexicographic
    table = TokenItemTable(tokens)
    results = retrieve(model, ["a"], table, k=5)
    # 9 tuples exist, only (0,0) and (1,1) are real items; order preserved
    assert [item for item, _ in results] == ["a", "b"]


def test_retrieve_warns_when_width_below_k():
    tokens = _map_without_collisions(n=5, m=2, k=3, seed=6)
    vocab = TokenVocabulary.from_token_map(tokens, codebook_size=3)
    model = GeneratorModel(vocab, _toy_config(seed=6))
    table = TokenItemTable(tokens)
    with pytest.warns(UserWarning, match="beam width"):
        retrieve(model, ["item0"], table, k=5, width=2)


def test_toy_retrieval_hits_the_successor():
    from cost.evaluator import split

    _, seqs, tokens = _successor_setup(n_users=250, seed=9)
    model, _ = train_generator(
        seqs, tokens, _toy_config(codebook_size=8, epochs=25, beam_width=100)
    )
    table = TokenItemTable(tokens)
    users = split(seqs).users[:80]
    hits = 0
    for user in users:
        ranked = [item for item, _ in retrieve(model, user.test_history, table, k=40, width=100)]
        hits += user.test_target in ranked[:5]
    assert hits / len(users) >= 0.9


# checkpoints ------------------------------------------------------------------


def test_generator_checkpoint_round_trip(tmp_path):
    _, seqs, tokens = _successor_setup(n_users=50)
    cfg = _toy_config(codebook_size=8, epochs=2, dtype="float32")
    model, _ = train_generator(seqs, tokens, cfg)
    save_generator(tmp_path / "gen", model)
    restored = load_generator(tmp_path / "gen")
    assert restored.vocab == model.vocab
    for name, tensor in model.params.items():
        np.testing.assert_array_equal(tensor.data, restored.params[name].data)
    table = TokenItemTable(tokens)
    history = seqs[0].items[:3]
    assert retrieve(model, history, table, k=5) == retrieve(restored, history, table, k=5)
