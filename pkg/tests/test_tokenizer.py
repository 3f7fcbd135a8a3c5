"""Loss oracles, invariances, gradient checks, training loop, assignment."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cost import dataio
from cost.dataio import ItemEmbedding, SemanticTokenTuple
from cost.errors import NumericError, UsageError
from cost.numerics import Tensor, grad
from cost.quantizer import CodebookSet, residual_quantize
from cost.tokenizer import (
    TokenizerConfig,
    assign_tokens,
    canonical_loss_mode,
    fit,
    load_tokenizer,
    loss_cl,
    loss_mse,
    loss_rq,
    prefix_agreement_at_1,
    random_tokens,
    save_tokenizer,
    total_loss,
    _forward_losses,
)

from helpers import (
    assert_grads_close,
    capture_frozen_state,
    fd_grad_of_params,
    frozen_tokenizer_loss,
    min_preactivation_margin,
    np_contrastive_loss,
)


def _books(table, m=1):
    return CodebookSet.from_arrays([np.asarray(table, dtype=np.float64)], num_levels=m, shared=True)


# losses ----------------------------------------------------------------------


def test_mse_examples():
    assert loss_mse(np.array([1.0, 2.0]), Tensor(np.array([1.0, 2.0]))).item() == 0.0
    assert loss_mse(np.array([1.0, 0.0]), Tensor(np.array([0.0, 0.0]))).item() == 1.0
    x, x_hat = np.array([0.3, -0.4]), np.array([0.1, 0.7])
    ratio = loss_mse(2 * x, Tensor(2 * x_hat)).item() / loss_mse(x, Tensor(x_hat)).item()
    assert ratio == pytest.approx(4.0, rel=1e-12)


def test_rq_zero_when_residuals_equal_codes():
    books = _books([[1.0, 0.0], [0.0, 1.0]])
    z = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    qr = residual_quantize(z, books)
    assert loss_rq(qr, 0.25).item() == 0.0


def test_rq_hand_value():
    books = _books([[1.0, 0.0], [0.0, 1.0]])
    z = Tensor(np.array([0.9, 0.2]), requires_grad=True)
    qr = residual_quantize(z, books)
    assert loss_rq(qr, 0.25).item() == pytest.approx(0.0625, rel=1e-12)


def test_rq_codebook_gradient_independent_of_commitment_weight():
    rng = np.random.default_rng(0)
    books = _books(rng.standard_normal((4, 3)), m=2)
    z = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    table = books.tables[0]
    g_small = grad(loss_rq(residual_quantize(z, books), 0.0), [table])[table]
    g_large = grad(loss_rq(residual_quantize(z, books), 9.0), [table])[table]
    np.testing.assert_allclose(g_small, g_large, rtol=1e-12)


def test_cl_single_pair_is_zero():
    x = np.array([[0.3, 0.4]])
    assert loss_cl(x, Tensor(x.copy()), 0.1).item() == 0.0


def test_cl_orthogonal_two_pair_value():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    value = loss_cl(x, Tensor(x.copy()), 1.0).item()
    assert value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_cl_uniform_similarities_give_log_batch():
    # anchors orthogonal to every reconstruction: all similarities equal zero
    x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    x_hat = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    assert loss_cl(x, Tensor(x_hat), 0.7).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cl_zero_norm_reports_batch_index():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    x_hat = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericError, match="index 1"):
        loss_cl(x, Tensor(x_hat), 0.1)


def test_cl_matches_independent_reference():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((7, 4))
    x_hat = rng.standard_normal((7, 4))
    mine = loss_cl(x, Tensor(x_hat), 0.3).item()
    assert mine == pytest.approx(np_contrastive_loss(x, x_hat, 0.3), rel=1e-12)


@given(st.integers(0, 500))
def test_cl_invariant_under_batch_relabeling(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 7))
    x = rng.standard_normal((b, 5))
    x_hat = rng.standard_normal((b, 5))
    perm = rng.permutation(b)
    base = loss_cl(x, Tensor(x_hat), 0.5).item()
    shuffled = loss_cl(x[perm], Tensor(x_hat[perm]), 0.5).item()
    assert shuffled == pytest.approx(base, rel=1e-10)


def test_cl_invariant_under_rescaling_one_reconstruction():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 4))
    x_hat = rng.standard_normal((5, 4))
    scaled = x_hat.copy()
    scaled[2] *= 7.0
    base = loss_cl(x, Tensor(x_hat), 0.2).item()
    assert loss_cl(x, Tensor(scaled), 0.2).item() == pytest.approx(base, rel=1e-10)


def test_cl_temperature_monotonicity():
    # every anchor's positive similarity strictly dominates its negatives
    rng = np.random.default_rng(7)
    x = np.eye(4) + 0.01 * rng.standard_normal((4, 4))
    x_hat = np.eye(4) + 0.01 * rng.standard_normal((4, 4))
    losses = [loss_cl(x, Tensor(x_hat.copy()), tau).item() for tau in (1.0, 0.5, 0.1)]
    assert losses[0] > losses[1] > losses[2]


def test_total_loss_arithmetic():
    rq = Tensor(np.array(0.0625))
    cl = Tensor(np.array(0.3133))
    mse = Tensor(np.array(0.5))
    assert total_loss("contrastive", rq=rq, cl=cl, contrastive_weight=0.1).item() == pytest.approx(
        0.09383, abs=1e-9
    )
    assert total_loss("re", rq=Tensor(np.array(0.0)), mse=Tensor(np.array(0.0))).item() == 0.0
    assert total_loss("co", rq=rq, cl=cl, contrastive_weight=0.0 + 1e-12).item() == pytest.approx(
        rq.item(), abs=1e-9
    )
    combined = total_loss("re+co", rq=rq, mse=mse, cl=cl, contrastive_weight=0.1).item()
    assert combined == pytest.approx(0.5 + 0.03133 + 0.0625, abs=1e-9)


def test_loss_mode_aliases():
    assert canonical_loss_mode("re") == "reconstructive"
    assert canonical_loss_mode("co") == "contrastive"
    assert canonical_loss_mode("re+co") == "combined"
    with pytest.raises(UsageError):
        canonical_loss_mode("mystery")


# gradient check through the full objective -----------------------------------


def _micro_model(rng):
    d_in = int(rng.integers(3, 8))
    hidden = int(rng.integers(3, 7))
    latent = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    m = int(rng.integers(1, 4))
    config = TokenizerConfig(
        encoder_hidden=(hidden,),
        latent_dim=latent,
        num_levels=m,
        codebook_size=k,
        batch_size=4,
        epochs=1,
        dtype="float64",
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    items = [
        ItemEmbedding(f"i{j}", rng.standard_normal(d_in).astype(np.float64))
        for j in range(int(rng.integers(2, 5)))
    ]
    return config, items


def _trained_micro(rng, config, items):
    # one fit epoch builds the model and runs k-means init
    model, _ = fit(items, config)
    return model, np.stack([it.vector for it in items]).astype(np.float64)


@pytest.mark.parametrize("mode", ["reconstructive", "contrastive", "combined"])
def test_loss_gradients_match_frozen_finite_differences(mode):
    checked = 0
    seed = 0
    while checked < 8:
        seed += 1
        assert seed < 200, "ran out of candidate micro-configurations"
        rng = np.random.default_rng(900 + seed)
        config, items = _micro_model(rng)
        config.loss_mode = mode
        try:
            model, x = _trained_micro(rng, config, items)
        except NumericError:
            continue  # degenerate micro-net (e.g. zero-norm reconstruction)
        frozen = capture_frozen_state(model, x)
        if min_preactivation_margin(model, x, frozen) < 1e-3:
            continue  # finite differences are invalid across a rectifier kink
        total, *_ = _forward_losses(model, x, mode)
        params = model.parameters()
        analytic = grad(total, params)
        numeric = fd_grad_of_params(
            lambda: frozen_tokenizer_loss(model, x, mode, frozen), params
        )
        assert_grads_close(analytic, numeric)
        checked += 1


# fit --------------------------------------------------------------------------


def _cluster_items(n_items=200, n_clusters=8, d_in=16, seed=0):
    spec = dataio.SyntheticSpec(
        n_items=n_items, n_clusters=n_clusters, d_in=d_in, cluster_spread=0.05, seed=seed
    )
    items, labels = dataio.synth_clusters(spec)
    return items, labels


def _small_config(**overrides):
    base = dict(
        loss_mode="contrastive",
        encoder_hidden=(32, 24),
        latent_dim=12,
        num_levels=2,
        codebook_size=16,
        batch_size=64,
        epochs=6,
        lr=1e-3,
        seed=3,
        dtype="float64",
    )
    base.update(overrides)
    return TokenizerConfig(**base)


def test_fit_records_kmeans_before_any_step():
    items, _ = _cluster_items()
    model, trace = fit(items, _small_config(epochs=1))
    assert trace.events[0]["kind"] == "kmeans_init"
    assert trace.steps[0].step == 0


def test_fit_is_deterministic_per_seed():
    items, _ = _cluster_items()
    _, trace_a = fit(items, _small_config(epochs=2))
    _, trace_b = fit(items, _small_config(epochs=2))
    assert [s.loss_total for s in trace_a.steps] == [s.loss_total for s in trace_b.steps]


def test_fit_reduces_loss_on_clustered_data():
    items, _ = _cluster_items(n_clusters=16)
    _, trace = fit(items, _small_config(epochs=30, lr=3e-3))
    assert trace.epoch_means[-1] <= 0.5 * trace.epoch_means[0]


def test_fit_rejects_non_finite_input():
    items, _ = _cluster_items(n_items=40, n_clusters=4)
    items[3].vector = items[3].vector.copy()
    items[3].vector[0] = np.nan
    with pytest.raises(NumericError, match="item"):
        fit(items, _small_config(batch_size=40))


def test_fit_aborts_with_epoch_and_step_context():
    # zero-norm inputs make the cosine term undefined inside the first step
    items = [ItemEmbedding(f"z{i}", np.zeros(8, dtype=np.float32)) for i in range(12)]
    with pytest.raises(NumericError, match="epoch 0 step 0"):
        fit(items, _small_config(batch_size=12, codebook_size=4, latent_dim=4))


# assignment --------------------------------------------------------------------


def _tiny_trained_model():
    items, _ = _cluster_items(n_items=60, n_clusters=6, d_in=8, seed=1)
    model, _ = fit(items, _small_config(epochs=2, codebook_size=8, latent_dim=6))
    return model, items


def test_identical_embeddings_get_lexicographic_suffixes():
    model, items = _tiny_trained_model()
    clones = [
        ItemEmbedding("zz_b", items[0].vector.copy()),
        ItemEmbedding("zz_a", items[0].vector.copy()),
    ]
    tokens = assign_tokens(model, clones)
    assert tokens["zz_a"].codes == tokens["zz_b"].codes
    assert tokens["zz_a"].disambig == 0
    assert tokens["zz_b"].disambig == 1


def test_assignment_is_a_bijection():
    model, items = _tiny_trained_model()
    tokens = assign_tokens(model, items)
    assert len(tokens) == len(items)
    assert len({t.as_flat() for t in tokens.values()}) == len(items)


def test_unique_tuples_have_zero_suffix():
    model, items = _tiny_trained_model()
    tokens = assign_tokens(model, items)
    groups = {}
    for t in tokens.values():
        groups.setdefault(t.codes, []).append(t.disambig)
    for suffixes in groups.values():
        assert sorted(suffixes) == list(range(len(suffixes)))
        if len(suffixes) == 1:
            assert suffixes == [0]


def test_random_tokens_uniform_seeded_and_unique():
    ids = [f"item{i}" for i in range(500)]
    a = random_tokens(ids, num_levels=3, codebook_size=4, seed=9)
    b = random_tokens(ids, num_levels=3, codebook_size=4, seed=9)
    assert a == b
    assert len({t.as_flat() for t in a.values()}) == len(ids)
    counts = np.zeros(4)
    for t in a.values():
        for c in t.codes:
            counts[c] += 1
    assert counts.min() > 0.8 * counts.mean()  # roughly uniform usage


def test_prefix_agreement_on_constructed_pairs():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    assert prefix_agreement_at_1(x, np.array([0, 0, 1, 1])) == 1.0
    assert prefix_agreement_at_1(x, np.array([0, 1, 0, 1])) == 0.0


def test_checkpoint_round_trip_preserves_assignments(tmp_path):
    items, _ = _cluster_items(n_items=50, n_clusters=5, d_in=8, seed=2)
    model, _ = fit(items, _small_config(epochs=2, dtype="float32", latent_dim=8))
    tokens_before = assign_tokens(model, items)
    save_tokenizer(tmp_path / "tok", model)
    restored = load_tokenizer(tmp_path / "tok")
    assert assign_tokens(restored, items) == tokens_before
