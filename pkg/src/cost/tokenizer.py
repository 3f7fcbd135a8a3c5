"""Semantic tokenizer: encoder, residual quantizer, decoder, and the loss
family that trains them.

Three objectives are supported over one architecture:

  * reconstructive — squared-error reconstruction plus the quantization loss;
  * contrastive — an in-batch softmax over cosine similarities between inputs
    and reconstructions (each anchor's own reconstruction is the positive,
    the rest of the batch the negatives) plus the quantization loss;
  * combined — both, with the contrastive term scaled by its weight.

The quantization loss per level is
``||sg(r) - e||^2 + commitment_weight * ||r - sg(e)||^2``: the first term
moves the codebook toward the residuals, the second commits the encoder to
its selected codes. Code selection is constant during backpropagation and the
decoder consumes the reconstruction through a straight-through estimator.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import ItemEmbedding, SemanticTokenTuple, read_cste, write_cste
from .errors import ConfigError, NumericError, UsageError
from .numerics import (
    AdamState,
    MlpParams,
    Tensor,
    adam_step,
    cross_entropy,
    grad,
    init_mlp,
    mean,
    mlp_forward,
    mul,
    no_grad,
    sqrt,
    stop_gradient,
    sum_,
    transpose,
)
from .quantizer import (
    CodebookSet,
    QuantizationResult,
    kmeans_init,
    residual_quantize,
    save_codebooks,
    load_codebooks,
    straight_through,
    utilization,
)
from .seeding import derive_seed

RECONSTRUCTIVE = "reconstructive"
CONTRASTIVE = "contrastive"
COMBINED = "combined"
LOSS_MODES = (RECONSTRUCTIVE, CONTRASTIVE, COMBINED)

_MODE_ALIASES = {
    "re": RECONSTRUCTIVE,
    "co": CONTRASTIVE,
    "re+co": COMBINED,
    RECONSTRUCTIVE: RECONSTRUCTIVE,
    CONTRASTIVE: CONTRASTIVE,
    COMBINED: COMBINED,
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


def canonical_loss_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise UsageError(f"unknown loss mode {mode!r}; use re, co or re+co") from None


@dataclass
class TokenizerConfig:
    loss_mode: str = CONTRASTIVE
    contrastive_weight: float = 0.1  # balances the contrastive term
    commitment_weight: float = 0.25  # pulls residuals toward selected codes
    temperature: float = 0.1  # softmax concentration of the contrastive term
    encoder_hidden: tuple[int, ...] = (512, 256, 128)
    latent_dim: int = 96
    num_levels: int = 3
    codebook_size: int = 64
    shared_codebooks: bool = True
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    dtype: str = "float32"  # tests train at float64; gradient checks always do

    def validate(self) -> None:
        mode = canonical_loss_mode(self.loss_mode)
        if mode in (CONTRASTIVE, COMBINED) and self.contrastive_weight <= 0:
            raise UsageError("contrastive_weight must be positive for this loss mode")
        if self.temperature <= 0:
            raise UsageError("temperature must be positive")
        if self.commitment_weight < 0:
            raise UsageError("commitment_weight must be non-negative")
        if self.num_levels < 1 or self.codebook_size < 1 or self.latent_dim < 1:
            raise UsageError("num_levels, codebook_size and latent_dim must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise UsageError("batch_size, epochs and lr must be positive")
        if self.dtype not in _DTYPES:
            raise UsageError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class TokenizerModel:
    encoder: MlpParams
    decoder: MlpParams
    books: CodebookSet
    config: TokenizerConfig
    input_dim: int

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters() + self.books.parameters()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape(1, -1) if t.ndim == 1 else t


def loss_mse(x, x_hat) -> Tensor:
    """Squared reconstruction error, summed per item and averaged over the batch."""
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    d = x_hat - x
    return mean(sum_(mul(d, d), axis=-1))


def loss_rq(result: QuantizationResult, commitment_weight: float) -> Tensor:
    """Per-level codebook and commitment terms with stop-gradient separation.

    Gradients reach the codebook only through the first term and the encoder
    only through the second; the residual inside the commitment term therefore
    treats the already-subtracted code vectors of earlier levels as constants.
    """
    total = None
    z = result.residuals[0]
    z = z if isinstance(z, Tensor) else Tensor(z)
    for level, code_vec in enumerate(result.code_vectors):
        r_prev = result.residuals[level]
        r_prev = r_prev if isinstance(r_prev, Tensor) else Tensor(r_prev)
        code_vec = code_vec if isinstance(code_vec, Tensor) else Tensor(code_vec)
        d_book = stop_gradient(r_prev) - code_vec
        # value of r_prev, backward pass behaves as identity on z
        r_commit = straight_through(z, r_prev)
        d_commit = r_commit - stop_gradient(code_vec)
        term = mean(sum_(mul(d_book, d_book), axis=-1)) + commitment_weight * mean(
            sum_(mul(d_commit, d_commit), axis=-1)
        )
        total = term if total is None else total + term
    if total is None:
        raise UsageError("quantization result has no levels")
    return total


def loss_cl(x, x_hat, temperature: float) -> Tensor:
    """In-batch contrastive loss over cosine similarities.

    Anchor j's positive is its own reconstruction; the other reconstructions
    in the batch are the negatives. Mean over anchors of the negative log
    softmax probability of the positive.
    """
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    x_norms = np.linalg.norm(np.asarray(x.data, dtype=np.float64), axis=-1)
    bad = np.flatnonzero(x_norms == 0.0)
    if bad.size:
        raise NumericError(f"zero-norm input vector at batch index {int(bad[0])}")
    hat_norms = np.linalg.norm(np.asarray(x_hat.data, dtype=np.float64), axis=-1)
    bad = np.flatnonzero(hat_norms == 0.0)
    if bad.size:
        raise NumericError(f"zero-norm reconstruction at batch index {int(bad[0])}")
    anchors = Tensor(x.data / np.linalg.norm(x.data, axis=-1, keepdims=True))
    hat_norm = sqrt(sum_(mul(x_hat, x_hat), axis=-1, keepdims=True))
    candidates = x_hat / hat_norm
    sims = anchors @ transpose(candidates)  # (B, B): rows anchors, cols reconstructions
    logits = sims * (1.0 / temperature)
    targets = np.arange(logits.shape[0])
    return cross_entropy(logits, targets)


def total_loss(
    mode: str,
    *,
    rq: Tensor,
    mse: Tensor | None = None,
    cl: Tensor | None = None,
    contrastive_weight: float = 0.1,
) -> Tensor:
    mode = canonical_loss_mode(mode)
    if mode == RECONSTRUCTIVE:
        if mse is None:
            raise UsageError("reconstructive mode needs the reconstruction term")
        return mse + rq
    if mode == CONTRASTIVE:
        if cl is None:
            raise UsageError("contrastive mode needs the contrastive term")
        return contrastive_weight * cl + rq
    if mse is None or cl is None:
        raise UsageError("combined mode needs both terms")
    return mse + contrastive_weight * cl + rq


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_total: float
    loss_mse: float
    loss_rq: float
    loss_cl: float | None
    utilization: tuple[float, ...]  # per level, within the step's batch


@dataclass
class FitTrace:
    events: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _init_codebooks(z0: np.ndarray, config: TokenizerConfig, seed: int) -> tuple[CodebookSet, list[int]]:
    """Cluster the first batch of latents into the initial code tables.

    With a shared table the clustering runs once on the raw latents; with
    per-level tables each level clusters the residuals the earlier,
    already-initialized levels leave behind.
    """
    dtype = config.np_dtype
    jitters: list[int] = []
    if config.shared_codebooks:
        centroids, jitter = kmeans_init(z0, config.codebook_size, seed)
        jitters.append(jitter)
        books = CodebookSet.from_arrays(
            [centroids.astype(dtype)], num_levels=config.num_levels, shared=True
        )
        return books, jitters
    tables: list[np.ndarray] = []
    residual = np.asarray(z0, dtype=np.float64)
    for level in range(config.num_levels):
        centroids, jitter = kmeans_init(residual, config.codebook_size, derive_seed(seed, f"level{level}"))
        jitters.append(jitter)
        tables.append(centroids.astype(dtype))
        diffs = residual[:, None, :] - centroids[None]
        idx = np.argmin(np.einsum("bkd,bkd->bk", diffs, diffs), axis=1)
        residual = residual - centroids[idx]
    books = CodebookSet.from_arrays(tables, num_levels=config.num_levels, shared=False)
    return books, jitters


def _forward_losses(
    model: TokenizerModel, batch: np.ndarray, mode: str
) -> tuple[Tensor, Tensor, Tensor | None, Tensor, QuantizationResult]:
    """One training forward pass; returns (total, mse, cl, rq, quantization)."""
    cfg = model.config
    xb = Tensor(batch)
    z = mlp_forward(model.encoder, xb)
    qr = residual_quantize(z, model.books)
    z_q = straight_through(z, qr.z_hat)
    x_hat = mlp_forward(model.decoder, z_q)
    mse = loss_mse(xb, x_hat)
    rq = loss_rq(qr, cfg.commitment_weight)
    cl = None
    if mode in (CONTRASTIVE, COMBINED):
        cl = loss_cl(xb, x_hat, cfg.temperature)
    total = total_loss(mode, rq=rq, mse=mse, cl=cl, contrastive_weight=cfg.contrastive_weight)
    return total, mse, cl, rq, qr


def fit(items: Sequence[ItemEmbedding], config: TokenizerConfig) -> tuple[TokenizerModel, FitTrace]:
    """Train a tokenizer on item embeddings.

    The codebooks are initialized by k-means on the latents of the very first
    batch, before any gradient step; every epoch reshuffles with the seeded
    generator. Aborts with a NumericError naming epoch/step and the last
    finite loss if the objective leaves the finite range.
    """
    config.validate()
    mode = canonical_loss_mode(config.loss_mode)
    if not items:
        raise UsageError("fit needs a non-empty dataset")
    dtype = config.np_dtype
    x_all = np.stack([item.vector for item in items]).astype(dtype)
    if not np.all(np.isfinite(x_all)):
        bad = next(i for i in range(len(items)) if not np.all(np.isfinite(x_all[i])))
        raise NumericError(
            f"input embeddings contain non-finite values (item {items[bad].item_id!r})"
        )
    n, input_dim = x_all.shape

    enc_dims = [input_dim, *config.encoder_hidden, config.latent_dim]
    dec_dims = [config.latent_dim, *reversed(config.encoder_hidden), input_dim]
    encoder = init_mlp(enc_dims, seed=derive_seed(config.seed, "encoder"), dtype=dtype)
    decoder = init_mlp(dec_dims, seed=derive_seed(config.seed, "decoder"), dtype=dtype)
    model = TokenizerModel(encoder=encoder, decoder=decoder, books=None, config=config, input_dim=input_dim)  # type: ignore[arg-type]

    rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    opt = AdamState.create(lr=config.lr)
    trace = FitTrace()
    last_finite = None

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = x_all[order[start : start + config.batch_size]]
            if model.books is None:
                with no_grad():
                    z0 = mlp_forward(model.encoder, Tensor(batch)).data
                books, jitters = _init_codebooks(
                    np.asarray(z0, dtype=np.float64), config, derive_seed(config.seed, "kmeans")
                )
                model.books = books
                trace.events.append(
                    {
                        "kind": "kmeans_init",
                        "batch_size": int(batch.shape[0]),
                        "jitter_counts": jitters,
                    }
                )
            try:
                total, mse, cl, rq, qr = _forward_losses(model, batch, mode)
                params = model.parameters()
                grads = grad(total, params)
            except NumericError as exc:
                raise NumericError(
                    f"training aborted at epoch {epoch} step {step}: {exc}; "
                    f"last finite loss {last_finite!r}"
                ) from exc
            adam_step(opt, params, grads)
            batch_util = utilization(qr.codes, model.books)
            record = StepRecord(
                epoch=epoch,
                step=step,
                loss_total=float(total.data),
                loss_mse=float(mse.data),
                loss_rq=float(rq.data),
                loss_cl=None if cl is None else float(cl.data),
                utilization=tuple(batch_util.fractions),
            )
            last_finite = record.loss_total
            trace.steps.append(record)
            epoch_losses.append(record.loss_total)
        trace.epoch_means.append(float(np.mean(epoch_losses)))

    with no_grad():
        codes = _assign_codes(model, x_all)
    dataset_util = utilization(codes, model.books)
    trace.summary = {
        "dataset_utilization": dataset_util.fractions,
        "prefix_agreement_at_1": prefix_agreement_at_1(x_all, codes[:, 0]),
        "first_epoch_mean": trace.epoch_means[0],
        "final_epoch_mean": trace.epoch_means[-1],
    }
    return model, trace


def _assign_codes(model: TokenizerModel, x_all: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Code tuples for every row of ``x_all`` (no tape)."""
    out = []
    with no_grad():
        for start in range(0, x_all.shape[0], batch_size):
            z = mlp_forward(model.encoder, Tensor(x_all[start : start + batch_size])).data
            out.append(residual_quantize(np.asarray(z), model.books).codes)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Token assignment
# ---------------------------------------------------------------------------


def _resolve_collisions(
    ids: Sequence[str], codes: np.ndarray
) -> dict[str, SemanticTokenTuple]:
    groups: dict[tuple[int, ...], list[str]] = defaultdict(list)
    for item_id, row in zip(ids, codes):
        groups[tuple(int(c) for c in row)].append(item_id)
    tokens: dict[str, SemanticTokenTuple] = {}
    for tup, members in groups.items():
        for rank, item_id in enumerate(sorted(members)):
            tokens[item_id] = SemanticTokenTuple(tup, rank)
    return {item_id: tokens[item_id] for item_id in ids}


def assign_tokens(
    model: TokenizerModel, items: Sequence[ItemEmbedding]
) -> dict[str, SemanticTokenTuple]:
    """Quantize every item; identical code tuples get disambiguation suffixes
    0, 1, 2, ... in item-id lexicographic order, making the full tuple unique."""
    if not items:
        raise UsageError("assign_tokens needs a non-empty dataset")
    ids = [item.item_id for item in items]
    if len(set(ids)) != len(ids):
        raise UsageError("item ids must be unique")
    x_all = np.stack([item.vector for item in items]).astype(model.config.np_dtype)
    if x_all.shape[1] != model.input_dim:
        raise ConfigError(
            f"model expects input dimension {model.input_dim}, got {x_all.shape[1]}"
        )
    codes = _assign_codes(model, x_all)
    return _resolve_collisions(ids, codes)


def random_tokens(
    item_ids: Sequence[str], num_levels: int, codebook_size: int, seed: int
) -> dict[str, SemanticTokenTuple]:
    """Seeded uniform hashing baseline: arbitrary code tuples, no semantics."""
    ids = sorted(item_ids)
    if len(set(ids)) != len(ids):
        raise UsageError("item ids must be unique")
    rng = np.random.default_rng(derive_seed(seed, "random-tokens"))
    codes = rng.integers(0, codebook_size, size=(len(ids), num_levels))
    by_sorted = _resolve_collisions(ids, codes)
    return {item_id: by_sorted[item_id] for item_id in item_ids}


def prefix_agreement_at_1(x_all: np.ndarray, level1_codes: np.ndarray, chunk: int = 256) -> float:
    """Share of items whose nearest embedding-space neighbor (squared
    Euclidean, self excluded) carries the same first-level code."""
    x = np.asarray(x_all, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise UsageError("need at least two items")
    sq = np.einsum("nd,nd->n", x, x)
    agree = 0
    for start in range(0, n, chunk):
        block = x[start : start + chunk]
        d2 = sq[start : start + chunk, None] - 2.0 * block @ x.T + sq[None, :]
        for i in range(block.shape[0]):
            d2[i, start + i] = np.inf
        nearest = np.argmin(d2, axis=1)
        agree += int((level1_codes[start : start + chunk] == level1_codes[nearest]).sum())
    return agree / n


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_FILE = "tokenizer.json"


def _save_mlp(directory: Path, prefix: str, mlp: MlpParams) -> None:
    for i, layer in enumerate(mlp.layers):
        write_cste(directory / f"{prefix}_w{i}.cste", layer.weight.data)
        write_cste(directory / f"{prefix}_b{i}.cste", layer.bias.data.reshape(1, -1))


def _load_mlp(directory: Path, prefix: str, dims: list[int], activations: list[str], dtype) -> MlpParams:
    mlp = init_mlp(dims, seed=0, dtype=dtype)
    for i, layer in enumerate(mlp.layers):
        layer.weight.data = read_cste(directory / f"{prefix}_w{i}.cste").astype(dtype)
        layer.bias.data = read_cste(directory / f"{prefix}_b{i}.cste").reshape(-1).astype(dtype)
        layer.activation = activations[i]
    return mlp


def save_tokenizer(directory: str | Path, model: TokenizerModel) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "config": {
            "loss_mode": canonical_loss_mode(model.config.loss_mode),
            "contrastive_weight": model.config.contrastive_weight,
            "commitment_weight": model.config.commitment_weight,
            "temperature": model.config.temperature,
            "encoder_hidden": list(model.config.encoder_hidden),
            "latent_dim": model.config.latent_dim,
            "num_levels": model.config.num_levels,
            "codebook_size": model.config.codebook_size,
            "shared_codebooks": model.config.shared_codebooks,
            "lr": model.config.lr,
            "batch_size": model.config.batch_size,
            "epochs": model.config.epochs,
            "seed": model.config.seed,
            "dtype": model.config.dtype,
        },
        "input_dim": model.input_dim,
        "encoder_activations": model.encoder.activations,
        "decoder_activations": model.decoder.activations,
    }
    with open(directory / _CONFIG_FILE, "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _save_mlp(directory, "encoder", model.encoder)
    _save_mlp(directory, "decoder", model.decoder)
    save_codebooks(directory / "codebooks", model.books)


def load_tokenizer(directory: str | Path) -> TokenizerModel:
    directory = Path(directory)
    with open(directory / _CONFIG_FILE, encoding="utf-8") as fh:
        snapshot = json.load(fh)
    cfg_raw = dict(snapshot["config"])
    cfg_raw["encoder_hidden"] = tuple(cfg_raw["encoder_hidden"])
    config = TokenizerConfig(**cfg_raw)
    input_dim = int(snapshot["input_dim"])
    dtype = config.np_dtype
    enc_dims = [input_dim, *config.encoder_hidden, config.latent_dim]
    dec_dims = [config.latent_dim, *reversed(config.encoder_hidden), input_dim]
    encoder = _load_mlp(directory, "encoder", enc_dims, snapshot["encoder_activations"], dtype)
    decoder = _load_mlp(directory, "decoder", dec_dims, snapshot["decoder_activations"], dtype)
    books = load_codebooks(directory / "codebooks")
    books.tables = [Tensor(t.data.astype(dtype), requires_grad=True) for t in books.tables]
    return TokenizerModel(encoder=encoder, decoder=decoder, books=books, config=config, input_dim=input_dim)
