"""Autoregressive token generator and beam-search retrieval.

Items enter the model as their semantic token tuples, flattened into one
vocabulary: level i of M occupies ids [(i-1)*K, i*K), the optional
disambiguation suffix gets its own range after the levels, and PAD/BOS/EOS
sit at the end. A small pre-layer-norm encoder-decoder transformer is trained
to predict the next item's tokens from the flattened history; beam search
decodes exactly one item's positions, each restricted to its level's id range,
and the token-item table maps finished tuples back to catalog items.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import BehaviorSequence, SemanticTokenTuple, read_cste, write_cste
from .errors import ConfigError, DataError, NumericError, UsageError
from .evaluator import split
from .numerics import (
    AdamState,
    Tensor,
    adam_step,
    cross_entropy,
    grad,
    layer_norm,
    matmul,
    no_grad,
    relu,
    softmax,
    take,
    transpose,
)
from .numerics.mlp import glorot_uniform
from .seeding import derive_seed

_NEG = -1e9  # additive mask value
_DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------------------------------------------------------------------------
# Vocabulary and token-item table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenVocabulary:
    """Disjoint id ranges for M code levels, a disambiguation block, and the
    PAD/BOS/EOS specials at the top."""

    num_levels: int
    codebook_size: int
    num_disambig: int  # 0 disables the disambiguation position entirely

    @property
    def disambig_offset(self) -> int:
        return self.num_levels * self.codebook_size

    @property
    def size(self) -> int:
        return self.disambig_offset + self.num_disambig + 3

    @property
    def pad_id(self) -> int:
        return self.size - 3

    @property
    def bos_id(self) -> int:
        return self.size - 2

    @property
    def eos_id(self) -> int:
        return self.size - 1

    @property
    def steps(self) -> int:
        """Decoded positions per item."""
        return self.num_levels + (1 if self.num_disambig else 0)

    @classmethod
    def from_token_map(
        cls, tokens: Mapping[str, SemanticTokenTuple], codebook_size: int | None = None
    ) -> "TokenVocabulary":
        if not tokens:
            raise UsageError("cannot build a vocabulary from an empty token map")
        lengths = {len(t.codes) for t in tokens.values()}
        if len(lengths) != 1:
            raise DataError(f"token tuples disagree on level count: {sorted(lengths)}")
        num_levels = lengths.pop()
        max_code = max(max(t.codes) for t in tokens.values())
        if codebook_size is None:
            codebook_size = max_code + 1
        elif max_code >= codebook_size:
            raise DataError(f"code {max_code} exceeds codebook size {codebook_size}")
        max_dis = max(t.disambig for t in tokens.values())
        return cls(
            num_levels=num_levels,
            codebook_size=codebook_size,
            num_disambig=(max_dis + 1) if max_dis > 0 else 0,
        )

    def position_range(self, position: int) -> tuple[int, int]:
        """Allowed id range [lo, hi) for one decoded position."""
        if not 0 <= position < self.steps:
            raise UsageError(f"position {position} out of range [0, {self.steps})")
        if position < self.num_levels:
            return position * self.codebook_size, (position + 1) * self.codebook_size
        return self.disambig_offset, self.disambig_offset + self.num_disambig

    def encode_item(self, tok: SemanticTokenTuple) -> list[int]:
        if len(tok.codes) != self.num_levels:
            raise ConfigError(
                f"tuple has {len(tok.codes)} levels, vocabulary expects {self.num_levels}"
            )
        ids = []
        for level, code in enumerate(tok.codes):
            if not 0 <= code < self.codebook_size:
                raise ConfigError(f"code {code} out of range at level {level + 1}")
            ids.append(level * self.codebook_size + code)
        if self.num_disambig:
            if tok.disambig >= self.num_disambig:
                raise ConfigError(f"disambiguation value {tok.disambig} out of range")
            ids.append(self.disambig_offset + tok.disambig)
        elif tok.disambig != 0:
            raise ConfigError("vocabulary has no disambiguation range")
        return ids

    def decode_ids(self, ids: Sequence[int]) -> SemanticTokenTuple | None:
        """Inverse of encode_item; None when the ids violate the layout."""
        if len(ids) != self.steps:
            return None
        codes = []
        for position, token_id in enumerate(ids):
            lo, hi = self.position_range(position)
            if not lo <= token_id < hi:
                return None
            if position < self.num_levels:
                codes.append(token_id - lo)
        dis = ids[-1] - self.disambig_offset if self.num_disambig else 0
        return SemanticTokenTuple(tuple(codes), dis)


class TokenItemTable:
    """Bijection between semantic token tuples and catalog item ids."""

    def __init__(self, tokens: Mapping[str, SemanticTokenTuple]):
        self.item_to_tuple: dict[str, SemanticTokenTuple] = dict(tokens)
        self.tuple_to_item: dict[tuple[int, ...], str] = {}
        for item_id, tok in self.item_to_tuple.items():
            key = tok.as_flat()
            if key in self.tuple_to_item:
                raise DataError(
                    f"token tuple {key} is shared by {self.tuple_to_item[key]!r} "
                    f"and {item_id!r}; the map is not a bijection"
                )
            self.tuple_to_item[key] = item_id

    def __len__(self) -> int:
        return len(self.item_to_tuple)

    def item_for(self, tok: SemanticTokenTuple) -> str | None:
        return self.tuple_to_item.get(tok.as_flat())


def flatten_sequence(
    history: Sequence[str],
    target: str | None,
    tokens: Mapping[str, SemanticTokenTuple],
    vocab: TokenVocabulary,
    max_input_items: int,
) -> tuple[list[int], list[int] | None]:
    """Token ids for a history window and, when given, a next-item target.

    The input is BOS followed by the flattened tokens of the most recent
    ``max_input_items`` history items; the target is the next item's tokens
    followed by EOS.
    """
    if max_input_items < 1:
        raise UsageError("max_input_items must be positive")
    input_ids = [vocab.bos_id]
    for item in list(history)[-max_input_items:]:
        tok = tokens.get(item)
        if tok is None:
            raise DataError(f"item {item!r} is missing from the token map")
        input_ids.extend(vocab.encode_item(tok))
    if target is None:
        return input_ids, None
    tok = tokens.get(target)
    if tok is None:
        raise DataError(f"item {target!r} is missing from the token map")
    return input_ids, vocab.encode_item(tok) + [vocab.eos_id]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    model_dim: int = 128
    num_heads: int = 4
    ff_dim: int = 512
    max_input_items: int = 10
    codebook_size: int | None = None  # None: infer from the token map
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 10
    beam_width: int = 100
    mask_levels: bool = True  # restrict each decode position to its level's ids
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.model_dim % self.num_heads != 0:
            raise UsageError("model_dim must be divisible by num_heads")
        if min(self.encoder_layers, self.decoder_layers, self.ff_dim) < 1:
            raise UsageError("layer counts and ff_dim must be positive")
        if self.max_input_items < 1 or self.beam_width < 1:
            raise UsageError("max_input_items and beam_width must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise UsageError("batch_size, epochs and lr must be positive")
        if self.dtype not in _DTYPES:
            raise UsageError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


class GeneratorModel:
    """Pre-layer-norm encoder-decoder transformer over the token vocabulary."""

    def __init__(self, vocab: TokenVocabulary, config: GeneratorConfig):
        config.validate()
        self.vocab = vocab
        self.config = config
        self.max_enc_len = 1 + config.max_input_items * vocab.steps
        self.max_dec_len = vocab.steps + 1
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(derive_seed(config.seed, "generator-init")))

    # construction ----------------------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(self.config.np_dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, f, v = cfg.model_dim, cfg.ff_dim, self.vocab.size
        emb = lambda *shape: rng.normal(0.0, 0.02, size=shape)
        self._param("tok_emb", emb(v, d))
        self._param("enc_pos", emb(self.max_enc_len, d))
        self._param("dec_pos", emb(self.max_dec_len, d))
        for i in range(cfg.encoder_layers):
            self._block(rng, f"enc{i}", d, f, cross=False)
        self._param("enc_lnf_g", np.ones(d))
        self._param("enc_lnf_b", np.zeros(d))
        for i in range(cfg.decoder_layers):
            self._block(rng, f"dec{i}", d, f, cross=True)
        self._param("dec_lnf_g", np.ones(d))
        self._param("dec_lnf_b", np.zeros(d))
        self._param("out_w", emb(d, v))
        self._param("out_b", np.zeros(v))

    def _block(self, rng, prefix: str, d: int, f: int, cross: bool) -> None:
        def attn(name: str) -> None:
            for proj in ("wq", "wk", "wv", "wo"):
                self._param(f"{prefix}_{name}_{proj}", glorot_uniform(rng, d, d, np.float64))

        self._param(f"{prefix}_ln1_g", np.ones(d))
        self._param(f"{prefix}_ln1_b", np.zeros(d))
        attn("self" if cross else "attn")
        if cross:
            self._param(f"{prefix}_ln2_g", np.ones(d))
            self._param(f"{prefix}_ln2_b", np.zeros(d))
            attn("cross")
        ln_ff = "ln3" if cross else "ln2"
        self._param(f"{prefix}_{ln_ff}_g", np.ones(d))
        self._param(f"{prefix}_{ln_ff}_b", np.zeros(d))
        self._param(f"{prefix}_ff_w1", glorot_uniform(rng, d, f, np.float64))
        self._param(f"{prefix}_ff_b1", np.zeros(f))
        self._param(f"{prefix}_ff_w2", glorot_uniform(rng, f, d, np.float64))
        self._param(f"{prefix}_ff_b2", np.zeros(d))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # forward ---------------------------------------------------------------

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        p = self.params
        cfg = self.config
        heads, d = cfg.num_heads, cfg.model_dim
        dk = d // heads
        b, tq = q_in.shape[0], q_in.shape[1]
        tk = kv_in.shape[1]

        def split_heads(x: Tensor, t: int) -> Tensor:
            return transpose(x.reshape(b, t, heads, dk), (0, 2, 1, 3))

        q = split_heads(matmul(q_in, p[f"{prefix}_wq"]), tq)
        k = split_heads(matmul(kv_in, p[f"{prefix}_wk"]), tk)
        v = split_heads(matmul(kv_in, p[f"{prefix}_wv"]), tk)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = softmax(scores, axis=-1)
        ctx = transpose(matmul(weights, v), (0, 2, 1, 3)).reshape(b, tq, d)
        return matmul(ctx, p[f"{prefix}_wo"])

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = relu(matmul(x, p[f"{prefix}_ff_w1"]) + p[f"{prefix}_ff_b1"])
        return matmul(h, p[f"{prefix}_ff_w2"]) + p[f"{prefix}_ff_b2"]

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}_g"], self.params[f"{prefix}_b"])

    def encode(self, input_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encode padded input ids (B, T); returns (states, key padding mask)."""
        input_ids = np.asarray(input_ids)
        b, t = input_ids.shape
        if t > self.max_enc_len:
            raise ConfigError(
                f"input length {t} exceeds the positional table ({self.max_enc_len})"
            )
        p = self.params
        h = take(p["tok_emb"], input_ids) + take(p["enc_pos"], slice(0, t))
        pad = (input_ids == self.vocab.pad_id)[:, None, None, :]  # (B,1,1,T)
        mask = np.where(pad, _NEG, 0.0).astype(self.config.np_dtype)
        for i in range(self.config.encoder_layers):
            x = self._ln(f"enc{i}_ln1", h)
            h = h + self._attention(f"enc{i}_attn", x, x, mask)
            h = h + self._ff(f"enc{i}", self._ln(f"enc{i}_ln2", h))
        return self._ln("enc_lnf", h), mask

    def decode(self, decoder_ids: np.ndarray, enc_states: Tensor, enc_mask: np.ndarray) -> Tensor:
        """Teacher-forced decoder logits (B, T_dec, vocab)."""
        decoder_ids = np.asarray(decoder_ids)
        b, t = decoder_ids.shape
        if t > self.max_dec_len:
            raise ConfigError(
                f"decoder length {t} exceeds the positional table ({self.max_dec_len})"
            )
        p = self.params
        h = take(p["tok_emb"], decoder_ids) + take(p["dec_pos"], slice(0, t))
        causal = np.where(
            np.triu(np.ones((t, t), dtype=bool), k=1), _NEG, 0.0
        ).astype(self.config.np_dtype)[None, None, :, :]
        for i in range(self.config.decoder_layers):
            x = self._ln(f"dec{i}_ln1", h)
            h = h + self._attention(f"dec{i}_self", x, x, causal)
            h = h + self._attention(f"dec{i}_cross", self._ln(f"dec{i}_ln2", h), enc_states, enc_mask)
            h = h + self._ff(f"dec{i}", self._ln(f"dec{i}_ln3", h))
        h = self._ln("dec_lnf", h)
        return matmul(h, p["out_w"]) + p["out_b"]

    def forward(self, input_ids: np.ndarray, decoder_ids: np.ndarray) -> Tensor:
        enc_states, enc_mask = self.encode(input_ids)
        return self.decode(decoder_ids, enc_states, enc_mask)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GenStepRecord:
    epoch: int
    step: int
    loss: float
    token_accuracy: float


@dataclass
class GenTrace:
    steps: list[GenStepRecord] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def build_training_pairs(
    sequences: Sequence[BehaviorSequence],
) -> list[tuple[list[str], str]]:
    """Sliding next-item pairs restricted to the leave-one-out training region."""
    pairs = []
    for user in split(sequences).users:
        items = user.train_items
        for t in range(1, len(items)):
            pairs.append((items[:t], items[t]))
    return pairs


def _pad_batch(inputs: list[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(ids) for ids in inputs)
    out = np.full((len(inputs), width), pad_id, dtype=np.int64)
    for i, ids in enumerate(inputs):
        out[i, : len(ids)] = ids
    return out


def train_generator(
    sequences: Sequence[BehaviorSequence],
    tokens: Mapping[str, SemanticTokenTuple],
    config: GeneratorConfig,
) -> tuple[GeneratorModel, GenTrace]:
    """Teacher-forced cross-entropy training of the token generator."""
    config.validate()
    vocab = TokenVocabulary.from_token_map(tokens, config.codebook_size)
    model = GeneratorModel(vocab, config)
    pairs = build_training_pairs(sequences)
    if not pairs:
        raise UsageError("no training pairs; sequences are too short")
    encoded = []
    for history, target in pairs:
        input_ids, target_ids = flatten_sequence(
            history, target, tokens, vocab, config.max_input_items
        )
        encoded.append((input_ids, target_ids))

    rng = np.random.default_rng(derive_seed(config.seed, "generator-shuffle"))
    opt = AdamState.create(lr=config.lr)
    params = model.parameters()
    trace = GenTrace()
    last_finite = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        epoch_losses = []
        for step, start in enumerate(range(0, len(encoded), config.batch_size)):
            chosen = [encoded[i] for i in order[start : start + config.batch_size]]
            input_ids = _pad_batch([c[0] for c in chosen], vocab.pad_id)
            targets = np.asarray([c[1] for c in chosen], dtype=np.int64)
            decoder_ids = np.concatenate(
                [np.full((targets.shape[0], 1), vocab.bos_id, dtype=np.int64), targets[:, :-1]],
                axis=1,
            )
            try:
                logits = model.forward(input_ids, decoder_ids)
                loss = cross_entropy(logits, targets)
                grads = grad(loss, params)
            except NumericError as exc:
                raise NumericError(
                    f"generator training aborted at epoch {epoch} step {step}: {exc}; "
                    f"last finite loss {last_finite!r}"
                ) from exc
            adam_step(opt, params, grads)
            accuracy = float((logits.data.argmax(axis=-1) == targets).mean())
            record = GenStepRecord(
                epoch=epoch, step=step, loss=float(loss.data), token_accuracy=accuracy
            )
            last_finite = record.loss
            trace.steps.append(record)
            epoch_losses.append(record.loss)
        trace.epoch_means.append(float(np.mean(epoch_losses)))
    trace.summary = {
        "pairs": len(encoded),
        "vocab_size": vocab.size,
        "final_epoch_mean": trace.epoch_means[-1],
        "final_token_accuracy": trace.steps[-1].token_accuracy,
    }
    return model, trace


# ---------------------------------------------------------------------------
# Beam search and retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeamHypothesis:
    token_ids: tuple[int, ...]
    logprob: float


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_search(
    model: GeneratorModel,
    input_ids: Sequence[int],
    width: int,
    steps: int | None = None,
) -> list[BeamHypothesis]:
    """Length-fixed beam search over one item's token positions.

    Candidates are ranked by total log-probability, ties broken
    lexicographically by token tuple. With level masking on (the default),
    position i only considers level i's id range and probabilities are
    renormalized within it; the unmasked ablation scores every non-special id.
    """
    if width < 1:
        raise UsageError("beam width must be positive")
    vocab = model.vocab
    steps = vocab.steps if steps is None else steps
    with no_grad():
        enc_states, enc_mask = model.encode(np.asarray([input_ids], dtype=np.int64))
        beams: list[tuple[int, ...]] = [()]
        scores = np.zeros(1)
        for position in range(steps):
            if model.config.mask_levels:
                lo, hi = vocab.position_range(position)
                allowed = np.arange(lo, hi)
            else:
                allowed = np.array(
                    [i for i in range(vocab.size) if i not in (vocab.pad_id, vocab.bos_id)]
                )
            n_beams = len(beams)
            decoder_ids = np.full((n_beams, position + 1), vocab.bos_id, dtype=np.int64)
            for b, prefix in enumerate(beams):
                decoder_ids[b, 1 : position + 1] = prefix
            enc_tiled = Tensor(np.broadcast_to(enc_states.data, (n_beams,) + enc_states.shape[1:]))
            mask_tiled = np.broadcast_to(enc_mask, (n_beams,) + enc_mask.shape[1:])
            logits = model.decode(decoder_ids, enc_tiled, mask_tiled).data[:, -1, :]
            logp = _log_softmax_rows(logits[:, allowed].astype(np.float64))
            total = scores[:, None] + logp  # (n_beams, n_allowed)

            beam_lex = np.empty(n_beams, dtype=np.int64)
            beam_lex[np.array(sorted(range(n_beams), key=lambda b: beams[b]))] = np.arange(n_beams)
            flat_total = total.reshape(-1)
            flat_beam = np.repeat(beam_lex, allowed.size)
            flat_token = np.tile(allowed, n_beams)
            order = np.lexsort((flat_token, flat_beam, -flat_total))[: width]
            beam_index = order // allowed.size
            beams = [beams[b] + (int(flat_token[o]),) for b, o in zip(beam_index, order)]
            scores = flat_total[order]
    return [BeamHypothesis(tuple(b), float(s)) for b, s in zip(beams, scores)]


def retrieve(
    model: GeneratorModel,
    history: Sequence[str],
    table: TokenItemTable,
    k: int,
    width: int | None = None,
) -> list[tuple[str, float]]:
    """Top-k catalog items for a history, by decoded tuple log-probability.

    Beam tuples that do not correspond to a catalog item are skipped; the
    result can therefore be shorter than k.
    """
    if k < 1:
        raise UsageError("k must be positive")
    width = model.config.beam_width if width is None else width
    if width < k:
        warnings.warn(
            f"beam width {width} is smaller than k={k}; retrieval cannot fill the list",
            stacklevel=2,
        )
    input_ids, _ = flatten_sequence(
        history, None, table.item_to_tuple, model.vocab, model.config.max_input_items
    )
    results: list[tuple[str, float]] = []
    seen: set[str] = set()
    for hyp in beam_search(model, input_ids, width):
        tok = model.vocab.decode_ids(hyp.token_ids)
        if tok is None:
            continue
        item = table.item_for(tok)
        if item is None or item in seen:
            continue
        seen.add(item)
        results.append((item, hyp.logprob))
        if len(results) == k:
            break
    return results


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_FILE = "generator.json"


def save_generator(directory: str | Path, model: GeneratorModel) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "config": {
            "encoder_layers": model.config.encoder_layers,
            "decoder_layers": model.config.decoder_layers,
            "model_dim": model.config.model_dim,
            "num_heads": model.config.num_heads,
            "ff_dim": model.config.ff_dim,
            "max_input_items": model.config.max_input_items,
            "codebook_size": model.config.codebook_size,
            "lr": model.config.lr,
            "batch_size": model.config.batch_size,
            "epochs": model.config.epochs,
            "beam_width": model.config.beam_width,
            "mask_levels": model.config.mask_levels,
            "seed": model.config.seed,
            "dtype": model.config.dtype,
        },
        "vocab": {
            "num_levels": model.vocab.num_levels,
            "codebook_size": model.vocab.codebook_size,
            "num_disambig": model.vocab.num_disambig,
        },
        "param_shapes": {name: list(t.data.shape) for name, t in model.params.items()},
    }
    with open(directory / _CONFIG_FILE, "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for name, tensor in model.params.items():
        data = tensor.data
        write_cste(directory / f"{name}.cste", data if data.ndim == 2 else data.reshape(1, -1))


def load_generator(directory: str | Path) -> GeneratorModel:
    directory = Path(directory)
    with open(directory / _CONFIG_FILE, encoding="utf-8") as fh:
        snapshot = json.load(fh)
    config = GeneratorConfig(**snapshot["config"])
    vocab = TokenVocabulary(**snapshot["vocab"])
    model = GeneratorModel(vocab, config)
    dtype = config.np_dtype
    for name, tensor in model.params.items():
        stored = read_cste(directory / f"{name}.cste").astype(dtype)
        shape = tuple(snapshot["param_shapes"][name])
        tensor.data = stored.reshape(shape)
    return model
