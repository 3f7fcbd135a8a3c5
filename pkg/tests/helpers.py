"""Shared test oracles.

The finite-difference oracle and the numpy-only forward evaluators live here
so the gradient checks never share code with the tape they are checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from cost.numerics import MlpParams, Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_grad_of_params(
    loss_fn: Callable[[], float], params: Sequence[Tensor], step: float = FD_STEP
) -> dict[Tensor, np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. every entry of every
    parameter tensor, perturbing ``.data`` in place."""
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_fn()
            flat[i] = original - step
            down = loss_fn()
            flat[i] = original
            gflat[i] = (up - down) / (2.0 * step)
        out[p] = g
    return out


def assert_grads_close(
    analytic: dict[Tensor, np.ndarray],
    numeric: dict[Tensor, np.ndarray],
    rtol: float = FD_RTOL,
) -> None:
    """Relative-error comparison with a unit floor so tiny gradients do not
    inflate the ratio."""
    for p, g_num in numeric.items():
        g_ana = analytic[p]
        denom = np.maximum(1.0, np.maximum(np.abs(g_ana), np.abs(g_num)))
        err = np.abs(g_ana - g_num) / denom
        assert err.max() < rtol, f"gradient mismatch {err.max():.3e} on shape {p.data.shape}"


def np_mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass, independent of the tape implementation."""
    h = np.asarray(x, dtype=np.float64)
    for layer in params.layers:
        h = h @ np.asarray(layer.weight.data, dtype=np.float64) + np.asarray(
            layer.bias.data, dtype=np.float64
        )
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def np_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def np_contrastive_loss(x: np.ndarray, x_hat: np.ndarray, temperature: float) -> float:
    """Independent evaluation of the in-batch cosine contrastive loss."""
    xn = x / np.linalg.norm(x, axis=-1, keepdims=True)
    hn = x_hat / np.linalg.norm(x_hat, axis=-1, keepdims=True)
    sims = xn @ hn.T / temperature
    ls = np_log_softmax(sims)
    return float(-np.mean(np.diag(ls)))


def capture_frozen_state(model, x: np.ndarray) -> dict:
    """Record code selections and every stop-gradient argument at the current
    parameters, so finite differences can probe the function the tape actually
    differentiates (selection and sg values held fixed, straight-through
    offset frozen)."""
    from cost.numerics import Tensor, mlp_forward, no_grad
    from cost.quantizer import residual_quantize

    with no_grad():
        z = mlp_forward(model.encoder, Tensor(x)).data
        qr = residual_quantize(np.asarray(z), model.books)
    prefix = np.zeros_like(np.atleast_2d(z))
    prefix_sums = []
    for vec in qr.code_vectors:
        prefix_sums.append(prefix.copy())
        prefix = prefix + np.atleast_2d(vec)
    return {
        "codes": np.atleast_2d(qr.codes),
        "sg_residuals": [np.atleast_2d(r) for r in qr.residuals[:-1]],
        "sg_codevecs": [np.atleast_2d(c) for c in qr.code_vectors],
        "sg_prefix_sums": prefix_sums,  # sum of earlier levels' codes, per level
        "ste_offset": np.atleast_2d(qr.z_hat - z),
    }


def frozen_tokenizer_loss(model, x: np.ndarray, mode: str, frozen: dict) -> float:
    """Numpy-only tokenizer objective with frozen quantization.

    Uses the *current* parameter values everywhere gradients flow and the
    frozen captures everywhere a stop-gradient (or the straight-through
    replacement) blocks them. The tape's analytic gradient is the true
    gradient of this function.
    """
    cfg = model.config
    z = np_mlp_forward(model.encoder, x)
    codes = frozen["codes"]
    rq = 0.0
    for level in range(model.books.num_levels):
        table = np.asarray(model.books.table(level).data, dtype=np.float64)
        e = table[codes[:, level]]
        term_book = ((frozen["sg_residuals"][level] - e) ** 2).sum(axis=-1).mean()
        # commitment residual: current z minus the frozen earlier-level codes
        r_commit = z - frozen["sg_prefix_sums"][level]
        term_commit = ((r_commit - frozen["sg_codevecs"][level]) ** 2).sum(axis=-1).mean()
        rq += term_book + cfg.commitment_weight * term_commit
    x_hat = np_mlp_forward(model.decoder, z + frozen["ste_offset"])
    if mode == "reconstructive":
        return float(((x - x_hat) ** 2).sum(axis=-1).mean() + rq)
    cl = np_contrastive_loss(x, x_hat, cfg.temperature)
    if mode == "contrastive":
        return float(cfg.contrastive_weight * cl + rq)
    return float(
        ((x - x_hat) ** 2).sum(axis=-1).mean() + cfg.contrastive_weight * cl + rq
    )


def min_preactivation_margin(model, x: np.ndarray, frozen: dict) -> float:
    """Smallest |rectifier preactivation| across encoder and decoder, plus the
    smallest reconstruction norm; used to keep finite differences away from
    kinks and from the undefined zero-norm cosine."""
    margins = []

    def walk(params, h):
        for layer in params.layers:
            h = h @ np.asarray(layer.weight.data, dtype=np.float64) + np.asarray(
                layer.bias.data, dtype=np.float64
            )
            if layer.activation == "relu":
                margins.append(np.abs(h).min())
                h = np.maximum(h, 0.0)
        return h

    z = walk(model.encoder, np.asarray(x, dtype=np.float64))
    x_hat = walk(model.decoder, z + frozen["ste_offset"])
    margins.append(np.linalg.norm(x_hat, axis=-1).min())
    return float(min(margins))
