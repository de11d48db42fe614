"""Differentiable separation loss, inner-loop adaptation and meta-gradients.

The PIT permutation inside the loss is picked by value and held constant while
differentiating, i.e. the gradient of the active branch of the min.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateReference, InvalidInput, NumericalError, Unsupported
from .params import ParamVector, first_nonfinite_block, make_layout
from .sepmodel import ModelConfig, check_params, forward
from .signal import MAX_PIT_SOURCES, SI_SNR_EPS, MixtureExample, _TINY

_DB = 10.0 / math.log(10.0)


@dataclass(frozen=True, eq=False)
class LossBatch:
    examples: tuple

    def __post_init__(self):
        examples = tuple(self.examples)
        if not examples:
            raise InvalidInput("a loss batch needs at least one example")
        counts = {ex.num_sources for ex in examples}
        if len(counts) != 1:
            raise InvalidInput(f"mixed source counts in one batch: {sorted(counts)}")
        object.__setattr__(self, "examples", examples)

    def __len__(self):
        return len(self.examples)

    @property
    def num_sources(self) -> int:
        return self.examples[0].num_sources


def as_batch(batch) -> LossBatch:
    if isinstance(batch, LossBatch):
        return batch
    if isinstance(batch, MixtureExample):
        return LossBatch((batch,))
    return LossBatch(tuple(batch))


def _length_groups(batch: LossBatch):
    groups = {}
    for ex in batch.examples:
        groups.setdefault(ex.length, []).append(ex)
    return list(groups.values())


_perm_cache = {}


def _permutations(c):
    if c not in _perm_cache:
        _perm_cache[c] = np.array(list(itertools.permutations(range(c))), dtype=np.intp)
    return _perm_cache[c]


def pit_si_snr_graph(estimates: ad.Tensor, references: np.ndarray):
    """Per-example uPIT loss (negative mean Si-SNR) for (N, C, T) estimates.

    Returns ``(losses, perms)``: an (N,) tensor and the chosen permutation of
    each example.
    """
    n, c, length = estimates.shape
    if c > MAX_PIT_SOURCES:
        raise Unsupported(f"PIT over {c} sources exceeds the supported {MAX_PIT_SOURCES}")
    ref0 = references - references.mean(axis=-1, keepdims=True)
    ref_energy = np.einsum("nct,nct->nc", ref0, ref0)
    if np.any(ref_energy == 0.0):
        raise DegenerateReference("a reference source is constant")

    est0 = estimates - ad.mean(estimates, axis=-1, keepdims=True)
    est_b = ad.reshape(est0, (n, c, 1, length))
    ref_b = ref0[:, None, :, :]
    dot = ad.sum_(est_b * ref_b, axis=-1)  # (N, C_est, C_ref)
    coef = dot / ref_energy[:, None, :]
    target_energy = coef * coef * ref_energy[:, None, :]
    resid = est_b - ad.reshape(coef, (n, c, c, 1)) * ref_b
    resid_energy = ad.sum_(resid * resid, axis=-1)
    est_energy = ad.sum_(est0 * est0, axis=-1)
    eps = ad.reshape(est_energy * (SI_SNR_EPS / length), (n, c, 1))
    table = _DB * (ad.log(target_energy + _TINY) - ad.log(resid_energy + eps + _TINY))

    perms = _permutations(c)
    scores = -table.data[:, np.arange(c), perms].sum(axis=-1) / c  # (N, P)
    best = np.argmin(scores, axis=1)  # first minimum = lexicographically smallest
    select = np.zeros((n, c, c))
    for i, k in enumerate(best):
        select[i, np.arange(c), perms[k]] = 1.0
    losses = -ad.sum_(table * select, axis=(1, 2)) / c
    return losses, [tuple(int(v) for v in perms[k]) for k in best]


def _loss_graph(theta: ad.Tensor, batch: LossBatch, cfg: ModelConfig, layout):
    total = None
    for group in _length_groups(batch):
        mixtures = np.stack([ex.mixture.samples for ex in group])
        refs = np.stack([ex.source_matrix() for ex in group])
        if refs.shape[1] != cfg.num_sources:
            raise InvalidInput(
                f"examples have {refs.shape[1]} sources but the model separates {cfg.num_sources}"
            )
        est, _ = forward(theta, mixtures, cfg, layout)
        part = ad.sum_(pit_si_snr_graph(est, refs)[0])
        total = part if total is None else total + part
    return total * (1.0 / len(batch))


def _check_loss(value, params):
    if not math.isfinite(value):
        bad = first_nonfinite_block(params.values, params.layout)
        raise NumericalError(f"non-finite loss (block {bad or 'loss'!r})", block=bad or "loss")


def _check_grad(values, layout):
    bad = first_nonfinite_block(values, layout)
    if bad is not None:
        raise NumericalError(f"non-finite gradient in parameter block {bad!r}", block=bad)


def batch_loss(params: ParamVector, batch, model_cfg: ModelConfig) -> float:
    """Mean uPIT loss of the model's outputs over ``batch``."""
    check_params(params, model_cfg)
    batch = as_batch(batch)
    with ad.no_grad():
        loss = float(_loss_graph(ad.Tensor(params.values), batch, model_cfg, params.layout).data)
    _check_loss(loss, params)
    return loss


def loss_and_grad(params: ParamVector, batch, model_cfg: ModelConfig):
    check_params(params, model_cfg)
    batch = as_batch(batch)
    theta = ad.Tensor(params.values, requires_grad=True)
    loss = _loss_graph(theta, batch, model_cfg, params.layout)
    value = float(loss.data)
    _check_loss(value, params)
    (g,) = ad.grad(loss, [theta])
    _check_grad(g.data, params.layout)
    return value, ParamVector(g.data, params.layout)


def adapted_params(params: ParamVector, support, alpha: float, steps: int, model_cfg: ModelConfig):
    """``steps`` plain gradient-descent steps on the support loss."""
    if alpha < 0:
        raise InvalidInput(f"alpha must be non-negative, got {alpha}")
    if steps < 1:
        raise InvalidInput(f"steps must be at least 1, got {steps}")
    check_params(params, model_cfg)
    if alpha == 0:
        return params.copy()
    values = params.values
    for _ in range(steps):
        _, g = loss_and_grad(params.with_values(values), support, model_cfg)
        values = values - alpha * g.values
    return params.with_values(values)


def meta_grad_maml(params: ParamVector, support, query, alpha: float, steps: int, model_cfg: ModelConfig):
    """Exact gradient of ``theta -> L_query(theta - alpha * grad L_support(theta))``."""
    if steps != 1:
        raise Unsupported("exact second-order MAML supports a single inner step")
    if alpha < 0:
        raise InvalidInput(f"alpha must be non-negative, got {alpha}")
    check_params(params, model_cfg)
    support, query = as_batch(support), as_batch(query)
    layout = params.layout
    theta = ad.Tensor(params.values, requires_grad=True)
    inner = _loss_graph(theta, support, model_cfg, layout)
    _check_loss(float(inner.data), params)
    (g,) = ad.grad(inner, [theta], create_graph=True)
    _check_grad(g.data, layout)
    adapted = theta - alpha * g
    outer = _loss_graph(adapted, query, model_cfg, layout)
    value = float(outer.data)
    _check_loss(value, params)
    (meta,) = ad.grad(outer, [theta])
    _check_grad(meta.data, layout)
    return value, ParamVector(meta.data, layout)


def meta_grad_fomaml(params: ParamVector, support, query, alpha: float, steps: int, model_cfg: ModelConfig):
    """Query gradient at the adapted point, used directly as the meta-gradient."""
    adapted = adapted_params(params, support, alpha, steps, model_cfg)
    value, g = loss_and_grad(adapted, query, model_cfg)
    return value, ParamVector(g.values, params.layout)


def finite_diff_grad(scalar_map, params, h: float = 1e-4):
    """Central-difference gradient of ``scalar_map`` at ``params``.

    ``params`` may be a ParamVector (the map then receives ParamVectors) or a
    plain sequence (wrapped as a single ``theta`` block).
    """
    if not h > 0:
        raise InvalidInput(f"step h must be positive, got {h}")
    if not isinstance(params, ParamVector):
        values = np.asarray(params, dtype=np.float64).reshape(-1)
        params = ParamVector(values, make_layout([("theta", values.shape)]))
    base = params.values
    out = np.empty_like(base)
    for i in range(base.shape[0]):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        f_plus = float(scalar_map(params.with_values(plus)))
        f_minus = float(scalar_map(params.with_values(minus)))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            block = next(b.name for b in params.layout if b.offset <= i < b.stop)
            raise NumericalError(f"non-finite evaluation at coordinate {i}", block=block)
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return ParamVector(out, params.layout)
