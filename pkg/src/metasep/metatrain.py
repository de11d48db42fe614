"""Joint training, MAML and FOMAML outer loops, one-shot fine-tuning and the
validation-driven learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np

from .diffcore import adapted_params, batch_loss, loss_and_grad, meta_grad_fomaml, meta_grad_maml
from .errors import ConfigError, EmptyTaskSet, InvalidInput
from .evaluation import query_si_snri
from .params import ParamVector
from .sepmodel import ModelConfig, init_params, params_from_dict, params_to_dict
from .tasks import query_size, sample_meta_batch

log = logging.getLogger(__name__)

METHODS = ("joint", "maml", "fomaml")
DEFAULT_ALPHA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    method: str = "maml"
    alpha: float = 0.01
    beta: float = 1e-3
    inner_steps: int = 1
    meta_batch: int = 3
    epochs: int = 200
    patience: int = 3
    seed: int = 0
    clip_norm: float = 5.0

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.meta_batch < 1 or self.patience < 1 or self.inner_steps < 1 or self.epochs < 0:
            raise ConfigError("meta_batch, patience and inner_steps must be >= 1; epochs >= 0")
        if self.method == "maml" and self.inner_steps != 1:
            raise ConfigError("exact MAML supports inner_steps = 1 only")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**data).validate()


def _hex(a):
    return [float(v).hex() for v in np.asarray(a).reshape(-1)]


def _unhex(items):
    return np.array([float.fromhex(s) for s in items], dtype=np.float64)


@dataclass
class TrainState:
    params: ParamVector
    best_params: ParamVector
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    best_val: float
    non_improve: int
    epoch: int

    @classmethod
    def initial(cls, params: ParamVector, lr: float) -> "TrainState":
        zeros = np.zeros_like(params.values)
        return cls(params, params.copy(), zeros, zeros.copy(), 0, lr, math.inf, 0, 0)

    def to_dict(self) -> dict:
        return {
            "params": params_to_dict(self.params),
            "best_params": params_to_dict(self.best_params),
            "adam_m": _hex(self.m),
            "adam_v": _hex(self.v),
            "step": self.step,
            "lr": float(self.lr).hex(),
            "best_val": float(self.best_val).hex(),
            "non_improve": self.non_improve,
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, data) -> "TrainState":
        return cls(
            params=params_from_dict(data["params"]),
            best_params=params_from_dict(data["best_params"]),
            m=_unhex(data["adam_m"]),
            v=_unhex(data["adam_v"]),
            step=int(data["step"]),
            lr=float.fromhex(data["lr"]),
            best_val=float.fromhex(data["best_val"]),
            non_improve=int(data["non_improve"]),
            epoch=int(data["epoch"]),
        )


def adam_update(state: TrainState, grad: np.ndarray) -> None:
    b1, b2 = ADAM_BETAS
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    values = state.params.values - state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    state.params = state.params.with_values(values)


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm and norm > max_norm:
        log.debug("clipping gradient norm %.3g to %.3g", norm, max_norm)
        return grad * (max_norm / norm)
    return grad


def record_validation(state: TrainState, val_loss: float, patience: int) -> bool:
    """Track the best parameters and halve the lr after ``patience`` misses in a row."""
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.best_params = state.params.copy()
        state.non_improve = 0
        return True
    state.non_improve += 1
    if state.non_improve >= patience:
        state.lr *= 0.5
        state.non_improve = 0
        log.info("no validation improvement for %d checks; lr -> %g", patience, state.lr)
    return False


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _mean_grad(grads):
    total = grads[0].values.copy()
    for g in grads[1:]:
        total = total + g.values
    return total / len(grads)


def joint_gradient(params, groups, model_cfg: ModelConfig, workers=1):
    """(mean loss, mean gradient) over example groups, summed in group order."""
    results = _map(lambda g: loss_and_grad(params, g, model_cfg), list(groups), workers)
    return float(np.mean([r[0] for r in results])), _mean_grad([r[1] for r in results])


def meta_gradient(params, tasks, cfg: TrainConfig, model_cfg: ModelConfig, workers=1):
    """(mean support loss, mean query loss, aggregate meta-gradient) of a meta-batch.

    Task gradients are combined in task order whatever order workers finish in.
    """
    meta = meta_grad_maml if cfg.method == "maml" else meta_grad_fomaml

    def per_task(task):
        sup = batch_loss(params, task.support, model_cfg)
        que, g = meta(params, task.support, task.query, cfg.alpha, cfg.inner_steps, model_cfg)
        return sup, que, g

    results = _map(per_task, list(tasks), workers)
    return (
        float(np.mean([r[0] for r in results])),
        float(np.mean([r[1] for r in results])),
        _mean_grad([r[2] for r in results]),
    )


def joint_step(state: TrainState, groups, cfg: TrainConfig, model_cfg: ModelConfig, workers=1) -> float:
    """One optimizer step on the mean loss of the example groups."""
    loss, grad = joint_gradient(state.params, groups, model_cfg, workers)
    adam_update(state, clip_by_norm(grad, cfg.clip_norm))
    return loss


def meta_step(state: TrainState, tasks, cfg: TrainConfig, model_cfg: ModelConfig, workers=1):
    """One outer update from a meta-batch; returns (mean support loss, mean query loss)."""
    sup, que, grad = meta_gradient(state.params, tasks, cfg, model_cfg, workers)
    adam_update(state, clip_by_norm(grad, cfg.clip_norm))
    return sup, que


def joint_validation(params, val_tasks, model_cfg) -> float:
    return float(np.mean([batch_loss(params, t.query, model_cfg) for t in val_tasks]))


def meta_validation(params, val_tasks, alpha, model_cfg) -> float:
    losses = []
    for t in val_tasks:
        adapted = adapted_params(params, t.support, alpha, 1, model_cfg)
        losses.append(batch_loss(adapted, t.query, model_cfg))
    return float(np.mean(losses))


def iterations_per_epoch(num_tasks: int, meta_batch: int) -> int:
    return -(-num_tasks // meta_batch)


def _epoch_rng(cfg: TrainConfig, epoch: int):
    return np.random.default_rng([cfg.seed, 0x7A5C, epoch])


def _run(
    train_tasks,
    val_tasks,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    step: Callable,
    validate: Callable,
    state: Optional[TrainState],
    logger: Optional[Callable],
    on_epoch_end: Optional[Callable],
):
    if state is None:
        state = TrainState.initial(init_params(model_cfg), cfg.beta)
    iters = iterations_per_epoch(len(train_tasks), cfg.meta_batch)
    for epoch in range(state.epoch, cfg.epochs):
        rng = _epoch_rng(cfg, epoch)
        for i in range(iters):
            start = time.perf_counter()
            sup_loss, que_loss = step(state, rng)
            if logger is not None:
                logger({
                    "event": "iteration",
                    "epoch": epoch,
                    "iteration": epoch * iters + i,
                    "support_loss": sup_loss,
                    "query_loss": que_loss,
                    "lr": state.lr,
                    "wall_ms": 1e3 * (time.perf_counter() - start),
                })
        val_loss = validate(state.params)
        improved = record_validation(state, val_loss, cfg.patience)
        state.epoch = epoch + 1
        if logger is not None:
            logger({"event": "validation", "epoch": epoch, "val_loss": val_loss, "improved": improved, "lr": state.lr})
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def train_joint(
    train_tasks,
    val_tasks,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    state: Optional[TrainState] = None,
    logger=None,
    on_epoch_end=None,
    workers: int = 1,
    return_state: bool = False,
):
    """Pool every support and query mixture of the training tasks and train on the pool.

    Each step draws ``meta_batch`` groups of ``1 + |query|`` pooled mixtures so
    the step count and data per step match the meta-learning methods.
    """
    cfg.validate()
    if cfg.method != "joint":
        raise ConfigError("train_joint needs method 'joint'")
    pool = [ex for t in train_tasks for ex in t.all_examples()]
    if not pool:
        raise EmptyTaskSet("no training mixtures")
    if not val_tasks:
        raise EmptyTaskSet("no validation tasks")
    group = 1 + query_size(train_tasks[0].num_sources)
    per_step = min(len(pool), cfg.meta_batch * group)

    def step(st, rng):
        picks = rng.choice(len(pool), per_step, replace=False)
        chosen = [pool[int(i)] for i in picks]
        groups = [chosen[k:k + group] for k in range(0, per_step, group)]
        loss = joint_step(st, groups, cfg, model_cfg, workers)
        return None, loss

    state = _run(train_tasks, val_tasks, cfg, model_cfg, step,
                 lambda p: joint_validation(p, val_tasks, model_cfg), state, logger, on_epoch_end)
    return state if return_state else state.best_params


def train_meta(
    train_tasks,
    val_tasks,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    state: Optional[TrainState] = None,
    logger=None,
    on_epoch_end=None,
    workers: int = 1,
    return_state: bool = False,
):
    """MAML / FOMAML: adapt on each task's support set, step on the mean query
    meta-gradient of the batch."""
    cfg.validate()
    if cfg.method not in ("maml", "fomaml"):
        raise ConfigError("train_meta needs method 'maml' or 'fomaml'")
    if cfg.meta_batch > len(train_tasks):
        raise InvalidInput(f"meta batch {cfg.meta_batch} exceeds {len(train_tasks)} training tasks")
    if not val_tasks:
        raise EmptyTaskSet("no validation tasks")

    def step(st, rng):
        batch = sample_meta_batch(train_tasks, cfg.meta_batch, rng)
        return meta_step(st, batch, cfg, model_cfg, workers)

    state = _run(train_tasks, val_tasks, cfg, model_cfg, step,
                 lambda p: meta_validation(p, val_tasks, cfg.alpha, model_cfg), state, logger, on_epoch_end)
    return state if return_state else state.best_params


def train(train_tasks, val_tasks, cfg: TrainConfig, model_cfg: ModelConfig, **kwargs):
    if cfg.method == "joint":
        return train_joint(train_tasks, val_tasks, cfg, model_cfg, **kwargs)
    return train_meta(train_tasks, val_tasks, cfg, model_cfg, **kwargs)


def finetune(params: ParamVector, support, alpha: float, steps: int, model_cfg: ModelConfig) -> ParamVector:
    """Deployment-time adaptation on a target task's support mixture."""
    return adapted_params(params, support, alpha, steps, model_cfg)


def lr_sweep_finetune(params, task, alphas=DEFAULT_ALPHA_GRID, model_cfg: ModelConfig = None, steps: int = 1):
    """Best query Si-SNRi over a grid of fine-tuning rates (ties go to the smaller rate)."""
    alphas = sorted(float(a) for a in alphas)
    if not alphas:
        raise InvalidInput("empty learning-rate grid")
    best_alpha, best_score = None, -math.inf
    for alpha in alphas:
        score = query_si_snri(finetune(params, task.support, alpha, steps, model_cfg), task.query, model_cfg)
        if score > best_score:
            best_alpha, best_score = alpha, score
    return best_alpha, best_score


class JsonlLogger:
    """Append training records to a line-delimited JSON file."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a")

    def __call__(self, record):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()
