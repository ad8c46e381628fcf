"""Training: Adam, double/single-rollout losses and roll-forward evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from . import objectives as obj
from .diffengine import ContractViolation, Tape
from .forecast import ForecastTensor, NaiveSeasonal
from .inventory import CostParams, closed_form_trace
from .panel import DemandPanel

log = logging.getLogger(__name__)

OBJECTIVES = ("mse", "tc", "rrms")


@dataclass
class TrainConfig:
    objective: str = "tc"
    costs: CostParams = field(default_factory=lambda: CostParams(lead_time=6))
    window: int = 24
    horizon: int = 12
    period: int = 12
    lr: float = 0.01
    steps_per_update: int = 5
    init_steps: int = 100
    batch_size: int | None = None
    rollout: str = "double"
    max_grad_norm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.rollout not in ("double", "single"):
            raise ContractViolation(f"rollout must be 'double' or 'single', got {self.rollout!r}")
        if self.window < 1:
            raise ContractViolation(f"window must be >= 1, got {self.window}")
        if self.rollout == "double" and self.horizon < self.costs.lead_time:
            raise ContractViolation(
                f"double rollout needs horizon >= lead time ({self.horizon} < {self.costs.lead_time})"
            )

    @property
    def lead_time(self) -> int:
        return self.costs.lead_time

    def to_dict(self):
        return asdict(self)


# -- optimiser ------------------------------------------------------------


class Adam:
    """Adam with global gradient-norm clipping.  State persists across calls."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_norm=10.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self._undo = None

    def update(self, params: dict, grads: dict):
        self._undo = ({k: v.copy() for k, v in params.items()},
                      {k: v.copy() for k, v in self.m.items()},
                      {k: v.copy() for k, v in self.v.items()}, self.t)
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = 1.0 if norm <= self.max_grad_norm else self.max_grad_norm / norm
        self.t += 1
        for name, g in grads.items():
            g = g * clip
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def undo(self, params: dict) -> bool:
        """Roll back the last update.  Returns False if there is nothing to undo."""
        if self._undo is None:
            return False
        saved, self.m, self.v, self.t = self._undo
        params.update(saved)
        self._undo = None
        return True


def _loss_and_grads(model, closure):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.params.items()}
    loss = closure(leaves)
    if not isinstance(loss, de.DiffValue):
        # loss does not depend on the parameters
        return float(np.asarray(loss)), {k: np.zeros_like(v) for k, v in model.params.items()}
    tape.backward(loss)
    return float(loss.value), {k: leaves[k].grad for k in leaves}


def _finite(loss, grads):
    return math.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())


def optimize_step(model, closure, opt: Adam) -> float:
    """One Adam step on ``closure(params) -> scalar loss``.  Returns the loss.

    On a non-finite loss the previous update is undone, the learning rate is
    halved and the step retried; a second failure raises FloatingPointError.
    """
    if not model.params:
        return float(np.asarray(de.value_of(closure({}))))
    loss, grads = _loss_and_grads(model, closure)
    if not _finite(loss, grads):
        if not opt.undo(model.params):
            raise FloatingPointError("non-finite loss at the initial parameters")
        opt.lr *= 0.5
        log.warning("non-finite loss; retrying with lr=%g", opt.lr)
        loss, grads = _loss_and_grads(model, closure)
        if not _finite(loss, grads):
            raise FloatingPointError("non-finite loss after halving the learning rate")
    opt.update(model.params, grads)
    return loss


# -- losses ---------------------------------------------------------------


def eligible_origins(model, t_avail: int, horizon: int) -> np.ndarray:
    """Origins with enough history and all ``horizon`` targets inside [0, t_avail)."""
    lo = model.min_history - 1
    hi = t_avail - 1 - horizon
    return np.arange(lo, hi + 1) if hi >= lo else np.arange(0)


def _rollout_weights(mask, origins, history, horizon):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    w = np.ones((mask.shape[0], len(origins)))
    for j, t in enumerate(origins):
        w[:, j] = mask[:, t - history + 1 : t + horizon + 1].all(axis=1)
    return w


def _local_system(f, values, origins, lead_time):
    """Turn N x O x H forecasts into (N*O) rollouts of H - L + 1 lead-time windows.

    Rollout step j stands for time origin + j: its lead-time forecast covers
    horizon entries j .. j+L-1 and the demand it consumes is values[origin + j].
    """
    n, o, h = de.value_of(f).shape
    steps = h - lead_time + 1
    flat = de.reshape(f, (n * o, h))
    windows = [de.take(flat, (slice(None), slice(j, j + lead_time))) for j in range(steps)]
    local_f = de.stack(windows, axis=1)
    idx = origins[None, :, None] + np.arange(steps)[None, None, :]
    local_d = values[:, idx[0]].reshape(n * o, steps)
    return local_f, local_d


def _weighted_mean(per, weights):
    if weights is None:
        return de.mean(per)
    w = weights.reshape(-1)
    if w.sum() == 0:
        raise ContractViolation("every rollout touches masked demand")
    return de.div(de.sum(de.mul(per, w)), w.sum())


def double_rollout_loss(model, values, config: TrainConfig, origins, params=None,
                        mask=None, covariates=None):
    """Mean objective over inventory simulations rolled out inside each forecast horizon."""
    values = np.asarray(values, dtype=np.float64)
    origins = np.asarray(origins, dtype=np.int64)
    if origins.size == 0:
        raise ContractViolation("no eligible origin for double rollout")
    H, L = config.horizon, config.lead_time
    if origins.max() + H >= values.shape[1]:
        raise ContractViolation(f"origin {int(origins.max())} lacks {H} future targets")
    weights = _rollout_weights(mask, origins, model.min_history, H)
    f = model.forecast_batch(values, origins, H, params, covariates)
    if config.objective == "mse":
        tgt = values[:, origins[:, None] + np.arange(1, H + 1)[None, :]]
        per = de.mean(de.square(de.sub(f, tgt)), axis=2)
        return _weighted_mean(de.reshape(per, (-1,)), weights)

    local_f, local_d = _local_system(f, values, origins, L)
    trace = closed_form_trace(local_f, local_d, config.costs)
    own = obj.cost_breakdown(trace, config.costs)
    if config.objective == "tc":
        return _weighted_mean(obj.total_cost(own), weights)

    naive = NaiveSeasonal(getattr(model, "period", config.period))
    nf = naive.forecast_batch(values, origins, H)
    nlf, _ = _local_system(nf, values, origins, L)
    base = obj.cost_breakdown(closed_form_trace(nlf, local_d, config.costs), config.costs)

    def agg(cb):
        return obj.CostBreakdown(*(de.reshape(_weighted_mean(x, weights), (1,)) for x in (
            cb.holding, cb.stockout, cb.order_variance)))

    return de.sum(obj.rrms(agg(own), agg(base)))


def single_rollout_loss(model, values, config: TrainConfig, start, stop=None, params=None,
                        mask=None, covariates=None):
    """Objective of one inventory simulation over origins [start, stop), all series at once."""
    values = np.asarray(values, dtype=np.float64)
    stop = values.shape[1] if stop is None else stop
    if stop <= start:
        raise ContractViolation(f"empty single-rollout range [{start}, {stop})")
    L = config.lead_time
    origins = np.arange(start, stop)
    f = model.forecast_batch(values, origins, L, params, covariates)
    if config.objective == "mse":
        return obj.mse(f, values, mask, start)
    demand = values[:, start:stop]
    own = obj.cost_breakdown(closed_form_trace(f, demand, config.costs), config.costs)
    if config.objective == "tc":
        return de.mean(obj.total_cost(own))
    naive = NaiveSeasonal(getattr(model, "period", config.period))
    nf = naive.forecast_batch(values, origins, L)
    base = obj.cost_breakdown(closed_form_trace(nf, demand, config.costs), config.costs)
    return de.mean(obj.rrms(own, base))


def _closure(model, values, mask, config, rng, covariates):
    """Loss closure over data ``values`` (everything observed so far)."""
    t_avail = values.shape[1]
    if config.rollout == "double":
        origins = eligible_origins(model, t_avail, config.horizon)
        if origins.size == 0:
            raise ContractViolation(
                f"no eligible origin: need {model.min_history} history + {config.horizon} "
                f"targets, have {t_avail} timesteps"
            )
        if config.batch_size and origins.size > config.batch_size:
            origins = np.sort(rng.choice(origins, size=config.batch_size, replace=False))
        return lambda p: double_rollout_loss(model, values, config, origins, p, mask, covariates)
    start = max(model.min_history - 1, 0)
    if config.batch_size and t_avail - start > config.batch_size:
        start = t_avail - config.batch_size
    return lambda p: single_rollout_loss(model, values, config, start, t_avail, p, mask, covariates)


def fit(model, panel: DemandPanel, config: TrainConfig, end: int, steps: int, opt: Adam,
        rng=None, covariates=None):
    """``steps`` optimiser steps on data before ``end``.  Returns the loss history."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    values = panel.values[:, :end]
    mask = panel.mask[:, :end]
    losses = []
    for _ in range(steps):
        losses.append(optimize_step(model, _closure(model, values, mask, config, rng, covariates),
                                    opt))
    return losses


def roll_forward(model, panel: DemandPanel, config: TrainConfig, t0: int, t1: int,
                 opt: Adam | None = None, rng=None, covariates=None, keep_snapshots=False):
    """Fine-tune then forecast at every origin t in [t0, t1).

    At origin t only panel[:, :t+1] is visible.  Returns the N x (t1-t0) x L
    forecast tensor and, optionally, a parameter snapshot per origin.
    """
    if t0 < model.min_history - 1:
        raise ContractViolation(f"roll-forward start {t0} needs t >= {model.min_history - 1}")
    if t1 > panel.length or t1 <= t0:
        raise ContractViolation(f"bad roll-forward range [{t0}, {t1}) for T={panel.length}")
    opt = Adam(config.lr, max_grad_norm=config.max_grad_norm) if opt is None else opt
    rng = np.random.default_rng(config.seed) if rng is None else rng
    L = config.lead_time
    out = np.zeros((panel.n_series, t1 - t0, L))
    snaps = []
    for t in range(t0, t1):
        values = panel.values[:, : t + 1]
        mask = panel.mask[:, : t + 1]
        if config.steps_per_update and model.params:
            try:
                closure = _closure(model, values, mask, config, rng, covariates)
            except ContractViolation:
                closure = None  # not enough data yet to fine-tune
            for _ in range(config.steps_per_update if closure else 0):
                optimize_step(model, closure, opt)
        f = model.forecast_batch(values, [t], L, covariates=covariates)
        out[:, t - t0, :] = de.value_of(f)[:, 0, :]
        if keep_snapshots:
            snaps.append({k: v.copy() for k, v in model.params.items()})
    return ForecastTensor(out, t0, "lead"), snaps


# -- evaluation -----------------------------------------------------------


def naive_forecasts(panel: DemandPanel, t0: int, t1: int, lead_time: int) -> ForecastTensor:
    naive = NaiveSeasonal(panel.period)
    f = naive.forecast_batch(panel.values[:, :t1], np.arange(t0, t1), lead_time)
    return ForecastTensor(f, t0, "lead")


def evaluate_forecasts(ft: ForecastTensor, panel: DemandPanel, costs: CostParams,
                       eval_start=None, eval_stop=None, how="mean") -> dict:
    """Inventory and accuracy metrics of a lead-time forecast tensor.

    The inventory system runs over every origin in the tensor; costs, MSE and
    sMAPE are taken over origins in [eval_start, eval_stop).  RRMS compares
    against the naive seasonal model run through the same pipeline.
    """
    eval_start = ft.start if eval_start is None else eval_start
    eval_stop = ft.stop if eval_stop is None else eval_stop
    if not ft.start <= eval_start < eval_stop <= ft.stop:
        raise ContractViolation(
            f"evaluation range [{eval_start}, {eval_stop}) outside forecasts [{ft.start}, {ft.stop})"
        )
    if ft.stop > panel.length:
        raise ContractViolation(f"forecast origins run to {ft.stop}, demand has {panel.length}")
    if ft.values.shape[0] != panel.n_series:
        raise ContractViolation(
            f"forecasts cover {ft.values.shape[0]} series, demand has {panel.n_series}"
        )
    demand = panel.values[:, ft.start : ft.stop]
    a, b = eval_start - ft.start, eval_stop - ft.start
    trace = closed_form_trace(ft.values, demand, costs, ft.origin_mask)
    own = obj.cost_breakdown(trace, costs, a, b)
    nf = naive_forecasts(panel, ft.start, ft.stop, costs.lead_time)
    base = obj.cost_breakdown(closed_form_trace(nf.values, demand, costs), costs, a, b)
    out = own.as_floats(how)
    out["RRMS"] = float(np.mean(obj.rrms(own, base)))
    sub = ft.values[:, a:b, : costs.lead_time]
    out["MSE"] = float(obj.mse(sub, panel.values, panel.mask, eval_start))
    out["sMAPE"] = float(obj.smape(sub, panel.values, panel.mask, eval_start))
    out["negative_orders"] = trace.negative_orders
    return out


def manifest(config: TrainConfig, inputs: dict, extra=None) -> str:
    """JSON echo of the config plus a sha256 over the input arrays."""
    h = hashlib.sha256()
    for name in sorted(inputs):
        arr = np.ascontiguousarray(inputs[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    body = {"config": config.to_dict(), "seed": config.seed, "input_sha256": h.hexdigest()}
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True, default=str) + "\n"
