"""Cost and accuracy objectives over inventory traces and forecast tensors.

All functions work on plain arrays and on DiffValues, so they serve both as
report metrics and as training losses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import ContractViolation
from .inventory import CostParams, InventoryTrace, _targets

log = logging.getLogger(__name__)

REL_EPS = 1e-8
_warned_zero_baseline = False


def _time_range(x, start, stop):
    t_len = de.value_of(x).shape[1]
    stop = t_len if stop is None else stop
    if not 0 <= start < stop <= t_len:
        raise ContractViolation(f"empty or invalid evaluation range [{start}, {stop}) for T={t_len}")
    if start == 0 and stop == t_len:
        return x
    return de.take(x, (slice(None), slice(start, stop)))


def holding_cost(net_inventory, c_h, start=0, stop=None):
    """Per-series c_h * mean_t max(0, i_t)."""
    i = _time_range(net_inventory, start, stop)
    return de.mul(c_h, de.mean(de.relu(i), axis=1))


def stockout_cost(net_inventory, c_s, start=0, stop=None):
    i = _time_range(net_inventory, start, stop)
    return de.mul(c_s, de.mean(de.relu(de.neg(i)), axis=1))


def order_variance_cost(orders, c_v, start=0, stop=None):
    """Per-series c_v * population variance of orders within the range."""
    o = _time_range(orders, start, stop)
    return de.mul(c_v, de.var(o, axis=1))


@dataclass
class CostBreakdown:
    """Per-series cost components, shape (N,)."""

    holding: object
    stockout: object
    order_variance: object

    @property
    def total(self):
        return total_cost(self)

    def aggregate(self, how="mean") -> "CostBreakdown":
        """Collapse the series axis into a one-element breakdown."""
        red = de.mean if how == "mean" else de.sum
        if how not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {how!r}")
        return CostBreakdown(*(de.reshape(red(x), (1,)) for x in (
            self.holding, self.stockout, self.order_variance)))

    def as_floats(self, how="mean") -> dict:
        agg = self.aggregate(how)
        return {
            "C_h": float(de.value_of(agg.holding)[0]),
            "C_s": float(de.value_of(agg.stockout)[0]),
            "C_v": float(de.value_of(agg.order_variance)[0]),
            "TC": float(de.value_of(agg.total)[0]),
        }


def cost_breakdown(trace: InventoryTrace, params: CostParams, start=0, stop=None) -> CostBreakdown:
    return CostBreakdown(
        holding_cost(trace.net_inventory, params.c_h, start, stop),
        stockout_cost(trace.net_inventory, params.c_s, start, stop),
        order_variance_cost(trace.orders, params.c_v, start, stop),
    )


def total_cost(breakdown: CostBreakdown):
    return de.add(de.add(breakdown.holding, breakdown.stockout), breakdown.order_variance)


def rel(x, x_naive):
    """sigmoid((x - x_naive) / x_naive); a non-positive baseline is replaced by 1e-8."""
    xn = np.asarray(de.value_of(x_naive), dtype=np.float64)
    if np.any(xn <= 0):
        global _warned_zero_baseline
        if not _warned_zero_baseline:
            log.warning("naive baseline cost <= 0; using eps=%g (reported once)", REL_EPS)
            _warned_zero_baseline = True
        xn = np.where(xn <= 0, REL_EPS, xn)
    return de.sigmoid(de.div(de.sub(x, xn), xn))


def rrms(own: CostBreakdown, naive: CostBreakdown):
    """Per-series relative root-mean-square cost against the naive baseline."""
    terms = [
        de.square(rel(a, b))
        for a, b in ((own.holding, naive.holding), (own.stockout, naive.stockout),
                     (own.order_variance, naive.order_variance))
    ]
    return de.sqrt(de.add(de.add(terms[0], terms[1]), terms[2]))


# -- generic accuracy -----------------------------------------------------


def _pairs(forecasts, demand, mask=None, start=0):
    """Targets aligned with an N x O x K tensor whose first origin is ``start``."""
    d = np.asarray(demand, dtype=np.float64)
    n, o, k = de.value_of(forecasts).shape
    t_len = d.shape[1]
    if start + o > t_len:
        raise ContractViolation(f"origins {start}..{start + o - 1} run past demand length {t_len}")
    tgt, valid = _targets(d, k)
    tgt = tgt[:, start : start + o]
    valid = valid[:, start : start + o].copy()
    if mask is not None:
        mk = np.zeros((n, t_len + k + 1), dtype=bool)
        mk[:, :t_len] = np.asarray(mask, dtype=bool)
        for l in range(k):
            valid[:, :, l] &= mk[:, start + l + 1 : start + l + 1 + o]
    if not valid.any():
        raise ContractViolation("no (origin, horizon) pair has an observed target")
    return tgt, valid.astype(np.float64)


def mse(forecasts, demand, mask=None, start=0):
    """Mean squared error over (origin, horizon) pairs whose target is observed."""
    tgt, valid = _pairs(forecasts, demand, mask, start)
    sq = de.mul(de.square(de.sub(forecasts, tgt)), valid)
    return de.div(de.sum(sq), valid.sum())


def smape(forecasts, demand, mask=None, start=0):
    """Symmetric MAPE in [0, 2]; a pair with zero target and zero forecast scores 0."""
    tgt, valid = _pairs(forecasts, demand, mask, start)
    num = de.mul(2.0, de.abs(de.sub(tgt, forecasts)))
    denom = de.add(np.abs(tgt), de.abs(forecasts))
    zero = (de.value_of(denom) == 0).astype(np.float64)
    terms = de.mul(de.div(num, de.add(denom, zero)), valid)
    return de.div(de.sum(terms), valid.sum())
