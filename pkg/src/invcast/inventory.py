"""Order-up-to inventory system.

Two independent paths compute the same trace:

* closed form, vectorised over time and differentiable w.r.t. the forecasts;
* :func:`simulate_recursive`, a literal step-by-step loop used as an oracle.

Time is 0-based and every quantity at t < 0 is zero, so i_0 = -d_0.
Forecast tensors are N x T x K with entry (n, t, k) predicting demand at
t + k + 1 from data through t.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import ContractViolation


@dataclass(frozen=True)
class CostParams:
    c_h: float = 1.0
    c_s: float = 1.0
    c_v: float = 0.0
    alpha_s: float = 0.5
    lead_time: int = 6

    def __post_init__(self):
        if min(self.c_h, self.c_s, self.c_v) < 0:
            raise ContractViolation(
                f"unit costs must be >= 0, got {(self.c_h, self.c_s, self.c_v)}"
            )
        if not 0 < self.alpha_s < 1:
            raise ContractViolation(f"alpha_s must lie in (0, 1), got {self.alpha_s}")
        if int(self.lead_time) != self.lead_time or self.lead_time < 1:
            raise ContractViolation(f"lead_time must be a positive integer, got {self.lead_time}")

    @property
    def z(self) -> float:
        return inv_norm_cdf(self.alpha_s)

    def scaled(self, factor: float) -> "CostParams":
        return CostParams(self.c_h * factor, self.c_s * factor, self.c_v * factor,
                          self.alpha_s, self.lead_time)


@dataclass
class InventoryTrace:
    """Per-series N x T state variables; entries are ndarrays or DiffValues."""

    orders: object
    net_inventory: object
    inventory_position: object
    wip: object
    safety_stock: object
    lead_demand: object

    def numpy(self) -> "InventoryTrace":
        return InventoryTrace(*(de.value_of(x) for x in (
            self.orders, self.net_inventory, self.inventory_position,
            self.wip, self.safety_stock, self.lead_demand)))

    @property
    def negative_orders(self) -> int:
        """How many orders came out negative (they are never clipped)."""
        return int((de.value_of(self.orders) < 0).sum())

    def to_csv(self, path, series_ids=None, t_offset=0):
        tr = self.numpy()
        n, t_len = tr.orders.shape
        ids = series_ids if series_ids is not None else [str(i) for i in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series_id", "t", "order", "net_inventory", "inventory_position",
                        "wip", "safety_stock"])
            for r in range(n):
                for t in range(t_len):
                    w.writerow([ids[r], t + t_offset] + [
                        repr(float(a[r, t])) for a in (
                            tr.orders, tr.net_inventory, tr.inventory_position,
                            tr.wip, tr.safety_stock)
                    ])


# -- inverse normal CDF ---------------------------------------------------

# Acklam's rational approximation (relative error ~1.2e-9 before refinement)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile: rational approximation plus one Newton step."""
    if not 0.0 < p < 1.0:
        raise ContractViolation(f"inv_norm_cdf needs p in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    density = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return x - (norm_cdf(x) - p) / density


# -- building blocks ------------------------------------------------------


def _shift(x, s):
    """Delay an N x T array by ``s`` steps along time, filling with zeros."""
    if s == 0:
        return x
    n, t_len = de.value_of(x).shape
    if s >= t_len:
        return np.zeros((n, t_len))
    return de.concat([np.zeros((n, s)), de.take(x, (slice(None), slice(0, t_len - s)))], axis=1)


def lead_demand(forecasts, lead_time: int):
    """Forecasted lead-time demand: sum of the first ``lead_time`` horizon entries."""
    k = de.value_of(forecasts).shape[-1]
    if k < lead_time:
        raise ContractViolation(f"forecast horizon {k} shorter than lead time {lead_time}")
    if k == lead_time:
        return de.sum(forecasts, axis=-1)
    return de.sum(de.take(forecasts, (Ellipsis, slice(0, lead_time))), axis=-1)


def true_lead_demand(demand, lead_time: int):
    """Realised lead-time demand and its validity mask (needs demand through t + L)."""
    d = np.asarray(demand, dtype=np.float64)
    n, t_len = d.shape
    out = np.zeros_like(d)
    valid = np.zeros(d.shape, dtype=bool)
    for t in range(t_len - lead_time):
        out[:, t] = d[:, t + 1 : t + 1 + lead_time].sum(axis=1)
        valid[:, t] = True
    return out, valid


def _targets(demand, k):
    """targets[n, t, l] = demand[n, t + l + 1], zero past the end, plus validity."""
    d = np.asarray(demand, dtype=np.float64)
    n, t_len = d.shape
    tgt = np.zeros((n, t_len, k))
    valid = np.zeros((n, t_len, k), dtype=bool)
    for l in range(k):
        span = t_len - l - 1
        if span > 0:
            tgt[:, :span, l] = d[:, l + 1 :]
            valid[:, :span, l] = True
    return tgt, valid


def forecast_error_std(forecasts, demand, origin_mask=None):
    """Rolling standard deviation of realised forecast errors, N x T.

    sigma[n, t'] is the RMS of every error whose target time is <= t', taken
    from running sums over target time.  Before any error has realised it is 0.
    """
    f_val = de.value_of(forecasts)
    n, t_len, k = f_val.shape
    tgt, _ = _targets(demand, k)
    if origin_mask is None:
        origin_mask = np.ones((n, t_len), dtype=bool)
    om = np.asarray(origin_mask, dtype=np.float64)
    sq = de.square(de.sub(tgt, forecasts))
    by_target = np.zeros((n, t_len))
    counts = np.zeros((n, t_len))
    for l in range(k):
        e_l = de.mul(de.take(sq, (slice(None), slice(None), l)), om)
        by_target = de.add(by_target, _shift(e_l, l + 1))
        counts = counts + _shift(om, l + 1)
    cum_sq = de.cumsum(by_target, axis=1)
    cum_n = np.cumsum(counts, axis=1)
    return de.sqrt(de.div(cum_sq, np.maximum(cum_n, 1.0)))


def safety_stock(sigma_e, alpha_s: float):
    return de.mul(inv_norm_cdf(alpha_s), sigma_e)


def _target_level(lead_d, sigma_e, z):
    """Order-up-to level D^_t + z * sigma_t (z = 0 skips sigma entirely)."""
    if z == 0.0 or sigma_e is None:
        return lead_d
    return de.add(lead_d, de.mul(z, sigma_e))


def orders_closed_form(lead_d, sigma_e, demand, z=0.0):
    """o_t = (D^_t - D^_{t-1}) + z (sigma_t - sigma_{t-1}) + d_t."""
    level = _target_level(lead_d, sigma_e, z)
    return de.add(de.sub(level, _shift(level, 1)), np.asarray(demand, dtype=np.float64))


def _window_sum(demand, lead_time):
    d = np.asarray(demand, dtype=np.float64)
    out = np.zeros_like(d)
    for j in range(lead_time):
        out += _shift(d, j)
    return out


def net_inventory_closed_form(lead_d, sigma_e, demand, lead_time, z=0.0):
    """i_t = D^_{t-L} + z sigma_{t-L} - sum_{a=t-L+1..t} d_a."""
    level = _target_level(lead_d, sigma_e, z)
    return de.sub(_shift(level, lead_time), _window_sum(demand, lead_time))


def inventory_position_closed_form(lead_d, sigma_e, demand, z=0.0):
    """ip_t = D^_{t-1} + z sigma_{t-1} - d_t."""
    level = _target_level(lead_d, sigma_e, z)
    return de.sub(_shift(level, 1), np.asarray(demand, dtype=np.float64))


def closed_form_trace(forecasts, demand, params: CostParams, origin_mask=None) -> InventoryTrace:
    """Full trace from an N x T x K forecast tensor (K >= L) and N x T demand."""
    L = params.lead_time
    lead_d = lead_demand(forecasts, L)
    z = params.z
    n, t_len = np.asarray(demand).shape
    if z == 0.0:
        sigma = None
        ss = np.zeros((n, t_len))
    else:
        lead_f = forecasts
        if de.value_of(forecasts).shape[-1] != L:
            lead_f = de.take(forecasts, (Ellipsis, slice(0, L)))
        sigma = forecast_error_std(lead_f, demand, origin_mask)
        ss = safety_stock(sigma, params.alpha_s)
    orders = orders_closed_form(lead_d, sigma, demand, z)
    net = net_inventory_closed_form(lead_d, sigma, demand, L, z)
    ip = inventory_position_closed_form(lead_d, sigma, demand, z)
    return InventoryTrace(orders, net, ip, de.sub(ip, net), ss, lead_d)


# -- oracle ---------------------------------------------------------------


def simulate_recursive(forecasts, demand, params: CostParams, origin_mask=None) -> InventoryTrace:
    """Step-by-step simulation of the order-up-to policy (not differentiable)."""
    f = np.asarray(de.value_of(forecasts), dtype=np.float64)
    d = np.asarray(demand, dtype=np.float64)
    n, t_len = d.shape
    L = params.lead_time
    z = inv_norm_cdf(params.alpha_s)
    if origin_mask is None:
        origin_mask = np.ones((n, t_len), dtype=bool)
    shape = (n, t_len)
    o, i, ip, w, ss, lead = (np.zeros(shape) for _ in range(6))
    for r in range(n):
        sq_total = 0.0
        count = 0
        pending = [[] for _ in range(t_len + L + 1)]  # squared errors keyed by target time
        for t in range(t_len):
            lead[r, t] = sum(f[r, t, k] for k in range(L))
            if origin_mask[r, t]:
                for k in range(L):
                    target = t + k + 1
                    if target < t_len:
                        pending[target].append((d[r, target] - f[r, t, k]) ** 2)
            # errors whose target is t have now realised
            for e in pending[t]:
                sq_total += e
                count += 1
            sigma = math.sqrt(sq_total / count) if count else 0.0
            ss[r, t] = z * sigma
            prev_ip = ip[r, t - 1] if t >= 1 else 0.0
            prev_o = o[r, t - 1] if t >= 1 else 0.0
            arriving = o[r, t - L] if t - L >= 0 else 0.0
            ip[r, t] = prev_ip + prev_o - d[r, t]
            o[r, t] = lead[r, t] + ss[r, t] - ip[r, t]
            i[r, t] = (i[r, t - 1] if t >= 1 else 0.0) + arriving - d[r, t]
            w[r, t] = (w[r, t - 1] if t >= 1 else 0.0) + prev_o - arriving
    return InventoryTrace(o, i, ip, w, ss, lead)
