"""Forecasters: seasonal scaler, naive seasonal baseline and an LSTM encoder-decoder.

Every model exposes ``forecast_batch(values, origins, horizon, params=None,
covariates=None)`` returning an N x len(origins) x horizon tensor, where
``values`` holds demand through the latest observed time.  Passing a dict of
DiffValues as ``params`` records the computation on their tape.
"""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import ContractViolation
from .panel import CovariatePanel, DemandPanel

EMBED_DIM = 10


@dataclass
class ForecastTensor:
    """values[n, j, k] predicts demand at (start + j) + k + 1 from data through start + j."""

    values: np.ndarray
    start: int
    kind: str = "lead"
    origin_mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise ContractViolation(f"forecast tensor must be N x T x K, got {self.values.shape}")
        if self.origin_mask is None:
            self.origin_mask = np.ones(self.values.shape[:2], dtype=bool)

    @property
    def stop(self) -> int:
        return self.start + self.values.shape[1]

    def to_csv(self, path, series_ids):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series_id", "t", "k", "forecast"])
            n, o, k = self.values.shape
            for r in range(n):
                for j in range(o):
                    if not self.origin_mask[r, j]:
                        continue
                    for kk in range(k):
                        w.writerow([series_ids[r], self.start + j, kk + 1,
                                    repr(float(self.values[r, j, kk]))])

    @classmethod
    def from_csv(cls, path, series_ids) -> "ForecastTensor":
        """Read ``series_id,t,k,forecast`` rows; series order follows ``series_ids``."""
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["series_id", "t", "k", "forecast"]:
                raise ValueError(f"{path}:1: expected header series_id,t,k,forecast")
            for row in reader:
                if not row:
                    continue
                try:
                    rows.append((row[0], int(row[1]), int(row[2]), float(row[3])))
                except (ValueError, IndexError):
                    raise ValueError(f"{path}:{reader.line_num}: malformed row {row}") from None
        if not rows:
            raise ValueError(f"{path}: no forecast rows")
        index = {sid: r for r, sid in enumerate(series_ids)}
        unknown = {r[0] for r in rows} - set(index)
        if unknown:
            raise ValueError(f"{path}: series not in demand file: {sorted(unknown)[:5]}")
        t0 = min(r[1] for r in rows)
        t1 = max(r[1] for r in rows) + 1
        k = max(r[2] for r in rows)
        if min(r[2] for r in rows) < 1:
            raise ValueError(f"{path}: horizon index k must start at 1")
        vals = np.zeros((len(series_ids), t1 - t0, k))
        seen = np.zeros(vals.shape, dtype=bool)
        for sid, t, kk, v in rows:
            vals[index[sid], t - t0, kk - 1] = v
            seen[index[sid], t - t0, kk - 1] = True
        origin = seen.all(axis=2)
        if (seen.any(axis=2) & ~origin).any():
            raise ValueError(f"{path}: some origins lack a full set of k=1..{k} forecasts")
        return cls(vals, t0, "lead", origin)


def _check_origins(origins, values, min_history):
    origins = np.atleast_1d(np.asarray(origins, dtype=np.int64))
    t_avail = values.shape[1]
    if origins.size == 0:
        raise ContractViolation("no forecast origins given")
    if origins.min() < min_history - 1:
        raise ContractViolation(
            f"origin {int(origins.min())} has too little history; need t >= {min_history - 1}"
        )
    if origins.max() >= t_avail:
        raise ContractViolation(f"origin {int(origins.max())} beyond observed data (T={t_avail})")
    return origins


class SeasonalScaler:
    """beta times the demand one period back.

    Horizons past one period reuse the model's own forecasts, giving
    beta**m * d[t + k - m P] with m = ceil(k / P).
    """

    kind = "seasonal_scaler"

    def __init__(self, period: int, beta: float = 1.0):
        if period < 1:
            raise ContractViolation(f"period must be >= 1, got {period}")
        self.period = period
        self.params = {"beta": np.array(float(beta))}

    @property
    def beta(self) -> float:
        return float(self.params["beta"])

    @property
    def min_history(self) -> int:
        return self.period

    def hyperparams(self):
        return {"period": self.period}

    def clone(self):
        return copy.deepcopy(self)

    def _lagged(self, values, origins, horizon):
        k = np.arange(1, horizon + 1)
        m = -(-k // self.period)
        src = origins[:, None] + k[None, :] - m[None, :] * self.period
        return values[:, src], m

    def forecast_batch(self, values, origins, horizon, params=None, covariates=None):
        values = np.asarray(values, dtype=np.float64)
        origins = _check_origins(origins, values, self.min_history)
        lagged, m = self._lagged(values, origins, horizon)
        beta = self.params["beta"] if params is None else params["beta"]
        if m.max() == 1:
            return de.mul(beta, lagged)
        out = 0.0
        power = beta
        for level in range(1, int(m.max()) + 1):
            if level > 1:
                power = de.mul(power, beta)
            out = de.add(out, de.mul(power, lagged * (m == level)))
        return out


class NaiveSeasonal(SeasonalScaler):
    """Parameter-free: repeats the observation one period ago."""

    kind = "naive_seasonal"

    def __init__(self, period: int):
        super().__init__(period, 1.0)
        self.params = {}

    @property
    def beta(self) -> float:
        return 1.0

    def forecast_batch(self, values, origins, horizon, params=None, covariates=None):
        values = np.asarray(values, dtype=np.float64)
        origins = _check_origins(origins, values, self.min_history)
        lagged, _ = self._lagged(values, origins, horizon)
        return lagged


class RecurrentEncoderDecoder:
    """LSTM encoder over a window of W inputs, LSTM decoder over the horizon.

    Demand is divided by the mean of the encode window before entering the
    network and the outputs are multiplied back.  With covariates, each
    categorical column gets a 10-wide lookup table (last row reserved for
    unseen codes) and the numeric columns share one 10-wide linear projection.
    """

    kind = "lstm"

    def __init__(self, window=24, hidden=20, seed=0, n_numeric=0, cardinalities=(),
                 decoder_input="autoregressive"):
        if hidden < 1:
            raise ContractViolation(f"hidden size must be >= 1, got {hidden}")
        if window < 1:
            raise ContractViolation(f"encode window must be >= 1, got {window}")
        if decoder_input not in ("autoregressive", "zero"):
            raise ContractViolation(f"unknown decoder_input {decoder_input!r}")
        self.window = window
        self.hidden = hidden
        self.seed = seed
        self.n_numeric = n_numeric
        self.cardinalities = tuple(cardinalities)
        self.decoder_input = decoder_input
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(hidden)

        def uni(*shape):
            return rng.uniform(-bound, bound, size=shape)

        cov_dim = EMBED_DIM * (len(self.cardinalities) + (1 if n_numeric else 0))
        in_dim = 1 + cov_dim
        h4 = 4 * hidden
        p = {
            "enc_wx": uni(in_dim, h4), "enc_wh": uni(hidden, h4), "enc_b": np.zeros(h4),
            "dec_wx": uni(in_dim, h4), "dec_wh": uni(hidden, h4), "dec_b": np.zeros(h4),
            "out_w": uni(hidden, 1), "out_b": np.zeros(1),
        }
        for j, card in enumerate(self.cardinalities):
            p[f"emb_cat{j}"] = uni(card + 1, EMBED_DIM)
        if n_numeric:
            p["emb_num_w"] = uni(n_numeric, EMBED_DIM)
            p["emb_num_b"] = np.zeros(EMBED_DIM)
        self.params = p

    @property
    def min_history(self) -> int:
        return self.window

    def hyperparams(self):
        return {"window": self.window, "hidden": self.hidden, "seed": self.seed,
                "n_numeric": self.n_numeric, "cardinalities": list(self.cardinalities),
                "decoder_input": self.decoder_input}

    def clone(self):
        return copy.deepcopy(self)

    def _embed(self, p, covariates: CovariatePanel, rows, times):
        """Covariate features for (row, time) pairs; times past the data map to 'unknown'."""
        parts = []
        t_len = covariates.numeric.shape[1]
        inside = times < t_len
        tt = np.where(inside, times, 0)
        for j, card in enumerate(self.cardinalities):
            codes = covariates.categorical[rows, tt, j]
            codes = np.where(inside & (codes < card), codes, card)
            parts.append(de.embed_lookup(p[f"emb_cat{j}"], codes))
        if self.n_numeric:
            num = covariates.numeric[rows, tt, :] * inside[:, None]
            parts.append(de.add(de.matmul(num, p["emb_num_w"]), p["emb_num_b"]))
        return parts

    def _cell(self, x, h, c, wx, wh, b):
        hs = self.hidden
        gates = de.add(de.add(de.matmul(x, wx), de.matmul(h, wh)), b)
        i = de.sigmoid(gates[:, 0:hs])
        f = de.sigmoid(gates[:, hs : 2 * hs])
        g = de.tanh(gates[:, 2 * hs : 3 * hs])
        o = de.sigmoid(gates[:, 3 * hs : 4 * hs])
        c = de.add(de.mul(f, c), de.mul(i, g))
        h = de.mul(o, de.tanh(c))
        return h, c

    def forecast_batch(self, values, origins, horizon, params=None, covariates=None):
        values = np.asarray(values, dtype=np.float64)
        origins = _check_origins(origins, values, self.min_history)
        p = self.params if params is None else params
        use_cov = covariates is not None and (self.cardinalities or self.n_numeric)
        n = values.shape[0]
        o = len(origins)
        rows = np.repeat(np.arange(n), o)
        t_org = np.tile(origins, n)
        batch = n * o
        offsets = np.arange(-self.window + 1, 1)
        window = values[rows[:, None], t_org[:, None] + offsets[None, :]]
        scale = window.mean(axis=1)
        scale = np.where(scale > 0, scale, 1.0)
        window = window / scale[:, None]

        h = np.zeros((batch, self.hidden))
        c = np.zeros((batch, self.hidden))
        for step in range(self.window):
            x = window[:, step : step + 1]
            if use_cov:
                x = de.concat([x] + self._embed(p, covariates, rows, t_org - self.window + 1 + step),
                              axis=1)
            h, c = self._cell(x, h, c, p["enc_wx"], p["enc_wh"], p["enc_b"])

        prev = window[:, -1:]
        outs = []
        for k in range(1, horizon + 1):
            x = prev if self.decoder_input == "autoregressive" else np.zeros((batch, 1))
            if use_cov:
                x = de.concat([x] + self._embed(p, covariates, rows, t_org + k), axis=1)
            h, c = self._cell(x, h, c, p["dec_wx"], p["dec_wh"], p["dec_b"])
            y = de.add(de.matmul(h, p["out_w"]), p["out_b"])
            outs.append(y)
            prev = y
        out = de.mul(de.concat(outs, axis=1), scale[:, None])
        return de.reshape(out, (n, o, horizon))


MODEL_KINDS = {
    "seasonal_scaler": SeasonalScaler,
    "naive_seasonal": NaiveSeasonal,
    "lstm": RecurrentEncoderDecoder,
}


def init_model(kind, seed=0, **hyper):
    """Fresh model.  The seasonal scaler starts at beta = 1, i.e. the naive baseline."""
    if kind == "seasonal_scaler":
        return SeasonalScaler(hyper.get("period", 12))
    if kind == "naive_seasonal":
        return NaiveSeasonal(hyper.get("period", 12))
    if kind == "lstm":
        return RecurrentEncoderDecoder(seed=seed, **{k: v for k, v in hyper.items() if k != "period"})
    raise ContractViolation(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")


def forecast(model, panel: DemandPanel, covariates, t: int, horizon: int):
    """N x horizon forecasts made at origin ``t`` using demand through ``t`` only."""
    if t < model.min_history - 1:
        raise ContractViolation(
            f"{model.kind} needs origin t >= {model.min_history - 1}, got {t}"
        )
    out = model.forecast_batch(panel.values[:, : t + 1], [t], horizon, covariates=covariates)
    return de.reshape(out, (panel.n_series, horizon))


def save_checkpoint(model, path):
    meta = json.dumps({"kind": model.kind, "hyper": model.hyperparams()}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **{f"p_{k}": v for k, v in model.params.items()})


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        hyper = meta["hyper"]
        kind = meta["kind"]
        if kind == "lstm":
            model = RecurrentEncoderDecoder(**hyper)
        else:
            model = MODEL_KINDS[kind](hyper["period"])
        model.params = {k[2:]: np.array(data[k]) for k in data.files if k.startswith("p_")}
    return model
