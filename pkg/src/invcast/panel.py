"""Demand panels: data model, CSV ingestion/emission and a synthetic generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffengine import ContractViolation


class PanelParseError(ValueError):
    """Malformed input file; the message carries the offending line number."""


class PanelValidationError(ValueError):
    """Well-formed file whose contents break a panel invariant."""


@dataclass(frozen=True)
class DemandPanel:
    """N series by T timesteps of demand.

    Series are aligned at their most recent timestep; shorter series are
    front-padded with masked zeros.
    """

    values: np.ndarray
    mask: np.ndarray
    period: int
    train_cutoff: int
    val_cutoff: int
    series_ids: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ContractViolation(
                f"values {values.shape} and mask {mask.shape} must be equal 2-D shapes"
            )
        if self.period < 1:
            raise ContractViolation(f"period must be >= 1, got {self.period}")
        n, t_len = values.shape
        if not 0 < self.train_cutoff < self.val_cutoff <= t_len:
            raise ContractViolation(
                f"need 0 < train_cutoff < val_cutoff <= T, got "
                f"{self.train_cutoff}, {self.val_cutoff}, T={t_len}"
            )
        values[~mask] = 0.0
        values.flags.writeable = False
        mask.flags.writeable = False
        ids = tuple(self.series_ids) if self.series_ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise ContractViolation(f"{len(ids)} series ids for {n} series")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "series_ids", ids)

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def subset(self, rows) -> "DemandPanel":
        rows = np.atleast_1d(rows)
        return DemandPanel(
            self.values[rows],
            self.mask[rows],
            self.period,
            self.train_cutoff,
            self.val_cutoff,
            tuple(self.series_ids[r] for r in rows),
        )

    def with_values(self, values) -> "DemandPanel":
        return DemandPanel(values, self.mask, self.period, self.train_cutoff,
                           self.val_cutoff, self.series_ids)


@dataclass(frozen=True)
class CovariatePanel:
    numeric: np.ndarray  # N x T x C_num
    categorical: np.ndarray  # N x T x C_cat, integer codes
    cardinalities: tuple = field(default=())
    numeric_names: tuple = ()
    categorical_names: tuple = ()

    def __post_init__(self):
        num = np.array(self.numeric, dtype=np.float64)
        cat = np.array(self.categorical, dtype=np.int64)
        if num.ndim != 3 or cat.ndim != 3 or num.shape[:2] != cat.shape[:2]:
            raise ContractViolation(
                f"covariate shapes {num.shape} and {cat.shape} must be N x T x C"
            )
        cards = tuple(int(c) for c in self.cardinalities)
        if len(cards) != cat.shape[2]:
            raise ContractViolation(f"{len(cards)} cardinalities for {cat.shape[2]} columns")
        for j, card in enumerate(cards):
            col = cat[:, :, j]
            if col.size and (col.min() < 0 or col.max() >= card):
                raise ContractViolation(f"categorical column {j} outside [0, {card})")
        num.flags.writeable = False
        cat.flags.writeable = False
        object.__setattr__(self, "numeric", num)
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "cardinalities", cards)

    def aligned_with(self, panel: DemandPanel) -> bool:
        return self.numeric.shape[:2] == panel.values.shape


# -- CSV ------------------------------------------------------------------


def _parse_float(text, lineno, path):
    try:
        val = float(text)
    except ValueError:
        raise PanelParseError(f"{path}:{lineno}: cannot parse demand {text!r}") from None
    if not math.isfinite(val):
        raise PanelParseError(f"{path}:{lineno}: non-finite demand {text!r}")
    return val


def _read_long(path):
    series: dict[str, list[tuple[int, float | None]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["series_id", "t", "demand"]:
            raise PanelParseError(f"{path}:1: expected header series_id,t,demand")
        seen = set()
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise PanelParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sid, t_text, d_text = row
            try:
                t = int(t_text)
            except ValueError:
                raise PanelParseError(f"{path}:{lineno}: cannot parse t {t_text!r}") from None
            if (sid, t) in seen:
                raise PanelValidationError(f"{path}:{lineno}: duplicate key ({sid}, {t})")
            seen.add((sid, t))
            pts = series.setdefault(sid, [])
            if pts and t <= pts[-1][0]:
                raise PanelValidationError(
                    f"{path}:{lineno}: t={t} not increasing within series {sid}"
                )
            d = None if d_text.strip() == "" else _parse_float(d_text, lineno, path)
            pts.append((t, d))
    if not series:
        raise PanelParseError(f"{path}: no data rows")
    spans = {sid: pts[-1][0] - pts[0][0] + 1 for sid, pts in series.items()}
    t_len = max(spans.values())
    ids = sorted(series)
    values = np.zeros((len(ids), t_len))
    mask = np.zeros((len(ids), t_len), dtype=bool)
    for row, sid in enumerate(ids):
        last = series[sid][-1][0]
        for t, d in series[sid]:
            col = t_len - 1 - (last - t)
            if d is not None:
                values[row, col] = d
                mask[row, col] = True
    return ids, values, mask


def _read_wide(path):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "series_id":
            raise PanelParseError(f"{path}:1: expected header series_id,d0,d1,...")
        t_len = len(header) - 1
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            sid, cells = row[0], row[1:]
            if len(cells) > t_len:
                raise PanelParseError(
                    f"{path}:{lineno}: {len(cells)} values but header has {t_len}"
                )
            if sid in rows:
                raise PanelValidationError(f"{path}:{lineno}: duplicate key ({sid})")
            pad = t_len - len(cells)
            parsed = [None] * pad + [
                None if c.strip() == "" else _parse_float(c, lineno, path) for c in cells
            ]
            rows[sid] = parsed
    if not rows:
        raise PanelParseError(f"{path}: no data rows")
    ids = sorted(rows)
    values = np.zeros((len(ids), t_len))
    mask = np.zeros((len(ids), t_len), dtype=bool)
    for r, sid in enumerate(ids):
        for c, d in enumerate(rows[sid]):
            if d is not None:
                values[r, c] = d
                mask[r, c] = True
    return ids, values, mask


def ingest_csv(path, schema="long", period=12, cutoffs=None) -> DemandPanel:
    """Read a demand file in ``long`` (series_id,t,demand) or ``wide`` layout.

    Blank demand cells mean "no observation" and become masked zeros.  When
    ``cutoffs`` is omitted the panel is split 60/80/100%.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if schema == "long":
        ids, values, mask = _read_long(path)
    elif schema == "wide":
        ids, values, mask = _read_wide(path)
    else:
        raise ValueError(f"unknown schema {schema!r}; use 'long' or 'wide'")
    t_len = values.shape[1]
    if cutoffs is None:
        cutoffs = (max(1, int(0.6 * t_len)), max(2, int(0.8 * t_len)))
    try:
        return DemandPanel(values, mask, period, cutoffs[0], cutoffs[1], tuple(ids))
    except ContractViolation as exc:
        raise PanelValidationError(f"{path}: {exc}") from None


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_csv(panel: DemandPanel, path, schema="long"):
    """Write ``panel`` so that :func:`ingest_csv` reads it back bit-exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if schema == "long":
            writer.writerow(["series_id", "t", "demand"])
            for r, sid in enumerate(panel.series_ids):
                for t in range(panel.length):
                    cell = _fmt(panel.values[r, t]) if panel.mask[r, t] else ""
                    writer.writerow([sid, t, cell])
        elif schema == "wide":
            writer.writerow(["series_id"] + [f"d{t}" for t in range(panel.length)])
            for r, sid in enumerate(panel.series_ids):
                writer.writerow(
                    [sid]
                    + [
                        _fmt(panel.values[r, t]) if panel.mask[r, t] else ""
                        for t in range(panel.length)
                    ]
                )
        else:
            raise ValueError(f"unknown schema {schema!r}")


def ingest_covariates(path, panel: DemandPanel) -> CovariatePanel:
    """Sidecar covariates keyed by (series_id, t), with t the panel column index.

    Columns named ``cat_*`` are categorical integer codes, all others numeric.
    Missing rows are zero-filled.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["series_id", "t"]:
            raise PanelParseError(f"{path}:1: expected header series_id,t,...")
        names = header[2:]
        cat_cols = [j for j, n in enumerate(names) if n.startswith("cat_")]
        num_cols = [j for j, n in enumerate(names) if not n.startswith("cat_")]
        row_of = {sid: r for r, sid in enumerate(panel.series_ids)}
        num = np.zeros(panel.values.shape + (len(num_cols),))
        cat = np.zeros(panel.values.shape + (len(cat_cols),), dtype=np.int64)
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise PanelParseError(f"{path}:{lineno}: expected {len(header)} fields")
            sid = row[0]
            if sid not in row_of:
                raise PanelValidationError(f"{path}:{lineno}: unknown series {sid!r}")
            try:
                t = int(row[1])
                cells = row[2:]
                num[row_of[sid], t] = [float(cells[j]) for j in num_cols]
                cat[row_of[sid], t] = [int(cells[j]) for j in cat_cols]
            except (ValueError, IndexError) as exc:
                raise PanelParseError(f"{path}:{lineno}: {exc}") from None
    cards = tuple(int(cat[:, :, j].max()) + 1 if cat.size else 1 for j in range(len(cat_cols)))
    return CovariatePanel(
        num, cat, cards,
        tuple(names[j] for j in num_cols), tuple(names[j] for j in cat_cols),
    )


# -- synthetic data -------------------------------------------------------


def synth_seasonal(n, t_len, period, base, amplitude, trend=0.0, noise_sd=0.0, seed=0,
                   cutoffs=None) -> DemandPanel:
    """Sinusoidal seasonal demand with linear trend and Gaussian noise, floored at 0."""
    if n < 1 or t_len < 1 or period < 1:
        raise ContractViolation("n, t_len and period must all be >= 1")
    if noise_sd < 0:
        raise ContractViolation(f"noise_sd must be >= 0, got {noise_sd}")
    if not base > amplitude:
        raise ContractViolation(f"need base > amplitude, got {base} <= {amplitude}")
    rng = np.random.default_rng(seed)
    t = np.arange(t_len)
    # phase from t mod period so the seasonal term repeats bit-exactly
    signal = base + amplitude * np.sin(2 * np.pi * (t % period) / period) + trend * t
    noise = rng.normal(0.0, noise_sd, size=(n, t_len)) if noise_sd > 0 else np.zeros((n, t_len))
    values = np.maximum(0.0, signal[None, :] + noise)
    if cutoffs is None:
        cutoffs = (max(1, int(0.6 * t_len)), max(2, int(0.8 * t_len)))
    ids = tuple(f"s{i:04d}" for i in range(n))
    return DemandPanel(values, np.ones((n, t_len), dtype=bool), period, cutoffs[0],
                       cutoffs[1], ids)
