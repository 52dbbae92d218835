"""Returns, the Fuller log-square transform and linear AR order selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

import numpy as np

from nnchange.errors import NonFinite, ParseError, TooShort

DEFAULT_RHO = 0.02
DEFAULT_SEGMENT = 600
SPLITS = ("first_segment", "last_segment", "both_min")


@dataclass(frozen=True, eq=False)
class PriceSeries:
    values: np.ndarray
    timestamps: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise NonFinite("prices must be finite")
        if np.any(v <= 0):
            bad = int(np.flatnonzero(v <= 0)[0])
            raise ValueError(f"prices must be positive; entry {bad} is {v[bad]}")
        if self.timestamps is not None and len(self.timestamps) != v.size:
            raise ValueError("timestamps and values differ in length")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def returns(prices) -> np.ndarray:
    """Simple returns ``(Y_t - Y_{t-1}) / Y_{t-1}``."""
    ps = prices if isinstance(prices, PriceSeries) else PriceSeries(prices)
    if len(ps) < 2:
        raise TooShort("need at least two prices")
    y = ps.values
    return np.diff(y) / y[:-1]


def fuller_transform(r, rho: float = DEFAULT_RHO) -> np.ndarray:
    """``log(r^2 + c) - c / (r^2 + c)`` with ``c = rho * var(r)``.

    ``var`` is the sample variance (``ddof=1``).  With ``rho = 0`` this is
    ``log(r^2)``, which is undefined at zero returns.
    """
    r = np.asarray(r, dtype=float).ravel()
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if not np.all(np.isfinite(r)):
        raise NonFinite("returns must be finite")
    u = r * r
    if rho == 0:
        if np.any(u == 0):
            raise NonFinite("rho = 0 with a zero return gives log(0)")
        return np.log(u)
    if r.size < 2:
        raise TooShort("need at least two returns to estimate their variance")
    var = float(np.var(r, ddof=1))
    if not var > 0:
        raise ValueError("returns have zero variance; the transform's offset would vanish")
    c = rho * var
    return np.log(u + c) - c / (u + c)


def ar_aic(x, k: int, start: int | None = None) -> float:
    """AIC ``n log(RSS / n) + 2k`` of a least-squares AR(k) with intercept.

    Responses are ``x[start:]`` (default ``start = k``), so orders compared
    with a common ``start`` share the same ``n``.
    """
    x = np.asarray(x, dtype=float)
    start = k if start is None else start
    if start < k:
        raise ValueError("start must be >= k")
    n = x.size - start
    if n <= k + 1:
        raise TooShort(f"series of length {x.size} is too short for AR({k})")
    y = x[start:]
    design = np.column_stack([np.ones(n)] + [x[start - j : x.size - j] for j in range(1, k + 1)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    rss = float(np.sum((y - design @ coef) ** 2))
    return n * np.log(max(rss, 1e-300) / n) + 2 * k


def _order(segment: np.ndarray, max_p: int) -> int:
    aics = [ar_aic(segment, k, max_p) for k in range(max_p + 1)]
    return int(np.argmin(aics))  # ties go to the smaller order


def select_ar_order(series, max_p: int, split: str = "both_min", segment_len: int = DEFAULT_SEGMENT) -> int:
    """AIC-optimal linear AR order on the first and/or last ``segment_len`` points.

    ``both_min`` returns the smaller of the two segment orders.
    """
    x = np.asarray(series, dtype=float).ravel()
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if max_p < 0:
        raise ValueError("max_p must be >= 0")
    if not np.all(np.isfinite(x)):
        raise NonFinite("series must be finite")
    seg_len = min(segment_len, x.size)
    if seg_len <= 2 * max_p + 1:
        raise TooShort(f"segment of length {seg_len} is too short for max_p = {max_p}")
    first, last = x[:seg_len], x[x.size - seg_len :]
    if split == "first_segment":
        return _order(first, max_p)
    if split == "last_segment":
        return _order(last, max_p)
    return combine_orders(_order(first, max_p), _order(last, max_p))


def combine_orders(first: int, last: int) -> int:
    return min(first, last)


def _parse_value(text: str, lineno: int) -> float:
    try:
        val = Decimal(text.strip())
    except InvalidOperation:
        raise ParseError(f"line {lineno}: cannot parse {text.strip()!r} as a number") from None
    if not val.is_finite():
        raise ParseError(f"line {lineno}: value {text.strip()!r} is not finite")
    return float(val)


def read_series_csv(path) -> tuple[np.ndarray, tuple | None]:
    """Read one numeric column (header optional) or two columns ``date,value``.

    Returns ``(values, dates)``; ``dates`` is ``None`` for single-column files.
    Blank lines are skipped; any other unparseable value raises
    :class:`~nnchange.errors.ParseError` naming its line.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i, row) for i, row in enumerate(csv.reader(fh), start=1) if row and any(c.strip() for c in row)]
    if not rows:
        raise ParseError(f"{path}: no data")
    width = len(rows[0][1])
    if width not in (1, 2):
        raise ParseError(f"line {rows[0][0]}: expected 1 or 2 columns, found {width}")
    # a first row whose value field is not numeric is a header
    try:
        _parse_value(rows[0][1][-1], rows[0][0])
    except ParseError:
        rows = rows[1:]
    values, dates = [], []
    for lineno, row in rows:
        if len(row) != width:
            raise ParseError(f"line {lineno}: expected {width} columns, found {len(row)}")
        values.append(_parse_value(row[-1], lineno))
        if width == 2:
            dates.append(row[0].strip())
    if not values:
        raise ParseError(f"{path}: no data rows")
    return np.array(values), (tuple(dates) if width == 2 else None)


def read_prices_csv(path) -> PriceSeries:
    values, dates = read_series_csv(path)
    return PriceSeries(values, dates)


def prepare_series(values: Sequence[float], use_returns: bool = False, fuller: bool = False, rho: float = DEFAULT_RHO) -> np.ndarray:
    """Optional prices-to-returns step followed by the optional Fuller transform."""
    x = np.asarray(values, dtype=float)
    if use_returns:
        x = returns(x)
    if fuller:
        x = fuller_transform(x, rho)
    return x
