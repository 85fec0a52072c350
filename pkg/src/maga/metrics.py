"""Alpha-matte error metrics: SAD, MSE, Grad and Conn.

Every metric is computed over a boolean mask (normally the trimap's unknown
band) and returned in the usual reporting units:

* SAD: sum of absolute differences / 1000
* MSE: mean squared difference x 1000
* Grad: sum of squared gradient-magnitude differences / 1000
* Conn: sum of connectivity-degree differences / 1000

Grad uses first-order Gaussian derivative filters (sigma 1.4, radius
ceil(3 sigma), unit L2 norm) with half-sample symmetric padding.  Conn uses
4-connectivity, thresholds 0.1, 0.2, ..., 1.0 and the 0.15 dead zone.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

SCALE = 1000.0


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    n_unknown: int
    empty_mask: bool = False

    def raw(self):
        """Values before the reporting scale factors are applied."""
        return {"sad": self.sad * SCALE, "mse": self.mse / SCALE,
                "grad": self.grad * SCALE, "conn": self.conn * SCALE}

    @classmethod
    def from_raw(cls, sad, mse, grad, conn, n_unknown, empty_mask=False):
        return cls(sad / SCALE, mse * SCALE, grad / SCALE, conn / SCALE, n_unknown, empty_mask)


def _prep(pred, gt, mask):
    p = np.asarray(pred, dtype=np.float64).squeeze()
    g = np.asarray(gt, dtype=np.float64).squeeze()
    m = np.asarray(mask, dtype=bool).squeeze()
    if p.shape != g.shape or m.shape != p.shape or p.ndim != 2:
        raise ValueError(f"pred {p.shape}, gt {g.shape} and mask {m.shape} must be equal 2-D shapes")
    if not m.any():
        warnings.warn("metric mask is empty; reporting 0", EmptyMaskWarning, stacklevel=3)
    return p, g, m


def _ordered_sum(x):
    """Strict left-to-right sum in row-major order, so results are reproducible bit for bit."""
    return float(np.cumsum(x)[-1]) if x.size else 0.0


def sad(pred, gt, mask):
    p, g, m = _prep(pred, gt, mask)
    return _ordered_sum(np.abs(p - g)[m]) / SCALE


def mse(pred, gt, mask):
    p, g, m = _prep(pred, gt, mask)
    n = int(m.sum())
    if n == 0:
        return 0.0
    d = (p - g)[m]
    return _ordered_sum(d * d) / n * SCALE


# ---------------------------------------------------------------- Grad

def gaussian_derivative_filters(sigma=1.4):
    """(hx, hy): x- and y-derivative-of-Gaussian kernels with unit L2 norm."""
    r = math.ceil(3.0 * sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    dg = -t / (sigma * sigma) * g
    hx = np.outer(g, dg)
    hx /= np.sqrt(np.sum(hx * hx))
    return hx, hx.T.copy()


def gradient_magnitude(img, sigma=1.4):
    hx, hy = gaussian_derivative_filters(sigma)
    gx = ndimage.convolve(img, hx, mode="reflect")
    gy = ndimage.convolve(img, hy, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def grad_metric(pred, gt, mask, sigma=1.4):
    p, g, m = _prep(pred, gt, mask)
    d = gradient_magnitude(p, sigma) - gradient_magnitude(g, sigma)
    return float(np.sum((d * d)[m])) / SCALE


# ---------------------------------------------------------------- Conn

def thresholds(step=0.1):
    return step * np.arange(int(round(1.0 / step)) + 1)


def connectivity_levels(pred, gt, step=0.1):
    """Highest threshold up to which each pixel stays in the dominant component.

    At each threshold the dominant component is the largest 4-connected
    component of ``(pred >= t) & (gt >= t)``; ties go to the component whose
    first pixel comes first in row-major order.  Pixels that never leave get 1.
    """
    ths = thresholds(step)
    level = np.full(pred.shape, -1.0)
    prev, omega = None, None
    for i in range(1, len(ths)):
        both = (pred >= ths[i]) & (gt >= ths[i])
        if prev is None or not np.array_equal(both, prev):
            lab, n = ndimage.label(both)
            if n:
                sizes = np.bincount(lab.ravel())[1:]
                omega = lab == (int(np.argmax(sizes)) + 1)
            else:
                omega = np.zeros(both.shape, dtype=bool)
            prev = both
        level[(level == -1.0) & ~omega] = ths[i - 1]
    level[level == -1.0] = 1.0
    return level


def _phi(alpha, level, dead_zone=0.15):
    d = alpha - level
    return 1.0 - d * (d >= dead_zone)


def conn_metric(pred, gt, mask, step=0.1):
    p, g, m = _prep(pred, gt, mask)
    level = connectivity_levels(p, g, step)
    return float(np.sum(np.abs(_phi(p, level) - _phi(g, level))[m])) / SCALE


# ---------------------------------------------------------------- reports

def unknown_mask(trimap):
    return np.asarray(trimap).squeeze() == 0.5


def evaluate(pred, gt, trimap):
    """All four metrics over the trimap's unknown band."""
    t = np.asarray(trimap).squeeze()
    if not np.all(np.isin(t, (0.0, 0.5, 1.0))):
        raise ValueError("trimap values must be 0, 0.5 or 1")
    m = t == 0.5
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = MetricReport(sad(pred, gt, m), mse(pred, gt, m), grad_metric(pred, gt, m),
                           conn_metric(pred, gt, m), int(m.sum()))
    if not m.any():
        rep.empty_mask = True
        warnings.warn("unknown region is empty; all metrics reported as 0",
                      EmptyMaskWarning, stacklevel=2)
    else:
        for w in caught:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return rep


FIELDS = ("path", "sad", "mse", "grad", "conn", "n_unknown")


def mean_report(reports):
    n = len(reports)
    return MetricReport(
        sum(r.sad for r in reports) / n, sum(r.mse for r in reports) / n,
        sum(r.grad for r in reports) / n, sum(r.conn for r in reports) / n,
        sum(r.n_unknown for r in reports) / n,
    )


def _row(path, rep):
    return {"path": path, "sad": rep.sad, "mse": rep.mse, "grad": rep.grad,
            "conn": rep.conn, "n_unknown": rep.n_unknown}


def report_rows(named_reports):
    """Per-image rows followed by a ``mean`` row."""
    rows = [_row(p, r) for p, r in named_reports]
    if named_reports:
        rows.append(_row("mean", mean_report([r for _, r in named_reports])))
    return rows


def write_csv(path, named_reports):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for row in report_rows(named_reports):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_jsonl(path, named_reports):
    with open(path, "w") as f:
        for row in report_rows(named_reports):
            f.write(json.dumps(row) + "\n")


def read_csv(path):
    with open(path, newline="") as f:
        return [{k: (v if k == "path" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def as_dict(rep):
    return asdict(rep)
