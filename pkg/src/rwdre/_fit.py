import numpy as np


def log_linear_fit(x, y, floor=0.0):
    """Least-squares fit of ``log y = log C + x log rate``.

    Points with ``y <= floor`` are dropped. Returns ``(rate, C, n_used)``;
    ``rate`` is NaN when fewer than two points survive.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > floor
    if keep.sum() < 2:
        return float("nan"), float("nan"), int(keep.sum())
    slope, intercept = np.polyfit(x[keep], np.log(y[keep]), 1)
    return float(np.exp(slope)), float(np.exp(intercept)), int(keep.sum())
