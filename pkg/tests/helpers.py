import math

import numpy as np

from iclstreams import tensor as T


def numeric_grad(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(build_loss, params: dict, h: float = 1e-3) -> dict:
    """Relative error of every parameter gradient against finite differences."""
    for p in params.values():
        p.grad = None
    T.backward(build_loss())
    errs = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        numeric = numeric_grad(lambda: build_loss().item(), p.data, h)
        errs[name] = max_rel_err(analytic, numeric)
    return errs


# ----------------------------------------------------------------- AMICL brute force (no matrix machinery)


def _loop_similarity(k, q, kind):
    n = len(k)
    if kind == "dot":
        return sum(k[i] * q[i] for i in range(n))
    if kind == "manhattan":
        return -sum(abs(k[i] - q[i]) for i in range(n))
    if kind == "euclidean":
        return -sum((k[i] - q[i]) ** 2 for i in range(n)) ** 0.5
    mk = sum(k) / n
    mq = sum(q) / n
    num = sum((k[i] - mk) * (q[i] - mq) for i in range(n))
    den = sum((k[i] - mk) ** 2 for i in range(n)) ** 0.5 * sum((q[i] - mq) ** 2 for i in range(n)) ** 0.5
    return 0.0 if den == 0 else num / den


def loop_amicl_argmax(x, a, kind):
    """Explicit-loop AMICL with argmax separation: each output column copies one token."""
    e, s = x.shape
    cols = [[float(x[r, c]) for r in range(e)] for c in range(s)]
    mixed = []
    for i in range(s):
        prev = cols[i - 1]  # index -1 wraps to the last token
        mixed.append([(a * prev[r] + cols[i][r]) / (a + 1) for r in range(e)])
    keys = [m[:] for m in mixed]
    keys[-1] = [0.0] * e
    out = np.zeros((e, s))
    for j in range(s):
        best, best_i = None, 0
        for i in range(s):
            score = _loop_similarity(keys[i], mixed[j], kind)
            if best is None or score > best:
                best, best_i = score, i
        out[:, j] = cols[best_i]
    return out


# ----------------------------------------------------------------- Student t by quadrature


def t_pdf(x, df):
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return np.exp(logc - (df + 1) / 2 * np.log1p(x * x / df))


def two_sided_p_by_quadrature(t, df, n=200_001):
    """2 * P(T > |t|) by composite Simpson on [0, |t|] (mass of the centre)."""
    x = np.linspace(0.0, abs(t), n)
    y = t_pdf(x, df)
    h = x[1] - x[0]
    centre = h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())
    return 1.0 - 2.0 * centre


def welch_by_hand(a, b):
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((v - ma) ** 2 for v in a) / (na - 1)
    vb = sum((v - mb) ** 2 for v in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return t, df
