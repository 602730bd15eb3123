"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

from collections import deque

import numpy as np

from bhsrs import autodiff as ad


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((n, cout, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for o in range(cout):
            for r in range(h - kh + 1):
                for c in range(wd - kw + 1):
                    acc = 0.0
                    for ch in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[i, ch, r + u, c + v] * w[o, ch, u, v]
                    out[i, o, r, c] = acc + (0.0 if b is None else b[o])
    return out


def _components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp, queue = [], deque([(r, c)])
                seen[r, c] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            queue.append((yy, xx))
                comps.append(comp)
    return comps


def area_opening_levels(img: np.ndarray, lam: int) -> np.ndarray:
    """Threshold decomposition: out(p) = max level t such that p's component of {img >= t} has area >= lam."""
    img = np.asarray(img, dtype=np.float64)
    levels = np.unique(img)
    out = np.full(img.shape, levels[0])
    for t in levels:
        for comp in _components(img >= t):
            if len(comp) >= lam:
                for y, x in comp:
                    out[y, x] = max(out[y, x], t)
    return out


def cohen_kappa(truth, pred, k: int) -> float:
    truth, pred = np.asarray(truth), np.asarray(pred)
    n = len(truth)
    po = sum(1 for a, b in zip(truth, pred) if a == b) / n
    pe = sum((np.sum(truth == c) / n) * (np.sum(pred == c) / n) for c in range(k))
    return (po - pe) / (1 - pe)


def nearest_train_chebyshev(roles: np.ndarray, labels: np.ndarray, train_code: int, eval_codes) -> np.ndarray:
    train = np.argwhere(roles == train_code)
    out = []
    for r, c in np.argwhere(np.isin(roles, eval_codes)):
        same = train[labels[train[:, 0], train[:, 1]] == labels[r, c]]
        if len(same) == 0:
            out.append(np.inf)
        else:
            out.append(np.max(np.abs(same - [r, c]), axis=1).min())
    return np.array(out, dtype=np.float64)


def gradcheck(loss_fn, params: list[ad.Tensor], h: float = 1e-5, max_entries: int | None = None,
              seed: int = 0) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    With ``max_entries`` only that many randomly chosen entries per tensor are perturbed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_entries is None or p.data.size <= max_entries:
            numeric = ad.numerical_grad(lambda: loss_fn().item(), p.data, h)
            worst = max(worst, ad.relative_error(analytic, numeric))
            continue
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(max_entries)
        with ad.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * h)
        worst = max(worst, ad.relative_error(analytic.reshape(-1)[idx], numeric))
    return worst
