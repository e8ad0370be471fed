from __future__ import annotations

import numpy as np

from .layers import MaxPool2D, ReLU


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _pattern(model):
    """Discrete state of the piecewise-linear layers of the last forward pass."""
    out = []
    for layer in model._ran:
        if isinstance(layer, ReLU):
            out.append(layer._mask.copy())
        elif isinstance(layer, MaxPool2D):
            out.append(layer._cache[0].copy())
    return out


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(model, x, loss_fn, h=1e-3, max_probes=None, seed=0, floor=1e-8,
               stop_before=None, min_h=1e-7, return_details=False):
    """Compares backprop gradients against central differences.

    The model is copied to float64 first. ``loss_fn(output)`` must return
    ``(loss, d_output)``. Training-mode forward passes reuse one dropout
    seed so every evaluation sees the same mask, and batchnorm moving
    statistics are frozen for the duration.

    A probe whose +h or -h evaluation flips a ReLU mask or a max-pool
    argmax has crossed a kink, where the two-sided difference does not
    estimate the derivative; it is retried with h / 10 down to ``min_h``
    and dropped (counted in the details) if it still crosses.

    ``max_probes`` limits the number of coordinates probed per tensor
    (chosen at random); ``None`` probes every scalar. ``stop_before`` is
    passed to the forward pass so fused losses can see logits. Returns the
    worst relative error ``|a - n| / max(|a|, |n|, floor)``.
    """
    m = model.astype(np.float64)
    for bn in m.batchnorms():
        bn.update_stats = False
    x = np.asarray(x, np.float64)

    def run():
        return m.forward(x, train=True, rng=np.random.default_rng(seed),
                         stop_before=stop_before)

    loss, dout = loss_fn(run())
    base = _pattern(m)
    m.backward(dout)
    grads = {k: v.copy() for k, v in m.grads().items()}
    params = m.trainable()
    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    details = {"dropped_probes": 0}
    for key, w in params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(pick.choice(flat.size, max_probes, replace=False))
        analytic = grads[key].reshape(-1)
        errs = []
        for i in idx:
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                lp, _ = loss_fn(run())
                pp = _pattern(m)
                flat[i] = orig - step
                lm, _ = loss_fn(run())
                pm = _pattern(m)
                flat[i] = orig
                if _same(pp, base) and _same(pm, base):
                    errs.append(relative_error(analytic[i], (lp - lm) / (2 * step), floor))
                    break
                step /= 10
                if step < min_h:
                    details["dropped_probes"] += 1
                    break
        details[key] = float(max(errs)) if errs else 0.0
        worst = max(worst, details[key])
    if return_details:
        return worst, details
    return worst
