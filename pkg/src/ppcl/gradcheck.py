"""Central finite-difference verification of every layer primitive and loss."""

from __future__ import annotations

import numpy as np

from . import contrastive as cl
from .model import ModelConfig, PPCLModel, cross
from .tensor import (Param, Tensor, cosine_sim, dropout, embedding_lookup,
                     linear, stream)
from .training import regression_loss


def finite_diff(fn, arrays, h=1e-5):
    """Central differences of fn(list of ndarrays) -> float, per element."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            dn = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        scale = np.maximum(np.abs(a) + np.abs(n), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def check(build, arrays, h=1e-5):
    """build(list of Tensors) -> scalar Tensor; returns worst relative error."""
    tensors = [Tensor(a.copy()) for a in arrays]
    out = build(tensors)
    out.backward()
    analytic = [t.grad for t in tensors]

    def scalar(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    numeric = finite_diff(scalar, [a.copy() for a in arrays], h=h)
    return max_rel_err(analytic, numeric)


def _rand(rng, *shape):
    return rng.normal(size=shape)


def suite(seed=0, negative_control=False):
    """Yields (name, worst relative error) for every op and loss."""
    rng = stream(seed, "gradcheck")
    entries = []

    x, w, b = _rand(rng, 3, 4), _rand(rng, 4, 2), _rand(rng, 2)
    entries.append(("linear", check(
        lambda t: linear(t[0], t[1], t[2]).sum(), [x, w, b])))

    # keep inputs away from the kink at 0
    xr = _rand(rng, 3, 5)
    xr[np.abs(xr) < 0.1] = 0.5
    entries.append(("relu", check(lambda t: (t[0].relu() * t[0].relu()).sum(), [xr])))

    table = _rand(rng, 7, 4)
    idx = rng.integers(0, 7, size=5)
    entries.append(("embedding_lookup", check(
        lambda t: (embedding_lookup(t[0], idx) ** 2).sum(), [table])))

    mask_rng_seed = 123
    xd = _rand(rng, 4, 6)
    entries.append(("dropout", check(
        lambda t: (dropout(t[0], 0.4, stream(mask_rng_seed, "d")) ** 2).sum(), [xd])))

    a, bb = _rand(rng, 5), _rand(rng, 5)
    entries.append(("cosine_sim", check(
        lambda t: cosine_sim(t[0], t[1]), [a, bb])))

    xa, xb, cw, cb = _rand(rng, 3, 4), _rand(rng, 3, 4), _rand(rng, 4), _rand(rng, 4)
    entries.append(("cross", check(
        lambda t: (cross(t[0], t[1], _p(t[2]), _p(t[3])) ** 2).sum(),
        [xa, xb, cw, cb])))

    raw, w1, w2 = _rand(rng, 2, 6), _rand(rng, 6, 3), _rand(rng, 3, 4)
    entries.append(("bottleneck_adapt", check(
        lambda t: ((t[0] @ t[1]).relu() @ t[2]).sum() ** 2, [raw, w1, w2])))

    feats = _rand(rng, 8, 5)
    labels = np.array([0, 0, 1, 1, 0, 0, 2, 2])
    entries.append(("supcon", check(
        lambda t: cl.supcon_loss(t[0], labels, 0.5), [feats])))

    levels = np.array([[0, 0], [0, 0], [0, 1], [0, 1], [1, 2], [1, 2], [1, 3], [1, 3]])
    entries.append(("crd", check(
        lambda t: cl.crd_loss(t[0], levels, 0.5), [feats])))

    entries.append(("uisd", check(
        lambda t: cl.uisd_loss(t[0], labels, 0.5), [feats])))
    entries.append(("uid", check(
        lambda t: cl.uid_loss(t[0], labels, 0.5), [feats])))

    cont = rng.normal(size=8)
    entries.append(("rnc", check(
        lambda t: cl.rnc_loss(t[0], cont, 2.0), [feats])))

    pred = _rand(rng, 6)
    target = _rand(rng, 6)
    entries.append(("mse", check(
        lambda t: regression_loss(t[0], target), [pred])))

    if negative_control:
        def broken(t):
            out = t[0].sum()
            return Tensor(out.data * 2.0, (t[0],), lambda g: (np.full_like(t[0].data, 0.123),))
        entries.append(("corrupted_op", check(broken, [_rand(rng, 3, 3)])))

    return entries


def _p(t):
    p = Param.__new__(Param)
    p.tensor = t
    p.name = "gradcheck.tmp"
    p.owner = "HEAD"
    return p


def run(tolerance=1e-4, seed=0, negative_control=False, printer=print):
    """Prints one line per op; returns True when everything passes."""
    ok = True
    for name, err in suite(seed=seed, negative_control=negative_control):
        status = "PASS" if err < tolerance else "FAIL"
        if err >= tolerance:
            ok = False
        printer(f"{status} {name:18s} worst rel err {err:.3e}")
    return ok
