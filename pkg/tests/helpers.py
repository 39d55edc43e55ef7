"""Shared test utilities: central finite differences against autodiff."""

from __future__ import annotations

import numpy as np

from changescan.tensor import Tensor


def central_diff(fn, tensors, index, eps=1e-5):
    """Finite-difference gradient of scalar ``fn()`` w.r.t. tensors[index].

    ``fn`` must read the tensors' ``.data`` afresh on every call.
    """
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_grads(build, params, eps=1e-5, rtol=1e-4, atol=1e-8):
    """Compare autodiff grads of ``build(params) -> scalar Tensor`` to FD.

    ``params`` are leaf tensors with requires_grad=True. Returns the
    maximum relative error observed.
    """
    for p in params:
        p.zero_grad()
    loss = build()
    loss.backward()
    worst = 0.0
    for i, p in enumerate(params):
        fd = central_diff(lambda: build().item(), params, i, eps=eps)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(np.abs(fd), np.maximum(np.abs(got), 1.0))
        err = np.max(np.abs(got - fd) / denom) if fd.size else 0.0
        assert np.allclose(got, fd, rtol=rtol, atol=max(atol, rtol)), (
            f"gradient mismatch on param {i}: max rel err {err:.3e}\nany got={got.reshape(-1)[:5]} fd={fd.reshape(-1)[:5]}"
        )
        worst = max(worst, float(err))
    return worst


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
