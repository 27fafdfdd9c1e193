import numpy as np
import pytest

from msmatch import geometry


def random_homography(rng, size=(256, 256), spread=0.25):
    """Homography from random corner displacements within ``spread`` of the frame."""
    h, w = size
    while True:
        d = rng.uniform(-spread, spread, size=(4, 2)) * np.array([w, h])
        try:
            return geometry.matrix_from_four_point(d, size)
        except Exception:
            continue


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_rel_error(fn, x, h=1e-6):
    """Relative error between autograd and central-difference gradients of scalar ``fn(x)``."""
    import torch

    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(analytic)
    flat = x.detach().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += h
            xm = flat.clone()
            xm[i] -= h
            numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h)
    return float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-12))


def fd_rel_error_params(loss_fn, params, h=1e-6):
    """Same as :func:`fd_rel_error` but over module parameters (modified in place)."""
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.detach().reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                lp = float(loss_fn())
                flat[i] = old - h
                lm = float(loss_fn())
                flat[i] = old
                numeric.append((lp - lm) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    return float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-12))
