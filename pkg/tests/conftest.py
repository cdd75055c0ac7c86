"""Shared fixtures and the central finite-difference gradient checker."""

import numpy as np
import pytest

from longrec.config import GeneratorConfig, ModelConfig


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def fd_check(build_loss, named_tensors, tol=1e-4, h=1e-5, max_coords=6, seed=0):
    """Central finite differences against recorded backward passes.

    ``build_loss`` must construct a fresh scalar-loss tape from the live
    tensors each call. For every tensor a deterministic sample of
    coordinates is perturbed; relative error must stay within ``tol``.
    """
    rng = np.random.default_rng(seed)
    for _, t in named_tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for name, t in named_tensors:
        grad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(build_loss().data)
            flat[c] = orig - h
            down = float(build_loss().data)
            flat[c] = orig
            fd = (up - down) / (2 * h)
            err = rel_err(gflat[c], fd)
            worst = max(worst, err)
            assert err <= tol, (
                f"{name}[{c}]: analytic {gflat[c]:.8g} vs fd {fd:.8g} "
                f"(rel {err:.3g} > {tol})")
    for _, t in named_tensors:
        t.zero_grad()
    return worst


@pytest.fixture
def tiny_cfg():
    return ModelConfig(L=8, d=2, K=2, m=3, k=3, N=2, heads=1,
                       d_item=3, d_act=2, d_time=2, n_time_buckets=8,
                       vocab=12, n_actions=3, n_users=6, n_profiles=4,
                       head_hidden=5)


@pytest.fixture
def tiny_gen_cfg():
    return GeneratorConfig(n_users=6, vocab=12, L_max=8, L_min=4,
                           n_interests=4, interests_per_user=2,
                           n_actions=3, n_profiles=4)
