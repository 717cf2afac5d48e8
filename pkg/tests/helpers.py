"""Shared test utilities: gradient checking against finite differences."""

import numpy as np

from gito.autodiff import active_tape, backward, finite_difference_gradient, no_grad


def rel_error(a, b, floor=1e-8):
    # floor sits ~100x above central-difference cancellation noise
    # (eps_machine / 2e-6 ~ 5e-11): near-zero gradients compare as equal
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return np.linalg.norm(a - b) / scale


def grad_check(f, params, rtol=1e-5, eps=1e-6, max_coords=48, seed=0):
    """Compare taped gradients of scalar ``f()`` against central differences.

    ``params`` maps names to leaf Tensors.  Tensors up to ``max_coords``
    entries are checked in full; larger ones on a seeded random subset of
    coordinates.  Returns the worst relative error seen.
    """
    for p in params.values():
        p.zero_grad()
    active_tape().reset()
    loss = f()
    backward(loss)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.size <= max_coords:
            fd = finite_difference_gradient(lambda _: f(), p, eps=eps).data
            err = rel_error(ad, fd)
        else:
            coords = rng.choice(p.size, size=max_coords, replace=False)
            fd_vals = np.zeros(len(coords))
            flat = p.data.reshape(-1)
            with no_grad():
                for j, c in enumerate(coords):
                    orig = flat[c]
                    flat[c] = orig + eps
                    fp = f().item()
                    flat[c] = orig - eps
                    fm = f().item()
                    flat[c] = orig
                    fd_vals[j] = (fp - fm) / (2 * eps)
            err = rel_error(ad.reshape(-1)[coords], fd_vals)
        assert err < rtol, f"gradient mismatch for {name}: rel error {err:.3e}"
        worst = max(worst, err)
        active_tape().reset()
    return worst
