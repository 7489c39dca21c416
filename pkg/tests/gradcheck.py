"""Central finite-difference oracle shared by the nominator tests."""

import numpy as np


def fd_relative_errors(params: dict, loss_fn, grads: dict, h: float = 1e-6) -> dict:
    """Per parameter group: ||analytic - numeric|| / max(||analytic||, ||numeric||)."""
    out = {}
    for name, p in params.items():
        if p.size == 0:
            continue
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_fn()
            p[i] = old - h
            down = loss_fn()
            p[i] = old
            num[i] = (up - down) / (2 * h)
        a = grads[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        out[name] = 0.0 if scale < 1e-10 else float(np.linalg.norm(a - num) / scale)
    return out
