import numpy as np
import pytest

from fewseg.store import generate_synthetic
from fewseg.tensor import backward


@pytest.fixture(scope="session")
def tiny_store_dir(tmp_path_factory):
    """4 classes x 3 images: the smallest store the fold machinery accepts."""
    root = tmp_path_factory.mktemp("tiny-store")
    generate_synthetic(root / "manifest.json", n_classes=4, images_per_class=3, seed=11)
    return root


def gradcheck(fn, params, h=1e-4, tol=1e-3):
    """Central finite differences vs reverse-mode gradients; returns worst
    relative error (denominator max(1, |analytic|, |numeric|))."""
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn().item()
            flat[i] = orig - h
            lm = fn().item()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h)
        num = num.reshape(p.data.shape)
        err = np.abs(an - num) / np.maximum(1.0, np.maximum(np.abs(an), np.abs(num)))
        worst = max(worst, float(err.max()))
        assert err.max() < tol, f"{p.name}: rel err {err.max():.2e} (tol {tol})"
    return worst


def dense_cp4d_oracle(x, wq, ws, bias, stride):
    """Brute-force dense 4D convolution with the sparsified center-pivot
    kernel k4[u,v,p,q] = wq[u,v]*[pq=center] + ws[p,q]*[uv=center]."""
    ci, h, w, hs, wsz = x.shape
    co = wq.shape[0]
    hs2 = (hs - 1) // stride + 1
    ws2 = (wsz - 1) // stride + 1
    k4 = np.zeros((co, ci, 3, 3, 3, 3), dtype=np.float64)
    for u in range(3):
        for v in range(3):
            k4[:, :, u, v, 1, 1] += wq[:, :, u, v]
    for p in range(3):
        for q in range(3):
            k4[:, :, 1, 1, p, q] += ws[:, :, p, q]
    out = np.zeros((co, h, w, hs2, ws2), dtype=np.float64)
    for o in range(co):
        for y in range(h):
            for xx in range(w):
                for a in range(hs2):
                    for b in range(ws2):
                        s = float(bias[o])
                        for i in range(ci):
                            for u in range(3):
                                yy = y + u - 1
                                if not 0 <= yy < h:
                                    continue
                                for v in range(3):
                                    xv = xx + v - 1
                                    if not 0 <= xv < w:
                                        continue
                                    for p in range(3):
                                        aa = stride * a + p - 1
                                        if not 0 <= aa < hs:
                                            continue
                                        for q in range(3):
                                            bb = stride * b + q - 1
                                            if not 0 <= bb < wsz:
                                                continue
                                            s += k4[o, i, u, v, p, q] * x[i, yy, xv, aa, bb]
                        out[o, y, xx, a, b] = s
    return out
