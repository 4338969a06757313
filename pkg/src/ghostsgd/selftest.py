"""Fast built-in numerical checks behind ``ghostsgd selftest``. No dataset needed."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .certificate import bypass_path, verify_path_certificate
from .data import IdxFile, Quadratic, Saddle, parse_idx, serialize_idx
from .diagnostics import SpectralProbe, first_peak, spectral_norm_shifted
from .ghost import (
    ghost_softmax_ce,
    ghost_softmax_ce_grad,
    ghost_softmax_ce_grad_literal,
    gradient_coincidence_gap,
)
from .models import ModelSpec, build


def _fd_logits(z, y, c, e, h=1e-5):
    g = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (ghost_softmax_ce(zp, y, c, e).l_ext - ghost_softmax_ce(zm, y, c, e).l_ext) / (2 * h)
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


def check_gradients(rng):
    worst = 0.0
    for _ in range(20):
        c, e = int(rng.integers(1, 6)), int(rng.integers(0, 4))
        z = rng.normal(0, 2, size=(3, c + e))
        y = rng.integers(0, c, size=3)
        closed = ghost_softmax_ce_grad(z, y, c, e)
        worst = max(worst, _rel(closed, ghost_softmax_ce_grad_literal(z, y, c, e)),
                    _rel(closed, _fd_logits(z, y, c, e)))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def check_decomposition(rng):
    z = rng.uniform(-50, 50, size=(2000, 7))
    y = rng.integers(0, 4, size=2000)
    br = ghost_softmax_ce(z, y, 4, 3)
    p = br.per_sample
    gap = float(np.max(np.abs(p["l_ext"] - p["l_orig"] - p["l_ghost"])))
    return gap <= 1e-12 and p["l_ghost"].min() >= 0, f"max residual {gap:.1e}"


def check_collapse(rng):
    spec = ModelSpec(kind="mlp", in_shape=(1, 4, 4), hidden=(6,), c=3, e=2, gamma_init="frozen:30")
    model, params = build(spec)
    x = rng.random((5, 1, 4, 4))
    y = rng.integers(0, 3, size=5)
    gap = gradient_coincidence_gap(model, params, x, y)
    m0, p0 = build(spec.with_ghosts(0))
    gap0 = gradient_coincidence_gap(m0, p0, x, y)
    return gap <= 1e-10 and gap0 == 0.0, f"gap {gap:.1e} (e=0: {gap0})"


def check_conv_pool(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    k = rng.normal(size=(1, 1, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data[0, 0]
    brute = np.array([[np.sum(x[0, 0, i:i + 3, j:j + 3] * k[0, 0]) for j in range(2)] for i in range(2)])
    pooled = ad.maxpool2(ad.Tensor(x)).data[0, 0]
    pbrute = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(2)] for i in range(2)])
    err = max(np.abs(out - brute).max(), np.abs(pooled - pbrute).max())
    return err <= 1e-12, f"max deviation {err:.1e}"


def check_lyapunov(rng):
    probe = SpectralProbe(hvp_method="exact_quadratic")
    q = spectral_norm_shifted(probe, None, np.zeros(1), 0.1, Quadratic.diagonal([2.0]).hessian)
    s = spectral_norm_shifted(probe, None, np.zeros(2), 0.1, Saddle().evaluate(np.zeros(2))[2])
    a, b = math.log(q.value), math.log(s.value)
    ok = abs(a + 0.223144) <= 1e-6 and abs(b - 0.095310) <= 1e-6
    return ok, f"quadratic {a:+.6f}, saddle {b:+.6f}"


def check_idx(rng):
    payload = bytes(rng.integers(0, 256, size=2 * 3 * 3, dtype=np.uint8))
    idx = IdxFile(0x803, (2, 3, 3), payload)
    back = parse_idx(serialize_idx(idx))
    return back == idx, "round trip"


def check_bypass(rng):
    rep = verify_path_certificate(bypass_path())
    return rep.valid, f"f_orig drop {rep.drop:.4f}"


def check_peak(rng):
    t = first_peak([2.0, 1.5, 1.6, 1.8, 1.4, 1.2])
    return t == 3, f"peak at {t}"


CHECKS = {
    "ghost gradient three-way agreement": check_gradients,
    "loss decomposition": check_decomposition,
    "gradient collapse under frozen ghosts": check_collapse,
    "conv2d/maxpool2 brute force": check_conv_pool,
    "Lyapunov closed forms": check_lyapunov,
    "IDX round trip": check_idx,
    "barrier-bypass certificate": check_bypass,
    "first-peak rule": check_peak,
}


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(rng)
        except Exception as err:  # a crashing check is a failed check
            ok, detail = False, f"{type(err).__name__}: {err}"
        yield name, bool(ok), detail
