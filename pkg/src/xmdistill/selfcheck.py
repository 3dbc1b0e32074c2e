"""Finite-difference self-check of every differentiable primitive and of the
full encoder -> mean pool -> squared-error composition on a tiny model."""

from __future__ import annotations

import numpy as np

from .distill import infonce_loss, mse_loss
from .model import StudentConfig, embed_signal, init_student
from .numerics import (
    SeededRng,
    Tensor,
    conv1d,
    div,
    exp,
    finite_diff_check,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    reduce_mean,
    reshape,
    sin,
    softmax,
    sqrt,
    stack,
    transpose,
)

TINY_CONFIG = StudentConfig(
    conv_layers=((4, 4, 2), (8, 3, 2)), d_model=8, n_heads=1, n_layers=1, d_ff=16, d_embed=8, max_positions=64
)
TOLERANCE = 1e-4


def _primitive_cases(rng: SeededRng):
    """(name, f, x) triples; each f maps a [3, 4] tensor to a scalar."""
    probe = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 3))
    w = rng.normal(size=(2, 3, 3))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    x = rng.normal(size=(3, 4))
    pos = np.abs(x) + 0.5
    return [
        ("add", lambda t: ((t + probe) * probe).sum(), x),
        ("mul", lambda t: (t * t * probe).sum(), x),
        ("div", lambda t: (div(probe, t) + div(t, 2.0)).sum(), pos),
        ("matmul", lambda t: (matmul(t, b) * probe[:, :3]).sum(), x),
        ("transpose", lambda t: (transpose(t) * probe.T).sum(), x),
        ("reshape", lambda t: (reshape(t, (4, 3)) * probe.reshape(4, 3)).sum(), x),
        ("getitem", lambda t: (t[1:, ::2] * probe[1:, ::2]).sum(), x),
        ("stack", lambda t: (stack([t, t * probe]) * probe).sum(), x),
        ("exp", lambda t: (exp(t) * probe).sum(), x),
        ("log", lambda t: (log(t) * probe).sum(), pos),
        ("sqrt", lambda t: (sqrt(t) * probe).sum(), pos),
        ("sin", lambda t: (sin(t) * probe).sum(), x),
        ("gelu", lambda t: (gelu(t) * probe).sum(), x),
        ("softmax", lambda t: (softmax(t) * probe).sum(), x),
        ("log_softmax", lambda t: (log_softmax(t) * probe).sum(), x),
        ("layer_norm", lambda t: (layer_norm(t, gain, bias) * probe).sum(), x),
        ("reduce_mean", lambda t: (reduce_mean(t, 0) * probe[0]).sum(), x),
        ("conv1d", lambda t: (conv1d(t, w, 2) * probe[:2, :1]).sum(), x),
        ("mse_loss", lambda t: mse_loss(t, probe), x),
        ("infonce_loss", lambda t: infonce_loss(t, probe, Tensor(np.log(0.5))), x),
        ("infonce_temperature", lambda t: infonce_loss(x, probe, t), np.array(np.log(0.3))),
    ]


def primitive_errors(n_points: int = 5) -> dict:
    """Worst relative error per primitive over ``n_points`` seeded inputs."""
    worst = {}
    for seed in range(n_points):
        for name, f, x in _primitive_cases(SeededRng(1000 + seed)):
            worst[name] = max(worst.get(name, 0.0), finite_diff_check(f, x))
    return worst


def model_gradient_error(seed: int, config: StudentConfig = TINY_CONFIG, n_samples: int = 40) -> dict:
    """Per-parameter worst relative error of d(mse)/d(param) for one seeded point."""
    rng = SeededRng(2000 + seed)
    enc = init_student(config, seed)
    # perturb away from the zero-bias / unit-gain init so every path is exercised
    enc.update({n: a + rng.normal(0.0, 0.1, size=a.shape) for n, a in enc.params.items()})
    signal = Tensor(rng.uniform(-1.0, 1.0, size=n_samples))
    target = rng.normal(size=(1, config.d_embed))
    frozen = enc.leaves(track=False)
    out = {}
    for name in enc.names():
        def loss(t, name=name):
            params = dict(frozen)
            params[name] = t
            return mse_loss(stack([embed_signal(enc, signal, params)]), target)

        out[name] = finite_diff_check(loss, enc.params[name])
    return out


def run_self_check(n_points: int = 5) -> dict:
    prims = primitive_errors(n_points)
    model = {}
    for seed in range(n_points):
        for name, err in model_gradient_error(seed).items():
            model[name] = max(model.get(name, 0.0), err)
    worst = max([*prims.values(), *model.values()])
    return {
        "tolerance": TOLERANCE,
        "points": n_points,
        "primitives": prims,
        "encoder_pool_mse": max(model.values()),
        "encoder_parameters": model,
        "max_relative_error": worst,
        "passed": worst <= TOLERANCE,
    }
