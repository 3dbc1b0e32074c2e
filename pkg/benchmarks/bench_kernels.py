"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Shapes follow the acceptance-size student (32 channels, kernels 8/4, d_model 32)
on a 6-token utterance. The end-to-end row runs one forward+backward training
step of that student under each backend in a fresh interpreter, because the
backend is fixed at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from xmdistill.numerics import _kernels_py

try:
    from xmdistill.numerics import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    sig = rng.uniform(-1, 1, size=(1, 384))
    w1 = rng.normal(size=(32, 1, 8))
    h1 = rng.normal(size=(32, 95))
    w2 = rng.normal(size=(32, 32, 4))
    g1 = rng.normal(size=(32, 95))
    g2 = rng.normal(size=(32, 46))
    x = rng.normal(size=(46, 32))
    gain, bias = rng.normal(size=32), rng.normal(size=32)
    scores = rng.normal(size=(92, 46))  # two heads of 46x46, flattened as the tape does

    _, xhat, rstd = _kernels_py.layer_norm_forward(x, gain, bias, 1e-5)
    probs = _kernels_py.softmax_forward(scores)

    return [
        ("conv1d_forward L=384 k=8", lambda k: k.conv1d_forward(sig, w1, 4)),
        ("conv1d_forward 32ch k=4", lambda k: k.conv1d_forward(h1, w2, 2)),
        ("conv1d_backward L=384 k=8", lambda k: k.conv1d_backward(sig, w1, g1, 4)),
        ("conv1d_backward 32ch k=4", lambda k: k.conv1d_backward(h1, w2, g2, 2)),
        ("gelu_forward 32x95", lambda k: k.gelu_forward(h1)),
        ("gelu_backward 32x95", lambda k: k.gelu_backward(h1, g1)),
        ("layer_norm_forward 46x32", lambda k: k.layer_norm_forward(x, gain, bias, 1e-5)),
        ("layer_norm_backward 46x32", lambda k: k.layer_norm_backward(x, xhat, rstd, gain)),
        ("softmax_forward 92x46", lambda k: k.softmax_forward(scores)),
        ("softmax_backward 92x46", lambda k: k.softmax_backward(probs, scores)),
    ]


STEP_SCRIPT = """
import timeit, numpy as np
from xmdistill.model import StudentConfig, init_student, embed_signal
from xmdistill.numerics import GradTape, Tensor, backward, BACKEND
cfg = StudentConfig(conv_layers=((32, 8, 4), (32, 4, 2)), d_model=32, n_heads=2, n_layers=2, d_ff=64, d_embed=32)
enc = init_student(cfg, 0)
sig = Tensor(np.random.default_rng(0).uniform(-1, 1, 384))
def step():
    leaves = {n: Tensor(a, requires_grad=True) for n, a in enc.params.items()}
    with GradTape() as tape:
        out = embed_signal(enc, sig, leaves)
        loss = (out * out).sum()
    backward(tape, loss)
n = {n}
print(BACKEND, min(timeit.repeat(step, number=n, repeat=3)) / n)
"""


def time_step(pure: bool, n: int) -> tuple:
    env = dict(os.environ)
    env.pop("XMDISTILL_PURE_PYTHON", None)
    if pure:
        env["XMDISTILL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.replace("{n}", str(n))], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per timing sample")
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':28s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, fn in cases(rng):
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=5)) / args.repeat
        t_c = None
        if _kernels is not None:
            t_c = min(timeit.repeat(lambda: fn(_kernels), number=args.repeat, repeat=5)) / args.repeat
        rows.append({"kernel": name, "numpy_s": t_py, "compiled_s": t_c})
        speed = f"{t_py / t_c:7.2f}x" if t_c else "      -"
        comp = f"{t_c * 1e6:12.1f}" if t_c else f"{'-':>12s}"
        print(f"{name:28s} {t_py * 1e6:10.1f} {comp} {speed}")

    steps = {}
    for pure in (True, False):
        backend, secs = time_step(pure, max(1, args.repeat // 20))
        steps[backend] = secs
    if "compiled" in steps:
        print(f"{'train step (fwd+bwd)':28s} {steps['python'] * 1e6:10.1f} {steps['compiled'] * 1e6:12.1f} "
              f"{steps['python'] / steps['compiled']:7.2f}x")
    rows.append({"kernel": "train step", "numpy_s": steps["python"], "compiled_s": steps.get("compiled")})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
