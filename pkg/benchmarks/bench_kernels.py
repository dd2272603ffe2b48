"""Time the numba and numpy kernel paths side by side.

Per-kernel timings call both implementations in one process. The
end-to-end rows (a training step and a local-context inference pass) run
in child processes with ``LOCALICL_NUMBA`` set either way, since the flag
is read at import.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from localicl import _kernels as K


def kernel_cases(rng):
    x = rng.normal(size=(4096, 64))
    gain, shift = np.ones(64), np.zeros(64)
    _, xhat, rstd = K.np_layer_norm_fwd(x, gain, shift)
    scores = rng.normal(size=(4096, 512))
    mask = rng.random((4096, 512)) < 0.9
    mask[:, 0] = True
    pts = rng.normal(size=(2000, 10))
    qs = rng.normal(size=(256, 10))
    dist = K.np_sq_distances(qs, pts)
    return {
        "layer_norm_fwd": (lambda f: f(x, gain, shift), "layer_norm_fwd"),
        "layer_norm_bwd": (lambda f: f(x, xhat, rstd, gain), "layer_norm_bwd"),
        "gelu_fwd": (lambda f: f(x), "gelu_fwd"),
        "gelu_bwd": (lambda f: f(x, x), "gelu_bwd"),
        "softmax_rows": (lambda f: f(scores, mask), "softmax_rows"),
        "sq_distances": (lambda f: f(qs, pts), "sq_distances"),
        "knn_select": (lambda f: f(dist, 100), "knn_select"),
    }


def bench_kernels(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for name, (call, attr) in kernel_cases(rng).items():
        row = {"case": name}
        for path in ("np", "nb"):
            fn = getattr(K, f"{path}_{attr}", None)
            if fn is None:
                continue
            call(fn)  # warm-up (JIT compile)
            row[path] = min(timeit.repeat(lambda: call(fn), number=1, repeat=repeat)) * 1e3
        rows.append(row)
    return rows


_E2E = r"""
import json, sys, timeit
import numpy as np
from localicl.model import ModelConfig, init_params, prepare_task, predict_local
from localicl.training import loss_and_grads
cfg = ModelConfig()
params = init_params(cfg, 0)
rng = np.random.default_rng(0)
feats = rng.normal(size=(2, 566, cfg.D_max))
y = rng.integers(0, 2, size=(2, 566))
step = lambda: loss_and_grads(params, feats, y[:, :502], y[:, 502:], 2)
X = rng.normal(size=(3200, 5)); yy = rng.integers(0, 2, 3200)
task = prepare_task(X, yy, cfg, n_classes=2)
q, e = task.encode(rng.normal(size=(64, 5)))
infer = lambda: predict_local(params, task, q, e, 100)
step(); infer()
r = int(sys.argv[1])
print(json.dumps({"train_step": min(timeit.repeat(step, number=1, repeat=r)) * 1e3,
                  "local_inference_64q": min(timeit.repeat(infer, number=1, repeat=r)) * 1e3}))
"""


def bench_end_to_end(repeat: int) -> list[dict]:
    results = {}
    for path, flag in (("np", "0"), ("nb", "1")):
        env = dict(os.environ, LOCALICL_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _E2E, str(repeat)], env=env, capture_output=True, text=True, check=True)
        results[path] = json.loads(out.stdout.strip().splitlines()[-1])
    return [{"case": k, "np": results["np"][k], "nb": results["nb"][k]} for k in results["np"]]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--kernels-only", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba not installed; only the numpy path is timed", file=sys.stderr)
    rows = bench_kernels(args.repeat)
    if not args.kernels_only:
        rows += bench_end_to_end(args.repeat)
    print(f"{'case':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for r in rows:
        nb = r.get("nb", float("nan"))
        print(f"{r['case']:<22}{r['np']:>12.3f}{nb:>12.3f}{r['np'] / nb:>10.2f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
