"""Compare the numba kernels against their numpy twins.

Each backend runs in its own interpreter because the switch is read at
import time.  Usage::

    python3 benchmarks/bench_kernels.py [--pairs 20000] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys

import numpy as np

WORKER = r"""
import json, sys, time
import numpy as np
from revscat import specfun, modalgreen
from revscat._accel import use_numba

pairs, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
chim1 = 10 ** rng.uniform(-6, 1.5, pairs)
rt, rs = rng.uniform(0.5, 3.0, pairs), rng.uniform(0.5, 3.0, pairs)
zt, zs = rng.uniform(-1, 1, pairs), rng.uniform(-1, 1, pairs)


def best(f):
    f()  # compile / warm caches
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        f()
        out.append(time.perf_counter() - t0)
    return min(out)


q = specfun.legendre_q_batch(chim1, 40)
g = modalgreen.modal_kernels(rt, zt, rs, zs, 10.0, 5.0, 20)
res = {"numba": use_numba(),
       "legendre_q": best(lambda: specfun.legendre_q_batch(chim1, 40)),
       "modal_kernels": best(lambda: modalgreen.modal_kernels(rt, zt, rs, zs, 10.0, 5.0, 20)),
       "q_checksum": float(np.abs(q).sum()), "g_checksum": float(np.abs(g).sum())}
np.save(sys.argv[3], g)
print(json.dumps(res))
"""


def run(disable, pairs, repeat, dump):
    env = dict(os.environ, REVSCAT_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(pairs), str(repeat), dump], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        fast = run(False, args.pairs, args.repeat, f"{tmp}/nb.npy")
        slow = run(True, args.pairs, args.repeat, f"{tmp}/np.npy")
        a, b = np.load(f"{tmp}/nb.npy"), np.load(f"{tmp}/np.npy")
    diff = float(np.abs(a - b).max() / np.abs(b).max())
    print(f"{'kernel':<16}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for key in ("legendre_q", "modal_kernels"):
        print(f"{key:<16}{fast[key]:>12.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>10.1f}")
    print(f"numba active: {fast['numba']}; max relative difference of kernels: {diff:.2e}")


if __name__ == "__main__":
    main()
