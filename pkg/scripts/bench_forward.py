"""Time forward and forward+backward passes of the full descriptor network."""
import argparse
import time

import numpy as np

from mrdesc import network
from mrdesc import tensor as T


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=128, help="triples per pass")
    ap.add_argument("--precision", choices=("32", "64"), default="32")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    net = network.init(0, precision=args.precision)
    rng = np.random.default_rng(0)
    dtype = T.resolve_dtype(args.precision)
    views = [rng.standard_normal((args.batch, 1, 64, 64)).astype(dtype) for _ in range(3)]

    fwd, both = [], []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        out = net.forward(*views)
        fwd.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        out = net.forward(*views)
        net.zero_grad()
        T.backward(T.tensor_sum(out))
        both.append(time.perf_counter() - t0)
    print(f"parameters\t{network.count_parameters()}")
    print(f"batch\t{args.batch}\tprecision\t{args.precision}")
    print(f"forward_s\t{min(fwd):.3f}")
    print(f"forward_backward_s\t{min(both):.3f}")


if __name__ == "__main__":
    main()
