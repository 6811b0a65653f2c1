"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--records 100000] [--items 50] [--repeat 5]

Prints the best-of-repeat time per kernel and backend plus the speedup, and
checks that both backends return the same numbers on the benchmark inputs.
"""
import argparse
import time

import numpy as np

from choicekit import kernels


def make_inputs(N, I, S, U, P, categories, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "util": rng.normal(size=(N, I)),
        "avail": rng.random((S, I)) < 0.8,
        "session": rng.integers(0, S, N),
        "user": rng.integers(0, U, N),
        "category": np.sort(rng.integers(0, categories, I)),
        "categories": categories,
        "chosen": None,
        "tensor": rng.normal(size=(S, I, P)),
        "coef": rng.normal(size=(U, P)),
        "weights": rng.normal(size=(N, I)),
        "rows": rng.normal(size=(N, P)),
        "U": U,
    }


def pick_chosen(x):
    avail = x["avail"][x["session"]]
    avail[:, 0] = True  # every row needs at least one available item
    x["avail"][:, 0] = True
    scores = np.where(avail, np.random.default_rng(1).random(avail.shape), -1.0)
    x["chosen"] = scores.argmax(axis=1)


def cases(x):
    return {
        "masked_log_softmax": lambda impl: kernels.masked_log_softmax(
            x["util"], x["avail"], x["session"], x["category"], x["categories"], impl=impl)[0],
        "softmax_residual": lambda impl: kernels.softmax_residual(
            x["util"], x["avail"], x["session"], x["category"], x["categories"], x["chosen"],
            impl=impl)[0],
        "scatter_add_rows": lambda impl: kernels.scatter_add_rows(
            x["rows"], x["user"], x["U"], impl=impl),
        "gather_dot3": lambda impl: kernels.gather_dot3(
            x["tensor"], x["coef"], x["session"], x["user"], impl=impl),
        "gather_dot3_grad": lambda impl: kernels.gather_dot3_grad(
            x["tensor"], x["weights"], x["session"], x["user"], x["U"], impl=impl),
    }


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=100_000)
    ap.add_argument("--items", type=int, default=50)
    ap.add_argument("--sessions", type=int, default=1000)
    ap.add_argument("--users", type=int, default=200)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--categories", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = kernels.implementations()
    if "compiled" not in impls:
        print("compiled extension not built; timing the numpy fallback only")
    x = make_inputs(args.records, args.items, args.sessions, args.users, args.dim,
                    args.categories)
    pick_chosen(x)

    print(f"N={args.records} I={args.items} S={args.sessions} U={args.users} P={args.dim}")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for name, fn in cases(x).items():
        times = {b: best_time(lambda: fn(m), args.repeat) for b, m in impls.items()}
        line = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in impls)
        if "compiled" in impls:
            ref, out = fn(impls["python"]), fn(impls["compiled"])
            finite = np.isfinite(ref)
            assert np.array_equal(finite, np.isfinite(out)), name
            assert np.allclose(ref[finite], out[finite], rtol=1e-10, atol=1e-10), name
            line += f"{times['python'] / times['compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
