"""Timing comparison of the compiled and numpy kernel backends.

Run directly:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from phs_lab import backend
from phs_lab._kernels_np import phs_cross as phs_cross_np, pi_tensor as pi_tensor_np
from phs_lab.structure import MicroactuatorStructure, StructureEstimate


def _jr_stack(states):
    family = MicroactuatorStructure()
    est = StructureEstimate(family=family, phi=family.default_phi())
    return est.jr_stack(states)


def _time(fn, repeats=5):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    lengthscales = np.array([0.8, 1.1, 0.9])
    print(f"compiled backend available: {backend.backend_name() == 'cython'}")
    header = f"{'case':<28}{'numpy':>12}{'cython':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for n_points in (100, 300):
        states = rng.standard_normal((3, n_points))
        stack = _jr_stack(states)
        cases = {
            f"pi_tensor N={n_points}": (
                lambda: pi_tensor_np(states, states, lengthscales),
                lambda: backend.pi_tensor(states, states, lengthscales),
            ),
            f"gram N={n_points}": (
                lambda: phs_cross_np(states, states, stack, stack, 1.3, lengthscales),
                lambda: backend.phs_cross(states, states, stack, stack, 1.3, lengthscales),
            ),
        }
        query = rng.standard_normal((3, 1))
        qstack = _jr_stack(query)
        cases[f"cross Q=1 N={n_points}"] = (
            lambda: phs_cross_np(query, states, qstack, stack, 1.3, lengthscales),
            lambda: backend.phs_cross(query, states, qstack, stack, 1.3, lengthscales),
        )
        for name, (np_fn, cy_fn) in cases.items():
            t_np = _time(np_fn)
            t_cy = _time(cy_fn)
            ratio = t_np / t_cy if t_cy > 0 else float("inf")
            print(f"{name:<28}{t_np * 1e3:>10.2f}ms{t_cy * 1e3:>10.2f}ms{ratio:>9.2f}x")
    if backend.backend_name() != "cython":
        print("note: compiled extension unavailable; both columns ran the numpy path")


if __name__ == "__main__":
    main()
