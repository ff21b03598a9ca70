"""Built-in oracle suites behind `semmatch selftest`: quick, dependency-free
cross-checks of the numerically hairy corners."""
from __future__ import annotations

import os
import tempfile

import numpy as np

from . import blob
from .geometry import Correspondence, Homography, auc, fit_dlt, warp_points
from .gradcheck import finite_diff_check
from .matching import dual_softmax, mnn_select
from .tensor import linear, matmul, mean_all, softmax, sum_all


def _check_dlt(rng: np.random.Generator) -> None:
    for _ in range(20):
        m = np.eye(3) + rng.uniform(-0.2, 0.2, size=(3, 3))
        m[2, 2] = 1.0
        h = Homography(m)
        pts = rng.uniform(0, 64, size=(8, 2))
        q = warp_points(h, pts)
        fitted = fit_dlt([Correspondence(p, t) for p, t in zip(pts, q)])
        err = np.abs(warp_points(fitted, pts) - q).max()
        assert err < 1e-6, f"DLT reprojection error {err}"


def _check_mnn(rng: np.random.Generator) -> None:
    for _ in range(100):
        n0, n1 = rng.integers(1, 9, size=2)
        p = dual_softmax(rng.normal(size=(n0, n1)))
        got = {(m.i, m.j) for m in mnn_select(p, 0.1)}
        want = set()
        for i in range(n0):
            for j in range(n1):
                if p[i, j] < 0.1:
                    continue
                if all(p[i, j] >= p[i, jj] for jj in range(n1)) and \
                   all(p[i, j] >= p[ii, j] for ii in range(n0)) and \
                   int(np.argmax(p[i])) == j and int(np.argmax(p[:, j])) == i:
                    want.add((i, j))
        assert got == want, f"MNN disagreement: {got} vs {want}"


def _check_gradients(rng: np.random.Generator) -> None:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    err = finite_diff_check(lambda x, y: sum_all(matmul(x, y)), [a, b])
    assert err < 1e-8, f"matmul gradient error {err}"
    x = rng.normal(size=(2, 5))
    err = finite_diff_check(
        lambda t: mean_all(softmax(t, axis=1)), [x])
    assert err < 1e-6, f"softmax gradient error {err}"
    w = rng.normal(size=(5, 3))
    bias = rng.normal(size=3)
    err = finite_diff_check(
        lambda t, ww, bb: sum_all(linear(t, ww, bb)), [x, w, bias])
    assert err < 1e-8, f"linear gradient error {err}"


def _check_auc() -> None:
    assert auc([0.0, 0.0], 3.0) == 1.0
    assert auc([5.0, 9.0], 5.0) == 0.0
    assert abs(auc([0.0, 2.5], 5.0) - 0.75) < 1e-12


def _check_blob() -> None:
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7.0
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.srmt")
        blob.save_tensor(path, arr)
        back = blob.load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def run_selftest() -> int:
    rng = np.random.default_rng(0)
    suites = [("dlt-planted-oracle", lambda: _check_dlt(rng)),
              ("mnn-brute-force", lambda: _check_mnn(rng)),
              ("finite-difference", lambda: _check_gradients(rng)),
              ("auc-hand-values", _check_auc),
              ("blob-round-trip", _check_blob)]
    failed = 0
    for name, fn in suites:
        try:
            fn()
            print(f"ok   {name}")
        except AssertionError as exc:
            print(f"FAIL {name}: {exc}")
            failed += 1
    return 1 if failed else 0
