"""Finite-difference verification of analytic gradients.

The checker reruns the function under test on a float64 copy of the input
(the graph promotes automatically, so the same code path executes at
higher precision) and compares the analytic gradient against central
differences element by element.  Per-element relative error uses a
scale-aware floor so that entries a thousand times smaller than the
dominant gradient are judged on an absolute scale instead of blowing up
on cancellation noise.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NondeterministicFunctionError(RuntimeError):
    """Two forward passes of the checked function disagreed."""


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_element: list = field(default_factory=list)
    kink_excluded: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _eval(f, x: np.ndarray) -> float:
    with ad.no_grad():
        out = f(Tensor(x))
    if out.size != 1:
        raise ValueError(f"gradcheck function must return a scalar, got {out.shape}")
    return float(out.data.reshape(()))


def finite_difference_check(
    f,
    x: Tensor,
    step: float = 1e-3,
    name: str = "fn",
    max_elements=None,
    exclude_kinks: bool = False,
) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` must map one Tensor to a scalar Tensor and be deterministic;
    ``max_elements`` optionally restricts the sweep to an evenly spaced
    subset of coordinates (used for whole-tower checks).

    With ``exclude_kinks`` a coordinate is first certified locally smooth
    by agreement between the step and half-step difference quotients
    (Richardson consistency, computed without ever consulting the
    analytic gradient).  Central differences across a ReLU kink measure
    an average of two linear regions rather than the derivative at x, so
    straddled coordinates carry no information about gradient
    correctness and are reported separately instead of compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x64 = x.data.astype(np.float64)
    if _eval(f, x64) != _eval(f, x64):
        raise NondeterministicFunctionError(name)

    leaf = Tensor(x64, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"gradcheck function must return a scalar, got {out.shape}")
    out.backward()
    analytic = leaf.grad.reshape(-1)

    n = x64.size
    if max_elements is not None and max_elements < n:
        idx = np.unique(np.linspace(0, n - 1, max_elements).astype(int))
    else:
        idx = np.arange(n)

    flat = x64.reshape(-1)

    def quotient(i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        hi = _eval(f, flat.reshape(x64.shape))
        flat[i] = orig - h
        lo = _eval(f, flat.reshape(x64.shape))
        flat[i] = orig
        return (hi - lo) / (2.0 * h)

    fd = np.zeros(idx.size, dtype=np.float64)
    smooth = np.ones(idx.size, dtype=bool)
    for j, i in enumerate(idx):
        fd[j] = quotient(i, step)
        if exclude_kinks:
            half = quotient(i, step / 2.0)
            gap = abs(fd[j] - half)
            if gap > 1e-4 * max(abs(fd[j]), abs(half), 1e-8):
                smooth[j] = False

    a = analytic[idx][smooth]
    fd = fd[smooth]
    scale = np.maximum(np.abs(a), np.abs(fd))
    floor = 1e-3 * (scale.max() if scale.size else 0.0) + 1e-12
    rel = np.abs(a - fd) / np.maximum(scale, floor)
    return GradCheckReport(
        name,
        float(rel.max()) if rel.size else 0.0,
        rel.tolist(),
        kink_excluded=int((~smooth).sum()),
    )


# ---------------------------------------------------------------------------
# primitive registry


def _rng(seed=0):
    return np.random.default_rng(seed)


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32))


def _proj(shape, seed=99) -> np.ndarray:
    return _rng(seed).normal(size=shape).astype(np.float32)


def _case_add():
    b = _t(_rng(1).normal(size=(3, 4)))
    p = _proj((3, 4))
    return lambda x: ad.dot(ad.add(x, b), Tensor(p)), _t(_rng(2).normal(size=(3, 4)))


def _case_sub():
    b = _t(_rng(3).normal(size=(3, 4)))
    p = _proj((3, 4))
    return lambda x: ad.dot(ad.sub(x, b), Tensor(p)), _t(_rng(4).normal(size=(3, 4)))


def _case_mul():
    b = _t(_rng(5).normal(size=(3, 4)))
    p = _proj((3, 4))
    return lambda x: ad.dot(ad.mul(x, b), Tensor(p)), _t(_rng(6).normal(size=(3, 4)))


def _case_mul_scalar():
    p = _proj((3, 4))
    return lambda x: ad.dot(ad.mul(x, 1.7), Tensor(p)), _t(_rng(7).normal(size=(3, 4)))


def _case_matmul():
    b = _t(_rng(8).normal(size=(4, 5)))
    p = _proj((3, 5))
    return lambda x: ad.dot(ad.matmul(x, b), Tensor(p)), _t(_rng(9).normal(size=(3, 4)))


def _case_matmul_batched():
    b = _t(_rng(10).normal(size=(2, 3, 4, 5)))
    p = _proj((2, 3, 6, 5))
    return (
        lambda x: ad.dot(ad.matmul(x, b), Tensor(p)),
        _t(_rng(11).normal(size=(2, 3, 6, 4))),
    )


def _case_dot():
    b = _t(_rng(12).normal(size=(7,)))
    return lambda x: ad.dot(x, b), _t(_rng(13).normal(size=(7,)))


def _case_add_bias():
    b = _t(_rng(14).normal(size=(4,)))
    p = _proj((2, 3, 4))
    return (
        lambda x: ad.dot(ad.add_bias(x, b), Tensor(p)),
        _t(_rng(15).normal(size=(2, 3, 4))),
    )


def _case_reshape():
    p = _proj((12,))
    return lambda x: ad.dot(ad.reshape(x, (12,)), Tensor(p)), _t(
        _rng(16).normal(size=(3, 4))
    )


def _case_transpose():
    p = _proj((4, 2, 3))
    return (
        lambda x: ad.dot(ad.transpose(x, (2, 0, 1)), Tensor(p)),
        _t(_rng(17).normal(size=(2, 3, 4))),
    )


def _case_concat():
    b = _t(_rng(18).normal(size=(3, 2)))
    p = _proj((3, 6))
    return (
        lambda x: ad.dot(ad.concat([x, b], axis=1), Tensor(p)),
        _t(_rng(19).normal(size=(3, 4))),
    )


def _case_take():
    p = _proj((2, 2))
    return (
        lambda x: ad.dot(x[1:3, ::2], Tensor(p)),
        _t(_rng(20).normal(size=(4, 4))),
    )


def _case_embedding():
    ids = np.array([[0, 2], [2, 1]])
    p = _proj((2, 2, 3))
    return (
        lambda x: ad.dot(ad.embedding(x, ids), Tensor(p)),
        _t(_rng(21).normal(size=(4, 3))),
    )


def _case_sum():
    p = _proj((3,))
    return (
        lambda x: ad.dot(ad.tensor_sum(x, axis=1), Tensor(p)),
        _t(_rng(22).normal(size=(3, 5))),
    )


def _case_mean():
    p = _proj((5,))
    return (
        lambda x: ad.dot(ad.mean(x, axis=0), Tensor(p)),
        _t(_rng(23).normal(size=(3, 5))),
    )


def _case_relu():
    # Keep inputs away from the kink at zero; central differences straddle it.
    x = _rng(24).normal(size=(3, 5)).astype(np.float32)
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    p = _proj((3, 5))
    return lambda t: ad.dot(ad.relu(t), Tensor(p)), _t(x)


def _case_sigmoid():
    p = _proj((3, 5))
    return lambda x: ad.dot(ad.sigmoid(x), Tensor(p)), _t(_rng(25).normal(size=(3, 5)))


def _case_softmax():
    p = _proj((3, 5))
    return lambda x: ad.dot(ad.softmax(x), Tensor(p)), _t(_rng(26).normal(size=(3, 5)))


def _case_layer_norm():
    g = _t(1.0 + 0.1 * _rng(27).normal(size=(6,)))
    b = _t(0.1 * _rng(28).normal(size=(6,)))
    p = _proj((4, 6))
    return (
        lambda x: ad.dot(ad.layer_norm(x, g, b), Tensor(p)),
        _t(_rng(29).normal(size=(4, 6))),
    )


def _case_l2_normalize():
    p = _proj((3, 6))
    return (
        lambda x: ad.dot(ad.l2_normalize(x), Tensor(p)),
        _t(1.0 + 0.5 * _rng(30).normal(size=(3, 6))),
    )


def _case_cosine():
    b = _t(_rng(31).normal(size=(3, 6)))
    p = _proj((3,))
    return (
        lambda x: ad.dot(ad.cosine_similarity(x, b), Tensor(p)),
        _t(1.0 + 0.5 * _rng(32).normal(size=(3, 6))),
    )


def _case_conv2d():
    w = _t(0.5 * _rng(33).normal(size=(4, 3, 3, 3)))
    b = _t(0.1 * _rng(34).normal(size=(4,)))
    p = _proj((2, 4, 6, 6))
    return (
        lambda x: ad.dot(ad.conv2d(x, w, b, padding=1), Tensor(p)),
        _t(_rng(35).normal(size=(2, 3, 6, 6))),
    )


def _case_conv2d_weight():
    x = _t(_rng(36).normal(size=(2, 3, 6, 6)))
    p = _proj((2, 4, 4, 4))
    return (
        lambda w: ad.dot(ad.conv2d(x, w, padding=0), Tensor(p)),
        _t(0.5 * _rng(37).normal(size=(4, 3, 3, 3))),
    )


def _case_avg_pool2d():
    p = _proj((2, 3, 2, 2))
    return (
        lambda x: ad.dot(ad.avg_pool2d(x, (2, 2)), Tensor(p)),
        _t(_rng(38).normal(size=(2, 3, 4, 4))),
    )


def _case_dilate2d():
    p = _proj((1, 2, 5, 5))
    return (
        lambda x: ad.dot(ad.dilate2d(x, 2), Tensor(p)),
        _t(_rng(39).normal(size=(1, 2, 3, 3))),
    )


def _case_flip_spatial():
    p = _proj((2, 3, 4, 4))
    return lambda x: ad.dot(ad.flip_spatial(x), Tensor(p)), _t(
        _rng(40).normal(size=(2, 3, 4, 4))
    )


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "mul_scalar": _case_mul_scalar,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "dot": _case_dot,
    "add_bias": _case_add_bias,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "take": _case_take,
    "embedding": _case_embedding,
    "sum": _case_sum,
    "mean": _case_mean,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "l2_normalize": _case_l2_normalize,
    "cosine_similarity": _case_cosine,
    "conv2d": _case_conv2d,
    "conv2d_weight": _case_conv2d_weight,
    "avg_pool2d": _case_avg_pool2d,
    "dilate2d": _case_dilate2d,
    "flip_spatial": _case_flip_spatial,
}


def check_primitives(step: float = 1e-3, cases=None) -> list[GradCheckReport]:
    """Run finite-difference checks for every registered primitive case."""
    cases = PRIMITIVE_CASES if cases is None else cases
    reports = []
    for name, build in cases.items():
        f, x = build()
        reports.append(finite_difference_check(f, x, step=step, name=name))
    return reports


def format_reports(reports, tol: float) -> str:
    width = max(len(r.op_name) for r in reports) + 2
    lines = []
    for r in reports:
        status = "PASS" if r.passed(tol) else "FAIL"
        lines.append(f"{r.op_name:<{width}} max_rel_err={r.max_rel_error:.3e}  {status}")
    return "\n".join(lines)


def timed(fn):
    start = time.monotonic()
    result = fn()
    return result, time.monotonic() - start
