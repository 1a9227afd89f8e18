"""Central-difference gradient checks.

The analytic gradient comes from the tape with float32 storage. The numeric
gradient re-evaluates the same function on float64 copies of the
float32-rounded inputs, so the finite difference itself carries no float32
rounding noise.

If the stencil ``x - h .. x + h`` of a coordinate flips any relu unit, the
difference would straddle a kink. Those coordinates are re-evaluated with
every relu gated by its activation pattern at the unperturbed point, which
is the piecewise-linear function whose derivative the tape computes. They
are listed in ``GradCheckResult.gated``.
"""

from dataclasses import dataclass, field

import numpy as np

from crld.tensor import Tensor, backward, no_grad, trace_relu

REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor=REL_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same(pa, pb):
    return len(pa) == len(pb) and all(np.array_equal(a, b) for a, b in zip(pa, pb))


def central_difference(evaluate, array, index, h=1e-3):
    """Slope of ``evaluate`` along one coordinate; returns (slope, gated).

    ``evaluate(replay)`` returns ``(value, relu patterns)``.
    """
    old = array.flat[index]
    _, base = evaluate(None)
    slope, gated = None, False
    for replay in (None, base):
        array.flat[index] = old + h
        fp, pp = evaluate(replay)
        array.flat[index] = old - h
        fm, pm = evaluate(replay)
        array.flat[index] = old
        slope = (fp - fm) / (2 * h)
        if replay is None and not (_same(pp, base) and _same(pm, base)):
            gated = True
            continue
        break
    return slope, gated


@dataclass
class GradCheckResult:
    coords: list = field(default_factory=list)  # (input, flat index, analytic, numeric, rel)
    gated: list = field(default_factory=list)  # (input, flat index) evaluated with frozen relu gates

    @property
    def max_rel_error(self):
        return max((c[4] for c in self.coords), default=0.0)

    def passed(self, tol=1e-3):
        return bool(self.coords) and self.max_rel_error <= tol


def sample_coords(sizes, n, rng):
    """``n`` distinct (input, flat index) pairs drawn uniformly over all inputs."""
    total = int(sum(sizes))
    flat = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in np.sort(flat):
        i = int(np.searchsorted(bounds, f, side="right"))
        out.append((i, int(f - (bounds[i - 1] if i else 0))))
    return out


def check_gradients(fn, arrays, n_coords=20, h=1e-3, seed=0, wrt=None):
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    ``wrt`` lists the input positions to differentiate (default: all).
    """
    arrays32 = [np.asarray(a, dtype=np.float32) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays32)]
    backward(fn(*tensors))
    arrays64 = [a.astype(np.float64) for a in arrays32]

    def evaluate(replay):
        with no_grad(), trace_relu(replay) as pattern:
            value = fn(*[Tensor(a, dtype=np.float64) for a in arrays64]).item()
        return value, pattern

    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for k, idx in sample_coords([arrays32[i].size for i in wrt], n_coords, rng):
        i = wrt[k]
        grad = tensors[i].grad
        a = 0.0 if grad is None else float(grad.flat[idx])
        num, gated = central_difference(evaluate, arrays64[i], idx, h)
        if gated:
            result.gated.append((i, idx))
        result.coords.append((i, idx, a, num, rel_error(a, num)))
    return result
