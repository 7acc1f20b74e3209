"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor, tsum


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def _scalarize(out, rng):
    if out.size == 1:
        return out.reshape(())
    proj = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return tsum(out * proj)


def grad_check(fn, inputs, tol=1e-4, eps=1e-5, max_elems=None, seed=0):
    """Compare backward() against central differences for every tensor in ``inputs``.

    ``fn(*inputs)`` must be deterministic. Non-scalar outputs are contracted
    with a fixed random tensor so the whole Jacobian is exercised. The error
    for one input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
    the report carries the worst over inputs. ``max_elems`` caps the number
    of perturbed entries per input (chosen at random).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    rng = np.random.default_rng(seed)
    proj_seed = int(rng.integers(2**31))

    def evaluate():
        out = fn(*inputs)
        return _scalarize(out, np.random.default_rng(proj_seed))

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = evaluate()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    per_input, checked = [], 0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(rng.choice(flat.size, max_elems, replace=False))
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(evaluate().data)
            flat[i] = orig - eps
            fm = float(evaluate().data)
            flat[i] = orig
            num[n] = (fp - fm) / (2 * eps)
        if not np.isfinite(num).all():
            raise NonFiniteError("finite-difference gradient is not finite")
        a = ana.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        err = 0.0 if scale == 0 else float(np.abs(a - num).max() / scale)
        per_input.append(err)
        checked += len(idx)
    return GradCheckReport(max(per_input, default=0.0), per_input, checked, tol)
