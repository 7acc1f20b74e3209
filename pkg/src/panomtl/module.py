"""Named-parameter containers."""
import numpy as np

from .tensor import Tensor


class Module:
    """Holds parameters and child modules under stable dotted names."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, value):
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = own.keys() - state.keys()
            extra = state.keys() - own.keys()
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            t = own[name]
            arr = np.asarray(arr)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def to_dtype(self, dtype):
        """Cast every parameter in place (float64 for gradient checks)."""
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None


def he_normal(rng, shape, fan_in, gain=np.sqrt(2.0)):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))
