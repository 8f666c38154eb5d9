"""Named parameter collections, initializers and seeded random streams."""

from __future__ import annotations

import hashlib
import zlib
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


def stream(seed, consumer):
    """Independent Philox generator for one named consumer of a root seed."""
    key = zlib.crc32(consumer.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class ParamSet:
    """Ordered mapping of hierarchical names (``stage1.block0.attn.q.weight``) to Tensors."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()

    def add(self, name, array, requires_grad=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype).copy(), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def linear(self, prefix, n_in, n_out, rng, std=0.02, bias=True):
        self.add(f"{prefix}.weight", trunc_normal(rng, (n_in, n_out), std))
        if bias:
            self.add(f"{prefix}.bias", np.zeros(n_out))

    def norm(self, prefix, dim):
        self.add(f"{prefix}.weight", np.ones(dim))
        self.add(f"{prefix}.bias", np.zeros(dim))

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def count(self, names=None):
        names = self._params if names is None else names
        return int(sum(self._params[n].data.size for n in names))

    def snapshot(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, arrays, strict=True):
        if strict and set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise KeyError(f"parameter names differ; missing={missing} unexpected={extra}")
        for name, arr in arrays.items():
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def fingerprint(self, names=None):
        h = hashlib.sha256()
        for n in sorted(self._params if names is None else names):
            h.update(n.encode("utf-8"))
            h.update(np.ascontiguousarray(self._params[n].data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

