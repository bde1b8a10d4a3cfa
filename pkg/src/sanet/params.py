"""Parameter registry: initialization, gradient reset, SGD updates.

All trainable state lives in one ParamStore so that optimization, counting,
and checkpointing see the same set of arrays.  Creation order is the
canonical order for checkpoints, which keeps files byte-stable across runs
with the same seed.
"""
import numpy as np

from .tensor import Tensor, UsageError


class _Entry:
    __slots__ = ("name", "tensor", "array", "velocity", "trainable")

    def __init__(self, name, tensor=None, array=None, trainable=True):
        self.name = name
        self.tensor = tensor          # Tensor for trainable params
        self.array = array            # plain array for buffers (running stats)
        self.velocity = None
        self.trainable = trainable


class ParamStore:
    """Named parameters plus optimizer state, seeded once at construction."""

    def __init__(self, seed, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self._entries = {}

    # -- registration -------------------------------------------------------

    def _register(self, name, entry):
        if name in self._entries:
            raise UsageError(f"parameter {name!r} registered twice")
        self._entries[name] = entry
        return entry

    def _kaiming_uniform(self, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def _add_param(self, name, data):
        t = Tensor(data, requires_grad=True, op=f"param:{name}")
        self._register(name, _Entry(name, tensor=t))
        return t

    def _add_buffer(self, name, data):
        e = self._register(name, _Entry(name, array=data, trainable=False))
        return e.array

    def conv(self, name, c_in, c_out, k, groups=1):
        """Kaiming-uniform weight (fan-in = c_in/groups * k*k) and zero bias."""
        fan_in = (c_in // groups) * k * k
        w = self._add_param(name + ".w",
                            self._kaiming_uniform((c_out, c_in // groups, k, k), fan_in))
        b = self._add_param(name + ".b", np.zeros((1, c_out, 1, 1), dtype=self.dtype))
        return w, b

    def fc(self, name, c_in, c_out):
        w = self._add_param(name + ".w",
                            self._kaiming_uniform((c_out, c_in, 1, 1), c_in))
        b = self._add_param(name + ".b", np.zeros((1, c_out, 1, 1), dtype=self.dtype))
        return w, b

    def norm(self, name, c):
        gamma = self._add_param(name + ".gamma", np.ones((1, c, 1, 1), dtype=self.dtype))
        beta = self._add_param(name + ".beta", np.zeros((1, c, 1, 1), dtype=self.dtype))
        rmean = self._add_buffer(name + ".rmean", np.zeros(c, dtype=self.dtype))
        rvar = self._add_buffer(name + ".rvar", np.ones(c, dtype=self.dtype))
        return gamma, beta, rmean, rvar

    # -- access --------------------------------------------------------------

    def names(self):
        return list(self._entries)

    def tensor(self, name):
        return self._entries[name].tensor

    def trainable_tensors(self):
        return [e.tensor for e in self._entries.values() if e.trainable]

    def total_trainable(self):
        return sum(e.tensor.data.size for e in self._entries.values() if e.trainable)

    def named_arrays(self):
        """(name, array, trainable) triples in registration order."""
        for e in self._entries.values():
            arr = e.tensor.data if e.trainable else e.array
            yield e.name, arr, e.trainable

    def load_arrays(self, named):
        """Overwrite values from a {name: array} mapping (checkpoint load)."""
        missing = set(self._entries) - set(named)
        extra = set(named) - set(self._entries)
        if missing or extra:
            raise UsageError(
                f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, e in self._entries.items():
            src = np.asarray(named[name])
            dst = e.tensor.data if e.trainable else e.array
            if src.shape != dst.shape:
                raise UsageError(
                    f"checkpoint {name!r}: shape {src.shape} != expected {dst.shape}"
                )
            dst[...] = src.astype(dst.dtype)

    # -- optimization --------------------------------------------------------

    def zero_grads(self):
        for t in self.trainable_tensors():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0.0

    def sgd_step(self, lr, momentum=0.9, weight_decay=1e-4):
        """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
        for e in self._entries.values():
            if not e.trainable:
                continue
            t = e.tensor
            if t.grad is None:
                raise UsageError(f"sgd_step before backward: {e.name!r} has no gradient")
            if e.velocity is None:
                e.velocity = np.zeros_like(t.data)
            e.velocity *= momentum
            e.velocity += t.grad + weight_decay * t.data
            t.data -= lr * e.velocity
