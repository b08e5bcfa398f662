"""Named parameter registry with deterministic per-name initialization.

Each parameter draws from its own SeedSequence keyed by (master seed,
crc32(name)), so a layer's init depends only on the master seed and its own
name.  Model variants that share layer names therefore share bit-identical
weights, regardless of which other layers exist or in what order they were
registered.
"""

import zlib

import numpy as np

from ..errors import CheckpointMismatchError, ConfigError
from .tensor import Tensor


class Parameter:
    """A named trainable tensor plus its optimizer slot."""

    def __init__(self, name, tensor):
        self.name = name
        self.tensor = tensor
        self.velocity = np.zeros_like(tensor.data)

    @property
    def data(self):
        return self.tensor.data


class ParamStore:
    """Ordered collection of Parameters, keyed by unique dotted names."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._params = {}

    def _rng(self, name):
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, zlib.crc32(name.encode("utf-8"))]))

    def add(self, name, shape, init="uniform", fan_in=None):
        """Create and register a parameter.

        init "uniform" draws from +-sqrt(1/fan_in) (fan_in defaults to the
        product of all extents past the first); "zeros" and "ones" are for
        offset/mask heads and norm gains.
        """
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape, dtype=np.float64)
        elif init == "ones":
            value = np.ones(shape, dtype=np.float64)
        elif init == "uniform":
            if fan_in is None:
                fan_in = 1
                for s in shape[1:]:
                    fan_in *= s
            if fan_in < 1:
                raise ConfigError(f"parameter {name!r} has fan_in {fan_in}")
            bound = float(np.sqrt(1.0 / fan_in))
            value = self._rng(name).uniform(-bound, bound, size=shape)
        else:
            raise ConfigError(f"unknown init {init!r} for parameter {name!r}")
        p = Parameter(name, Tensor(value, requires_grad=True))
        self._params[name] = p
        return p.tensor

    def get(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def state(self):
        """name -> ndarray snapshot (copies, safe to serialize)."""
        return {p.name: p.data.copy() for p in self}

    def load_state(self, state):
        """Overwrite parameter values in place from a name -> array mapping."""
        for p in self:
            if p.name not in state:
                raise CheckpointMismatchError(f"missing parameter {p.name!r}")
            arr = np.asarray(state[p.name])
            if arr.shape != p.data.shape:
                raise CheckpointMismatchError(
                    f"parameter {p.name!r} has shape {p.data.shape}, checkpoint has {arr.shape}")
            p.tensor.data = arr.astype(p.data.dtype, copy=True)
        extra = set(state) - set(self._params)
        if extra:
            raise CheckpointMismatchError(
                f"checkpoint contains unknown parameter {sorted(extra)[0]!r}")
