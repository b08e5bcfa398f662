"""Finite-difference verification of analytic gradients.

All checks run in float64 regardless of the ambient dtype: central
differences at eps=1e-5 lose roughly half the significand, which float32
cannot absorb on top of its own forward rounding.
"""

import numpy as np

from .tensor import Tensor, backward, precision


def grad_check(f, inputs, eps=1e-5, sample=None, seed=0):
    """Compare backward() against central differences for a scalar-valued f.

    f takes len(inputs) Tensors and returns a scalar Tensor.  Returns the
    worst relative error over all probed coordinates.  `sample`, if given,
    caps the probed coordinates per input (chosen by a seeded RNG); by
    default every coordinate is probed.
    """
    with precision("float64"):
        tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
                   for x in inputs]
        out = f(*tensors)
        gmap = backward(out)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for t in tensors:
            analytic = gmap[t.node_id].data
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if sample is not None and flat.size > sample:
                coords = rng.choice(flat.size, size=sample, replace=False)
            for i in coords:
                keep = flat[i]
                flat[i] = keep + eps
                hi = f(*tensors).data.item()
                flat[i] = keep - eps
                lo = f(*tensors).data.item()
                flat[i] = keep
                numeric = (hi - lo) / (2.0 * eps)
                a = analytic.reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst = rel
        return float(worst)
