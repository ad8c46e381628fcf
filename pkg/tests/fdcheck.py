"""Central finite differences used as the gradient oracle throughout the tests."""
import numpy as np

from invcast.diffengine import Tape


def numeric_grad(fn, x, h=1e-4):
    """d fn / d x by central differences; ``fn`` maps a float array to a float."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = float(fn(x))
        x[idx] = orig - h
        down = float(fn(x))
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def analytic_grad(fn, x):
    """Gradient of ``fn`` at ``x`` through the tape; ``fn`` takes and returns DiffValues."""
    tape = Tape()
    leaf = tape.leaf(x)
    out = fn(leaf)
    tape.backward(out)
    return leaf.grad


def rel_error(a, b):
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
