import numpy as np
import pytest

from lorf.synthscene import generate_dataset


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f w.r.t. flat array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-7):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return np.abs(a - b).max() / denom


@pytest.fixture(scope="session")
def room_pair():
    """Two adjacent oracle frames of a textured room orbit, 48x48."""
    ds = generate_dataset("room", "orbit", n_frames=8, width=48, height=48,
                          seed=3, res=96)
    return ds


@pytest.fixture(scope="session")
def corridor_ds():
    ds = generate_dataset("corridor", "corridor", n_frames=16, width=64,
                          height=64, seed=7, res=128, length=6.0)
    return ds
