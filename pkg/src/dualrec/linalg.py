"""Dense numerical kernels shared by the factor and neural models.

Everything operates on plain float64 numpy arrays: truncated SVD, a
numerically stable sigmoid, ReLU, a minimal Adam optimizer over named
parameter dicts, and a central-difference gradient estimator used to
cross-check analytic gradients.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TrainingDivergedError",
    "as_matrix",
    "truncated_svd",
    "sigmoid",
    "sigmoid_grad",
    "relu",
    "AdamState",
    "adam_step",
    "finite_diff_grad",
]

# Nearest representable neighbours of 0 and 1; sigmoid output is clamped
# into this open interval so saturation never produces an exact 0 or 1.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-D float64 array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def truncated_svd(a, rank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-`rank` singular triplet of a dense matrix.

    Returns (u, s, vt) with u of shape (n, rank), s non-negative and
    non-increasing, vt of shape (rank, m). Uses the full LAPACK SVD,
    which is exact and plenty fast at the scales this library targets.
    """
    a = as_matrix(a)
    if not 1 <= rank <= min(a.shape):
        raise ValueError(f"rank must be in [1, {min(a.shape)}], got {rank}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"SVD did not converge on a {a.shape[0]}x{a.shape[1]} matrix "
            f"(LAPACK hit its internal iteration limit)"
        ) from exc
    return u[:, :rank], s[:rank], vt[:rank, :]


def sigmoid(x):
    """Logistic function 1 / (1 + e^-x), stable for large |x|.

    Output is clamped to the open interval (0, 1) at float64 resolution,
    so even saturated inputs never return exactly 0 or 1.
    """
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        pos = 1.0 / (1.0 + np.exp(-arr))
        ex = np.exp(arr)
        neg = ex / (1.0 + ex)
    out = np.clip(np.where(arr >= 0, pos, neg), _SIG_LO, _SIG_HI)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad(s):
    """Derivative of the sigmoid expressed in terms of its output s."""
    return s * (1.0 - s)


def relu(x):
    """max(x, 0); the subgradient used elsewhere is 0 at x = 0."""
    return np.maximum(x, 0.0)


@dataclass
class AdamState:
    """Adam moment accumulators plus hyperparameters and step count."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update over a dict of named float64 arrays, in place.

    Only names present in `grads` are updated, which lets callers freeze
    parameter groups by omitting them. The step count increments once per
    call regardless of which names are present.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if p.shape != np.shape(g):
            raise ValueError(
                f"gradient shape {np.shape(g)} does not match parameter "
                f"{name!r} shape {p.shape}"
            )
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def finite_diff_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Independent of any analytic gradient code on purpose: this is the
    oracle the test suite checks backpropagation against.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xw = x.copy()
    xf = xw.ravel()
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + step
        hi = f(xw)
        xf[k] = orig - step
        lo = f(xw)
        xf[k] = orig
        flat[k] = (hi - lo) / (2.0 * step)
    return grad
