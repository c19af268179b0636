"""Central finite-difference gradient checks for the autodiff engine."""

from typing import Callable, List, Sequence, Tuple

import numpy as np

from tensor.tensor import Tensor, precision


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + eps
        plus = f()
        x[idx] = original - eps
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
        it.iternext()
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rtol: float = 1e-4,
              atol: float = 1e-7, eps: float = 1e-6, seed: int = 0) -> Tuple[bool, float]:
    """Compare analytic and numerical gradients of ``fn`` in 64-bit precision.

    Non-scalar outputs are reduced with a fixed random projection so the full
    Jacobian is exercised.

    Returns:
        (passed, worst relative error)
    """
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        rng = np.random.default_rng(seed)
        projection: List[np.ndarray] = []

        def scalar(*tensors: Tensor) -> Tensor:
            out = fn(*tensors)
            if out.size == 1:
                return out.sum()
            if not projection:
                projection.append(rng.standard_normal(out.shape))
            return (out * projection[0]).sum()

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        scalar(*tensors).backward()

        worst = 0.0
        passed = True
        for t, a in zip(tensors, arrays):
            def f() -> float:
                return scalar(*[Tensor(b) for b in arrays]).item()

            numeric = numerical_gradient(f, a, eps)
            analytic = t.grad if t.grad is not None else np.zeros_like(a)
            diff = np.abs(analytic - numeric)
            scale = np.maximum(np.abs(analytic), np.abs(numeric))
            ok = diff <= atol + rtol * scale
            rel = diff / np.maximum(scale, atol)
            worst = max(worst, float(rel.max()) if rel.size else 0.0)
            passed = passed and bool(ok.all())
        return passed, worst
