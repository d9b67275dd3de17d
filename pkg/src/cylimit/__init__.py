"""Limiting Calabi-Yau potentials of hypersurface degenerations via optimal transport."""
import os

# POT probes every installed array backend at import; none are needed here.
for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

from cylimit.geometry import (  # noqa: E402
    DualGrid,
    DualPoint,
    ProblemConfig,
    SimplexPoint,
    barycentric_grid,
    canonicalize,
    dual_grid,
    dual_vertex,
    weight_W,
)

__all__ = [
    "DualGrid",
    "DualPoint",
    "ProblemConfig",
    "SimplexPoint",
    "barycentric_grid",
    "canonicalize",
    "dual_grid",
    "dual_vertex",
    "weight_W",
]
__version__ = "0.1.0"
