"""Pair-integration compute backends.

The hot double-surface quadrature loops exist twice: a Cython/OpenMP
extension (``_core``) and a vectorized numpy fallback (``_corepy``).  The
extension is preferred when it imported successfully; both consume the same
task plans and Gauss tables, so they agree to rounding.
"""

import os

from . import _corepy

try:  # pragma: no cover - exercised implicitly
    from . import _core  # type: ignore
    HAVE_EXT = True
except ImportError:  # pragma: no cover
    _core = None
    HAVE_EXT = False

_FORCED = os.environ.get("FRACSIM_BACKEND", "").strip().lower()


def active_backend(name=None):
    """Resolve a backend name ('ext' or 'numpy'); None picks the best."""
    name = name or _FORCED or ("ext" if HAVE_EXT else "numpy")
    if name == "ext" and not HAVE_EXT:
        name = "numpy"
    return name


def execute_plan(plan, arrays, field, kernel, nthreads=1, backend=None):
    """Run a task plan and return one dense block per pair slot."""
    name = active_backend(backend)
    if name == "ext":
        return _core.execute_plan(plan, arrays, field, kernel, nthreads)
    return _corepy.execute_plan(plan, arrays, field, kernel, nthreads)
