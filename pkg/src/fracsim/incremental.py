"""Incremental stiffness assembly: cache, update plan, flag lifecycle.

Fracture growth only touches elements near the front, so stiffness
contributions between pairs of geometrically stationary elements are saved in
a persistent cache and copied instead of re-integrated.  Element update flags
drive the lifecycle: 1 (updated) while geometry changes, 2 (newly stationary)
for one assembly after it stops, 0 (stationary) once the element's pair
contributions have been folded into the cache.

Parallel contract (shared by both dense assemblies): pair integration is
distributed dynamically over pairs, every pair's quadrature is executed by a
single worker, and the scatter into the packed matrix runs in fixed pair
order.  Results are therefore identical for any thread count.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CacheInvalidError
from .mesh import NEWLY_STATIONARY, STATIONARY, UPDATED
from .packed import PackedSymmetricMatrix

logger = logging.getLogger(__name__)


@dataclass
class UpdatePlan:
    stationary_count: int
    updated_ids: list
    pair_count_to_integrate: int


def plan_update(mesh):
    """Enumerate the pairs a warm assembly will integrate.

    With M flagged (non-stationary) elements out of N, the count is
    M*N - M*(M-1)/2: all unordered pairs, self-pairs included, with at least
    one flagged member.
    """
    flags = [mesh.elements[eid].update_flag for eid in mesh.permutation]
    n = len(flags)
    updated = [eid for eid, f in zip(mesh.permutation, flags) if f != STATIONARY]
    m = len(updated)
    return UpdatePlan(
        stationary_count=n - m,
        updated_ids=updated,
        pair_count_to_integrate=m * n - (m * (m - 1)) // 2,
    )


class StiffnessCache:
    """Saved stationary-stationary interactions of one dense operator."""

    def __init__(self):
        self.matrix = None            # PackedSymmetricMatrix over cached dofs
        self.node_order = None        # node ids backing the cached dof order
        self.fingerprint = set()      # stationary element ids covered
        self.epoch = 0
        self._staged = None
        self._staged_node_order = None

    def invalidate(self):
        self.matrix = None
        self.node_order = None
        self.fingerprint = set()
        self._staged = None
        self._staged_node_order = None

    def _dof_positions(self, arrays):
        """Old dof index -> new dof index (or -1) under the current mesh."""
        pos = np.full(3 * len(self.node_order), -1, dtype=np.int64)
        for k, nid in enumerate(self.node_order):
            p = arrays.node_index.get(int(nid), -1)
            if p >= 0:
                pos[3 * k: 3 * k + 3] = np.arange(3 * p, 3 * p + 3)
        return pos

    def remap_to(self, arrays, ndof):
        """Cached matrix re-embedded in the current dof ordering."""
        if self.matrix is None:
            raise CacheInvalidError("no cached matrix")
        return self.matrix.remap(self._dof_positions(arrays), ndof)

    def begin_stage(self, arrays, ndof, cold):
        """Start accumulating the next cache matrix during an assembly."""
        if cold or self.matrix is None:
            base = PackedSymmetricMatrix(ndof)
        else:
            base = self.remap_to(arrays, ndof)
        self._staged = base
        self._staged_node_order = arrays.node_order.copy()
        return base


def commit_cache(cache, mesh):
    """Fold staged contributions, demote flags 2 -> 0, refresh fingerprint.

    Must be called after assemble_A on the same (unmutated) mesh; a mesh
    version mismatch at the next warm assembly drops the cache and rebuilds
    cold rather than using stale interactions.
    """
    if cache._staged is None:
        raise CacheInvalidError("commit without a staged assembly")
    cache.matrix = cache._staged
    cache.node_order = cache._staged_node_order
    cache._staged = None
    cache._staged_node_order = None
    for e in mesh.elements.values():
        if e.update_flag == NEWLY_STATIONARY:
            e.update_flag = STATIONARY
    cache.fingerprint = {eid for eid, e in mesh.elements.items()
                         if e.update_flag == STATIONARY}
    cache.epoch += 1
    return cache


def advance_flags(mesh):
    """Step the flag lifecycle at the start of a step: 1 -> 2 for elements
    whose geometry did not change (remeshing re-marks moved ones as 1)."""
    for e in mesh.elements.values():
        if e.update_flag == UPDATED:
            e.update_flag = NEWLY_STATIONARY
