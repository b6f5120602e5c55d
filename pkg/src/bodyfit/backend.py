"""Kernel backend selection: compiled extension if built, numpy otherwise.

Set ``BODYFIT_PURE_PYTHON=1`` to force the numpy fallback.  The wrappers
here normalize dtype/contiguity and flatten leading batch dims so both
implementations only ever see the canonical shapes documented in
:mod:`bodyfit._kernels_np`.
"""

import os

import numpy as np

from . import _kernels_np

if os.environ.get("BODYFIT_PURE_PYTHON"):
    _impl = _kernels_np
    IMPLEMENTATION = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        IMPLEMENTATION = "cython"
    except ImportError:
        _impl = _kernels_np
        IMPLEMENTATION = "numpy"


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _ci64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def compose_tree(local, parents):
    # local: (m,d,d) or (b,m,d,d)
    squeeze = local.ndim == 3
    if squeeze:
        local = local[None]
    out = _impl.compose_tree(_c64(local), _ci64(parents))
    return np.asarray(out)[0] if squeeze else np.asarray(out)


def compose_tree_vjp(local, world, parents, grad_world):
    squeeze = local.ndim == 3
    if squeeze:
        local, world, grad_world = local[None], world[None], grad_world[None]
    out = _impl.compose_tree_vjp(_c64(local), _c64(world), _ci64(parents), _c64(grad_world))
    return np.asarray(out)[0] if squeeze else np.asarray(out)


def transform_points(transforms, points):
    # transforms: (..., k, 4, 4), points: (..., k, 3)
    lead = points.shape[:-1]
    t = _c64(transforms).reshape(-1, 4, 4)
    p = _c64(points).reshape(-1, 3)
    return np.asarray(_impl.transform_points(t, p)).reshape(*lead, 3)


def transform_points_vjp(transforms, points, grad_out):
    tshape, pshape = transforms.shape, points.shape
    t = _c64(transforms).reshape(-1, 4, 4)
    p = _c64(points).reshape(-1, 3)
    g = _c64(grad_out).reshape(-1, 3)
    gt, gp = _impl.transform_points_vjp(t, p, g)
    return np.asarray(gt).reshape(tshape), np.asarray(gp).reshape(pshape)


def quat_to_rotmat(q):
    lead = q.shape[:-1]
    out = _impl.quat_to_rotmat(_c64(q).reshape(-1, 4))
    return np.asarray(out).reshape(*lead, 3, 3)


def quat_to_rotmat_vjp(q, grad_out):
    lead = q.shape[:-1]
    out = _impl.quat_to_rotmat_vjp(
        _c64(q).reshape(-1, 4), _c64(grad_out).reshape(-1, 3, 3)
    )
    return np.asarray(out).reshape(*lead, 4)


def nearest_patch_vertex(landmarks, vertices, patch_flat, patch_offsets):
    squeeze = landmarks.ndim == 2
    if squeeze:
        landmarks, vertices = landmarks[None], vertices[None]
    out = _impl.nearest_patch_vertex(
        _c64(landmarks), _c64(vertices), _ci64(patch_flat), _ci64(patch_offsets)
    )
    return np.asarray(out)[0] if squeeze else np.asarray(out)
