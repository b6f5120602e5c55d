"""Pure-numpy reference implementation of the hot kernels.

Same call signatures as the compiled module ``bodyfit._kernels``.  All
functions take C-contiguous float64 arrays with leading dims already
flattened by :mod:`bodyfit.backend`:

* ``compose_tree``:    locals ``(b, m, d, d)``, parents ``(m,)`` int64
* ``transform_points``: transforms ``(n, 4, 4)``, points ``(n, 3)``
* ``nearest_patch_vertex``: landmarks ``(b, l, 3)``, vertices ``(b, p, 3)``,
  patch index CSR (flat indices + per-landmark offsets)
"""

import numpy as np


def compose_tree(local, parents):
    """World transforms down a rooted tree: W[i] = W[parents[i]] @ L[i].

    parents[0] == -1 (root); parents[i] < i otherwise.
    """
    world = np.empty_like(local)
    world[:, 0] = local[:, 0]
    for i in range(1, local.shape[1]):
        np.matmul(world[:, parents[i]], local[:, i], out=world[:, i])
    return world


def compose_tree_vjp(local, world, parents, grad_world):
    """Gradient of compose_tree w.r.t. the local transforms."""
    g_world = grad_world.copy()
    g_local = np.zeros_like(local)
    for i in range(local.shape[1] - 1, 0, -1):
        p = parents[i]
        wp = world[:, p]
        g_local[:, i] = np.matmul(wp.transpose(0, 2, 1), g_world[:, i])
        g_world[:, p] += np.matmul(g_world[:, i], local[:, i].transpose(0, 2, 1))
    g_local[:, 0] = g_world[:, 0]
    return g_local


def transform_points(transforms, points):
    """Apply homogeneous 4x4 transforms to 3-points, one transform per point."""
    rot = transforms[:, :3, :3]
    t = transforms[:, :3, 3]
    return np.einsum("nij,nj->ni", rot, points) + t


def transform_points_vjp(transforms, points, grad_out):
    """Gradients of transform_points w.r.t. transforms and points."""
    rot = transforms[:, :3, :3]
    g_points = np.einsum("nji,nj->ni", rot, grad_out)
    g_t = np.zeros_like(transforms)
    g_t[:, :3, :3] = np.einsum("ni,nj->nij", grad_out, points)
    g_t[:, :3, 3] = grad_out
    return g_t, g_points


def quat_to_rotmat(q):
    """Unit quaternions (n,4) wxyz -> rotation matrices (n,3,3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_rotmat_vjp(q, grad_out):
    """Gradient of quat_to_rotmat w.r.t. the (unit) quaternion input."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_out
    gq = np.empty_like(q)
    gq[:, 0] = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    gq[:, 1] = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gq[:, 2] = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gq[:, 3] = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return gq


def nearest_patch_vertex(landmarks, vertices, patch_flat, patch_offsets):
    """Index of the nearest patch vertex (full 3D distance) per landmark.

    Returns int64 (b, l).  Ties resolve to the lowest flat position, i.e.
    the smallest vertex index when the CSR lists are sorted.
    """
    b, l, _ = landmarks.shape
    out = np.empty((b, l), dtype=np.int64)
    for i in range(l):
        idx = patch_flat[patch_offsets[i]:patch_offsets[i + 1]]
        cand = vertices[:, idx, :]
        d2 = ((cand - landmarks[:, i:i + 1, :]) ** 2).sum(axis=2)
        out[:, i] = idx[np.argmin(d2, axis=1)]
    return out
