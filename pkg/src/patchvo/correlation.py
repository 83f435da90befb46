"""Per-edge correlation features: patch cells dotted against lookup
neighbourhoods of a target matching-feature map.

For each of the 9 patch cells and each of the (2r+1)^2 integer offsets
around the (real-valued) lookup center, the feature is the channel dot
product between the patch cell vector and the bilinearly sampled map
vector, divided by sqrt(mf_channels). With the pyramid level enabled the
same lookup repeats on the 1/16 map with coordinates scaled by 1/4,
doubling the feature length (882 with the default radius; 441 without the
pyramid).

Layout: level-major, then patch cell row-major, then offset row-major.
Out-of-bounds samples contribute zero.
"""

import numpy as np

from .geometry import SE3

DEGENERATE_Z = 1e-8


def reproject(center, inv_depth, pose_i, pose_j, intrinsics):
    """Map a patch center from frame i into frame j.

    ``center`` is (u, v) in the feature grid of frame i; ``intrinsics`` must
    already be scaled to that grid. Poses map world to camera. Returns
    ``(uv_j, degenerate)``; a point at or behind the target camera plane is
    flagged degenerate and its coordinates are unusable.
    """
    rel = pose_j.compose(pose_i.inverse())
    x_i = np.array([
        (center[0] - intrinsics.cx) / intrinsics.fx,
        (center[1] - intrinsics.cy) / intrinsics.fy,
        1.0,
    ]) / inv_depth
    x_j = rel.apply(x_i)
    if x_j[2] <= DEGENERATE_Z:
        return np.zeros(2), True
    u = intrinsics.fx * x_j[0] / x_j[2] + intrinsics.cx
    v = intrinsics.fy * x_j[1] / x_j[2] + intrinsics.cy
    return np.array([u, v]), False


def reproject_many(centers, inv_depths, pose_i_idx, pose_j_idx, poses, intrinsics):
    """Vectorized reprojection for edge batches.

    ``poses`` maps frame id -> SE3 (world to camera). Returns ``(uv, degenerate)``
    with shapes (E, 2) and (E,).
    """
    e = len(centers)
    uv = np.zeros((e, 2))
    degenerate = np.zeros(e, dtype=bool)
    # group by (i, j) so each relative transform is computed once
    key = np.stack([pose_i_idx, pose_j_idx], axis=1)
    order = np.lexsort((pose_j_idx, pose_i_idx))
    sorted_key = key[order]
    starts = np.flatnonzero(
        np.concatenate([[True], np.any(sorted_key[1:] != sorted_key[:-1], axis=1)])
    )
    bounds = np.append(starts, e)
    for s, t in zip(bounds[:-1], bounds[1:]):
        rows = order[s:t]
        fi, fj = key[rows[0]]
        rel = poses[fj].compose(poses[fi].inverse())
        R, trans = rel.matrix(), rel.t
        c = centers[rows]
        n = np.stack([
            (c[:, 0] - intrinsics.cx) / intrinsics.fx,
            (c[:, 1] - intrinsics.cy) / intrinsics.fy,
            np.ones(len(rows)),
        ], axis=1)
        x_i = n / inv_depths[rows, None]
        x_j = x_i @ R.T + trans
        bad = x_j[:, 2] <= DEGENERATE_Z
        z = np.where(bad, 1.0, x_j[:, 2])
        uv[rows, 0] = intrinsics.fx * x_j[:, 0] / z + intrinsics.cx
        uv[rows, 1] = intrinsics.fy * x_j[:, 1] / z + intrinsics.cy
        degenerate[rows] = bad
    uv[degenerate] = 0.0
    return uv, degenerate


def bilinear_sample(fmap, uv):
    """Sample (H, W, C) at real-valued (u, v) positions, zero outside.

    ``uv`` has shape (..., 2); returns (..., C).
    """
    h, w, c = fmap.shape
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0

    out = np.zeros(uv.shape[:-1] + (c,), dtype=fmap.dtype)
    for dv in (0, 1):
        for du in (0, 1):
            uu = u0 + du
            vv = v0 + dv
            weight = (fu if du else 1 - fu) * (fv if dv else 1 - fv)
            valid = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            if np.any(valid):
                contrib = np.zeros_like(out)
                contrib[valid] = fmap[vv[valid], uu[valid]]
                out += weight[..., None] * contrib
    return out


def _level_correlate(patch_feats, fmap, centers, radius, counter):
    """Correlation of (E, 3, 3, C) patches against one map level.

    ``centers`` are the per-edge lookup coordinates on this level's grid.
    Returns (E, 9 * (2r+1)^2) laid out cell-major, offsets row-major.
    """
    e, _, _, c = patch_feats.shape
    side = 2 * radius + 1
    h, w, _ = fmap.shape

    # pad with a zero ring wider than a full lookup window so any clamped
    # out-of-range window lands entirely inside zeros (exact zero output)
    pad = 2 * radius + 4
    padded = np.pad(fmap, ((pad, pad), (pad, pad), (0, 0)))
    ph, pw = padded.shape[:2]

    u0 = np.floor(centers[:, 0]).astype(np.int64)
    v0 = np.floor(centers[:, 1]).astype(np.int64)
    fu = (centers[:, 0] - u0).astype(fmap.dtype)
    fv = (centers[:, 1] - v0).astype(fmap.dtype)

    # gather one (win+1, win+1) integer window per edge around floor(center);
    # window spans cell offsets [-1-r, 1+r] plus the bilinear neighbour
    reach = radius + 1
    win = 2 * reach + 1
    # clamping only triggers for centers so far out that the clamped window
    # sits wholly inside the zero ring, so misalignment cannot leak data
    base_u = np.clip(u0 + pad - reach, 0, pw - win - 1)
    base_v = np.clip(v0 + pad - reach, 0, ph - win - 1)
    off_v = np.arange(win + 1)
    off_u = np.arange(win + 1)
    rows = base_v[:, None] + off_v[None, :]
    cols = base_u[:, None] + off_u[None, :]
    flat = padded.reshape(ph * pw, c)
    idx = rows[:, :, None] * pw + cols[:, None, :]
    gathered = flat[idx.reshape(e, -1)].reshape(e, win + 1, win + 1, c)

    w00 = ((1 - fu) * (1 - fv))[:, None, None, None]
    w01 = (fu * (1 - fv))[:, None, None, None]
    w10 = ((1 - fu) * fv)[:, None, None, None]
    w11 = (fu * fv)[:, None, None, None]
    window = (w00 * gathered[:, :-1, :-1] + w01 * gathered[:, :-1, 1:]
              + w10 * gathered[:, 1:, :-1] + w11 * gathered[:, 1:, 1:])
    # window[:, y, x] == bilinear(fmap, center + (x - reach, y - reach))

    if counter is not None:
        counter.add(e * 9 * side * side * c)
    out = np.empty((e, 9, side * side), dtype=fmap.dtype)
    scale = np.array(1.0 / np.sqrt(c), dtype=fmap.dtype)
    cell = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            y0 = reach + dy - radius
            x0 = reach + dx - radius
            sub = window[:, y0:y0 + side, x0:x0 + side, :]
            vals = np.einsum("eyxc,ec->eyx", sub, patch_feats[:, dy + 1, dx + 1, :])
            out[:, cell] = vals.reshape(e, -1) * scale
            cell += 1
    return out.reshape(e, -1)


def correlate_batch(patch_feats, fs, centers, config, counter=None):
    """Correlation features for a batch of edges against one target frame.

    ``patch_feats``: (E, 3, 3, mf_channels); ``centers``: (E, 2) lookup
    coordinates on the /4 grid. Returns (E, corr_length).
    """
    levels = [_level_correlate(patch_feats, fs.mf, centers, config.corr_radius, counter)]
    if config.use_pyramid:
        levels.append(_level_correlate(patch_feats, fs.pyr, centers / 4.0,
                                       config.corr_radius, counter))
    return np.concatenate(levels, axis=1)


def correlate(patch, target_fs, center, config, counter=None):
    """Single-edge convenience wrapper around :func:`correlate_batch`."""
    feats = np.asarray(patch.feature)[None]
    centers = np.asarray(center, dtype=np.float64)[None]
    return correlate_batch(feats, target_fs, centers, config, counter)[0]


def corr_macs_per_edge(config):
    """Analytic dot-product MAC count of one edge's correlation feature."""
    side = 2 * config.corr_radius + 1
    return config.corr_levels * side * side * 9 * config.mf_channels
