"""Differentiable Gaussian splatting renderer.

Two implementations of the same compositing math:

* `rasterize` — tiled numba kernels (forward + hand-derived backward),
  float64 internally, registered on the tape as one custom op. Single
  threaded and deterministic: same inputs give bit-identical images and
  gradients.
* `composite_brute_force` — the same math composed from tape primitives
  over all pixel/splat pairs, upcast to float64. Slow, memory-hungry, used
  as the correctness oracle for the kernels (values and gradients).

Both apply identical support rules so they agree to float precision:
a splat touches a pixel only if the Mahalanobis form q <= 9 and the
effective alpha (capped at 0.99) is >= 1/255.
"""

import math
from dataclasses import dataclass

import numba
import numpy as np

from .gaussians import GaussianSet  # noqa: F401  (re-export for callers)
from .numerics import Tensor, ops
from .numerics.tensor import record

Q_MAX = 9.0
ALPHA_MIN = 1.0 / 255.0
ALPHA_CAP = 0.99
COV2D_FLOOR = 0.3  # added to both diagonal entries of every 2-d covariance

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


# ------------------------------------------------------------- SH evaluation

def evaluate_sh(sh, dirs, degree=3):
    """Spherical-harmonics colors for unit view directions.

    sh: (K,48) = 3 DC values then 45 higher-order coefficients stored
    channel-major (15 per channel, degree-ascending). Returns (K,3)
    colors offset by +0.5 and clamped to be non-negative.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree must be 0..3, got {degree}")
    k = sh.shape[0]
    dc = ops.getitem(sh, (slice(None), slice(0, 3)))
    color = ops.add(ops.mul(dc, SH_C0), 0.5)
    if degree > 0:
        x = ops.getitem(dirs, (slice(None), slice(0, 1)))
        y = ops.getitem(dirs, (slice(None), slice(1, 2)))
        z = ops.getitem(dirs, (slice(None), slice(2, 3)))
        xx, yy, zz = ops.mul(x, x), ops.mul(y, y), ops.mul(z, z)
        xy, yz, xz = ops.mul(x, y), ops.mul(y, z), ops.mul(x, z)
        basis = [ops.mul(y, -SH_C1), ops.mul(z, SH_C1), ops.mul(x, -SH_C1)]
        if degree > 1:
            basis += [
                ops.mul(xy, SH_C2[0]),
                ops.mul(yz, SH_C2[1]),
                ops.mul(ops.sub(ops.mul(zz, 2.0), ops.add(xx, yy)), SH_C2[2]),
                ops.mul(xz, SH_C2[3]),
                ops.mul(ops.sub(xx, yy), SH_C2[4]),
            ]
        if degree > 2:
            basis += [
                ops.mul(ops.mul(y, ops.sub(ops.mul(xx, 3.0), yy)), SH_C3[0]),
                ops.mul(ops.mul(xy, z), SH_C3[1]),
                ops.mul(ops.mul(y, ops.sub(ops.mul(zz, 4.0), ops.add(xx, yy))), SH_C3[2]),
                ops.mul(ops.mul(z, ops.sub(ops.mul(zz, 2.0),
                                           ops.mul(ops.add(xx, yy), 3.0))), SH_C3[3]),
                ops.mul(ops.mul(x, ops.sub(ops.mul(zz, 4.0), ops.add(xx, yy))), SH_C3[4]),
                ops.mul(ops.mul(z, ops.sub(xx, yy)), SH_C3[5]),
                ops.mul(ops.mul(x, ops.sub(xx, ops.mul(yy, 3.0))), SH_C3[6]),
            ]
        nb = len(basis)
        bmat = ops.reshape(ops.concat(basis, axis=1), (k, 1, nb))
        rest = ops.reshape(ops.getitem(sh, (slice(None), slice(3, 48))), (k, 3, 15))
        rest = ops.getitem(rest, (slice(None), slice(None), slice(0, nb)))
        color = ops.add(color, ops.tsum(ops.mul(bmat, rest), axis=2))
    return ops.relu(color)


def quat_to_rotmat(q):
    """Unit quaternions (M,4) wxyz -> rotation matrices (M,3,3)."""
    m = q.shape[0]
    w = ops.getitem(q, (slice(None), slice(0, 1)))
    x = ops.getitem(q, (slice(None), slice(1, 2)))
    y = ops.getitem(q, (slice(None), slice(2, 3)))
    z = ops.getitem(q, (slice(None), slice(3, 4)))
    xx, yy, zz = ops.mul(x, x), ops.mul(y, y), ops.mul(z, z)
    xy, xz, yz = ops.mul(x, y), ops.mul(x, z), ops.mul(y, z)
    wx, wy, wz = ops.mul(w, x), ops.mul(w, y), ops.mul(w, z)
    one = Tensor(np.ones((m, 1), dtype=q.dtype))
    cols = [
        ops.sub(one, ops.mul(ops.add(yy, zz), 2.0)),
        ops.mul(ops.sub(xy, wz), 2.0),
        ops.mul(ops.add(xz, wy), 2.0),
        ops.mul(ops.add(xy, wz), 2.0),
        ops.sub(one, ops.mul(ops.add(xx, zz), 2.0)),
        ops.mul(ops.sub(yz, wx), 2.0),
        ops.mul(ops.sub(xz, wy), 2.0),
        ops.mul(ops.add(yz, wx), 2.0),
        ops.sub(one, ops.mul(ops.add(xx, yy), 2.0)),
    ]
    return ops.reshape(ops.concat(cols, axis=1), (m, 3, 3))


# ---------------------------------------------------------------- projection

@dataclass
class Splat2D:
    """Camera-space splats ready for rasterization."""

    mean2d: Tensor  # (M,2) pixel coordinates
    cov2d: Tensor  # (M,3) packed symmetric [a, b, c] with the +0.3 floor
    color: Tensor  # (M,3) view-dependent RGB
    alpha_base: Tensor  # (M,) opacity before the gaussian falloff
    view_depth: np.ndarray  # (M,) float64 camera z, compositing key
    indices: np.ndarray  # (M,) rows into the source GaussianSet

    def __len__(self):
        return self.view_depth.shape[0]


def project_gaussians(g, pose, intr, near=0.01, sh_degree=3):
    """EWA projection of world Gaussians into one pinhole camera.

    Culls Gaussians at camera depth <= near. The 2-d covariance gets a
    +0.3 pixel floor on its diagonal (anti-aliasing clamp), matching what
    the compositing kernels expect.
    """
    dt = g.position.dtype.type
    rot = Tensor(pose.rotation.astype(dt))
    rot_t = Tensor(pose.rotation.T.astype(dt))
    campos = Tensor(pose.position.astype(dt).reshape(1, 3))

    p_rel = ops.sub(g.position, campos)
    p_cam = ops.matmul(p_rel, rot)  # row vectors: (R^T (p - c))^T
    z_all = ops.getitem(p_cam, (slice(None), 2))
    keep = np.flatnonzero(z_all.data > near).astype(np.int64)

    pc = ops.gather(p_cam, keep)
    x = ops.getitem(pc, (slice(None), slice(0, 1)))
    y = ops.getitem(pc, (slice(None), slice(1, 2)))
    z = ops.getitem(pc, (slice(None), slice(2, 3)))
    inv_z = ops.div(1.0, z)
    u = ops.add(ops.mul(ops.mul(x, inv_z), intr.fx), intr.cx)
    v = ops.add(ops.mul(ops.mul(y, inv_z), intr.fy), intr.cy)
    mean2d = ops.concat([u, v], axis=1)

    m = keep.shape[0]
    rmat = quat_to_rotmat(ops.gather(g.rotation, keep))
    svec = ops.reshape(ops.gather(g.scale, keep), (m, 1, 3))
    mmat = ops.mul(rmat, svec)  # columns scaled: R diag(s)
    sigma = ops.matmul(mmat, ops.transpose(mmat, (0, 2, 1)))
    sig_cam = ops.matmul(ops.matmul(rot_t, sigma), rot)

    zero = Tensor(np.zeros((m, 1), dtype=dt))
    inv_z2 = ops.mul(inv_z, inv_z)
    j_rows = [
        ops.mul(inv_z, intr.fx), zero, ops.neg(ops.mul(ops.mul(x, inv_z2), intr.fx)),
        zero, ops.mul(inv_z, intr.fy), ops.neg(ops.mul(ops.mul(y, inv_z2), intr.fy)),
    ]
    jmat = ops.reshape(ops.concat(j_rows, axis=1), (m, 2, 3))
    cov_full = ops.matmul(ops.matmul(jmat, sig_cam), ops.transpose(jmat, (0, 2, 1)))
    cov_full = ops.add(cov_full, Tensor(COV2D_FLOOR * np.eye(2, dtype=dt)))
    cov2d = ops.concat([
        ops.reshape(ops.getitem(cov_full, (slice(None), 0, 0)), (m, 1)),
        ops.reshape(ops.getitem(cov_full, (slice(None), 0, 1)), (m, 1)),
        ops.reshape(ops.getitem(cov_full, (slice(None), 1, 1)), (m, 1)),
    ], axis=1)

    prel_k = ops.gather(p_rel, keep)
    vnorm = ops.sqrt(ops.tsum(ops.mul(prel_k, prel_k), axis=1, keepdims=True))
    color = evaluate_sh(ops.gather(g.sh, keep), ops.div(prel_k, vnorm), sh_degree)
    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        color=color,
        alpha_base=ops.gather(g.opacity, keep),
        view_depth=z.data.reshape(-1).astype(np.float64),
        indices=keep,
    )


# ------------------------------------------------------------- tiled kernels

def _conic(cov2d):
    a = ops.getitem(cov2d, (slice(None), slice(0, 1)))
    b = ops.getitem(cov2d, (slice(None), slice(1, 2)))
    c = ops.getitem(cov2d, (slice(None), slice(2, 3)))
    # The +COV2D_FLOOR diagonal guarantees det >= COV2D_FLOOR^2 for any PSD
    # input; the clamp only absorbs float cancellation on huge covariances.
    det = ops.clamp(ops.sub(ops.mul(a, c), ops.mul(b, b)),
                    lo=COV2D_FLOOR * COV2D_FLOOR)
    return ops.concat([ops.div(c, det), ops.div(ops.neg(b), det), ops.div(a, det)], axis=1)


def _bounding_boxes(mean, cov, width, height):
    """Integer pixel boxes [x0,x1) x [y0,y1) covering the q<=9 support.

    The ellipse q<=9 fits in |dx| <= 3*sqrt(a), |dy| <= 3*sqrt(c); one
    extra pixel absorbs float rounding (the q test rejects the surplus).
    """
    rx = 3.0 * np.sqrt(np.maximum(cov[:, 0], 0.0))
    ry = 3.0 * np.sqrt(np.maximum(cov[:, 2], 0.0))
    x0 = np.maximum(np.floor(mean[:, 0] - rx - 0.5).astype(np.int64) - 1, 0)
    x1 = np.minimum(np.ceil(mean[:, 0] + rx - 0.5).astype(np.int64) + 2, width)
    y0 = np.maximum(np.floor(mean[:, 1] - ry - 0.5).astype(np.int64) - 1, 0)
    y1 = np.minimum(np.ceil(mean[:, 1] + ry - 0.5).astype(np.int64) + 2, height)
    return np.stack([x0, x1, y0, y1], axis=1).astype(np.int32)


def _bin_tiles(bbox, order, width, height, tile):
    """Depth-ordered splat lists per tile, CSR layout.

    Entries store positions in the depth order, ascending within each
    tile, so every pixel composites strictly back-to-front.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    box = bbox[order].astype(np.int64)
    x0, x1, y0, y1 = box[:, 0], box[:, 1], box[:, 2], box[:, 3]
    valid = (x0 < x1) & (y0 < y1)
    tx0, ty0 = x0 // tile, y0 // tile
    nx = np.where(valid, (x1 - 1) // tile - tx0 + 1, 0)
    ny = np.where(valid, (y1 - 1) // tile - ty0 + 1, 0)
    counts = nx * ny
    ks = np.repeat(np.arange(order.shape[0], dtype=np.int64), counts)
    # entry offset inside each splat's tile rectangle, row-major (ty, tx)
    starts = np.cumsum(counts) - counts
    offs = np.arange(ks.shape[0], dtype=np.int64) - starts[ks]
    w = nx[ks]
    tiles = (ty0[ks] + offs // w) * ntx + (tx0[ks] + offs % w)
    perm = np.argsort(tiles, kind="stable")
    entries = ks[perm]
    counts = np.bincount(tiles, minlength=ntx * nty)
    tile_start = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_start[1:])
    return entries, tile_start, ntx, nty


@numba.njit(cache=True)
def _forward_kernel(mean, conic, color, alpha, order, bbox, entries, tile_start,
                    ntx, tile, width, height, term_eps, out, fin_t, last_k):
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width)
        ty1 = min(ty0 + tile, height)
        for e in range(tile_start[t], tile_start[t + 1]):
            k = entries[e]
            s = order[k]
            mx = mean[s, 0]
            my = mean[s, 1]
            ca = conic[s, 0]
            cb = conic[s, 1]
            cc = conic[s, 2]
            base = alpha[s]
            x0 = max(bbox[s, 0], tx0)
            x1 = min(bbox[s, 1], tx1)
            y0 = max(bbox[s, 2], ty0)
            y1 = min(bbox[s, 3], ty1)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    t_cur = fin_t[py, px]
                    if t_cur < term_eps:
                        continue
                    dx = px + 0.5 - mx
                    dy = py + 0.5 - my
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > Q_MAX:
                        continue
                    if q < 0.0:  # cancellation on near-singular conics
                        q = 0.0
                    a_eff = base * math.exp(-0.5 * q)
                    if a_eff > ALPHA_CAP:
                        a_eff = ALPHA_CAP
                    if a_eff < ALPHA_MIN:
                        continue
                    w = a_eff * t_cur
                    out[py, px, 0] += w * color[s, 0]
                    out[py, px, 1] += w * color[s, 1]
                    out[py, px, 2] += w * color[s, 2]
                    fin_t[py, px] = t_cur * (1.0 - a_eff)
                    last_k[py, px] = k


@numba.njit(cache=True)
def _backward_kernel(mean, conic, color, alpha, order, bbox, entries, tile_start,
                     ntx, tile, width, height, bg, grad, fin_t, last_k,
                     g_mean, g_conic, g_color, g_alpha):
    height_px = fin_t.shape[0]
    width_px = fin_t.shape[1]
    t_run = np.empty((height_px, width_px), np.float64)
    s_acc = np.zeros((height_px, width_px, 4), np.float64)
    for py in range(height_px):
        for px in range(width_px):
            t_run[py, px] = fin_t[py, px]
            s_acc[py, px, 0] = fin_t[py, px] * bg[0]
            s_acc[py, px, 1] = fin_t[py, px] * bg[1]
            s_acc[py, px, 2] = fin_t[py, px] * bg[2]
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        tx1 = min(tx0 + tile, width)
        ty1 = min(ty0 + tile, height)
        for e in range(tile_start[t + 1] - 1, tile_start[t] - 1, -1):
            k = entries[e]
            s = order[k]
            mx = mean[s, 0]
            my = mean[s, 1]
            ca = conic[s, 0]
            cb = conic[s, 1]
            cc = conic[s, 2]
            base = alpha[s]
            x0 = max(bbox[s, 0], tx0)
            x1 = min(bbox[s, 1], tx1)
            y0 = max(bbox[s, 2], ty0)
            y1 = min(bbox[s, 3], ty1)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    if k > last_k[py, px]:
                        continue
                    dx = px + 0.5 - mx
                    dy = py + 0.5 - my
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > Q_MAX:
                        continue
                    floored = q < 0.0  # mirror the forward clamp
                    if floored:
                        q = 0.0
                    falloff = math.exp(-0.5 * q)
                    a_eff = base * falloff
                    capped = a_eff > ALPHA_CAP
                    if capped:
                        a_eff = ALPHA_CAP
                    if a_eff < ALPHA_MIN:
                        continue
                    t_i = t_run[py, px] / (1.0 - a_eff)
                    w = a_eff * t_i
                    inv_rem = 1.0 / (1.0 - a_eff)
                    dl_da = 0.0
                    for ch in range(3):
                        gc = grad[py, px, ch]
                        g_color[s, ch] += gc * w
                        dl_da += gc * (color[s, ch] * t_i - s_acc[py, px, ch] * inv_rem)
                    dl_da += grad[py, px, 3] * (t_i - s_acc[py, px, 3] * inv_rem)
                    if not capped:
                        g_alpha[s] += dl_da * falloff
                        if not floored:
                            dl_dq = dl_da * (-0.5) * a_eff
                            g_mean[s, 0] += dl_dq * (-2.0) * (ca * dx + cb * dy)
                            g_mean[s, 1] += dl_dq * (-2.0) * (cb * dx + cc * dy)
                            g_conic[s, 0] += dl_dq * dx * dx
                            g_conic[s, 1] += dl_dq * 2.0 * dx * dy
                            g_conic[s, 2] += dl_dq * dy * dy
                    for ch in range(3):
                        s_acc[py, px, ch] += color[s, ch] * w
                    s_acc[py, px, 3] += w
                    t_run[py, px] = t_i


def rasterize(splats, width, height, background=None, terminate_eps=1e-4, tile=16):
    """Composite splats back-to-front into an (H,W,4) rgb+alpha image.

    Differentiable w.r.t. mean2d, cov2d, color and alpha_base. Pixels stop
    compositing once transmittance drops below terminate_eps (0 disables,
    for exact comparison against render_reference). Deterministic: repeated
    calls are bit-identical.
    """
    dt = splats.mean2d.dtype
    bg = np.zeros(3) if background is None else np.asarray(background, np.float64)
    conic_t = _conic(ops.cast(splats.cov2d, np.float64))

    mean = splats.mean2d.data.astype(np.float64)
    conic = conic_t.data.astype(np.float64)
    color = splats.color.data.astype(np.float64)
    alpha = splats.alpha_base.data.astype(np.float64)
    order = np.argsort(splats.view_depth, kind="stable").astype(np.int64)
    bbox = _bounding_boxes(mean, splats.cov2d.data.astype(np.float64), width, height)
    entries, tile_start, ntx, _ = _bin_tiles(bbox, order, width, height, tile)

    out = np.zeros((height, width, 3), np.float64)
    fin_t = np.ones((height, width), np.float64)
    last_k = np.full((height, width), -1, np.int32)
    _forward_kernel(mean, conic, color, alpha, order, bbox, entries, tile_start,
                    ntx, tile, width, height, float(terminate_eps), out, fin_t, last_k)
    img = np.concatenate([out + fin_t[:, :, None] * bg, (1.0 - fin_t)[:, :, None]], axis=2)

    def bw(g, needs):
        m = mean.shape[0]
        g_mean = np.zeros((m, 2), np.float64)
        g_conic = np.zeros((m, 3), np.float64)
        g_color = np.zeros((m, 3), np.float64)
        g_alpha = np.zeros(m, np.float64)
        _backward_kernel(mean, conic, color, alpha, order, bbox, entries, tile_start,
                         ntx, tile, width, height, bg, g.astype(np.float64),
                         fin_t, last_k, g_mean, g_conic, g_color, g_alpha)
        return (g_mean.astype(dt), g_conic,  # conic node is always float64
                g_color.astype(dt), g_alpha.astype(dt))

    return record(img.astype(dt), (splats.mean2d, conic_t, splats.color, splats.alpha_base), bw)


# --------------------------------------------------------- brute-force oracle

def composite_brute_force(splats, width, height, background=None):
    """All-pairs float64 compositor built from tape primitives.

    Memory scales with pixels x splats; use small images. No tiling, no
    early termination, otherwise identical support rules to the kernels —
    this defines ground truth for `rasterize`.
    """
    dt = splats.mean2d.dtype
    bg = np.zeros(3) if background is None else np.asarray(background, np.float64)
    m = len(splats)
    if m == 0:
        img = np.broadcast_to(np.append(bg, 0.0), (height, width, 4)).astype(dt)
        return Tensor(img.copy())

    order = np.argsort(splats.view_depth, kind="stable").astype(np.int64)
    mean = ops.gather(ops.cast(splats.mean2d, np.float64), order)
    conic = _conic(ops.gather(ops.cast(splats.cov2d, np.float64), order))
    color = ops.gather(ops.cast(splats.color, np.float64), order)
    base = ops.gather(ops.cast(splats.alpha_base, np.float64), order)

    xs = np.tile(np.arange(width, dtype=np.float64) + 0.5, height).reshape(-1, 1)
    ys = np.repeat(np.arange(height, dtype=np.float64) + 0.5, width).reshape(-1, 1)
    dx = ops.sub(Tensor(xs), ops.reshape(ops.getitem(mean, (slice(None), 0)), (1, m)))
    dy = ops.sub(Tensor(ys), ops.reshape(ops.getitem(mean, (slice(None), 1)), (1, m)))
    ca = ops.reshape(ops.getitem(conic, (slice(None), 0)), (1, m))
    cb = ops.reshape(ops.getitem(conic, (slice(None), 1)), (1, m))
    cc = ops.reshape(ops.getitem(conic, (slice(None), 2)), (1, m))
    q = ops.add(ops.mul(ca, ops.mul(dx, dx)),
                ops.add(ops.mul(ops.mul(cb, 2.0), ops.mul(dx, dy)),
                        ops.mul(cc, ops.mul(dy, dy))))
    q = ops.clamp(q, lo=0.0)  # cancellation floor, mirrors the kernels
    alpha = ops.mul(ops.exp(ops.mul(q, -0.5)), ops.reshape(base, (1, m)))
    alpha = ops.clamp(alpha, hi=ALPHA_CAP)
    dead = (q.data > Q_MAX) | (alpha.data < ALPHA_MIN)
    alpha = ops.masked_fill(alpha, dead, 0.0)

    log_rem = ops.log(ops.sub(1.0, alpha))  # 1 - alpha >= 0.01
    cum = ops.cumsum(log_rem, axis=1)
    t_excl = ops.exp(ops.sub(cum, log_rem))
    weights = ops.mul(alpha, t_excl)
    rgb = ops.matmul(weights, color)
    t_final = ops.exp(ops.getitem(cum, (slice(None), slice(m - 1, m))))
    rgb = ops.add(rgb, ops.mul(t_final, Tensor(bg.reshape(1, 3))))
    acc = ops.sub(1.0, t_final)
    img = ops.reshape(ops.concat([rgb, acc], axis=1), (height, width, 4))
    return ops.cast(img, dt) if np.dtype(dt) != np.float64 else img


def render_brute_force(g, pose, intr, background=None, near=0.01, sh_degree=3):
    """Project + all-pairs composite one view (oracle path)."""
    splats = project_gaussians(g, pose, intr, near=near, sh_degree=sh_degree)
    return composite_brute_force(splats, intr.width, intr.height, background=background)


def render_gaussians(g, pose, intr, background=None, near=0.01, sh_degree=3,
                     terminate_eps=1e-4):
    """Project + rasterize one view; returns the (H,W,4) image tensor."""
    splats = project_gaussians(g, pose, intr, near=near, sh_degree=sh_degree)
    return rasterize(splats, intr.width, intr.height, background=background,
                     terminate_eps=terminate_eps)
