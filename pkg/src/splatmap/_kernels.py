"""Numba kernels for tile binning and the per-pixel blend loops.

Arrays indexed by ``g`` refer to the renderer's local (visible) Gaussian
index. Per-entry gradient buffers have one row per (tile, Gaussian) pair so
accumulation needs no atomics and reduces in a fixed order.
"""
import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # prefer OpenMP / workqueue; an old system TBB only produces a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# columns of the per-entry gradient buffer
N_GRAD = 10  # dmx, dmy, dAxx, dAxy, dAyy, dopacity, dr, dg, db, ddepth


@njit(cache=True)
def fill_pairs(tx0, tx1, ty0, ty1, tiles_x, offsets, tile_ids, gauss_ids):
    for g in range(tx0.shape[0]):
        k = offsets[g]
        for ty in range(ty0[g], ty1[g]):
            for tx in range(tx0[g], tx1[g]):
                tile_ids[k] = ty * tiles_x + tx
                gauss_ids[k] = g
                k += 1


@njit(parallel=True, cache=True)
def forward_tiles(
    ranges, point_list, width, height, tiles_x, tile_size,
    mx, my, ex, ey, ca, cb, cc, opac, colors, depths, bg,
    alpha_min, alpha_max, term_T,
    out_color, out_depth, out_T, out_last, out_count,
):
    n_tiles = ranges.shape[0]
    for tile in prange(n_tiles):
        start = ranges[tile, 0]
        end = ranges[tile, 1]
        tx = tile % tiles_x
        ty = tile // tiles_x
        for v in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for u in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                last = start
                count = 0
                for k in range(start, end):
                    g = point_list[k]
                    dx = u - mx[g]
                    dy = v - my[g]
                    # outside the footprint box alpha is below alpha_min anyway
                    if abs(dx) > ex[g] or abs(dy) > ey[g]:
                        continue
                    power = -0.5 * (ca[g] * dx * dx + cc[g] * dy * dy) - cb[g] * dx * dy
                    alpha = opac[g] * np.exp(power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < term_T:
                        break
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    dsum += depths[g] * w
                    T = test_T
                    last = k + 1
                    count += 1
                out_color[v, u, 0] = c0 + T * bg[0]
                out_color[v, u, 1] = c1 + T * bg[1]
                out_color[v, u, 2] = c2 + T * bg[2]
                out_depth[v, u] = dsum
                out_T[v, u] = T
                out_last[v, u] = last
                out_count[v, u] = count


@njit(parallel=True, cache=True)
def backward_tiles(
    ranges, point_list, width, height, tiles_x, tile_size,
    mx, my, ex, ey, ca, cb, cc, opac, colors, depths, bg,
    alpha_min, alpha_max,
    final_T, last_idx, grad_color, grad_depth,
    entry_grads,
):
    n_tiles = ranges.shape[0]
    for tile in prange(n_tiles):
        start = ranges[tile, 0]
        tx = tile % tiles_x
        ty = tile // tiles_x
        for v in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            for u in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                last = last_idx[v, u]
                if last == start:
                    continue
                gc0 = grad_color[v, u, 0]
                gc1 = grad_color[v, u, 1]
                gc2 = grad_color[v, u, 2]
                gd = grad_depth[v, u]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                    continue
                T = final_T[v, u]
                # normalized color/depth of everything behind the current contributor
                b0 = bg[0]
                b1 = bg[1]
                b2 = bg[2]
                bd = 0.0
                for k in range(last - 1, start - 1, -1):
                    g = point_list[k]
                    dx = u - mx[g]
                    dy = v - my[g]
                    # outside the footprint box alpha is below alpha_min anyway
                    if abs(dx) > ex[g] or abs(dy) > ey[g]:
                        continue
                    power = -0.5 * (ca[g] * dx * dx + cc[g] * dy * dy) - cb[g] * dx * dy
                    G = np.exp(power)
                    raw = opac[g] * G
                    clamped = raw > alpha_max
                    alpha = alpha_max if clamped else raw
                    if alpha < alpha_min:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    entry_grads[k, 6] += w * gc0
                    entry_grads[k, 7] += w * gc1
                    entry_grads[k, 8] += w * gc2
                    entry_grads[k, 9] += w * gd
                    dL_dalpha = T * (
                        (colors[g, 0] - b0) * gc0
                        + (colors[g, 1] - b1) * gc1
                        + (colors[g, 2] - b2) * gc2
                        + (depths[g] - bd) * gd
                    )
                    b0 = alpha * colors[g, 0] + (1.0 - alpha) * b0
                    b1 = alpha * colors[g, 1] + (1.0 - alpha) * b1
                    b2 = alpha * colors[g, 2] + (1.0 - alpha) * b2
                    bd = alpha * depths[g] + (1.0 - alpha) * bd
                    if clamped:
                        continue
                    entry_grads[k, 5] += dL_dalpha * G
                    dpow = dL_dalpha * alpha
                    entry_grads[k, 0] += dpow * (ca[g] * dx + cb[g] * dy)
                    entry_grads[k, 1] += dpow * (cb[g] * dx + cc[g] * dy)
                    entry_grads[k, 2] += -0.5 * dpow * dx * dx
                    entry_grads[k, 3] += -0.5 * dpow * dx * dy
                    entry_grads[k, 4] += -0.5 * dpow * dy * dy


@njit(cache=True)
def reduce_entries(point_list, entry_grads, n_gauss):
    out = np.zeros((n_gauss, entry_grads.shape[1]))
    for k in range(point_list.shape[0]):
        g = point_list[k]
        for c in range(entry_grads.shape[1]):
            out[g, c] += entry_grads[k, c]
    return out
