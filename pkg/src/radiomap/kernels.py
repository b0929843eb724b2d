"""Hot loops: grid traversal, direct-ray transmission loss and 2D ray launching.

Coordinates are fractional cells ``(row, col)``; cell ``(i, j)`` spans
``[i, i+1) x [j, j+1)`` and its centre is ``(i + 0.5, j + 0.5)``. Azimuth is
measured counter-clockwise from the +col axis with "up" being -row.

Two traversal routes live here on purpose. ``traverse_segment`` (parametric
t in [0, 1]) backs the feature channels; ``_march`` (unit direction, length in
cells, with reflections) backs the ray tracer. Agreement between the two is
what the oracle-equivalence checks measure.
"""
import math

import numpy as np

from ._accel import jit

SPEED_OF_LIGHT = 299_792_458.0


@jit
def fspl_db(distance_m, frequency_mhz):
    return 20.0 * math.log10(4.0 * math.pi * distance_m * frequency_mhz * 1e6 / SPEED_OF_LIGHT)


@jit
def pattern_gain(gains, offset_deg):
    """Linear interpolation in a 360-entry pattern at ``offset_deg``."""
    a = offset_deg % 360.0
    i0 = int(math.floor(a))
    frac = a - i0
    i0 = i0 % 360
    return gains[i0] * (1.0 - frac) + gains[(i0 + 1) % 360] * frac


@jit
def _boundary_t(p0, d, cell):
    # parameter at which the segment leaves ``cell`` along one axis
    if d > 0.0:
        return ((cell + 1) - p0) / d
    if d < 0.0:
        return (cell - p0) / d
    return math.inf


@jit
def traverse_segment(r0, c0, r1, c1, height, width, rows, cols, ts):
    """Fill ``rows, cols, ts`` with the cells crossed from p0 to p1.

    ``ts[k]`` is the segment parameter at which cell ``k`` is left (1.0 for the
    last cell), so cell ``k`` owns ``[ts[k-1], ts[k])``. Returns the count.
    Corner ties step the row axis first.
    """
    dr = r1 - r0
    dc = c1 - c0
    if dr == 0.0 and dc == 0.0:
        return 0
    r = min(int(math.floor(r0)), height - 1)
    c = min(int(math.floor(c0)), width - 1)
    sr = 1 if dr > 0.0 else -1
    sc = 1 if dc > 0.0 else -1
    n = 0
    cap = rows.shape[0]
    while n < cap:
        tr = _boundary_t(r0, dr, r)
        tc = _boundary_t(c0, dc, c)
        t_next = min(tr, tc, 1.0)
        rows[n] = r
        cols[n] = c
        ts[n] = t_next
        n += 1
        if t_next >= 1.0:
            break
        if tr <= tc:
            r += sr
        else:
            c += sc
        if r < 0 or r >= height or c < 0 or c >= width:
            break
    return n


@jit
def transmission_map(trans, tx_r, tx_c, cell_size):
    """Direct-segment transmission loss (dB) from the transmitter to every cell centre."""
    h, w = trans.shape
    out = np.zeros((h, w))
    cap = 2 * (h + w) + 4
    rows = np.empty(cap, np.int64)
    cols = np.empty(cap, np.int64)
    ts = np.empty(cap)
    for i in range(h):
        for j in range(w):
            pr = i + 0.5
            pc = j + 0.5
            n = traverse_segment(tx_r, tx_c, pr, pc, h, w, rows, cols, ts)
            length_m = math.hypot(pr - tx_r, pc - tx_c) * cell_size
            acc = 0.0
            t_prev = 0.0
            for k in range(n):
                acc += trans[rows[k], cols[k]] * ((ts[k] - t_prev) * length_m)
                t_prev = ts[k]
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# Ray launching

@jit
def _march(refl, trans, r0, c0, ur, uc, start_r, start_c, max_len, cell_size,
           unfolded0, loss0, bounces, max_bounces, capture, power, cap_cells,
           nb, dtheta, freq_mhz, d_min_m, min_power_db, stack, top):
    """Walk one straight ray, returning (transmission loss, new stack top).

    The ray starts at ``(r0, c0)`` inside cell ``(start_r, start_c)`` and runs
    for ``max_len`` cells or until it leaves the grid or is killed. When
    ``capture`` is set, every pixel whose foot point lies on this ray within
    ``cap_cells`` receives a weighted contribution in ``power``. Reflections
    from free cells into material cells are pushed onto ``stack`` while
    ``bounces < max_bounces``.
    """
    h, w = refl.shape
    r = start_r
    c = start_c
    sr = 1 if ur > 0.0 else -1
    sc = 1 if uc > 0.0 else -1
    s_in = 0.0
    acc = 0.0
    cap_m = cap_cells * cell_size
    while True:
        s_r = _boundary_t(r0, ur, r)
        s_c = _boundary_t(c0, uc, c)
        s_out = min(s_r, s_c, max_len)
        att = trans[r, c]
        if capture:
            for pr in range(r - nb, r + nb + 1):
                if pr < 0 or pr >= h:
                    continue
                for pc in range(c - nb, c + nb + 1):
                    if pc < 0 or pc >= w:
                        continue
                    vr = pr + 0.5 - r0
                    vc = pc + 0.5 - c0
                    s_foot = vr * ur + vc * uc
                    if s_foot < s_in or s_foot >= s_out:
                        continue
                    perp = abs(vr * uc - vc * ur)
                    if perp > cap_cells:
                        continue
                    along = unfolded0 + s_foot
                    dist_m = max(math.sqrt(along * along + perp * perp) * cell_size, d_min_m)
                    weight = min(1.0, dist_m * dtheta / (2.0 * cap_m))
                    loss = (loss0 + acc + att * (s_foot - s_in) * cell_size
                            + fspl_db(dist_m, freq_mhz) - 10.0 * math.log10(weight))
                    if loss < min_power_db:
                        power[pr, pc] += 10.0 ** (-loss / 10.0)
        acc += att * (s_out - s_in) * cell_size
        if s_out >= max_len:
            break
        if loss0 + acc + fspl_db(max((unfolded0 + s_out) * cell_size, d_min_m), freq_mhz) > min_power_db:
            break
        nr = r
        nc = c
        row_step = s_r <= s_c
        if row_step:
            nr = r + sr
        else:
            nc = c + sc
        if nr < 0 or nr >= h or nc < 0 or nc >= w:
            break
        here_free = refl[r, c] == 0.0 and trans[r, c] == 0.0
        there_solid = refl[nr, nc] > 0.0 or trans[nr, nc] > 0.0
        if here_free and there_solid and bounces < max_bounces and top < stack.shape[0]:
            hit_r = r0 + ur * s_out
            hit_c = c0 + uc * s_out
            if row_step:
                hit_r = float(r + 1) if sr > 0 else float(r)
                stack[top, 2] = -ur
                stack[top, 3] = uc
            else:
                hit_c = float(c + 1) if sc > 0 else float(c)
                stack[top, 2] = ur
                stack[top, 3] = -uc
            stack[top, 0] = hit_r
            stack[top, 1] = hit_c
            stack[top, 4] = r
            stack[top, 5] = c
            stack[top, 6] = unfolded0 + s_out
            stack[top, 7] = loss0 + acc + refl[nr, nc]
            stack[top, 8] = bounces + 1
            top += 1
        r = nr
        c = nc
        s_in = s_out
    return acc, top


@jit
def trace_kernel(refl, trans, cell_size, tx_r, tx_c, freq_mhz, gains, orientation_deg,
                 n_rays, max_bounces, capture_radius_m, min_power_db, d_min_m,
                 launch_offset, stack_size):
    """Pathloss map (dB): exact direct paths plus captured reflected rays."""
    h, w = refl.shape
    power = np.zeros((h, w))
    tx_cell_r = min(int(math.floor(tx_r)), h - 1)
    tx_cell_c = min(int(math.floor(tx_c)), w - 1)
    stack = np.zeros((stack_size, 9))
    dummy = np.zeros((1, 1))
    cap_cells = capture_radius_m / cell_size
    nb = int(math.ceil(cap_cells))
    dtheta = 2.0 * math.pi / n_rays

    # direct tx -> pixel-centre paths, one aimed ray per pixel
    for i in range(h):
        for j in range(w):
            vr = i + 0.5 - tx_r
            vc = j + 0.5 - tx_c
            dist_cells = math.sqrt(vr * vr + vc * vc)
            if i == tx_cell_r and j == tx_cell_c:
                gain = gains[0]
            else:
                az = math.degrees(math.atan2(-vr, vc))
                gain = pattern_gain(gains, az - orientation_deg)
            wall = 0.0
            if dist_cells > 0.0:
                wall, _ = _march(refl, trans, tx_r, tx_c, vr / dist_cells, vc / dist_cells,
                                 tx_cell_r, tx_cell_c, dist_cells, cell_size, 0.0, 0.0,
                                 0, 0, False, dummy, cap_cells, nb, dtheta, freq_mhz,
                                 d_min_m, math.inf, stack, 0)
            loss = fspl_db(max(dist_cells * cell_size, d_min_m), freq_mhz) + wall - gain
            if loss < min_power_db:
                power[i, j] += 10.0 ** (-loss / 10.0)

    # launched rays: only reflected branches are captured
    if max_bounces > 0:
        for k in range(n_rays):
            theta = (k + launch_offset) * dtheta
            ur = -math.sin(theta)
            uc = math.cos(theta)
            gain = pattern_gain(gains, math.degrees(theta) - orientation_deg)
            top = 0
            _, top = _march(refl, trans, tx_r, tx_c, ur, uc, tx_cell_r, tx_cell_c, math.inf,
                            cell_size, 0.0, -gain, 0, max_bounces, False, power, cap_cells,
                            nb, dtheta, freq_mhz, d_min_m, min_power_db, stack, top)
            while top > 0:
                top -= 1
                b = stack[top]
                _, top = _march(refl, trans, b[0], b[1], b[2], b[3], int(b[4]), int(b[5]),
                                math.inf, cell_size, b[6], b[7], int(b[8]), max_bounces, True,
                                power, cap_cells, nb, dtheta, freq_mhz, d_min_m, min_power_db,
                                stack, top)

    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            if power[i, j] > 0.0:
                out[i, j] = -10.0 * math.log10(power[i, j])
            else:
                out[i, j] = min_power_db
    return out
