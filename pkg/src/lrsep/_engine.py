"""Compiled event loop for one replica.

Consumes the random stream in exactly the order used by ``lattice.step``
(exponential holding time, particle choice, alias draw), so a replica run
here and one run through the Python reference loop from the same generator
state produce the same trajectory.
"""

import numba
import numpy as np

from .kernel import alias_draw


@numba.njit(cache=True, nogil=True)
def relative_site(s, x, side, dim):
    if dim == 1:
        return (s - x) % side
    r0 = (s // side - x // side) % side
    r1 = (s % side - x % side) % side
    return r0 * side + r1


@numba.njit(cache=True, nogil=True)
def shifted_site(s, z, side, dim):
    """Site ``s + z`` on the torus, with ``z`` an integer vector."""
    if dim == 1:
        return (s + z[0]) % side
    c0 = (s // side + z[0]) % side
    c1 = (s % side + z[1]) % side
    return c0 * side + c1


@numba.njit(cache=True, nogil=True)
def _add_residue(x, r, side, dim):
    if dim == 1:
        return (x + r) % side
    c0 = (x // side + r // side) % side
    c1 = (x % side + r % side) % side
    return c0 * side + c1


@numba.njit(cache=True, nogil=True)
def vn_sum(occ, x, coef, side, dim, out):
    """out[b] = sum_r coef[r, b] (1 - occ[x + r])."""
    nb = coef.shape[1]
    for b in range(nb):
        out[b] = 0.0
    for r in range(coef.shape[0]):
        if occ[_add_residue(x, r, side, dim)] == 0:
            for b in range(nb):
                out[b] += coef[r, b]


@numba.njit(cache=True, nogil=True)
def simulate(occ, plist, slot, meta, unwrapped, clock, side, dim, offsets,
             aprob, aidx, coef, obs_times, horizon, record_occ, rng):
    """Run until ``horizon``; mutates the state arrays in place.

    ``meta = [particle count, tagged site]`` and ``clock = [time]``.
    Returns displacement and integral at each observation time, optional
    occupancy snapshots, the tagged jump log and the number of clock rings.
    """
    nb = coef.shape[1]
    n_obs = obs_times.size
    x_obs = np.zeros((n_obs, dim), np.int64)
    i_obs = np.zeros((n_obs, nb), np.complex128)
    occ_obs = np.zeros((n_obs if record_occ else 0, occ.size), np.uint8)
    cap = 64
    tag_t = np.empty(cap)
    tag_z = np.empty((cap, dim), np.int64)
    n_tag = 0

    count = meta[0]
    tagged = meta[1]
    t = clock[0]
    v = np.zeros(nb, np.complex128)
    acc = np.zeros(nb, np.complex128)
    vn_sum(occ, tagged, coef, side, dim, v)
    k_obs = 0
    rings = 0
    running = True
    while running:
        dt = rng.standard_exponential() / count
        t_new = t + dt
        while k_obs < n_obs and obs_times[k_obs] < t_new:
            ds = obs_times[k_obs] - t
            for a in range(dim):
                x_obs[k_obs, a] = unwrapped[a]
            for b in range(nb):
                i_obs[k_obs, b] = acc[b] + v[b] * ds
            if record_occ:
                occ_obs[k_obs, :] = occ
            k_obs += 1
        if t_new > horizon:
            for b in range(nb):
                acc[b] += v[b] * (horizon - t)
            t = horizon
            running = False
            continue
        for b in range(nb):
            acc[b] += v[b] * dt
        t = t_new
        rings += 1
        j = int(rng.random() * count)
        if j >= count:
            j = count - 1
        k = alias_draw(rng.random(), aprob, aidx)
        s = plist[j]
        z = offsets[k]
        target = shifted_site(s, z, side, dim)
        if occ[target] != 0:
            continue
        occ[s] = 0
        occ[target] = 1
        plist[j] = target
        slot[target] = j
        slot[s] = -1
        if s == tagged:
            tagged = target
            for a in range(dim):
                unwrapped[a] += z[a]
            if n_tag == cap:
                cap *= 2
                nt = np.empty(cap)
                nz = np.empty((cap, dim), np.int64)
                nt[:n_tag] = tag_t[:n_tag]
                nz[:n_tag] = tag_z[:n_tag]
                tag_t = nt
                tag_z = nz
            tag_t[n_tag] = t
            for a in range(dim):
                tag_z[n_tag, a] = z[a]
            n_tag += 1
            vn_sum(occ, tagged, coef, side, dim, v)
        elif nb > 0:
            ra = relative_site(s, tagged, side, dim)
            rb = relative_site(target, tagged, side, dim)
            for b in range(nb):
                v[b] += coef[ra, b] - coef[rb, b]
    meta[1] = tagged
    clock[0] = t
    return x_obs, i_obs, occ_obs, tag_t[:n_tag].copy(), tag_z[:n_tag].copy(), rings
