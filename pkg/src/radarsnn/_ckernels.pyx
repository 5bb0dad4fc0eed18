# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. See ``radarsnn.kernels`` for the dispatching wrapper."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def event_conv3d(const long long[:, ::1] events,
                 const double[:, :, :, :, ::1] wt,
                 double[:, :, :, ::1] out,
                 int sz, int sy, int sx,
                 int pz, int py, int px):
    """Scatter kernel columns for every spike event.

    ``events`` rows are ``(ci, z, y, x)``; ``wt`` is laid out
    ``(Cin, kz, ky, kx, Cout)`` and ``out`` is ``(Zo, Yo, Xo, Cout)``.
    Returns the number of accumulations performed.
    """
    cdef Py_ssize_t n_events = events.shape[0]
    cdef int kz = wt.shape[1], ky = wt.shape[2], kx = wt.shape[3]
    cdef int cout = wt.shape[4]
    cdef int zo = out.shape[0], yo = out.shape[1], xo = out.shape[2]
    cdef Py_ssize_t e
    cdef int ci, z, y, x, a, b, c, nz, ny, nx, oz, oy, ox, co
    cdef long long acs = 0
    cdef const double* wrow
    cdef double* orow
    with nogil:
        for e in range(n_events):
            ci = <int>events[e, 0]
            z = <int>events[e, 1]
            y = <int>events[e, 2]
            x = <int>events[e, 3]
            for a in range(kz):
                nz = z + pz - a
                if nz < 0 or nz % sz != 0:
                    continue
                oz = nz // sz
                if oz >= zo:
                    continue
                for b in range(ky):
                    ny = y + py - b
                    if ny < 0 or ny % sy != 0:
                        continue
                    oy = ny // sy
                    if oy >= yo:
                        continue
                    for c in range(kx):
                        nx = x + px - c
                        if nx < 0 or nx % sx != 0:
                            continue
                        ox = nx // sx
                        if ox >= xo:
                            continue
                        wrow = &wt[ci, a, b, c, 0]
                        orow = &out[oz, oy, ox, 0]
                        for co in range(cout):
                            orow[co] += wrow[co]
                        acs += cout
    return acs
