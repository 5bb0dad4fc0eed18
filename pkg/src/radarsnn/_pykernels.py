"""Pure-numpy versions of the compiled kernels (same signatures)."""

import numpy as np


def _axis_targets(coord, k, stride, pad, n_out):
    # output index hit by tap `t` for each input coordinate, or -1
    num = coord[:, None] + pad - np.arange(k)[None, :]
    ok = (num >= 0) & (num % stride == 0) & (num // stride < n_out)
    return np.where(ok, num // stride, -1)


def event_conv3d(events, wt, out, sz, sy, sx, pz, py, px):
    events = np.asarray(events)
    if len(events) == 0:
        return 0
    _, kz, ky, kx, cout = wt.shape
    zo, yo, xo, _ = out.shape
    ci = events[:, 0]
    tz = _axis_targets(events[:, 1], kz, sz, pz, zo)
    ty = _axis_targets(events[:, 2], ky, sy, py, yo)
    tx = _axis_targets(events[:, 3], kx, sx, px, xo)
    flat = out.reshape(-1, cout)
    acs = 0
    for a in range(kz):
        for b in range(ky):
            for c in range(kx):
                oz, oy, ox = tz[:, a], ty[:, b], tx[:, c]
                valid = (oz >= 0) & (oy >= 0) & (ox >= 0)
                if not valid.any():
                    continue
                pos = (oz[valid] * yo + oy[valid]) * xo + ox[valid]
                np.add.at(flat, pos, wt[ci[valid], a, b, c, :])
                acs += int(valid.sum()) * cout
    return acs
