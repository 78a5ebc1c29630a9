"""Independent reference implementations shared by test modules."""

import numpy as np

from stylewarp.groundtruth import OcclusionParams


def scalar_occlusion_reference(wf, wb, p: OcclusionParams):
    """Per-pixel occlusion-mask reference, mirroring the vectorized arithmetic."""
    _, _, h, w = wb.shape
    mask = np.ones((h, w))
    for i in range(h):
        for j in range(w):
            wbx, wby = wb[0, 0, i, j], wb[0, 1, i, j]
            qx, qy = j + wbx, i + wby
            if not (0.0 <= qx <= w - 1.0 and 0.0 <= qy <= h - 1.0):
                mask[i, j] = 0.0
                continue
            sxc = min(max(qx, 0.0), w - 1.0)
            syc = min(max(qy, 0.0), h - 1.0)
            x0 = min(int(np.floor(sxc)), w - 1)
            y0 = min(int(np.floor(syc)), h - 1)
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = sxc - x0
            fy = syc - y0
            wfs = []
            for c in range(2):
                v00, v01 = wf[0, c, y0, x0], wf[0, c, y0, x1]
                v10, v11 = wf[0, c, y1, x0], wf[0, c, y1, x1]
                wfs.append(
                    (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
                )
            resid = (wbx + wfs[0]) ** 2 + (wby + wfs[1]) ** 2
            wb_mag = wbx**2 + wby**2
            wf_mag = wfs[0] ** 2 + wfs[1] ** 2
            if resid > p.cross_check_coeff * (wb_mag + wf_mag) + p.cross_check_bias:
                mask[i, j] = 0.0
                continue
            gm = 0.0
            for c in range(2):
                comp = wb[0, c]
                if j == 0:
                    dx = comp[i, 1] - comp[i, 0]
                elif j == w - 1:
                    dx = comp[i, w - 1] - comp[i, w - 2]
                else:
                    dx = 0.5 * (comp[i, j + 1] - comp[i, j - 1])
                if i == 0:
                    dy = comp[1, j] - comp[0, j]
                elif i == h - 1:
                    dy = comp[h - 1, j] - comp[h - 2, j]
                else:
                    dy = 0.5 * (comp[i + 1, j] - comp[i - 1, j])
                gm += dx * dx + dy * dy
            if gm > p.boundary_coeff * wb_mag + p.boundary_bias:
                mask[i, j] = 0.0
    return mask
