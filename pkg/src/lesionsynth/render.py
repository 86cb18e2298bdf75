"""Axial slice montages with a jet colormap, optionally with a mask contour."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .volume import BinaryMask3D, Volume3D, check_aligned


def default_slices(shape, count=4):
    nz = shape[2]
    if nz <= count:
        return list(range(nz))
    return [int(round(v)) for v in np.linspace(nz * 0.2, nz * 0.8, count)]


def render_montage(volumes, path, labels=None, overlay: BinaryMask3D | None = None, slices=None,
                   cmap="jet", vrange=None, dpi=100) -> Path:
    """One row per volume, one column per slice; all rows share a colour range."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    volumes = list(volumes)
    if not volumes:
        raise ValueError("nothing to render")
    check_aligned(*volumes, *([overlay] if overlay is not None else []))
    slices = default_slices(volumes[0].shape) if slices is None else list(slices)
    nz = volumes[0].shape[2]
    if any(not 0 <= z < nz for z in slices):
        raise ValueError(f"slice index out of range [0, {nz})")
    labels = labels or [f"image {i}" for i in range(len(volumes))]
    if vrange is None:
        lo = min(float(v.data.min()) for v in volumes)
        hi = max(float(v.data.max()) for v in volumes)
        vrange = (lo, hi if hi > lo else lo + 1.0)
    fig, axes = plt.subplots(len(volumes), len(slices), squeeze=False,
                             figsize=(2.2 * len(slices), 2.2 * len(volumes)))
    for r, (vol, label) in enumerate(zip(volumes, labels)):
        for c, z in enumerate(slices):
            ax = axes[r, c]
            # transpose so x runs left-right and y bottom-up
            ax.imshow(vol.data[:, :, z].T, origin="lower", cmap=cmap, vmin=vrange[0], vmax=vrange[1],
                      interpolation="nearest")
            if overlay is not None and overlay.data[:, :, z].any():
                ax.contour(overlay.data[:, :, z].T.astype(float), levels=[0.5], colors="white",
                           linewidths=0.8, origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"z={z}", fontsize=8)
            if c == 0:
                ax.set_ylabel(label, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path
