"""Synthetic spectral scenes for tests, demos and the acceptance runs.

A scene mixes a few materials, each with a smooth reflectance spectrum,
through spatially smooth abundance maps with a couple of sharp-edged
rectangles so there is both texture and edges.
"""

from __future__ import annotations

import numpy as np

from .cassi import DualArm


def _spectra(rng, n_materials: int, bands: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, bands)
    out = np.empty((n_materials, bands))
    for k in range(n_materials):
        centers = rng.uniform(-0.2, 1.2, 2)
        widths = rng.uniform(0.15, 0.5, 2)
        heights = rng.uniform(0.3, 1.0, 2)
        s = 0.1 + sum(h * np.exp(-0.5 * ((t - c) / w) ** 2) for c, w, h in zip(centers, widths, heights))
        out[k] = s
    return out


def _abundances(rng, n_materials: int, rows: int, cols: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.linspace(0, 1, rows), np.linspace(0, 1, cols), indexing="ij")
    maps = np.empty((n_materials, rows, cols))
    for k in range(n_materials):
        m = np.zeros((rows, cols))
        for _ in range(3):
            ci, cj = rng.uniform(0, 1, 2)
            s = rng.uniform(0.1, 0.35)
            m += np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * s * s))
        maps[k] = m
    for _ in range(2):
        k = rng.integers(n_materials)
        r0, c0 = rng.integers(0, rows // 2), rng.integers(0, cols // 2)
        r1, c1 = r0 + rng.integers(rows // 4, rows // 2 + 1), c0 + rng.integers(cols // 4, cols // 2 + 1)
        maps[k, r0:r1, c0:c1] += 2.0
    maps = np.exp(2.0 * maps)
    return maps / maps.sum(axis=0, keepdims=True)


def synthetic_cube(dims, seed: int, n_materials: int = 4) -> np.ndarray:
    """An ``(L, M, N)`` cube with values in ``[0, 1]`` and peak exactly 1."""
    rows, cols, bands = dims
    rng = np.random.default_rng(seed)
    cube = np.einsum("kl,kij->lij", _spectra(rng, n_materials, bands), _abundances(rng, n_materials, rows, cols))
    return cube / cube.max()


def synthetic_dataset(dims, n: int, ops: DualArm, snr_db: float, seed: int):
    """``n`` ``(truth, (y_hs, y_ms))`` samples; scene ``i`` uses seed ``seed + i``.

    Each arm gets its own noise stream derived from the scene seed.
    """
    out = []
    for i in range(n):
        truth = synthetic_cube(dims, seed + i)
        out.append((truth, ops.simulate(truth, snr_db, 1_000_003 * (seed + i))))
    return out
