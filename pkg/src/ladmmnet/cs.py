"""Block compressive sensing of grayscale images with the unrolled network.

Images are cut into non-overlapping 33x33 blocks; each block ``x`` is
measured as ``y = H x.ravel()`` with a column-normalised Gaussian ``H``. The
network is the fusion network with a single band (``L = 1``) and the
acquisition model below, whose AU step is ``f - (H^T (H f - y) + rho r) /
alpha``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cube_io import GrayImage, read_gray
from .network import LadmmNetParams, au_forward, init_params, load_checkpoint, net_forward
from .training import TrainingConfig, train

log = logging.getLogger(__name__)

BLOCK = 33
IMAGE_SUFFIXES = {".png", ".pgm", ".pbm", ".ppm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class GaussianMatrix:
    """``m x n`` sensing matrix with iid normal entries and unit-norm columns."""

    m: int
    n: int
    entries: np.ndarray
    seed: int | None = None


def gaussian_matrix(m: int, n: int, seed: int) -> GaussianMatrix:
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((m, n))
    H /= np.linalg.norm(H, axis=0, keepdims=True)
    H.flags.writeable = False
    return GaussianMatrix(m, n, H, seed)


def measurements_for_ratio(ratio: float, n: int = BLOCK * BLOCK) -> int:
    """``round(ratio * n)`` (half up), at least 1."""
    m = int(np.floor(ratio * n + 0.5))
    if not 1 <= m <= n:
        raise ValueError(f"ratio {ratio} gives m={m} for n={n}")
    return m


class BlockSensing:
    """Acquisition model for one block (or a stack of blocks) of edge ``edge``.

    Cubes are ``(..., 1, edge, edge)``; measurements are ``(..., m)``.
    """

    def __init__(self, H: GaussianMatrix, edge: int = BLOCK):
        if H.n != edge * edge:
            raise ValueError(f"matrix has {H.n} columns, blocks have {edge * edge} pixels")
        self.H = H
        self.edge = edge
        self._A = np.asarray(H.entries)
        self._gram = self._A.T @ self._A

    @property
    def cube_shape(self):
        return (1, self.edge, self.edge)

    def _flat(self, f):
        return np.asarray(f).reshape(np.shape(f)[:-3] + (self.edge * self.edge,))

    def _cube(self, v):
        return v.reshape(v.shape[:-1] + self.cube_shape)

    def measure(self, f) -> np.ndarray:
        return self._flat(f) @ self._A.T

    def adjoint(self, y) -> np.ndarray:
        return self._cube(np.asarray(y) @ self._A)

    def initial(self, y) -> np.ndarray:
        """``f0 = H^T y``."""
        return self.adjoint(y)

    def residual_grads(self, f, y):
        g = self._flat(f) @ self._gram - np.asarray(y) @ self._A
        return self._cube(g), None

    def normal_parts(self, v):
        return self._cube(self._flat(v) @ self._gram), None

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self._gram)[-1])


def cs_au_forward(f_prev, r_prev, y, H: GaussianMatrix, layer) -> np.ndarray:
    """``f - (H^T (H f - y) + rho r) / alpha`` for one block (or a stack)."""
    return au_forward(f_prev, r_prev, y, BlockSensing(H, int(round(np.sqrt(H.n)))), layer)


@dataclass(frozen=True)
class BlockSet:
    """Blocks cut from one image plus what is needed to put them back."""

    blocks: np.ndarray
    image_shape: tuple[int, int]
    grid: tuple[int, int]
    edge: int = BLOCK


def extract_blocks(image, stride: int | None = None, edge: int = BLOCK) -> BlockSet:
    """Tile an image into ``edge x edge`` blocks.

    With the default ``stride = edge`` the tiling is non-overlapping and
    edge blocks are zero-padded; smaller strides give overlapping training
    patches (no padding, only fully inside blocks).
    """
    data = image.data if isinstance(image, GrayImage) else np.asarray(image, dtype=np.float64)
    rows, cols = data.shape
    if rows < edge or cols < edge:
        raise ValueError(f"image {data.shape} smaller than a {edge}x{edge} block")
    stride = stride or edge
    if stride == edge:
        gr, gc = -(-rows // edge), -(-cols // edge)
        padded = np.zeros((gr * edge, gc * edge))
        padded[:rows, :cols] = data
        blocks = padded.reshape(gr, edge, gc, edge).transpose(0, 2, 1, 3).reshape(-1, edge, edge)
        return BlockSet(blocks, (rows, cols), (gr, gc), edge)
    starts_r = range(0, rows - edge + 1, stride)
    starts_c = range(0, cols - edge + 1, stride)
    blocks = np.array([data[r:r + edge, c:c + edge] for r in starts_r for c in starts_c])
    return BlockSet(blocks, (rows, cols), (len(starts_r), len(starts_c)), edge)


def assemble_blocks(blockset: BlockSet, blocks=None) -> GrayImage:
    """Inverse of non-overlapping :func:`extract_blocks`; crops the padding."""
    blocks = blockset.blocks if blocks is None else np.asarray(blocks)
    gr, gc = blockset.grid
    e = blockset.edge
    rows, cols = blockset.image_shape
    if blocks.shape != (gr * gc, e, e):
        raise ValueError(f"expected {(gr * gc, e, e)} blocks, got {blocks.shape}")
    if gr * e < rows or gc * e < cols:
        raise ValueError("block set was not extracted as a non-overlapping tiling")
    full = blocks.reshape(gr, gc, e, e).transpose(0, 2, 1, 3).reshape(gr * e, gc * e)
    return GrayImage(full[:rows, :cols].copy())


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass(frozen=True)
class CsConfig:
    ratio: float = 0.25
    matrix_seed: int = 0
    n_layers: int = 5
    feature_maps: int = 32
    init_seed: int = 0
    n_blocks: int = 512
    block_stride: int = 11
    sample_seed: int = 0
    alpha_init: float | None = None
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(epochs=100, batch_size=16))


def collect_blocks(paths, n_blocks: int, stride: int, seed: int) -> np.ndarray:
    """Randomly draw ``n_blocks`` training blocks from the given images."""
    pool = [extract_blocks(read_gray(p), stride=stride).blocks for p in paths]
    if not pool:
        raise ValueError("no images found")
    pool = np.concatenate(pool)
    if len(pool) < n_blocks:
        raise ValueError(f"only {len(pool)} blocks available, need {n_blocks}")
    rng = np.random.default_rng(seed)
    return pool[np.sort(rng.choice(len(pool), n_blocks, replace=False))]


def block_dataset(blocks, ops: BlockSensing):
    """``(truth, y)`` pairs, truth shaped ``(1, edge, edge)``."""
    return [(b[None, :, :], ops.measure(b[None, :, :])) for b in blocks]


def cs_network(cfg: CsConfig, ops: BlockSensing) -> LadmmNetParams:
    alpha = cfg.alpha_init if cfg.alpha_init is not None else ops.lipschitz()
    params = init_params((ops.edge, ops.edge, 1), cfg.feature_maps, cfg.n_layers,
                         seed=cfg.init_seed, alpha=alpha)
    params.meta.update(kind="cs", ratio=cfg.ratio, matrix_seed=cfg.matrix_seed,
                       m=ops.H.m, n=ops.H.n)
    return params


def cs_train(dataset_dir, ratio: float, cfg: CsConfig | None = None, checkpoint_path=None,
             blocks=None, progress=None):
    """Train a CS network on blocks drawn from every image in ``dataset_dir``.

    Returns:
        ``(params, history, H)``.
    """
    cfg = replace(cfg or CsConfig(), ratio=ratio)
    H = gaussian_matrix(measurements_for_ratio(ratio), BLOCK * BLOCK, cfg.matrix_seed)
    ops = BlockSensing(H)
    if blocks is None:
        paths = list_images(dataset_dir)
        if not paths:
            raise ValueError(f"no images in {dataset_dir}")
        blocks = collect_blocks(paths, cfg.n_blocks, cfg.block_stride, cfg.sample_seed)
    params = cs_network(cfg, ops)
    params, history = train(params, block_dataset(blocks, ops), ops, cfg.training,
                            checkpoint_path=checkpoint_path, progress=progress,
                            stack_batches=True)
    return params, history, H


def matrix_for_checkpoint(params: LadmmNetParams) -> GaussianMatrix:
    meta = params.meta
    if meta.get("kind") != "cs":
        raise ValueError("checkpoint is not a CS network")
    return gaussian_matrix(meta["m"], meta["n"], meta["matrix_seed"])


def load_cs_checkpoint(path, ratio: float | None = None) -> tuple[LadmmNetParams, GaussianMatrix]:
    params = load_checkpoint(path)
    H = matrix_for_checkpoint(params)
    if ratio is not None and measurements_for_ratio(ratio, H.n) != H.m:
        raise ValueError(f"checkpoint was trained for m={H.m}, ratio {ratio} needs "
                         f"m={measurements_for_ratio(ratio, H.n)}")
    return params, H


@dataclass(frozen=True)
class CsMeasurements:
    y: np.ndarray
    layout: BlockSet


def measure_image(image, H: GaussianMatrix) -> CsMeasurements:
    bs = extract_blocks(image)
    ops = BlockSensing(H, bs.edge)
    return CsMeasurements(ops.measure(bs.blocks[:, None]), bs)


def cs_reconstruct(meas: CsMeasurements, H: GaussianMatrix, params: LadmmNetParams | None = None,
                   batch: int = 64) -> GrayImage:
    """Reconstruct every block and reassemble; ``params=None`` gives the ``H^T y`` baseline."""
    ops = BlockSensing(H, meas.layout.edge)
    out = []
    for start in range(0, len(meas.y), batch):
        y = meas.y[start:start + batch]
        if params is None:
            f = ops.initial(y)
        else:
            f, _ = net_forward(params, y, ops)
        out.append(f[:, 0])
    return assemble_blocks(meas.layout, np.concatenate(out))


def save_matrix_manifest(H: GaussianMatrix, path) -> None:
    Path(path).write_text(json.dumps({"m": H.m, "n": H.n, "seed": H.seed}))
