"""Colored coded apertures and the dual-arm 3D-CASSI measurement operators.

Both arms are matrix-free. Cubes are ``(L, M, N)`` arrays, shot stacks are
``(W, rows, cols)`` arrays and aperture masks are ``(W, bands, rows, cols)``.

The MS arm averages groups of ``q`` bands (weight ``1/q``) before coding; the
HS arm averages ``p x p`` pixel blocks (weight ``1/p**2``). The normalisation
lives inside the operators so ``H @ f`` matches the structured matrices
entry for entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube_io import read_cube, spatial_decimate, spectral_decimate, write_cube

HS = "hs"
MS = "ms"


@dataclass(frozen=True)
class CodedApertureStack:
    """Binary masks, one ``(bands, rows, cols)`` cube per snapshot."""

    mask: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 4:
            raise ValueError(f"mask must be (shots, bands, rows, cols), got {mask.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("aperture mask must be binary")
        mask = mask.astype(np.float64)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    @property
    def shots(self) -> int:
        return self.mask.shape[0]

    @property
    def bands(self) -> int:
        return self.mask.shape[1]

    @property
    def rows(self) -> int:
        return self.mask.shape[2]

    @property
    def cols(self) -> int:
        return self.mask.shape[3]

    def is_complementary(self) -> bool:
        return bool(np.all(self.mask.sum(axis=0) == 1))


def design_apertures(rows: int, cols: int, bands: int, shots: int, seed: int) -> CodedApertureStack:
    """Complementary colored coded apertures.

    Every pixel draws a random permutation of its bands; position ``k`` in
    the permutation goes to shot ``k % shots``. Each voxel is therefore
    sensed exactly once and every shot passes ``floor(L/W)`` or
    ``ceil(L/W)`` bands per pixel.
    """
    if not 1 <= shots <= bands:
        raise ValueError(f"need 1 <= shots <= bands, got shots={shots}, bands={bands}")
    rng = np.random.default_rng(seed)
    order = rng.permuted(np.tile(np.arange(bands), (rows * cols, 1)), axis=1)
    shot_of_position = np.arange(bands) % shots
    mask = np.zeros((shots, bands, rows * cols), dtype=np.uint8)
    pix = np.arange(rows * cols)
    for k in range(bands):
        mask[shot_of_position[k], order[:, k], pix] = 1
    return CodedApertureStack(mask.reshape(shots, bands, rows, cols), seed=seed)


def compression_ratio(shots: int, bands: int) -> float:
    """Snapshots over bands, ``W / L``."""
    if bands < 1:
        raise ValueError("bands must be >= 1")
    return shots / bands


def shots_for_ratio(ratio: float, bands: int) -> int:
    """Snapshot count achieving ``ratio`` on ``bands`` bands (round half up)."""
    shots = int(np.floor(ratio * bands + 0.5))
    if shots < 1:
        raise ValueError(f"ratio {ratio} gives zero snapshots for {bands} bands")
    if shots > bands:
        raise ValueError(f"ratio {ratio} needs more snapshots than bands ({bands})")
    return shots


@dataclass(frozen=True)
class CassiOperator:
    """One arm of the dual-arm system.

    Attributes:
        arm: ``"hs"`` (spatially decimated by ``p``) or ``"ms"`` (spectrally
            decimated by ``q``).
        apertures: Coded apertures at the arm's own resolution.
        full_dims: ``(M, N, L)`` of the target cube.
    """

    arm: str
    apertures: CodedApertureStack
    full_dims: tuple[int, int, int]
    p: int = 1
    q: int = 1

    def __post_init__(self):
        M, N, L = self.full_dims
        ap = self.apertures
        if self.arm == HS:
            if self.q != 1:
                raise ValueError("HS arm has no spectral decimation (q must be 1)")
            if M % self.p or N % self.p:
                raise ValueError(f"p={self.p} does not divide {M}x{N}")
            want = (L, M // self.p, N // self.p)
        elif self.arm == MS:
            if self.p != 1:
                raise ValueError("MS arm has no spatial decimation (p must be 1)")
            if L % self.q:
                raise ValueError(f"q={self.q} does not divide {L} bands")
            want = (L // self.q, M, N)
        else:
            raise ValueError(f"unknown arm {self.arm!r}")
        if (ap.bands, ap.rows, ap.cols) != want:
            raise ValueError(
                f"{self.arm} aperture dims {(ap.bands, ap.rows, ap.cols)} != expected {want}"
            )

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        M, N, L = self.full_dims
        return (L, M, N)

    @property
    def shot_shape(self) -> tuple[int, int, int]:
        ap = self.apertures
        return (ap.shots, ap.rows, ap.cols)

    @property
    def n_measurements(self) -> int:
        return int(np.prod(self.shot_shape))

    def _check(self, arr, shape, what):
        arr = np.asarray(arr)
        if arr.shape != shape:
            raise ValueError(f"{self.arm} {what} shape {arr.shape} != expected {shape}")
        return arr

    def forward(self, cube) -> np.ndarray:
        cube = self._check(cube, self.cube_shape, "cube")
        if self.arm == HS:
            low = spatial_decimate(cube, self.p)
        else:
            low = spectral_decimate(cube, self.q)
        return np.einsum("wlij,lij->wij", self.apertures.mask, low)

    def adjoint(self, shots) -> np.ndarray:
        shots = self._check(shots, self.shot_shape, "shots")
        low = np.einsum("wlij,wij->lij", self.apertures.mask, shots)
        if self.arm == HS:
            p = self.p
            return np.repeat(np.repeat(low, p, axis=1), p, axis=2) / (p * p)
        return np.repeat(low, self.q, axis=0) / self.q

    def normal(self, cube) -> np.ndarray:
        """``H^T H cube``."""
        return self.adjoint(self.forward(cube))

    __call__ = forward

    def manifest(self) -> dict:
        return {
            "arm": self.arm,
            "p": self.p,
            "q": self.q,
            "W": self.apertures.shots,
            "seed": self.apertures.seed,
            "full_dims": list(self.full_dims),
        }


def hs_operator(full_dims, p: int, shots: int, seed: int) -> CassiOperator:
    M, N, L = full_dims
    if M % p or N % p:
        raise ValueError(f"p={p} does not divide {M}x{N}")
    ap = design_apertures(M // p, N // p, L, shots, seed)
    return CassiOperator(HS, ap, tuple(full_dims), p=p)


def ms_operator(full_dims, q: int, shots: int, seed: int) -> CassiOperator:
    M, N, L = full_dims
    if L % q:
        raise ValueError(f"q={q} does not divide {L} bands")
    ap = design_apertures(M, N, L // q, shots, seed)
    return CassiOperator(MS, ap, tuple(full_dims), q=q)


def operator_from_manifest(meta: dict) -> CassiOperator:
    """Rebuild an operator from its manifest entry (aperture design is seeded)."""
    dims = tuple(meta["full_dims"])
    if meta["arm"] == HS:
        return hs_operator(dims, meta["p"], meta["W"], meta["seed"])
    if meta["arm"] == MS:
        return ms_operator(dims, meta["q"], meta["W"], meta["seed"])
    raise ValueError(f"unknown arm {meta['arm']!r}")


def hs_forward(cube, op: CassiOperator) -> np.ndarray:
    if op.arm != HS:
        raise ValueError("hs_forward needs an HS-arm operator")
    return op.forward(cube)


def ms_forward(cube, op: CassiOperator) -> np.ndarray:
    if op.arm != MS:
        raise ValueError("ms_forward needs an MS-arm operator")
    return op.forward(cube)


def hs_adjoint(shots, op: CassiOperator) -> np.ndarray:
    if op.arm != HS:
        raise ValueError("hs_adjoint needs an HS-arm operator")
    return op.adjoint(shots)


def ms_adjoint(shots, op: CassiOperator) -> np.ndarray:
    if op.arm != MS:
        raise ValueError("ms_adjoint needs an MS-arm operator")
    return op.adjoint(shots)


def add_noise(shots, snr_db: float, seed: int) -> np.ndarray:
    """Add iid zero-mean Gaussian noise at ``snr_db`` relative to mean signal power.

    ``snr_db = inf`` returns the input unchanged.
    """
    shots = np.asarray(shots, dtype=np.float64)
    if np.isinf(snr_db) and snr_db > 0:
        return shots.copy()
    power = np.mean(shots**2)
    if power == 0:
        raise ValueError("cannot set a finite SNR on all-zero measurements")
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return shots + sigma * rng.standard_normal(shots.shape)


def save_apertures(op: CassiOperator, directory, prefix: str | None = None) -> Path:
    """Write one ``SCUB`` file per shot plus a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = prefix or f"aperture_{op.arm}"
    files = []
    for w in range(op.apertures.shots):
        name = f"{prefix}_w{w:02d}.scub"
        write_cube(op.apertures.mask[w], directory / name)
        files.append(name)
    meta = op.manifest() | {"files": files}
    path = directory / f"{prefix}.json"
    path.write_text(json.dumps(meta, indent=2))
    return path


def load_apertures(manifest_path) -> CassiOperator:
    """Load an operator from a manifest written by :func:`save_apertures`."""
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    mask = np.stack([read_cube(manifest_path.parent / f).data for f in meta["files"]])
    ap = CodedApertureStack(mask, seed=meta.get("seed"))
    return CassiOperator(meta["arm"], ap, tuple(meta["full_dims"]), p=meta["p"], q=meta["q"])


@dataclass(frozen=True)
class DualArm:
    """The HS and MS arms observing one target cube.

    Measurements travel as a ``(y_hs, y_ms)`` tuple.
    """

    hs: CassiOperator
    ms: CassiOperator

    def __post_init__(self):
        if self.hs.arm != HS or self.ms.arm != MS:
            raise ValueError("DualArm needs an HS-arm and an MS-arm operator")
        if tuple(self.hs.full_dims) != tuple(self.ms.full_dims):
            raise ValueError(f"arm dims differ: {self.hs.full_dims} vs {self.ms.full_dims}")

    @property
    def full_dims(self) -> tuple[int, int, int]:
        return tuple(self.hs.full_dims)

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        return self.hs.cube_shape

    def measure(self, cube):
        return self.hs.forward(cube), self.ms.forward(cube)

    def simulate(self, cube, snr_db: float, noise_seed: int):
        """Noisy ``(y_hs, y_ms)``; the HS arm uses ``noise_seed``, the MS arm ``noise_seed + 1``."""
        y_hs, y_ms = self.measure(cube)
        return add_noise(y_hs, snr_db, noise_seed), add_noise(y_ms, snr_db, noise_seed + 1)

    def initial(self, y) -> np.ndarray:
        """``f0 = (H_ms^T y_ms + H_hs^T y_hs) / 2``."""
        y_hs, y_ms = y
        return 0.5 * self.ms.adjoint(y_ms) + 0.5 * self.hs.adjoint(y_hs)

    def residual_grads(self, f, y):
        """``(H_hs^T (H_hs f - y_hs), H_ms^T (H_ms f - y_ms))``."""
        y_hs, y_ms = y
        return (
            self.hs.adjoint(self.hs.forward(f) - y_hs),
            self.ms.adjoint(self.ms.forward(f) - y_ms),
        )

    def normal_parts(self, v):
        return self.hs.normal(v), self.ms.normal(v)

    def data_misfit(self, f, y):
        """``(||y_hs - H_hs f||^2, ||y_ms - H_ms f||^2)``."""
        y_hs, y_ms = y
        return (
            float(np.sum((y_hs - self.hs.forward(f)) ** 2)),
            float(np.sum((y_ms - self.ms.forward(f)) ** 2)),
        )

    def manifest(self) -> dict:
        return {"hs": self.hs.manifest(), "ms": self.ms.manifest()}

    @classmethod
    def from_manifest(cls, meta: dict) -> "DualArm":
        return cls(operator_from_manifest(meta["hs"]), operator_from_manifest(meta["ms"]))


def dual_arm(full_dims, p: int, q: int, ratio: float, aperture_seed: int) -> DualArm:
    """Both arms at compression ratio ``ratio`` (snapshots per arm ``round(ratio * bands)``)."""
    M, N, L = full_dims
    if L % q:
        raise ValueError(f"q={q} does not divide {L} bands")
    w_hs = shots_for_ratio(ratio, L)
    w_ms = shots_for_ratio(ratio, L // q)
    return DualArm(
        hs_operator(full_dims, p, w_hs, aperture_seed),
        ms_operator(full_dims, q, w_ms, aperture_seed + 1),
    )
