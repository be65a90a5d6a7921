"""LADMM-Net: K unrolled LADMM iterations with learned scalars and transforms.

Layer ``k`` maps ``(f, d, r)`` from the previous layer to new values:

* approximation unit (AU)::

      f_k = f - (g_hs + lambda1 * g_ms + rho * r) / alpha

  where ``g_hs, g_ms`` are the data-term gradients supplied by the
  acquisition model (``ops.residual_grads``);

* refinement unit (NRU)::

      u   = G(f_k)                   forward transform
      b   = S_soft_lambda(u + d)     soft threshold
      d_k = d + u - b
      r_k = Ginv(u + d_k - b)        inverse transform of the residual

The first layer receives ``d = r = 0``. ``ops`` is any object with
``initial(y)``, ``residual_grads(f, y)`` and ``normal_parts(v)`` (see
:class:`ladmmnet.cassi.DualArm` and :class:`ladmmnet.cs.BlockSensing`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transforms import ConvTransform

ALPHA0, RHO0, LAMBDA1_0, SOFT_LAMBDA0 = 0.5, 0.1, 1.0, 0.01

CKPT_MAGIC = b"LDMN"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the requested network."""


class NetworkDiverged(FloatingPointError):
    """A layer produced non-finite values."""


def _copy_transform(t):
    return t.copy() if isinstance(t, ConvTransform) else t


@dataclass
class LayerParams:
    alpha: float
    rho: float
    lambda1: float
    soft_lambda: float
    nft: ConvTransform
    nit: ConvTransform

    SCALARS = ("alpha", "rho", "lambda1", "soft_lambda")

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.alpha, self.rho, self.lambda1, self.soft_lambda,
            _copy_transform(self.nft), _copy_transform(self.nit),
        )

    @property
    def n_params(self) -> int:
        n = len(self.SCALARS)
        for t in (self.nft, self.nit):
            if isinstance(t, ConvTransform):
                n += t.n_params
        return n


@dataclass
class LadmmNetParams:
    """Learnable set: per-layer scalars plus independent NFT/NIT kernels."""

    layers: list[LayerParams]
    feature_maps: int
    dims: tuple[int, int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        self.dims = tuple(int(v) for v in self.dims)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def copy(self) -> "LadmmNetParams":
        return LadmmNetParams(
            [layer.copy() for layer in self.layers], self.feature_maps, self.dims, dict(self.meta)
        )

    def groups(self):
        """``(name, size)`` for every parameter group, in flat (checkpoint) order."""
        out = []
        for k, layer in enumerate(self.layers, start=1):
            for s in LayerParams.SCALARS:
                out.append((f"layer{k}.{s}", 1))
            for tname in ("nft", "nit"):
                t = getattr(layer, tname)
                out.append((f"layer{k}.{tname}.conv1", t.conv1.size))
                out.append((f"layer{k}.{tname}.conv2", t.conv2.size))
        return out

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer (checkpoint payload order)."""
        parts = []
        for layer in self.layers:
            parts.append(np.array([getattr(layer, s) for s in LayerParams.SCALARS], dtype=np.float64))
            for t in (layer.nft, layer.nit):
                parts.extend([t.conv1.ravel(), t.conv2.ravel()])
        return np.concatenate(parts)

    def with_flat(self, vec) -> "LadmmNetParams":
        """A new parameter set holding the values of ``vec`` (inverse of :meth:`flat`)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ValueError(f"flat vector has {vec.size} entries, network needs {self.n_params}")
        layers, pos = [], 0
        for layer in self.layers:
            scalars = [float(v) for v in vec[pos:pos + 4]]
            pos += 4
            transforms = []
            for t in (layer.nft, layer.nit):
                n1, n2 = t.conv1.size, t.conv2.size
                c1 = vec[pos:pos + n1].reshape(t.conv1.shape)
                c2 = vec[pos + n1:pos + n1 + n2].reshape(t.conv2.shape)
                pos += n1 + n2
                transforms.append(ConvTransform(c1.copy(), c2.copy()))
            layers.append(LayerParams(*scalars, *transforms))
        return LadmmNetParams(layers, self.feature_maps, self.dims, dict(self.meta))


def init_params(dims, feature_maps: int = 32, n_layers: int = 5, seed: int = 0,
                alpha: float = ALPHA0, rho: float = RHO0, lambda1: float = LAMBDA1_0,
                soft_lambda: float = SOFT_LAMBDA0) -> LadmmNetParams:
    """Xavier-uniform kernels and constant scalar initialisation for every layer.

    Args:
        dims: ``(M, N, L)``; only ``L`` shapes the kernels.
        feature_maps: ``F``, channels between the two convolutions.
        n_layers: ``K``.
        seed: Kernel RNG seed.
    """
    if n_layers < 1 or feature_maps < 1:
        raise ValueError("n_layers and feature_maps must be >= 1")
    M, N, L = dims
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        nft = ConvTransform.xavier(rng, L, feature_maps)
        nit = ConvTransform.xavier(rng, L, feature_maps)
        layers.append(LayerParams(alpha, rho, lambda1, soft_lambda, nft, nit))
    return LadmmNetParams(layers, feature_maps, (M, N, L), {"init_seed": seed})


def init_f0(y, ops) -> np.ndarray:
    """Back-projection initialiser supplied by the acquisition model."""
    return ops.initial(y)


def shrink(x, lam: float) -> np.ndarray:
    """Soft threshold without the ``lam >= 0`` guard (learned thresholds are unconstrained)."""
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def au_forward(f_prev, r_prev, y, ops, layer: LayerParams, cache: dict | None = None) -> np.ndarray:
    """Approximation unit: one learned linearized gradient step."""
    if layer.alpha == 0:
        raise ZeroDivisionError("alpha = 0 gives a singular step")
    g_hs, g_ms = ops.residual_grads(f_prev, y)
    grad = g_hs + layer.rho * r_prev
    if g_ms is not None:
        grad = grad + layer.lambda1 * g_ms
    f = f_prev - grad / layer.alpha
    if cache is not None:
        cache.update(grad=grad, g_ms=g_ms)
    return f


def _nru(f_k, d_prev, layer: LayerParams, cache: dict | None):
    if cache is None:
        u = layer.nft(f_k)
    else:
        u, cache["nft"] = layer.nft.forward(f_k, cache=True)
    if u.shape != d_prev.shape:
        raise ValueError(f"transform output {u.shape} does not match multiplier {d_prev.shape}")
    s = u + d_prev
    b = shrink(s, layer.soft_lambda)
    d = s - b
    t = u + d - b
    if cache is None:
        r = layer.nit(t)
    else:
        r, cache["nit"] = layer.nit.forward(t, cache=True)
        cache["s"] = s
    return u, b, d, r


def nru_forward(f_k, d_prev, layer: LayerParams, cache: dict | None = None):
    """Refinement unit; returns ``(b, d, r)``."""
    _, b, d, r = _nru(f_k, d_prev, layer, cache)
    return b, d, r


@dataclass
class LayerRecord:
    """Forward values of one layer, kept for the invertibility loss and backprop."""

    f_in: np.ndarray
    r_in: np.ndarray
    f: np.ndarray
    u: np.ndarray
    b: np.ndarray
    d: np.ndarray
    r: np.ndarray
    cache: dict | None = None
    inv: np.ndarray | None = None


def net_forward(params: LadmmNetParams, y, ops, keep_cache: bool = False,
                with_inverse: bool = False):
    """Run all layers from ``f0``.

    Returns:
        ``(f_K, trace)`` where ``trace`` holds one :class:`LayerRecord` per
        layer (``f`` is the layer's AU output, ``u`` its transform). With
        ``with_inverse`` each record also carries ``inv = Ginv(G(f))``.
    """
    M, N, L = params.dims
    if tuple(ops.cube_shape) != (L, M, N):
        raise ValueError(f"network dims {params.dims} do not match operator cube shape {ops.cube_shape}")
    f = ops.initial(y)
    if f.shape[-3:] != (L, M, N):
        raise ValueError(f"initial estimate shape {f.shape} does not match network dims {params.dims}")
    d = np.zeros_like(f)
    r = np.zeros_like(f)
    trace = []
    for k, layer in enumerate(params.layers):
        cache = {} if keep_cache else None
        f_new = au_forward(f, r, y, ops, layer, cache)
        u, b, d_new, r_new = _nru(f_new, d, layer, cache)
        rec = LayerRecord(f, r, f_new, u, b, d_new, r_new, cache)
        if with_inverse:
            if keep_cache:
                rec.inv, cache["inv"] = layer.nit.forward(u, cache=True)
            else:
                rec.inv = layer.nit(u)
        if not np.all(np.isfinite(f_new)) or not np.all(np.isfinite(r_new)):
            raise NetworkDiverged(f"non-finite values in layer {k + 1}")
        trace.append(rec)
        f, d, r = f_new, d_new, r_new
    return f, trace


def save_checkpoint(params: LadmmNetParams, path) -> None:
    """Versioned container: magic, version, header length, JSON header, float64 payload."""
    for layer in params.layers:
        if not (isinstance(layer.nft, ConvTransform) and isinstance(layer.nit, ConvTransform)):
            raise CheckpointError("only learnable (convolutional) transforms can be checkpointed")
    header = {
        "dims": list(params.dims),
        "layers": params.n_layers,
        "feature_maps": params.feature_maps,
        "n_params": params.n_params,
        "meta": params.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path, n_layers: int | None = None, dims=None) -> LadmmNetParams:
    """Load a checkpoint, optionally insisting on a layer count and cube dims."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a LADMM-Net checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    K, F = header["layers"], header["feature_maps"]
    M, N, L = header["dims"]
    if n_layers is not None and n_layers != K:
        raise CheckpointError(f"shape mismatch: checkpoint has K={K} layers, expected {n_layers}")
    if dims is not None and tuple(dims) != (M, N, L):
        raise CheckpointError(f"shape mismatch: checkpoint dims {(M, N, L)}, expected {tuple(dims)}")
    per_layer = 4 + 36 * F * L
    payload = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEAD.size + hlen)
    if payload.size != K * per_layer:
        raise CheckpointError(
            f"shape mismatch: payload holds {payload.size} values, K={K}, F={F}, L={L} needs {K * per_layer}"
        )
    layers = []
    n_kernel = 9 * F * L
    for k in range(K):
        chunk = payload[k * per_layer:(k + 1) * per_layer].astype(np.float64)
        scalars = [float(v) for v in chunk[:4]]
        ker = chunk[4:]
        parts = [ker[i * n_kernel:(i + 1) * n_kernel] for i in range(4)]
        nft = ConvTransform(parts[0].reshape(F, L, 3, 3), parts[1].reshape(L, F, 3, 3))
        nit = ConvTransform(parts[2].reshape(F, L, 3, 3), parts[3].reshape(L, F, 3, 3))
        layers.append(LayerParams(*scalars, nft, nit))
    return LadmmNetParams(layers, F, (M, N, L), header.get("meta", {}))
