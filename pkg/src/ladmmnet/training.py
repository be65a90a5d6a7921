"""Loss, exact reverse-mode gradients, Adam and the training loop for LADMM-Net.

The unrolled graph is fixed, so backpropagation is written out layer by
layer against the records produced by :func:`ladmmnet.network.net_forward`
rather than through a general autodiff engine. Subgradient conventions:
ReLU'(0) = 0 and the soft threshold has zero derivative on and inside
``|x| <= lambda``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import LadmmNetParams, NetworkDiverged, net_forward, save_checkpoint

log = logging.getLogger(__name__)

GAMMA = 0.1
LEARNING_RATE = 5e-4


class TrainingDiverged(FloatingPointError):
    """Loss or gradients became non-finite; ``params`` holds the last good set."""

    def __init__(self, message, params=None, epoch=None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = LEARNING_RATE
    epochs: int = 256
    batch_size: int = 1
    gamma: float = GAMMA
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class LossParts:
    total: float
    data: float
    inv: float


@dataclass
class GradientSet:
    """Gradients laid out exactly like ``LadmmNetParams.flat()``."""

    flat: np.ndarray
    groups: list = field(default_factory=list)

    def group(self, name: str) -> np.ndarray:
        pos = 0
        for gname, size in self.groups:
            if gname == name:
                return self.flat[pos:pos + size]
            pos += size
        raise KeyError(name)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))


def _n_items(truth) -> int:
    # a 4-D truth is a stack of cubes evaluated together; losses are per-item means
    return truth.shape[0] if np.ndim(truth) == 4 else 1


def _sample_loss(params, sample, ops, gamma):
    truth, y = sample
    nb = _n_items(truth)
    f_hat, trace = net_forward(params, y, ops, with_inverse=gamma != 0)
    data = float(np.sum((f_hat - truth) ** 2)) / nb
    inv = 0.0
    if gamma != 0:
        inv = sum(float(np.sum((rec.inv - rec.f) ** 2)) for rec in trace) / (len(trace) * nb)
    return data, inv


def loss(params: LadmmNetParams, samples, ops, gamma: float = GAMMA) -> LossParts:
    """Batch-mean ``||f_hat - f||^2 + gamma * mean_k ||Ginv(G(f_k)) - f_k||^2``.

    ``samples`` is a list of ``(truth, y)`` pairs, or a single pair. The
    invertibility term is only evaluated when ``gamma != 0``.
    """
    if isinstance(samples, tuple):
        samples = [samples]
    data = inv = 0.0
    for sample in samples:
        d, i = _sample_loss(params, sample, ops, gamma)
        data += d
        inv += i
    data /= len(samples)
    inv /= len(samples)
    return LossParts(data + gamma * inv, data, inv)


def inverse_error(params: LadmmNetParams, samples, ops) -> float:
    """The invertibility term alone (batch mean), regardless of ``gamma``."""
    return loss(params, samples, ops, gamma=1.0).inv


def _layer_backward(layer, rec, ops, gamma_k, gf, gd, gr):
    """Backprop one layer. Returns upstream ``(gf, gd, gr)`` and this layer's gradients."""
    c = rec.cache
    grads = {}

    # r_k = Ginv(t), t = u + d_k - b
    if gr is not None:
        gt, grads["nit.conv1"], grads["nit.conv2"] = layer.nit.backward(c["nit"], gr)
    else:
        gt = np.zeros_like(rec.u)
        grads["nit.conv1"] = np.zeros_like(layer.nit.conv1)
        grads["nit.conv2"] = np.zeros_like(layer.nit.conv2)
    gu = gt.copy()
    gd_k = gt if gd is None else gd + gt
    gb = -gt

    if gamma_k:
        diff = rec.inv - rec.f
        g_inv, a1, a2 = layer.nit.backward(c["inv"], 2.0 * gamma_k * diff)
        gu += g_inv
        grads["nit.conv1"] = grads["nit.conv1"] + a1
        grads["nit.conv2"] = grads["nit.conv2"] + a2
        gf = gf - 2.0 * gamma_k * diff

    # d_k = s - b
    gs = gd_k.copy()
    gb = gb - gd_k
    # b = shrink(s, soft_lambda)
    s = c["s"]
    active = np.abs(s) > layer.soft_lambda
    gs += gb * active
    grads["soft_lambda"] = -float(np.sum(gb * np.sign(s) * active))
    # s = u + d_prev
    gu += gs
    gd_prev = gs
    # u = G(f_k)
    g_fk, grads["nft.conv1"], grads["nft.conv2"] = layer.nft.backward(c["nft"], gu)
    gf = gf + g_fk

    # f_k = f_in - grad / alpha, grad = g_hs + lambda1 g_ms + rho r_in
    alpha = layer.alpha
    grads["alpha"] = float(np.sum(gf * c["grad"])) / alpha**2
    g_grad = -gf / alpha
    n_hs, n_ms = ops.normal_parts(g_grad)
    gf_prev = gf + n_hs
    if c["g_ms"] is not None:
        gf_prev = gf_prev + layer.lambda1 * n_ms
        grads["lambda1"] = float(np.sum(g_grad * c["g_ms"]))
    else:
        grads["lambda1"] = 0.0
    grads["rho"] = float(np.sum(g_grad * rec.r_in))
    gr_prev = layer.rho * g_grad
    return gf_prev, gd_prev, gr_prev, grads


def _flatten_layer_grads(params, per_layer):
    parts = []
    for layer_grads in per_layer:
        parts.append(np.array([layer_grads[s] for s in ("alpha", "rho", "lambda1", "soft_lambda")]))
        for name in ("nft.conv1", "nft.conv2", "nit.conv1", "nit.conv2"):
            parts.append(np.ravel(layer_grads[name]))
    return GradientSet(np.concatenate(parts), params.groups())


def sample_backward(params: LadmmNetParams, sample, ops, gamma: float = GAMMA):
    """Loss and exact gradient for one ``(truth, y)`` sample."""
    truth, y = sample
    nb = _n_items(truth)
    f_hat, trace = net_forward(params, y, ops, keep_cache=True, with_inverse=gamma != 0)
    K = len(trace)
    err = f_hat - truth
    data = float(np.sum(err**2)) / nb
    inv = 0.0
    if gamma != 0:
        inv = sum(float(np.sum((rec.inv - rec.f) ** 2)) for rec in trace) / (K * nb)
    total = data + gamma * inv
    if not np.isfinite(total):
        raise NetworkDiverged("non-finite loss")

    gf, gd, gr = 2.0 * err / nb, None, None
    per_layer = [None] * K
    for k in range(K - 1, -1, -1):
        gf, gd, gr, per_layer[k] = _layer_backward(
            params.layers[k], trace[k], ops, gamma / (K * nb), gf, gd, gr
        )
    grads = _flatten_layer_grads(params, per_layer)
    if not np.all(np.isfinite(grads.flat)):
        raise NetworkDiverged("non-finite gradient")
    return LossParts(total, data, inv), grads


def backward(params: LadmmNetParams, samples, ops, gamma: float = GAMMA):
    """Batch-mean loss and gradient with respect to every learnable parameter.

    Returns:
        ``(LossParts, GradientSet)``.
    """
    if isinstance(samples, tuple):
        samples = [samples]
    acc = None
    data = inv = 0.0
    for sample in samples:
        parts, g = sample_backward(params, sample, ops, gamma)
        data += parts.data
        inv += parts.inv
        acc = g.flat if acc is None else acc + g.flat
    n = len(samples)
    return (
        LossParts((data + gamma * inv) / n, data / n, inv / n),
        GradientSet(acc / n, params.groups()),
    )


def _activation_pattern(params, y, ops, gamma):
    """Return ``(threshold_bits, relu_bits)`` describing every kink decision."""
    _, trace = net_forward(params, y, ops, keep_cache=True, with_inverse=gamma != 0)
    soft, relu = [], []
    for layer, rec in zip(params.layers, trace):
        c = rec.cache
        soft.append((np.abs(c["s"]) > layer.soft_lambda).ravel())
        for key in ("nft", "nit", "inv"):
            if key in c:
                relu.append((c[key][1] > 0).ravel())
    return np.concatenate(soft), np.concatenate(relu) if relu else np.zeros(0, bool)


@dataclass
class GradCheckReport:
    groups: dict
    tol: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.groups.values())

    @property
    def failures(self) -> list:
        return [name for name, err in self.groups.items() if err > self.tol]

    def __str__(self):
        lines = [f"{name:28s} {err:.3e} {'ok' if err <= self.tol else 'FAIL'}"
                 for name, err in self.groups.items()]
        lines.append(f"skipped near-kink entries: {self.skipped}")
        return "\n".join(lines)


def finite_diff_check(params: LadmmNetParams, sample, ops, step: float = 1e-5,
                      tol: float = 1e-5, gamma: float = GAMMA, grads: GradientSet | None = None,
                      max_per_group: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences, group by group.

    The error of a group is ``max |analytic - numeric| / max(|analytic|, |numeric|)``
    over its checked entries. An entry is skipped as kink-adjacent when moving
    it by ``10 * step`` flips a soft-threshold decision, or when the
    difference stencil itself (a move of ``step``) flips a ReLU decision.
    ``grads`` may be supplied to check an externally computed gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grads is None:
        _, grads = backward(params, sample, ops, gamma)
    theta = params.flat()
    truth, y = sample
    base_pattern = _activation_pattern(params, y, ops, gamma)
    rng = np.random.default_rng(seed)

    def total_at(vec):
        return loss(params.with_flat(vec), sample, ops, gamma).total

    def pattern_at(i, delta):
        vec = theta.copy()
        vec[i] += delta
        return _activation_pattern(params.with_flat(vec), y, ops, gamma)

    def near_kink(i):
        relu_moved = False
        for sgn in (1.0, -1.0):
            soft, relu = pattern_at(i, sgn * 10.0 * step)
            if not np.array_equal(soft, base_pattern[0]):
                return True
            relu_moved |= not np.array_equal(relu, base_pattern[1])
        if relu_moved:
            for sgn in (1.0, -1.0):
                if not np.array_equal(pattern_at(i, sgn * step)[1], base_pattern[1]):
                    return True
        return False

    report = {}
    skipped = 0
    pos = 0
    for name, size in params.groups():
        idx = np.arange(pos, pos + size)
        if max_per_group is not None and size > max_per_group:
            idx = np.sort(rng.choice(idx, max_per_group, replace=False))
        ana, num = [], []
        for i in idx:
            if near_kink(i):
                skipped += 1
                continue
            vp, vm = theta.copy(), theta.copy()
            vp[i] += step
            vm[i] -= step
            num.append((total_at(vp) - total_at(vm)) / (2.0 * step))
            ana.append(grads.flat[i])
        pos += size
        if not ana:
            continue
        ana, num = np.array(ana), np.array(num)
        scale = max(np.max(np.abs(ana)), np.max(np.abs(num)))
        report[name] = 0.0 if scale == 0 else float(np.max(np.abs(ana - num)) / scale)
    return GradCheckReport(report, tol, skipped)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(theta, grad, state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step on a flat vector; mutates ``state``."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad**2
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(params: LadmmNetParams, grads: GradientSet, moments: AdamState,
              cfg: TrainingConfig) -> LadmmNetParams:
    """Adam (beta1 0.9, beta2 0.999, eps 1e-8) on every learnable parameter."""
    theta = adam_update(params.flat(), grads.flat, moments, cfg.learning_rate)
    return params.with_flat(theta)


def _clip(grads: GradientSet, max_norm: float | None) -> GradientSet:
    if max_norm is None:
        return grads
    norm = grads.norm()
    if norm > max_norm:
        return GradientSet(grads.flat * (max_norm / norm), grads.groups)
    return grads


def train(params: LadmmNetParams, dataset, ops, cfg: TrainingConfig,
          checkpoint_path=None, progress=None, stack_batches: bool = False):
    """Train on ``dataset`` (list of ``(truth, y)``) with Adam.

    Sample order is reshuffled every epoch from ``cfg.seed``. History rows are
    ``(epoch, data, inv, total)`` averaged over the samples of the epoch
    (losses are those seen before each update). When ``checkpoint_path`` is
    given and ``cfg.checkpoint_every > 0`` the current parameters are saved
    every that many epochs and at the end. ``stack_batches`` evaluates each
    mini-batch as one stacked array (only for acquisition models that accept
    leading batch axes, such as block CS).

    Raises:
        TrainingDiverged: On a non-finite loss or gradient; the last good
            parameters are attached (and written to ``checkpoint_path``).
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    moments = AdamState.zeros(params.n_params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            n_batch = len(batch)
            if stack_batches:
                batch = [(np.stack([b[0] for b in batch]), np.stack([b[1] for b in batch]))]
            try:
                parts, grads = backward(params, batch, ops, cfg.gamma)
            except (NetworkDiverged, FloatingPointError) as exc:
                if checkpoint_path is not None:
                    save_checkpoint(params, checkpoint_path)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params, epoch) from exc
            sums += np.array([parts.data, parts.inv, parts.total]) * n_batch
            grads = _clip(grads, cfg.grad_clip)
            if cfg.learning_rate > 0:
                params = adam_step(params, grads, moments, cfg)
        data, inv, total = sums / len(dataset)
        history.append((epoch, data, inv, total))
        if progress is not None:
            progress(epoch, data, inv, total)
        log.debug("epoch %d: data %.6g inv %.6g total %.6g", epoch, data, inv, total)
        if checkpoint_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(params, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return params, history


def write_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,data_loss,inv_loss,total\n")
        for epoch, data, inv, total in history:
            fh.write(f"{epoch},{data:.10g},{inv:.10g},{total:.10g}\n")
