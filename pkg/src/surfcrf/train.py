"""Losses, analytic reverse-mode gradients through the unrolled mean-field
iterations, finite-difference verification, and gradient-descent fitting of
the CRF scalars plus a global unary scale."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import accel
from .crf import (CrfParams, UnaryField, compat_matrix, compute_kernel,
                  refresh_duplicates, softmax)
from .patches import ColumnGraph, GroundTruth, PatchSet

SCALAR_NAMES = ("w_p", "w1", "theta1", "theta2", "theta3", "theta_comp", "unary_scale")
_WIDTHS = ("theta1", "theta2", "theta3", "theta_comp")


LOGIT_GUARD = 30.0


class FitDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"fit diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class LossReport:
    loss: float
    grads: dict[str, float]
    dlogits: np.ndarray


@dataclass
class FitConfig:
    lr: float = 0.05
    epochs: int = 100
    momentum: float = 0.9
    seed: int = 0
    trainable: tuple[str, ...] = SCALAR_NAMES
    grad_mode: str = "analytic"  # analytic | fd
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        unknown = set(self.trainable) - set(SCALAR_NAMES)
        if unknown:
            raise ValueError(f"unknown trainable parameters: {sorted(unknown)}")
        if self.grad_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class FitResult:
    params: CrfParams
    unary_scale: float
    curve: np.ndarray  # per-epoch mean MCE, plus a final post-update entry

    def to_json(self) -> str:
        return json.dumps({"params": asdict(self.params),
                           "unary_scale": self.unary_scale,
                           "curve": self.curve.tolist()}, sort_keys=True)


# ---------------------------------------------------------------------------
# losses


def wbce_loss(logits, mask, weight: float) -> float:
    """Mean over voxels of -[w*m*log sigma(l) + (1-m)*log(1-sigma(l))]."""
    if weight <= 0:
        raise ValueError("weight must be > 0")
    l = np.clip(np.asarray(logits, dtype=np.float64), -LOGIT_GUARD, LOGIT_GUARD)
    m = np.asarray(mask, dtype=np.float64)
    log_sig = -np.logaddexp(0.0, -l)
    log_one_minus = -np.logaddexp(0.0, l)
    return float(-(weight * m * log_sig + (1.0 - m) * log_one_minus).mean())


def mce_loss(q_or_logits: np.ndarray, gt: GroundTruth, from_logits: bool = False) -> float:
    """Mean over valid columns of -log Q_i(g_i)."""
    q = np.asarray(q_or_logits, dtype=np.float64)
    if from_logits:
        q = softmax(q)
    if not gt.valid.any():
        raise ValueError("no valid ground-truth columns")
    rows = np.nonzero(gt.valid)[0]
    return float(-np.log(q[rows, gt.surface_index[rows]]).mean())


# ---------------------------------------------------------------------------
# differentiable forward pass (kernel features frozen)


def _softmax_backward(q, dq):
    return q * (dq - (dq * q).sum(axis=-1, keepdims=True))


def _refresh_adjoint(dr: np.ndarray, graph: ColumnGraph) -> np.ndarray:
    flat = dr.reshape(-1, dr.shape[-1])
    src = graph.dup_src.ravel()
    ok = src >= 0
    out = np.zeros_like(flat)
    np.add.at(out, src[ok], flat[ok])
    return out.reshape(dr.shape)


def frozen_kernel_stats(u: UnaryField, params: CrfParams, ps: PatchSet | None = None):
    """The stop-gradient kernel inputs: squared feature distances, the valid
    (deduplicated) pair mask, and squared spatial offsets.  Held constant by
    fd_check too."""
    kf = compute_kernel(u, params, ps=ps)
    offs = kf.offsets
    d2 = (offs[:, 0] ** 2 + offs[:, 1] ** 2).astype(np.float64)
    return kf.feat_dist, kf.mask, d2, offs


def _forward(logits_raw, scale, graph, fd, mask, d2, offs, params, gt, T, want_caches=False):
    """MCE loss of T unrolled mean-field iterations; fd/mask are constants."""
    it1 = 1.0 / (2.0 * params.theta1 ** 2)
    it2 = 1.0 / (2.0 * params.theta2 ** 2)
    it3 = 1.0 / (2.0 * params.theta3 ** 2)
    l = scale * logits_raw
    spatial = d2[None, None, None, :]
    app = np.where(mask, np.exp(-spatial * it1 - fd * it2), 0.0)
    sm = np.where(mask, np.exp(-spatial * it3), 0.0)
    w = app + params.w1 * sm
    m = compat_matrix(logits_raw.shape[-1], params.theta_comp)

    q = softmax(l)
    caches = []
    q0 = q
    for _ in range(T):
        r = refresh_duplicates(q, graph)
        q_tilde = accel.window_sum(r, w, offs)
        q_hat = q_tilde @ m
        s = l - params.w_p * q_hat
        q = softmax(s)
        caches.append((r, q_tilde, q_hat, q))
    merged = graph.merge(q)
    rows = np.nonzero(gt.valid)[0]
    picked = merged[rows, gt.surface_index[rows]]
    loss = float(-np.log(picked).mean())
    if not want_caches:
        return loss
    return loss, dict(l=l, app=app, sm=sm, w=w, m=m, q0=q0, caches=caches,
                      merged=merged, rows=rows, it=(it1, it2, it3), spatial=spatial)


def meanfield_grad(u: UnaryField, params: CrfParams, gt: GroundTruth,
                   T: int | None = None, unary_scale: float = 1.0,
                   ps: PatchSet | None = None,
                   frozen=None) -> LossReport:
    """Exact reverse-mode derivatives of the MCE loss after T mean-field
    iterations w.r.t. all scalars and all input logits, with the kernel
    features treated as constants of the forward pass."""
    T = params.iterations if T is None else T
    graph = u.graph
    logits_raw = u.logits
    if frozen is None:
        frozen = frozen_kernel_stats(
            UnaryField(graph=graph, logits=unary_scale * logits_raw), params, ps=ps)
    fd, mask, d2, offs = frozen
    loss, c = _forward(logits_raw, unary_scale, graph, fd, mask, d2, offs,
                       params, gt, T, want_caches=True)

    merged = c["merged"]
    rows = c["rows"]
    n_valid = len(rows)
    d_merged = np.zeros_like(merged)
    g_idx = gt.surface_index[rows]
    d_merged[rows, g_idx] = -1.0 / (n_valid * merged[rows, g_idx])

    # merge adjoint: scatter vertex grads onto owning slots
    owner = graph.owner_slots()
    dq = np.zeros_like(c["l"])
    dq.reshape(-1, dq.shape[-1])[owner] = d_merged

    m = c["m"]
    w = c["w"]
    dl = np.zeros_like(c["l"])
    dwp = 0.0
    dm = np.zeros_like(m)
    dw = np.zeros_like(w)
    for t in range(T - 1, -1, -1):
        r, q_tilde, q_hat, q = c["caches"][t]
        ds = _softmax_backward(q, dq)
        dl += ds
        dq_hat = -params.w_p * ds
        dwp += float(-(ds * q_hat).sum())
        dq_tilde = dq_hat @ m.T
        dm += np.einsum("pyxl,pyxm->lm", q_tilde, dq_hat)
        dr = accel.window_sum_adjoint(dq_tilde, w, offs)
        dw += accel.window_weight_grad(dq_tilde, r, offs)
        dq = _refresh_adjoint(dr, graph)
    dl += _softmax_backward(c["q0"], dq)

    it1, it2, it3 = c["it"]
    app = c["app"]
    sm = c["sm"]
    spatial = c["spatial"]
    d_theta1 = float((dw * app * spatial).sum() / params.theta1 ** 3)
    d_theta2 = float((dw * app * fd).sum() / params.theta2 ** 3)
    d_w1 = float((dw * sm).sum())
    d_theta3 = float((dw * params.w1 * sm * spatial).sum() / params.theta3 ** 3)

    z = logits_raw.shape[-1]
    idx = np.arange(z)
    delta2 = (idx[:, None] - idx[None, :]) ** 2
    dmu_dtc = -np.exp(-delta2 / params.theta_comp ** 2) * (2.0 * delta2 / params.theta_comp ** 3)
    d_theta_comp = float((dm * dmu_dtc).sum())

    d_scale = float((dl * logits_raw).sum())
    dlogits = unary_scale * dl
    grads = {"w_p": dwp, "w1": d_w1, "theta1": d_theta1, "theta2": d_theta2,
             "theta3": d_theta3, "theta_comp": d_theta_comp, "unary_scale": d_scale}
    for name, val in grads.items():
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite gradient for {name}")
    if not np.isfinite(dlogits).all():
        raise RuntimeError("non-finite logit gradient")
    return LossReport(loss=loss, grads=grads, dlogits=dlogits)


# ---------------------------------------------------------------------------
# finite-difference verification


def central_difference(fn, x0: float, step: float) -> float:
    return (fn(x0 + step) - fn(x0 - step)) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    scale = max(abs(a), abs(b))
    if scale < 1e-12:
        return 0.0
    return abs(a - b) / max(scale, floor)


def fd_check(u: UnaryField, params: CrfParams, gt: GroundTruth, T: int | None = None,
             unary_scale: float = 1.0, scalar_step: float = 1e-3,
             logit_step: float = 1e-2, n_logits: int = 100, seed: int = 0,
             ps: PatchSet | None = None) -> dict:
    """Central-difference check of every trainable scalar plus a random subset
    of logits, against the analytic gradients; kernel features frozen on both
    sides.  Returns per-parameter relative errors and the worst case."""
    T = params.iterations if T is None else T
    graph = u.graph
    frozen = frozen_kernel_stats(
        UnaryField(graph=graph, logits=unary_scale * u.logits), params, ps=ps)
    fd, mask, d2, offs = frozen
    report = meanfield_grad(u, params, gt, T=T, unary_scale=unary_scale, frozen=frozen)

    def loss_with(p: CrfParams, scale: float, logits: np.ndarray) -> float:
        return _forward(logits, scale, graph, fd, mask, d2, offs, p, gt, T)

    errors = {}
    base_kwargs = dict(w_p=params.w_p, w1=params.w1, theta1=params.theta1,
                       theta2=params.theta2, theta3=params.theta3,
                       theta_comp=params.theta_comp,
                       window_radius=params.window_radius,
                       iterations=params.iterations,
                       kernel_variant=params.kernel_variant)
    for name in SCALAR_NAMES:
        if name == "unary_scale":
            fn = lambda x: loss_with(params, x, u.logits)
            x0 = unary_scale
        else:
            def fn(x, _name=name):
                kw = dict(base_kwargs)
                kw[_name] = x
                return loss_with(CrfParams(**kw), unary_scale, u.logits)
            x0 = base_kwargs[name]
        step = scalar_step
        if name in _WIDTHS:  # keep the probe positive
            step = min(step, 0.4 * x0)
        num = central_difference(fn, x0, step)
        errors[name] = relative_error(report.grads[name], num)

    rng = np.random.default_rng(seed)
    flat = u.logits.reshape(-1)
    pick = rng.choice(flat.size, size=min(n_logits, flat.size), replace=False)
    worst_logit = 0.0
    for j in pick:
        step = logit_step * max(1.0, abs(flat[j]))

        def fn(x, _j=j):
            pert = flat.copy()
            pert[_j] = x
            return loss_with(params, unary_scale, pert.reshape(u.logits.shape))
        num = central_difference(fn, float(flat[j]), step)
        worst_logit = max(worst_logit, relative_error(float(report.dlogits.reshape(-1)[j]), num))
    errors["logits"] = worst_logit
    errors["max"] = max(errors.values())
    return errors


# ---------------------------------------------------------------------------
# fitting


def _pack(params: CrfParams, scale: float) -> np.ndarray:
    return np.asarray([scale if name == "unary_scale" else getattr(params, name)
                       for name in SCALAR_NAMES])


def _unpack(vec: np.ndarray, template: CrfParams):
    kw = dict(window_radius=template.window_radius, iterations=template.iterations,
              kernel_variant=template.kernel_variant)
    scale = 1.0
    for name, v in zip(SCALAR_NAMES, vec):
        if name == "unary_scale":
            scale = float(v)
        else:
            kw[name] = float(v)
    return CrfParams(**kw), scale


_IS_WIDTH = np.asarray([name in _WIDTHS for name in SCALAR_NAMES])


def fit(dataset, init: CrfParams, cfg: FitConfig, unary_scale: float = 1.0) -> FitResult:
    """Gradient descent with momentum on the trainable scalars over a dataset
    of (PatchSet, UnaryField, GroundTruth) instances.  Widths are optimized in
    log space so they stay positive; deterministic for a given seed and
    dataset order."""
    if not dataset:
        raise ValueError("dataset is empty")
    vec = _pack(init, unary_scale)
    velocity = np.zeros_like(vec)
    train_mask = np.asarray([name in cfg.trainable for name in SCALAR_NAMES])
    curve = []
    for epoch in range(cfg.epochs):
        params, scale = _unpack(vec, init)
        total_loss = 0.0
        total_grad = np.zeros_like(vec)
        for ps, u, gt in dataset:
            try:
                rep = _instance_grad(u, params, gt, scale, cfg, ps)
            except RuntimeError as exc:  # non-finite forward/backward
                raise FitDivergedError(epoch) from exc
            total_loss += rep.loss
            for i, name in enumerate(SCALAR_NAMES):
                g = rep.grads[name]
                if name in _WIDTHS:  # chain through log-space parameterization
                    g *= getattr(params, name)
                total_grad[i] += g
        mean_loss = total_loss / len(dataset)
        if not np.isfinite(mean_loss):
            raise FitDivergedError(epoch)
        curve.append(mean_loss)
        total_grad /= len(dataset)
        velocity = cfg.momentum * velocity - cfg.lr * total_grad
        # widths update multiplicatively (gradient descent on log theta), so
        # they stay positive and frozen parameters stay bit-exact
        with np.errstate(over="ignore"):
            stepped = np.where(_IS_WIDTH, vec * np.exp(velocity), vec + velocity)
        vec = np.where(train_mask, stepped, vec)
        if not np.isfinite(vec[train_mask]).all():
            raise FitDivergedError(epoch)
    params, scale = _unpack(vec, init)
    final_loss = 0.0
    for ps, u, gt in dataset:
        frozen = frozen_kernel_stats(
            UnaryField(graph=u.graph, logits=scale * u.logits), params, ps=ps)
        fd, mask, d2, offs = frozen
        final_loss += _forward(u.logits, scale, u.graph, fd, mask, d2, offs,
                               params, gt, params.iterations)
    curve.append(final_loss / len(dataset))
    if not np.isfinite(curve[-1]):
        raise FitDivergedError(cfg.epochs)
    return FitResult(params=params, unary_scale=scale, curve=np.asarray(curve))


def _instance_grad(u, params, gt, scale, cfg, ps):
    if cfg.grad_mode == "analytic":
        return meanfield_grad(u, params, gt, unary_scale=scale, ps=ps)
    # finite-difference mode: slow path for cross-checking tiny problems
    frozen = frozen_kernel_stats(
        UnaryField(graph=u.graph, logits=scale * u.logits), params, ps=ps)
    fd, mask, d2, offs = frozen
    base_kwargs = dict(w_p=params.w_p, w1=params.w1, theta1=params.theta1,
                       theta2=params.theta2, theta3=params.theta3,
                       theta_comp=params.theta_comp,
                       window_radius=params.window_radius,
                       iterations=params.iterations,
                       kernel_variant=params.kernel_variant)

    def loss_with(kw, s):
        return _forward(u.logits, s, u.graph, fd, mask, d2, offs,
                        CrfParams(**kw), gt, params.iterations)

    loss = loss_with(base_kwargs, scale)
    grads = {}
    for name in SCALAR_NAMES:
        if name == "unary_scale":
            fn = lambda x: loss_with(base_kwargs, x)
            x0 = scale
        else:
            def fn(x, _n=name):
                kw = dict(base_kwargs)
                kw[_n] = x
                return loss_with(kw, scale)
            x0 = base_kwargs[name]
        grads[name] = central_difference(fn, x0, cfg.fd_step)
    return LossReport(loss=loss, grads=grads, dlogits=np.zeros_like(u.logits))
