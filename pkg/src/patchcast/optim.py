"""Optimizers: momentum orthogonalization with per-row EMA normalization for
hidden matrices, AdamW for everything else, cautious weight decay, global
gradient clipping, and the warmup-stable-decay schedule.

The orthogonalization is a quintic matrix iteration driving singular values to
1 (a polar-factor approximation): five aggressive steps with coefficients tuned
for fast convergence from small singular values, then three contracting steps
of the exact quintic (15x - 10x^3 + 3x^5)/8 to land inside [0.95, 1.05].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Model, Parameter
from .mup import update_multiplier

# (a, b, c) per iteration: X <- a X + (b A + c A^2) X with A = X X^T.
# Five aggressive steps lift small singular values quickly; three steps of the
# exact contracting quintic (15x - 10x^3 + 3x^5)/8 land them inside [0.95, 1.05].
POLAR_EXPRESS_COEFFS: tuple[tuple[float, float, float], ...] = (
    (8.156554524902461, -22.48329292557795, 15.878769915207462),
    (4.042929935166739, -2.808917465908714, 0.5000178451051316),
    (3.8916678022926607, -2.772484153217685, 0.5060648178503393),
    (3.285753657755655, -2.3681294933425376, 0.46449024233003106),
    (2.3465413258596377, -1.7097828382687081, 0.42323551169305323),
    (1.875, -1.25, 0.375),
    (1.875, -1.25, 0.375),
    (1.875, -1.25, 0.375),
)

# The aggressive prefix alone is plenty for optimization (training tolerates
# +-15% singular-value slack) at 5/8 of the cost.
TRAINING_ORTHO_COEFFS = POLAR_EXPRESS_COEFFS[:5]

NORMUON_DEFAULTS = dict(mu=0.96, beta2=0.999, weight_decay=2e-8, eps=1e-8)
ADAMW_DEFAULTS = dict(beta1=0.91, beta2=0.972, weight_decay=0.0, eps=1e-8)
CLIP_THRESHOLD = 7.0


def orthogonalize(mat: np.ndarray, coeffs=POLAR_EXPRESS_COEFFS) -> np.ndarray:
    """Approximate the polar factor U V^T of `mat`.

    The input is pre-normalized by its Frobenius norm (an upper bound on the
    spectral norm). After the default schedule, singular values of the output
    lie within 5% of 1 for inputs with condition number up to ~1e3.
    """
    mat = np.asarray(mat)
    if not np.all(np.isfinite(mat)):
        raise FloatingPointError("non-finite input to orthogonalize")
    x = mat if mat.dtype in (np.float32, np.float64) else mat.astype(np.float64)
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T  # iterate on the small gram side; the polar factor transposes back
    x = x / (np.linalg.norm(x) + 1e-12)
    for a, b, c in coeffs:
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    if tall:
        x = x.T
    return x.astype(mat.dtype)


@dataclass
class NorMuonState:
    momentum: np.ndarray  # B, same shape as the parameter
    row_ema: np.ndarray  # v, one scalar per row (fan_out, 1)
    step: int = 0

    @classmethod
    def init(cls, param: np.ndarray) -> "NorMuonState":
        return cls(momentum=np.zeros_like(param),
                   row_ema=np.zeros((param.shape[0], 1), dtype=param.dtype), step=0)


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def init(cls, param: np.ndarray) -> "AdamWState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0)


def cautious_decay_mask(weights: np.ndarray, update: np.ndarray) -> np.ndarray:
    """1 where sign(W) == sign(update) and both are nonzero, else 0. Decay is
    applied only under this mask."""
    return ((np.sign(weights) == np.sign(update)) & (weights != 0) & (update != 0)).astype(weights.dtype)


def normuon_step(param: Parameter, grad: np.ndarray, state: NorMuonState, eta: float,
                 mu: float = NORMUON_DEFAULTS["mu"],
                 beta2: float = NORMUON_DEFAULTS["beta2"],
                 eps: float = NORMUON_DEFAULTS["eps"],
                 weight_decay: float = NORMUON_DEFAULTS["weight_decay"],
                 ortho_coeffs=POLAR_EXPRESS_COEFFS) -> np.ndarray:
    """One orthogonalized-momentum step on a hidden matrix parameter.

    B <- mu B + G; the Nesterov lookahead G + mu B is orthogonalized, each row
    is normalized by the EMA of its mean squared magnitude, cautious decay is
    applied in leaf space, and the parameter moves by C_W = eta/sqrt(fan_in)
    times the normalized update.
    """
    w = param.data
    if w.ndim != 2 or grad.shape != w.shape:
        raise ValueError(f"{param.name}: normuon_step needs a matching matrix, "
                         f"got param {w.shape}, grad {grad.shape}")
    g = grad.astype(w.dtype, copy=False)
    state.step += 1
    state.momentum = mu * state.momentum + g
    ortho = orthogonalize(g + mu * state.momentum, coeffs=ortho_coeffs)
    state.row_ema = beta2 * state.row_ema + (1.0 - beta2) * np.mean(ortho * ortho, axis=1, keepdims=True)
    update = ortho / np.sqrt(state.row_ema + eps)
    c_w = update_multiplier(param.meta, eta)
    decayed = w - weight_decay * cautious_decay_mask(w, update) * w
    param.data = (decayed - c_w * update).astype(w.dtype)
    return param.data


def adamw_step(param: Parameter, grad: np.ndarray, state: AdamWState, eta: float,
               beta1: float = ADAMW_DEFAULTS["beta1"],
               beta2: float = ADAMW_DEFAULTS["beta2"],
               eps: float = ADAMW_DEFAULTS["eps"],
               weight_decay: float = ADAMW_DEFAULTS["weight_decay"]) -> np.ndarray:
    """Bias-corrected AdamW with decoupled decay. Decay is skipped for biases,
    norms, and input/output projections, which is everything this optimizer
    handles here, so the `weight_decay` argument only matters for other kinds.
    """
    w = param.data
    if grad.shape != w.shape:
        raise ValueError(f"{param.name}: grad shape {grad.shape} != param {w.shape}")
    g = grad.astype(w.dtype, copy=False)
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    c_w = update_multiplier(param.meta, eta)
    new = w
    if weight_decay and param.meta.kind not in ("bias", "norm", "input", "output"):
        new = new - weight_decay * new
    new = new - c_w * m_hat / (np.sqrt(v_hat) + eps)
    param.data = new.astype(w.dtype)
    return param.data


def clip_gradients(grads: dict[str, np.ndarray], threshold: float = CLIP_THRESHOLD) -> float:
    """Global-norm clipping, in place: if ||g||_2 > threshold, every gradient is
    scaled by threshold/||g||_2 (direction-preserving). Returns the pre-clip norm."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    sq = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass(frozen=True)
class Schedule:
    """Warmup-stable-decay learning-rate schedule."""

    total_steps: int
    warmup_steps: int = 6000
    decay_steps: int = 10500
    decay_shape: str = "linear"  # "linear" | "one_minus_sqrt"

    def __post_init__(self):
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise ValueError(f"warmup {self.warmup_steps} + decay {self.decay_steps} "
                             f"exceeds total {self.total_steps}")
        if self.decay_shape not in ("linear", "one_minus_sqrt"):
            raise ValueError(f"unknown decay shape {self.decay_shape!r}")


def wsd_lr(schedule: Schedule, step: int) -> float:
    """Multiplier in [0, 1]: linear ramp over warmup, 1 through the stable
    phase, then linear (or 1 - sqrt) decay to 0 over the final decay_steps."""
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return step / schedule.warmup_steps
    decay_start = schedule.total_steps - schedule.decay_steps
    if step <= decay_start or schedule.decay_steps == 0:
        return 1.0
    progress = (step - decay_start) / schedule.decay_steps
    if schedule.decay_shape == "linear":
        return 1.0 - progress
    return 1.0 - math.sqrt(progress)


def assign_optimizer(param: Parameter) -> str:
    """Partition rule: hidden (internal matrix-shaped) weights take the
    orthogonalizing optimizer; input/output projections, biases, and norms
    take AdamW."""
    return "normuon" if param.meta.kind == "hidden" else "adamw"


def audit_partition(model: Model) -> list[str]:
    """Misassignments between the optimizer partition and parameter roles.
    Empty list = every parameter is handled by exactly one correct optimizer."""
    issues = []
    seen: set[str] = set()
    for name, p in model.params.items():
        if name in seen:
            issues.append(f"{name}: assigned twice")
        seen.add(name)
        opt = assign_optimizer(p)
        if opt == "normuon":
            if p.data.ndim != 2:
                issues.append(f"{name}: orthogonalizing optimizer on non-matrix shape {p.data.shape}")
            if p.meta.kind != "hidden":
                issues.append(f"{name}: orthogonalizing optimizer on kind {p.meta.kind}")
        else:
            if p.meta.kind == "hidden":
                issues.append(f"{name}: hidden weight left to AdamW")
    missing = set(model.params) - seen
    if missing:
        issues.extend(f"{n}: unassigned" for n in sorted(missing))
    return issues


class TrainingOptimizer:
    """Owns per-parameter state and applies the partition each step."""

    def __init__(self, model: Model, eta_matrix: float = 0.65, eta_other: float = 0.012,
                 normuon_kw: dict | None = None, adamw_kw: dict | None = None):
        self.model = model
        self.eta_matrix = eta_matrix
        self.eta_other = eta_other
        self.normuon_kw = {**NORMUON_DEFAULTS, "ortho_coeffs": TRAINING_ORTHO_COEFFS,
                           **(normuon_kw or {})}
        self.adamw_kw = {**ADAMW_DEFAULTS, **(adamw_kw or {})}
        self.assignment = {name: assign_optimizer(p) for name, p in model.params.items()}
        self.state: dict[str, NorMuonState | AdamWState] = {}
        for name, p in model.params.items():
            self.state[name] = (NorMuonState.init(p.data) if self.assignment[name] == "normuon"
                                else AdamWState.init(p.data))

    def step(self, grads: dict[str, np.ndarray], lr_multiplier: float = 1.0) -> None:
        if lr_multiplier <= 0.0:
            return  # zero learning rate leaves parameters and state untouched
        for name, p in self.model.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.assignment[name] == "normuon":
                normuon_step(p, g, self.state[name], self.eta_matrix * lr_multiplier,
                             **self.normuon_kw)
            else:
                adamw_step(p, g, self.state[name], self.eta_other * lr_multiplier,
                           **self.adamw_kw)
