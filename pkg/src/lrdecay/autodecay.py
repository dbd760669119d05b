"""AutoDecay: decay the learning rate once the smoothed loss plateaus.

The controller watches per-epoch training loss through a bias-corrected moving
average. When the last ``window_w`` smoothed values are stable it either
decays (the plateau sits well below where the stage started) or terminates
(no significant drop, so a smaller learning rate is not buying progress).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

from . import edma
from .errors import InvalidTransitionError, ValidationError

__all__ = [
    "AutoDecayConfig",
    "ControllerState",
    "Decision",
    "CONTINUE",
    "DECAY",
    "TERMINATE",
    "AutoDecay",
    "is_stable",
    "has_significant_drop",
    "initial_state",
    "observe",
]

CONTINUE = "continue"
DECAY = "decay"
TERMINATE = "terminate"


@dataclass(frozen=True)
class AutoDecayConfig:
    beta: float = 0.9
    window_w: int = 10
    eta_tol: float = 0.02
    zeta: float = 0.9
    eps: float = 1e-8
    decay_factor: float = 10.0
    min_lr: float = 1e-5

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValidationError("beta must lie in (0, 1)")
        if int(self.window_w) != self.window_w or self.window_w < 2:
            raise ValidationError("window_w must be an integer >= 2")
        if not self.eta_tol > 0:
            raise ValidationError("eta_tol must be positive")
        if not 0 < self.zeta < 1:
            raise ValidationError("zeta must lie in (0, 1)")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")
        if not self.decay_factor > 1:
            raise ValidationError("decay_factor must exceed 1")
        if not self.min_lr > 0:
            raise ValidationError("min_lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Decision:
    action: str
    new_lr: float | None = None

    def __str__(self):
        return self.action


@dataclass(frozen=True)
class ControllerState:
    edma: edma.EdmaState
    current_lr: float
    window: tuple[float, ...] = ()
    g_ref: float | None = None
    stage: int = 1
    terminated: bool = False
    # Diagnostics from the latest observation, kept for trace logging.
    last_g_hat: float | None = None
    last_stable: bool = False
    last_drop: bool = False


def initial_state(cfg: AutoDecayConfig, lr0: float) -> ControllerState:
    if not lr0 > 0:
        raise ValidationError("initial learning rate must be positive")
    return ControllerState(edma=edma.EdmaState(beta=cfg.beta), current_lr=float(lr0))


def is_stable(window, eta_tol: float, eps: float, window_w: int | None = None) -> bool:
    """``(max G - min G) / (min G + eps) < eta_tol`` over the last ``window_w`` values.

    With ``window_w`` omitted the whole window is used. Fewer than ``window_w``
    values never count as stable.
    """
    values = list(window)
    if window_w is not None:
        if len(values) < window_w:
            return False
        values = values[-window_w:]
    if not values:
        return False
    lo, hi = min(values), max(values)
    return (hi - lo) / (lo + eps) < eta_tol


def has_significant_drop(g_t: float, g_ref: float, zeta: float, eps: float) -> bool:
    return (g_t + eps) / (g_ref + eps) <= zeta


def observe(state: ControllerState, cfg: AutoDecayConfig, epoch_loss: float):
    """Feed one epoch's training loss; return ``(new_state, decision)``."""
    if state.terminated:
        raise InvalidTransitionError("controller already terminated")
    epoch_loss = float(epoch_loss)
    if not math.isfinite(epoch_loss):
        raise ValidationError(f"epoch loss must be finite, got {epoch_loss}")

    e = edma.update(state.edma, epoch_loss)
    g = edma.corrected(e)
    window = (state.window + (g,))[-cfg.window_w :]
    g_ref = g if state.g_ref is None else state.g_ref
    stable = is_stable(window, cfg.eta_tol, cfg.eps, cfg.window_w)
    drop = stable and has_significant_drop(g, g_ref, cfg.zeta, cfg.eps)
    state = replace(
        state, edma=e, window=window, g_ref=g_ref, last_g_hat=g, last_stable=stable, last_drop=drop
    )
    if not stable:
        return state, Decision(CONTINUE)
    new_lr = state.current_lr / cfg.decay_factor
    if not drop or new_lr < cfg.min_lr:
        return replace(state, terminated=True), Decision(TERMINATE)
    state = replace(
        state,
        edma=e.reset(),
        window=(),
        g_ref=None,
        stage=state.stage + 1,
        current_lr=new_lr,
    )
    return state, Decision(DECAY, new_lr)


TRACE_COLUMNS = ["epoch", "raw_loss", "g_hat", "stable", "drop", "decision", "lr", "stage"]


@dataclass
class AutoDecay:
    """Mutable convenience wrapper around :func:`observe` that records a trace."""

    config: AutoDecayConfig
    lr0: float
    state: ControllerState = field(init=False)
    trace: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.state = initial_state(self.config, self.lr0)

    @property
    def lr(self) -> float:
        return self.state.current_lr

    @property
    def stage(self) -> int:
        return self.state.stage

    @property
    def terminated(self) -> bool:
        return self.state.terminated

    def step(self, epoch_loss: float) -> Decision:
        lr, stage = self.state.current_lr, self.state.stage
        self.state, decision = observe(self.state, self.config, epoch_loss)
        self.trace.append(
            {
                "epoch": len(self.trace) + 1,
                "raw_loss": float(epoch_loss),
                "g_hat": self.state.last_g_hat,
                "stable": int(self.state.last_stable),
                "drop": int(self.state.last_drop),
                "decision": decision.action,
                "lr": lr,
                "stage": stage,
            }
        )
        return decision

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            writer.writerows(self.trace)
