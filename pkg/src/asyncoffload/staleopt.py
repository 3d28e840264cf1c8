"""Partial-staleness optimizers.

Parameters split into an important partition, updated every step with the
current gradient, and a delayed partition whose gradients are accumulated
for ``S`` steps and then applied once, averaged::

    theta_g <- theta_g - lr_t * grad_g                       (every step)
    theta_c <- theta_c - lr_t * mean(grad_c over the cycle)  (when the cycle fills)

The first ``warmup_steps`` steps update both partitions every step.
Accumulation uses two buffers (one filling, one being consumed by the
delayed update) so the two never touch the same storage.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "AccumulationBuffers",
    "BufferSafetyError",
    "PartialStaleOptimizer",
    "RhoTracker",
    "StaleOptConfig",
    "SyncOptimizer",
    "adamw_update",
    "load_checkpoint",
    "lr_schedule",
    "rho_from_trace",
    "rho_measured",
    "save_checkpoint",
    "sgd_update",
    "staleness_factor",
    "warmup_penalty",
]

log = logging.getLogger(__name__)

DEFAULT_WARMUP_FRAC = 0.05


class BufferSafetyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

def lr_schedule(kind: str, lr: float, total_steps: int, warmup_frac: float = DEFAULT_WARMUP_FRAC,
                min_lr: float = 0.0):
    """Return ``f(t) -> lr`` for ``"constant"`` or ``"cosine"`` (linear warm-up then cosine decay)."""
    if kind == "constant":
        return lambda t: lr
    if kind != "cosine":
        raise ValueError(f"unknown lr schedule {kind!r}")
    warm = int(round(warmup_frac * total_steps))

    def cosine(t: int) -> float:
        if t < warm:
            return lr * (t + 1) / warm
        span = max(1, total_steps - warm)
        progress = min(1.0, (t - warm) / span)
        return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * progress))

    return cosine


@dataclass
class StaleOptConfig:
    S: int = 4
    k_channel_ratio: float = 0.10
    warmup_steps: int | None = None  # None -> 5% of total_steps
    total_steps: int = 1000
    lr: float = 0.1
    lr_schedule: str = "constant"
    lr_warmup_frac: float = DEFAULT_WARMUP_FRAC
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(round(DEFAULT_WARMUP_FRAC * self.total_steps))
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        self._lr_fn = lr_schedule(self.lr_schedule, self.lr, self.total_steps, self.lr_warmup_frac)

    def lr_at(self, t: int) -> float:
        return self._lr_fn(t)


# ---------------------------------------------------------------------------
# element-wise kernels shared by the synchronous and partitioned paths
# ---------------------------------------------------------------------------

def sgd_update(theta, g, lr, weight_decay=0.0):
    if weight_decay:
        theta = theta - lr * weight_decay * theta
    return theta - lr * g


def adamw_update(theta, m, v, g, step, lr, beta1, beta2, eps, weight_decay):
    """One AdamW step on arrays; ``step`` is the 1-based count after this update."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    if weight_decay:
        theta = theta - lr * weight_decay * theta
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


def _check_grad(grad, n: int) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64).ravel()
    if g.size != n:
        raise ValueError(f"gradient has {g.size} elements, parameters have {n}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    return g


class SyncOptimizer:
    """Plain synchronous SGD / AdamW over the whole vector (the reference)."""

    def __init__(self, theta, cfg: StaleOptConfig):
        self.theta = np.array(theta, dtype=np.float64).ravel()
        self.cfg = cfg
        self.t = 0
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)

    def step(self, grad) -> np.ndarray:
        g = _check_grad(grad, self.theta.size)
        c = self.cfg
        lr = c.lr_at(self.t)
        if c.kind == "sgd":
            self.theta = sgd_update(self.theta, g, lr, c.weight_decay)
        else:
            self.theta, self.m, self.v = adamw_update(
                self.theta, self.m, self.v, g, self.t + 1, lr, c.beta1, c.beta2, c.eps, c.weight_decay)
        self.t += 1
        return self.theta


# ---------------------------------------------------------------------------
# double buffering
# ---------------------------------------------------------------------------

class AccumulationBuffers:
    """Two full-length gradient accumulators with swap-on-flush.

    ``active`` receives new gradients, ``updating`` is the one being consumed
    by the delayed update. Writes while a buffer is being consumed raise
    :class:`BufferSafetyError`. With ``trace=True`` every write is logged as
    ``(epoch, buffer_index)`` for after-the-fact checks.
    """

    def __init__(self, size: int, trace: bool = False):
        self._bufs = [np.zeros(size), np.zeros(size)]
        self.active_index = 0
        self.consuming: int | None = None
        self.rounds_in_active = 0
        self.epoch = 0
        self.trace = trace
        self.write_log: list[tuple[int, int]] = []
        self.consume_log: list[tuple[int, int]] = []

    @property
    def active(self) -> np.ndarray:
        return self._bufs[self.active_index]

    @property
    def updating(self) -> np.ndarray:
        return self._bufs[1 - self.active_index]

    def accumulate(self, g: np.ndarray, idx: np.ndarray) -> None:
        if self.consuming == self.active_index:
            raise BufferSafetyError("write into a buffer that is being consumed")
        self.active[idx] += g[idx]
        self.rounds_in_active += 1
        if self.trace:
            self.write_log.append((self.epoch, self.active_index))

    def begin_flush(self) -> tuple[np.ndarray, int]:
        """Swap roles and hand out the filled buffer and its round count."""
        if self.consuming is not None:
            raise BufferSafetyError("previous flush has not finished")
        if np.any(self.updating):
            raise BufferSafetyError("standby buffer was not cleared after its last use")
        consumed = self.active_index
        rounds = self.rounds_in_active
        self.active_index = 1 - consumed
        self.consuming = consumed
        self.rounds_in_active = 0
        self.epoch += 1
        if self.trace:
            self.consume_log.append((self.epoch, consumed))
        return self._bufs[consumed], rounds

    def end_flush(self) -> None:
        if self.consuming is None:
            raise BufferSafetyError("no flush in progress")
        self._bufs[self.consuming][:] = 0.0
        self.consuming = None

    def state(self) -> dict:
        return {"buf0": self._bufs[0].copy(), "buf1": self._bufs[1].copy(),
                "active_index": self.active_index, "rounds_in_active": self.rounds_in_active,
                "epoch": self.epoch}

    def load(self, st: dict) -> None:
        self._bufs = [np.array(st["buf0"], dtype=np.float64), np.array(st["buf1"], dtype=np.float64)]
        self.active_index = int(st["active_index"])
        self.rounds_in_active = int(st["rounds_in_active"])
        self.epoch = int(st["epoch"])
        self.consuming = None


# ---------------------------------------------------------------------------
# partitioned optimizer
# ---------------------------------------------------------------------------

@dataclass
class Migration:
    step: int
    to_important: int
    to_delayed: int
    moments_reset: bool


class PartialStaleOptimizer:
    """SGD / AdamW with an immediate partition and an ``S``-step delayed one.

    ``important_mask`` marks the immediate coordinates. AdamW keeps one
    moment pair per coordinate plus a step counter per partition (the
    delayed one advances once per flush). Bias correction uses each
    coordinate's own moment age, which equals its partition counter unless
    the coordinate migrated and had its moments restarted.

    With ``concurrent=True`` the delayed update is computed on a worker
    thread while the immediate update runs, and committed at the end of the
    same step, so results are bitwise identical to the serial mode.
    """

    def __init__(self, theta, important_mask, cfg: StaleOptConfig, *,
                 concurrent: bool = False, trace_buffers: bool = False):
        self.theta = np.array(theta, dtype=np.float64).ravel()
        self.cfg = cfg
        self.t = 0
        self.S = cfg.S
        self._pending_S: int | None = None
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.step_g = 0
        self.step_c = 0
        self.age = np.zeros(self.theta.size, dtype=np.int64)
        self.buffers = AccumulationBuffers(self.theta.size, trace=trace_buffers)
        self.flush_log: list[tuple[int, int]] = []
        self.migrations: list[Migration] = []
        self._last_lr = cfg.lr_at(0)
        self.concurrent = concurrent
        self._pool = ThreadPoolExecutor(max_workers=1) if concurrent else None
        self._set_partition(important_mask)

    # -- partition bookkeeping ------------------------------------------------
    def _set_partition(self, mask) -> None:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != self.theta.size:
            raise ValueError(f"mask has {mask.size} elements, parameters have {self.theta.size}")
        self.important_mask = mask.copy()
        self.idx_g = np.flatnonzero(mask)
        self.idx_c = np.flatnonzero(~mask)

    @property
    def rounds_in_active(self) -> int:
        return self.buffers.rounds_in_active

    @property
    def at_boundary(self) -> bool:
        """True when no delayed gradients are pending (safe to change the mask)."""
        return self.buffers.rounds_in_active == 0

    @property
    def in_warmup(self) -> bool:
        return self.t < self.cfg.warmup_steps

    def set_mask(self, important_mask) -> Migration | None:
        """Change the important set at an accumulation boundary.

        Coordinates that switch partition keep their AdamW moments only when
        both partitions have taken the same number of steps (the moments then
        follow the same bias correction); otherwise they restart at zero.
        """
        if not self.at_boundary:
            raise RuntimeError("important set may only change at an accumulation boundary")
        new = np.asarray(important_mask, dtype=bool).ravel()
        if new.size != self.theta.size:
            raise ValueError(f"mask has {new.size} elements, parameters have {self.theta.size}")
        to_g = new & ~self.important_mask
        to_c = ~new & self.important_mask
        if not to_g.any() and not to_c.any():
            return None
        reset = self.cfg.kind == "adamw" and self.step_g != self.step_c
        if reset:
            moved = to_g | to_c
            self.m[moved] = 0.0
            self.v[moved] = 0.0
            self.age[moved] = 0
        mig = Migration(self.t, int(to_g.sum()), int(to_c.sum()), reset)
        self.migrations.append(mig)
        log.debug("mask migration at step %d: +%d important, +%d delayed, reset=%s",
                  self.t, mig.to_important, mig.to_delayed, reset)
        self._set_partition(new)
        return mig

    def set_interval(self, S: int) -> None:
        """Change ``S``; a cycle already in progress finishes under the old value."""
        if S < 1:
            raise ValueError("S must be >= 1")
        if self.at_boundary:
            self.S = S
            self._pending_S = None
        else:
            self._pending_S = S

    # -- updates ---------------------------------------------------------------
    def _advance_age(self, idx):
        """Bump moment ages of ``idx``; a scalar when uniform keeps arithmetic identical to the reference."""
        self.age[idx] += 1
        a = self.age[idx]
        if a.size == 0 or a[0] == a.min() == a.max():
            return int(a[0]) if a.size else 1
        return a

    def _partition_update(self, idx, g_part, lr):
        c = self.cfg
        if c.kind == "sgd":
            return sgd_update(self.theta[idx], g_part, lr, c.weight_decay), None, None
        step_count = self._advance_age(idx)
        return adamw_update(self.theta[idx], self.m[idx], self.v[idx], g_part, step_count,
                            lr, c.beta1, c.beta2, c.eps, c.weight_decay)

    def _commit(self, idx, result) -> None:
        theta, m, v = result
        self.theta[idx] = theta
        if m is not None:
            self.m[idx] = m
            self.v[idx] = v

    def _delayed_update(self, theta_c, m_c, v_c, buf, divisor, lr, step_count):
        c = self.cfg
        avg = buf[self.idx_c] / divisor
        if c.kind == "sgd":
            return sgd_update(theta_c, avg, lr, c.weight_decay), None, None
        return adamw_update(theta_c, m_c, v_c, avg, step_count, lr, c.beta1, c.beta2, c.eps, c.weight_decay)

    def _run_flush(self, lr: float, *, overlap=None):
        """Swap buffers and apply the averaged delayed update.

        ``overlap`` is an optional callable executed while the delayed update
        is in flight (concurrent mode) or before it (serial mode).
        """
        buf, rounds = self.buffers.begin_flush()
        self.step_c += 1
        idx = self.idx_c
        args = (self.theta[idx], self.m[idx], self.v[idx], buf, rounds, lr,
                self._advance_age(idx) if self.cfg.kind == "adamw" else self.step_c)
        try:
            if self._pool is not None:
                fut = self._pool.submit(self._delayed_update, *args)
                if overlap is not None:
                    overlap()
                result = fut.result()
            else:
                if overlap is not None:
                    overlap()
                result = self._delayed_update(*args)
            self._commit(idx, result)
        finally:
            self.buffers.end_flush()
        self.flush_log.append((self.t, rounds))
        if self._pending_S is not None:
            self.S = self._pending_S
            self._pending_S = None
        return rounds

    def step(self, grad) -> bool:
        """Apply one iteration; returns True when the delayed partition was flushed."""
        if self.t >= self.cfg.total_steps:
            raise RuntimeError("optimizer has already run total_steps iterations")
        g = _check_grad(grad, self.theta.size)
        lr = self.cfg.lr_at(self.t)
        self._last_lr = lr
        flushed = False
        if self.in_warmup:
            self.step_g += 1
            self.step_c += 1
            self._commit(self.idx_g, self._partition_update(self.idx_g, g[self.idx_g], lr))
            self._commit(self.idx_c, self._partition_update(self.idx_c, g[self.idx_c], lr))
        else:
            self.buffers.accumulate(g, self.idx_c)

            def immediate():
                self.step_g += 1
                self._commit(self.idx_g, self._partition_update(self.idx_g, g[self.idx_g], lr))

            if self.buffers.rounds_in_active >= self.S:
                self._run_flush(lr, overlap=immediate)
                flushed = True
            else:
                immediate()
        self.t += 1
        return flushed

    def flush_now(self) -> bool:
        """Apply the delayed update immediately, averaging over the rounds so far."""
        if self.buffers.rounds_in_active == 0:
            warnings.warn("flush_now with an empty accumulation buffer; nothing to do", RuntimeWarning)
            return False
        self._run_flush(self._last_lr)
        return True

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __del__(self):
        pool = getattr(self, "_pool", None)
        if pool is not None:
            pool.shutdown(wait=False)

    # -- checkpointing ---------------------------------------------------------
    def state_dict(self) -> dict:
        st = {
            "theta": self.theta.copy(),
            "important_mask": self.important_mask.copy(),
            "m": self.m.copy(),
            "v": self.v.copy(),
            "t": self.t,
            "S": self.S,
            "pending_S": -1 if self._pending_S is None else self._pending_S,
            "step_g": self.step_g,
            "step_c": self.step_c,
            "age": self.age.copy(),
            "last_lr": self._last_lr,
            "config": asdict(self.cfg),
        }
        st.update({f"buffers.{k}": v for k, v in self.buffers.state().items()})
        return st

    def load_state_dict(self, st: dict) -> None:
        self.theta = np.array(st["theta"], dtype=np.float64)
        self._set_partition(st["important_mask"])
        self.m = np.array(st["m"], dtype=np.float64)
        self.v = np.array(st["v"], dtype=np.float64)
        self.t = int(st["t"])
        self.S = int(st["S"])
        p = int(st["pending_S"])
        self._pending_S = None if p < 0 else p
        self.step_g = int(st["step_g"])
        self.step_c = int(st["step_c"])
        self.age = np.array(st["age"], dtype=np.int64)
        self._last_lr = float(st["last_lr"])
        self.buffers.load({k.split(".", 1)[1]: v for k, v in st.items() if k.startswith("buffers.")})


def save_checkpoint(opt: PartialStaleOptimizer, path) -> Path:
    """Write optimizer state as an ``.npz`` archive (exact float64 round trip)."""
    path = Path(path)
    st = opt.state_dict()
    cfg = st.pop("config")
    arrays = {k: np.asarray(v) for k, v in st.items()}
    arrays["config_json"] = np.array(json.dumps(cfg, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, *, concurrent: bool = False) -> PartialStaleOptimizer:
    with np.load(Path(path), allow_pickle=False) as z:
        st = {k: z[k] for k in z.files}
    cfg_dict = json.loads(str(st.pop("config_json")))
    cfg = StaleOptConfig(**cfg_dict)
    opt = PartialStaleOptimizer(st["theta"], st["important_mask"], cfg, concurrent=concurrent)
    opt.load_state_dict({k: (v.item() if v.ndim == 0 else v) for k, v in st.items()})
    return opt


# ---------------------------------------------------------------------------
# delayed-energy fraction and penalty calculators
# ---------------------------------------------------------------------------

class RhoTracker:
    """Running estimate of the delayed-partition share of gradient energy.

    ``rho = max_t |g_c(t)|^2 / max_t |g(t)|^2`` over the observed steps.
    """

    def __init__(self):
        self.energies_delayed: list[float] = []
        self.energies_total: list[float] = []

    def observe(self, grad, important_mask) -> None:
        g = np.asarray(grad, dtype=np.float64).ravel()
        delayed = ~np.asarray(important_mask, dtype=bool).ravel()
        gc = g[delayed]
        self.energies_delayed.append(float(gc @ gc))
        self.energies_total.append(float(g @ g))

    @property
    def value(self) -> float:
        return rho_measured(self.energies_delayed, self.energies_total)


def rho_measured(energies_delayed: Sequence[float], energies_total: Sequence[float]) -> float:
    ed = np.asarray(energies_delayed, dtype=np.float64)
    et = np.asarray(energies_total, dtype=np.float64)
    if et.size == 0 or ed.size != et.size:
        raise ValueError("need matching, non-empty energy series")
    top = et.max()
    if top == 0.0:
        raise ValueError("total gradient energy is zero at every step; rho undefined")
    return float(min(1.0, ed.max() / top))


def rho_from_trace(grads, masks) -> float:
    """Offline recomputation of rho from a saved gradient trace."""
    tr = RhoTracker()
    for g, mk in zip(grads, masks):
        tr.observe(g, mk)
    return tr.value


def staleness_factor(rho: float, S: int) -> float:
    """``sqrt(1 + rho*S)``: slowdown of the convergence bound from staleness."""
    if not (0.0 <= rho <= 1.0):
        raise ValueError("rho must be in [0, 1]")
    if S < 1:
        raise ValueError("S must be >= 1")
    return math.sqrt(1.0 + rho * S)


def warmup_penalty(rho: float, S: int, tau: float, T: float, beta: float) -> float:
    """Staleness penalty when the first ``tau`` of ``T`` steps are synchronous.

    Assumes gradient energy decays like ``t**-beta``; the delayed steps then
    carry a ``1 - (tau/T)**(1-beta)`` share of the total.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must be in (0, 1)")
    if not (0 <= tau <= T) or T <= 0:
        raise ValueError("need 0 <= tau <= T and T > 0")
    if not (0.0 <= rho <= 1.0):
        raise ValueError("rho must be in [0, 1]")
    share = 1.0 - (tau / T) ** (1.0 - beta)
    return math.sqrt(1.0 + rho * S * share)
