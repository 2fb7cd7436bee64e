"""Adaptive iteration controller: issue scoring, state encoding, reward and tabular Q-learning.

The controller sees a six-state abstraction of a crop (density bucket x
violation flag) and chooses between STOP and CONTINUE after each
Worker/Supervisor pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .errors import FormatError, ValidationError

FORMAT_VERSION = "guideseg.qtable/1"
N_STATES = 6
N_ACTIONS = 2


class Action(IntEnum):
    STOP = 0
    CONTINUE = 1


@dataclass(frozen=True)
class IssueCounts:
    misses: int = 0
    falses: int = 0
    refinements: int = 0

    def __post_init__(self) -> None:
        if min(self.misses, self.falses, self.refinements) < 0:
            raise ValidationError(f"issue counts must be non-negative: {self}")

    @property
    def genuine(self) -> int:
        return self.misses + self.falses


def issue_score(counts: IssueCounts) -> float:
    """misses + falses + 0.1 * refinements, correctly rounded."""
    # Integer numerator keeps e.g. (2, 1, 3) at exactly 3.3.
    return (10 * (counts.misses + counts.falses) + counts.refinements) / 10


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.3
    gamma: float = 0.9
    epsilon: float = 0.02
    step_cost: float = 0.02
    early_stop_penalty: float = 2.0
    clean_bonus: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.alpha <= 1 or not 0 <= self.gamma <= 1 or not 0 <= self.epsilon <= 1:
            raise ValidationError(f"hyperparameters out of range: {self}")
        if min(self.step_cost, self.early_stop_penalty, self.clean_bonus) < 0:
            raise ValidationError("reward constants are stored as non-negative magnitudes")


@dataclass(frozen=True)
class DensityThresholds:
    few_max: int = 2
    medium_max: int = 7

    def __post_init__(self) -> None:
        if not 0 <= self.few_max < self.medium_max:
            raise ValidationError(f"density thresholds must satisfy 0 <= few_max < medium_max: {self}")

    def bucket(self, count: int) -> int:
        if count < 0:
            raise ValidationError("object count must be non-negative")
        if count <= self.few_max:
            return 0
        if count <= self.medium_max:
            return 1
        return 2


@dataclass(frozen=True)
class ControllerOptions:
    """Switches for readings the method description leaves open.

    ``violation``: ``"genuine"`` marks a state dirty only for misses/false
    positives; ``"any"`` also for refinement-only residue.
    ``bonus``: ``"on_resolve"`` pays the clean bonus only when a CONTINUE takes
    a dirty crop to zero issues; ``"always"`` pays it whenever the next count
    is zero, including already-clean crops.
    """

    violation: Literal["genuine", "any"] = "genuine"
    bonus: Literal["on_resolve", "always"] = "on_resolve"

    def __post_init__(self) -> None:
        if self.violation not in ("genuine", "any") or self.bonus not in ("on_resolve", "always"):
            raise ValidationError(f"unknown controller options: {self}")


@dataclass(frozen=True)
class IterationBounds:
    min_iters: int = 2
    max_iters: int = 4

    def __post_init__(self) -> None:
        if not 1 <= self.min_iters <= self.max_iters:
            raise ValidationError(f"need 1 <= min_iters <= max_iters, got {self}")


@dataclass(frozen=True)
class ControllerState:
    d: int
    v: int

    def __post_init__(self) -> None:
        if self.d not in (0, 1, 2) or self.v not in (0, 1):
            raise ValidationError(f"invalid controller state d={self.d}, v={self.v}")

    @property
    def s(self) -> int:
        return 2 * self.d + self.v


def encode_state(
    initial_object_count: int,
    counts: IssueCounts,
    thresholds: DensityThresholds = DensityThresholds(),
    options: ControllerOptions = ControllerOptions(),
) -> ControllerState:
    d = thresholds.bucket(initial_object_count)
    if options.violation == "genuine":
        v = int(counts.genuine > 0)
    else:
        v = int(issue_score(counts) > 0)
    return ControllerState(d, v)


def reward(
    i_t: float,
    i_next: float | None,
    action: Action,
    at_max: bool = False,
    hyper: Hyperparams = Hyperparams(),
    options: ControllerOptions = ControllerOptions(),
) -> float:
    """Immediate reward for one controller decision.

    CONTINUE earns the issues fixed minus the step cost, plus the clean bonus
    when the next pass ends with no issues. STOP earns 0 on a clean crop and
    the early-stop penalty otherwise; a STOP forced by the iteration cap is
    not an early stop and earns 0.
    """
    if i_t < 0 or (i_next is not None and i_next < 0):
        raise ValidationError("issue scores must be non-negative")
    if action == Action.STOP:
        if at_max or i_t == 0:
            return 0.0
        return -hyper.early_stop_penalty
    if i_next is None:
        raise ValidationError("CONTINUE reward needs the next issue score")
    bonus = 0.0
    if i_next == 0 and (options.bonus == "always" or i_t > 0):
        bonus = hyper.clean_bonus
    return math.fsum((i_t, -i_next, -hyper.step_cost, bonus))


@dataclass
class QTable:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    thresholds: DensityThresholds = field(default_factory=DensityThresholds)
    options: ControllerOptions = field(default_factory=ControllerOptions)
    q: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS)))
    visits: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS), dtype=np.int64))
    cumulative_reward_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=np.float64).reshape(N_STATES, N_ACTIONS)
        self.visits = np.asarray(self.visits, dtype=np.int64).reshape(N_STATES, N_ACTIONS)
        if not np.all(np.isfinite(self.q)):
            raise ValidationError("Q-values must be finite")
        if np.any(self.visits < 0):
            raise ValidationError("visit counts must be non-negative")

    @property
    def total_reward(self) -> float:
        return self.cumulative_reward_trace[-1] if self.cumulative_reward_trace else 0.0

    def greedy(self, s: int) -> Action:
        return Action.CONTINUE if self.q[s, Action.CONTINUE] > self.q[s, Action.STOP] else Action.STOP

    def copy(self) -> QTable:
        return QTable(
            self.hyper, self.thresholds, self.options, self.q.copy(), self.visits.copy(),
            list(self.cumulative_reward_trace),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QTable):
            return NotImplemented
        return (
            self.hyper == other.hyper
            and self.thresholds == other.thresholds
            and self.options == other.options
            and np.array_equal(self.q, other.q)
            and np.array_equal(self.visits, other.visits)
            and self.cumulative_reward_trace == other.cumulative_reward_trace
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": FORMAT_VERSION,
            "hyperparams": asdict(self.hyper),
            "density_thresholds": asdict(self.thresholds),
            "options": asdict(self.options),
            "q": self.q.tolist(),
            "visits": self.visits.tolist(),
            "cumulative_reward_trace": list(self.cumulative_reward_trace),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: Any) -> QTable:
        if not isinstance(data, dict) or data.get("version") != FORMAT_VERSION:
            found = data.get("version") if isinstance(data, dict) else None
            raise FormatError(f"unsupported Q-table format {found!r}; expected {FORMAT_VERSION!r}")
        try:
            q = np.array(data["q"], dtype=np.float64)
            visits = np.array(data["visits"], dtype=np.int64)
            if q.shape != (N_STATES, N_ACTIONS) or visits.shape != (N_STATES, N_ACTIONS):
                raise ValueError(f"expected {N_STATES}x{N_ACTIONS} arrays, got {q.shape} and {visits.shape}")
            return cls(
                hyper=Hyperparams(**data["hyperparams"]),
                thresholds=DensityThresholds(**data["density_thresholds"]),
                options=ControllerOptions(**data.get("options", {})),
                q=q,
                visits=visits,
                cumulative_reward_trace=[float(x) for x in data["cumulative_reward_trace"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"corrupt Q-table: {exc}") from exc

    @classmethod
    def loads(cls, text: str) -> QTable:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"Q-table is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        from .io import write_atomic

        write_atomic(path, self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> QTable:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def q_update(table: QTable, s: int, a: Action, r: float, s_next: int | None, terminal: bool) -> QTable:
    """One tabular Q-learning step, in place. Returns ``table`` for chaining."""
    if not 0 <= s < N_STATES or (not terminal and (s_next is None or not 0 <= s_next < N_STATES)):
        raise ValidationError(f"state out of range: s={s}, s_next={s_next}")
    h = table.hyper
    future = 0.0 if terminal else h.gamma * float(np.max(table.q[s_next]))
    old = table.q[s, a]
    table.q[s, a] = old + h.alpha * (r + future - old)
    table.visits[s, a] += 1
    table.cumulative_reward_trace.append(table.total_reward + r)
    return table


def decide(
    table: QTable,
    s: int,
    iteration: int,
    bounds: IterationBounds,
    rng: np.random.Generator | None = None,
    explore: bool = False,
) -> Action:
    """Choose STOP/CONTINUE after pass ``iteration`` (1-based).

    Forced CONTINUE below ``min_iters`` and forced STOP at ``max_iters``.
    Otherwise epsilon-greedy when ``explore`` is set, else greedy with ties
    going to STOP.
    """
    if not 1 <= iteration <= bounds.max_iters:
        raise ValidationError(f"iteration {iteration} outside 1..{bounds.max_iters}")
    if iteration < bounds.min_iters:
        return Action.CONTINUE
    if iteration >= bounds.max_iters:
        return Action.STOP
    if explore and rng is not None and rng.random() < table.hyper.epsilon:
        return Action.CONTINUE if rng.random() < 0.5 else Action.STOP
    return table.greedy(s)


def q_value_estimate(
    mu_delta: float, pi_clear: float, v_next: float, hyper: Hyperparams = Hyperparams()
) -> float:
    """Closed-form approximation of Q(s, CONTINUE) used for diagnostics.

    ``mu_delta`` is the expected number of issues fixed by the next pass,
    ``pi_clear`` the probability that pass leaves nothing to fix and
    ``v_next`` the expected best value afterwards (0 when terminal).
    """
    if not 0.0 <= pi_clear <= 1.0:
        raise ValidationError("pi_clear must be a probability")
    return mu_delta - hyper.step_cost + hyper.clean_bonus * pi_clear + hyper.gamma * v_next


def stop_value_estimate(i_t: float, hyper: Hyperparams = Hyperparams()) -> float:
    return 0.0 if i_t == 0 else -hyper.early_stop_penalty


class Controller:
    """Q-table owner for one training or inference session.

    Policies and learning go through this object so that concurrent crops
    serialize their decisions and updates on a single lock.
    """

    def __init__(
        self,
        table: QTable,
        bounds: IterationBounds = IterationBounds(),
        mode: Literal["train", "greedy"] = "greedy",
        rng: np.random.Generator | None = None,
    ) -> None:
        import threading

        if mode not in ("train", "greedy"):
            raise ValidationError(f"unknown controller mode {mode!r}")
        self.table = table
        self.bounds = bounds
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._lock = threading.Lock()

    @property
    def learning(self) -> bool:
        return self.mode == "train"

    def decide(self, s: int, iteration: int) -> Action:
        with self._lock:
            return decide(self.table, s, iteration, self.bounds, self.rng, explore=self.learning)

    def observe(self, s: int, a: Action, r: float, s_next: int | None, terminal: bool) -> None:
        if not self.learning:
            return
        with self._lock:
            q_update(self.table, s, a, r, s_next, terminal)


class FixedIterations:
    """Baseline policy: always run exactly ``k`` passes (clamped to the bounds)."""

    def __init__(self, k: int, bounds: IterationBounds = IterationBounds()) -> None:
        self.k = min(max(k, bounds.min_iters), bounds.max_iters)
        self.bounds = bounds
        self.table = None
        self.learning = False

    def decide(self, s: int, iteration: int) -> Action:
        return Action.CONTINUE if iteration < self.k else Action.STOP

    def observe(self, s: int, a: Action, r: float, s_next: int | None, terminal: bool) -> None:
        return None
