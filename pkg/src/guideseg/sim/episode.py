"""Controller episodes on simulated crops: training, and paired policy ablations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from ..agents.base import ImageView
from ..agents.roles import default_roles
from ..airc import (
    Action,
    Controller,
    FixedIterations,
    IterationBounds,
    QTable,
    issue_score,
    reward,
)
from ..errors import ValidationError
from ..geometry import CropRegion
from ..metrics import CostLedger
from ..loop import CropLoop, Decision, Policy, drive, settings_for
from ..protocol import SubjectRegistry
from .doubles import SimImage, sim_agents, true_issue_counts
from .model import ErrorModel
from .scene import DENSITIES, SyntheticScene, generate_scene

_ROLES = None


def _roles():
    global _ROLES
    if _ROLES is None:
        _ROLES = default_roles()
    return _ROLES


@dataclass
class EpisodeTrace:
    density: str
    steps: list[Decision]
    true_scores: list[float]
    calls: int
    terminal: bool = True

    @property
    def iterations(self) -> int:
        return len(self.steps)

    @property
    def issues_resolved(self) -> float:
        """True issue score after the first pass minus after the last."""
        if not self.true_scores:
            return 0.0
        return round(self.true_scores[0] - self.true_scores[-1], 10)

    @property
    def total_reward(self) -> float:
        return math.fsum(d.reward or 0.0 for d in self.steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "density": self.density,
            "steps": [d.to_dict() for d in self.steps],
            "true_scores": self.true_scores,
            "issues_resolved": self.issues_resolved,
            "calls": self.calls,
            "terminal": self.terminal,
        }


def check_trace_rewards(trace: EpisodeTrace, table: QTable | None = None, bounds: IterationBounds = IterationBounds()) -> bool:
    """True when every logged reward equals a fresh recomputation from (I_t, I_next, action)."""
    hyper = table.hyper if table is not None else QTable().hyper
    options = table.options if table is not None else QTable().options
    for k, d in enumerate(trace.steps):
        if d.action == Action.CONTINUE:
            expected = reward(d.issue_score, trace.steps[k + 1].issue_score, Action.CONTINUE, False, hyper, options)
        else:
            expected = reward(d.issue_score, None, Action.STOP, d.iteration >= bounds.max_iters, hyper, options)
        if d.reward != expected:
            return False
    return True


def run_episode(
    scene: SyntheticScene,
    model: ErrorModel,
    policy: Policy,
    bounds: IterationBounds = IterationBounds(),
    seed: int = 0,
) -> EpisodeTrace:
    """One controller episode over the whole scene treated as a single crop."""
    image = SimImage(scene, model, seed)
    region = CropRegion.full(scene.width, scene.height)
    view = ImageView(image.crop(region, 0), region)
    true_scores: list[float] = []

    def hook(t: int, registry: SubjectRegistry) -> dict[str, Any]:
        score = issue_score(true_issue_counts(scene, registry))
        true_scores.append(score)
        return {}

    ledger = CostLedger()
    loop = CropLoop(view, scene.prompt, [], sim_agents(), _roles(), ledger, settings_for(policy, bounds), hook)
    steps = drive([loop], policy, settings_for(policy, bounds))
    if loop.error is not None:  # pragma: no cover - simulated backends do not fail
        raise RuntimeError(loop.error)
    return EpisodeTrace(scene.density, steps, true_scores, len(ledger))


@dataclass(frozen=True)
class SimConfig:
    error_model: ErrorModel = field(default_factory=ErrorModel)
    bounds: IterationBounds = field(default_factory=IterationBounds)
    density_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    episodes: int = 5000
    seed: int = 42
    ablation_scenes: int = 600

    def __post_init__(self) -> None:
        if len(self.density_mix) != 3 or min(self.density_mix) < 0 or not math.isclose(sum(self.density_mix), 1.0):
            raise ValidationError(f"density_mix must be three non-negative weights summing to 1: {self.density_mix}")
        if self.episodes < 1 or self.ablation_scenes < 1:
            raise ValidationError("episodes and ablation_scenes must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_model": self.error_model.to_dict(),
            "bounds": asdict(self.bounds),
            "density_mix": list(self.density_mix),
            "episodes": self.episodes,
            "seed": self.seed,
            "ablation_scenes": self.ablation_scenes,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SimConfig:
        if not isinstance(data, dict):
            raise ValidationError("simulation config must be a JSON object")
        known = {"error_model", "bounds", "density_mix", "episodes", "seed", "ablation_scenes"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown simulation config fields: {sorted(unknown)}")
        try:
            return cls(
                error_model=ErrorModel.from_dict(data.get("error_model", {})),
                bounds=IterationBounds(**data.get("bounds", {})),
                density_mix=tuple(data.get("density_mix", (1 / 3, 1 / 3, 1 / 3))),  # type: ignore[arg-type]
                episodes=int(data.get("episodes", 5000)),
                seed=int(data.get("seed", 42)),
                ablation_scenes=int(data.get("ablation_scenes", 600)),
            )
        except TypeError as exc:
            raise ValidationError(f"bad simulation config: {exc}") from exc

    @classmethod
    def loads(cls, text: str) -> SimConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"simulation config is not valid JSON: {exc}") from exc


def scene_stream(seed: int, n: int, density_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3)) -> list[tuple[SyntheticScene, int]]:
    """``n`` (scene, episode seed) pairs drawn from a stream independent of any policy RNG."""
    rng = np.random.default_rng([seed, 0])
    dens = rng.choice(3, size=n, p=np.asarray(density_mix, dtype=float))
    seeds = rng.integers(0, 2**31 - 1, size=(n, 2))
    return [(generate_scene(int(seeds[i, 0]), DENSITIES[int(dens[i])]), int(seeds[i, 1])) for i in range(n)]


@dataclass
class TrainingResult:
    table: QTable
    episode_returns: list[float]
    traces: list[EpisodeTrace] = field(default_factory=list)

    @property
    def cumulative(self) -> list[float]:
        out, acc = [], 0.0
        for r in self.episode_returns:
            acc += r
            out.append(acc)
        return out


def train_controller(
    episodes: int,
    model: ErrorModel = ErrorModel(),
    bounds: IterationBounds = IterationBounds(),
    seed: int = 42,
    density_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    table: QTable | None = None,
    keep_traces: bool = False,
) -> TrainingResult:
    """Epsilon-greedy Q-learning over a seeded stream of mixed-density scenes."""
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    table = table if table is not None else QTable()
    controller = Controller(table, bounds, "train", np.random.default_rng([seed, 1]))
    result = TrainingResult(table, [])
    for scene, ep_seed in scene_stream(seed, episodes, density_mix):
        trace = run_episode(scene, model, controller, bounds, ep_seed)
        result.episode_returns.append(trace.total_reward)
        if keep_traces:
            result.traces.append(trace)
    return result


@dataclass
class PolicyStats:
    issues_resolved_per_crop: float
    extra_pass_fraction: float
    mean_iterations: float
    crops: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _stats(traces: Sequence[EpisodeTrace], min_iters: int) -> PolicyStats:
    n = len(traces)
    if n == 0:
        return PolicyStats(0.0, 0.0, 0.0, 0)
    return PolicyStats(
        math.fsum(t.issues_resolved for t in traces) / n,
        sum(1 for t in traces if t.iterations > min_iters) / n,
        sum(t.iterations for t in traces) / n,
        n,
    )


@dataclass
class AblationReport:
    adaptive: PolicyStats
    fixed: PolicyStats
    fixed_k: int
    by_density: dict[str, dict[str, PolicyStats]]

    @property
    def ratio(self) -> float:
        if self.fixed.issues_resolved_per_crop == 0:
            return math.inf if self.adaptive.issues_resolved_per_crop > 0 else 1.0
        return self.adaptive.issues_resolved_per_crop / self.fixed.issues_resolved_per_crop

    def gain(self, density: str) -> float:
        d = self.by_density[density]
        return d["adaptive"].issues_resolved_per_crop - d["fixed"].issues_resolved_per_crop

    def to_dict(self) -> dict[str, Any]:
        return {
            "adaptive": self.adaptive.to_dict(),
            "fixed": {**self.fixed.to_dict(), "k": self.fixed_k},
            "ratio": self.ratio,
            "by_density": {
                d: {**{k: v.to_dict() for k, v in row.items()}, "gain": self.gain(d)} for d, row in self.by_density.items()
            },
        }

    def to_csv(self) -> str:
        lines = ["group,policy,issues_resolved_per_crop,extra_pass_fraction,mean_iterations,crops"]
        rows = [("all", "adaptive", self.adaptive), ("all", f"fixed_{self.fixed_k}", self.fixed)]
        for d, row in self.by_density.items():
            rows += [(d, "adaptive", row["adaptive"]), (d, f"fixed_{self.fixed_k}", row["fixed"])]
        for group, name, s in rows:
            lines.append(
                f"{group},{name},{s.issues_resolved_per_crop!r},{s.extra_pass_fraction!r},{s.mean_iterations!r},{s.crops}"
            )
        return "\n".join(lines) + "\n"


def ablate_policies(
    table: QTable,
    model: ErrorModel = ErrorModel(),
    n_scenes: int = 600,
    seed: int = 7,
    bounds: IterationBounds = IterationBounds(),
    fixed_k: int = 2,
    density_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
) -> AblationReport:
    """Greedy controller vs. a fixed pass count on identical scenes and agent seeds."""
    adaptive_policy = Controller(table.copy(), bounds, "greedy")
    fixed_policy = FixedIterations(fixed_k, bounds)
    adaptive, fixed = [], []
    for scene, ep_seed in scene_stream(seed, n_scenes, density_mix):
        adaptive.append(run_episode(scene, model, adaptive_policy, bounds, ep_seed))
        fixed.append(run_episode(scene, model, fixed_policy, bounds, ep_seed))
    by_density = {}
    for d in DENSITIES:
        a = [t for t in adaptive if t.density == d]
        f = [t for t in fixed if t.density == d]
        by_density[d] = {"adaptive": _stats(a, bounds.min_iters), "fixed": _stats(f, bounds.min_iters)}
    return AblationReport(
        _stats(adaptive, bounds.min_iters), _stats(fixed, bounds.min_iters), fixed_policy.k, by_density
    )
