"""The Worker -> Supervisor refinement loop for one crop, and the controller driver.

One pass at iteration t:

1. Worker: initial detection (t = 1) or refresh plus application of the
   verified candidates and refinements from pass t - 1.
2. Supervisor_eval critiques the registry, giving the issue score I_t.
3. Supervisor_boxgen and the verifier run only when there are missing or
   false-positive entries; their verified output is applied in pass t + 1.

The controller decides STOP/CONTINUE after each pass. A CONTINUE is rewarded
once the next pass reports I_{t+1}. On STOP the pending candidates are
discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

from .agents.base import Backend, ImageView, RoleConfig, Scorer, Segmenter
from .agents.roles import (
    segment,
    supervisor_boxgen,
    supervisor_evaluate,
    verify_candidates,
    worker_detect,
    worker_refresh,
)
from .airc import (
    Action,
    ControllerOptions,
    DensityThresholds,
    Hyperparams,
    IssueCounts,
    IterationBounds,
    encode_state,
    issue_score,
    reward,
)
from .errors import BackendError
from .guidelines import Guideline
from .metrics import CostLedger
from .protocol import (
    CandidateBox,
    ChangeSummary,
    SegmenterPrompt,
    SubjectInstance,
    SubjectRegistry,
    SupervisorReport,
    apply_actions,
    replay_changes,
)


class Policy(Protocol):
    learning: bool

    def decide(self, s: int, iteration: int) -> Action: ...

    def observe(self, s: int, a: Action, r: float, s_next: int | None, terminal: bool) -> None: ...


@dataclass(frozen=True)
class AgentSet:
    worker: Backend
    supervisor: Backend
    boxgen: Backend
    segmenter: Segmenter
    scorer: Scorer
    captioner: Backend | None = None
    detector: Backend | None = None


@dataclass(frozen=True)
class LoopSettings:
    bounds: IterationBounds = field(default_factory=IterationBounds)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    thresholds: DensityThresholds = field(default_factory=DensityThresholds)
    options: ControllerOptions = field(default_factory=ControllerOptions)
    verifier_buffer: float = 0.1
    verifier_threshold: float = 0.5


def settings_for(policy: Any, bounds: IterationBounds, verifier_buffer: float = 0.1, verifier_threshold: float = 0.5) -> LoopSettings:
    """Loop settings that agree with the policy's Q-table, when it has one."""
    table = getattr(policy, "table", None)
    if table is None:
        return LoopSettings(bounds, verifier_buffer=verifier_buffer, verifier_threshold=verifier_threshold)
    return LoopSettings(bounds, table.hyper, table.thresholds, table.options, verifier_buffer, verifier_threshold)


@dataclass
class PassRecord:
    iteration: int
    counts: IssueCounts
    issue_score: float
    registry: list[dict[str, Any]]
    report: dict[str, Any]
    changes: ChangeSummary
    candidates: list[CandidateBox]
    calls: int
    boxgen_skipped: bool
    initial: list[dict[str, Any]] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "counts": [self.counts.misses, self.counts.falses, self.counts.refinements],
            "issue_score": self.issue_score,
            "registry": self.registry,
            "report": self.report,
            "changes": self.changes.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
            "calls": self.calls,
            "boxgen_skipped": self.boxgen_skipped,
            "initial": self.initial,
            **({"extra": self.extra} if self.extra else {}),
        }


@dataclass
class Decision:
    iteration: int
    issue_score: float
    state: int
    action: Action
    forced: bool
    reward: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "issue_score": self.issue_score,
            "state": self.state,
            "action": self.action.name,
            "forced": self.forced,
            "reward": self.reward,
        }


PassHook = Callable[[int, SubjectRegistry], dict[str, Any]]


class CropLoop:
    """Agent passes over one crop. Controller decisions live in :func:`drive`."""

    def __init__(
        self,
        view: ImageView,
        prompt: str,
        guidelines: Sequence[Guideline],
        agents: AgentSet,
        roles: dict[str, RoleConfig],
        ledger: CostLedger,
        settings: LoopSettings = LoopSettings(),
        hook: PassHook | None = None,
    ) -> None:
        self.view = view
        self.prompt = prompt
        self.guidelines = list(guidelines)
        self.agents = agents
        self.roles = roles
        self.ledger = ledger
        self.settings = settings
        self.hook = hook
        self.registry = SubjectRegistry()
        self.report = SupervisorReport()
        self.verified: list[CandidateBox] = []
        self.passes: list[PassRecord] = []
        self.warnings: list[str] = []
        self.error: str | None = None
        self.initial_count = 0

    def _segment(self, prompt: SegmenterPrompt):
        return segment(self.agents.segmenter, self.view, prompt)

    def _mask_or_none(self, box):
        try:
            return self._segment(SegmenterPrompt("box_positive", box))
        except BackendError as exc:
            self.warnings.append(f"segmenter failed: {exc}")
            return None

    def step(self) -> PassRecord:
        """Run the next pass. Raises BackendError when a required call fails twice."""
        t = len(self.passes) + 1
        before = len(self.ledger)
        initial = None
        if t == 1:
            self.registry = worker_detect(
                self.agents.worker, self.view, self.prompt, self.guidelines, self.agents.segmenter,
                self.ledger, self.roles["worker"], self.warnings,
            )
            self.initial_count = len(self.registry)
            initial = self.registry.snapshot()
            changes = ChangeSummary()
        else:
            known = set(self.registry.boxes())
            refreshed = worker_refresh(
                self.agents.worker, self.view, self.prompt, self.guidelines, self.registry, self.report,
                self.verified, self.ledger, self.roles["worker_refresh"], self.warnings,
            )
            by_id = {s.id: s for s in refreshed}

            def refine(subject: SubjectInstance, instruction: str):
                inst = by_id.get(subject.id)
                return inst.box if inst is not None else None

            changes = apply_actions(self.registry, self.verified, self.report, self._segment, refine, self.warnings)
            for inst in refreshed:
                if inst.id not in known:
                    changes.added.append(self.registry.add(inst.label, inst.box, self._mask_or_none(inst.box)))

        self.report = supervisor_evaluate(
            self.agents.supervisor, self.view, self.prompt, self.registry, self.guidelines,
            self.ledger, self.roles["supervisor_eval"], self.warnings,
        )
        candidates: list[CandidateBox] = []
        scored: list[CandidateBox] = []
        self.verified = []
        if self.report.needs_boxgen:
            candidates = supervisor_boxgen(
                self.agents.boxgen, self.view, self.prompt, self.registry, self.report,
                self.ledger, self.roles["supervisor_boxgen"], self.warnings,
            )
            self.verified = verify_candidates(
                candidates, self.view, self.agents.scorer, self.settings.verifier_buffer,
                self.settings.verifier_threshold, self.warnings, scored,
            )
        counts = IssueCounts(*self.report.counts())
        record = PassRecord(
            iteration=t,
            counts=counts,
            issue_score=issue_score(counts),
            registry=self.registry.snapshot(),
            report=self.report.to_dict(),
            changes=changes,
            candidates=scored,
            calls=len(self.ledger) - before,
            boxgen_skipped=not self.report.needs_boxgen,
            initial=initial,
            extra=self.hook(t, self.registry) if self.hook else {},
        )
        self.passes.append(record)
        return record

    def discard_pending(self) -> None:
        self.verified = []


def drive(loops: Sequence[CropLoop], policy: Policy, settings: LoopSettings) -> list[Decision]:
    """Run ``loops`` as one controller episode.

    A single loop gives per-crop control. Several loops share each decision:
    their issue counts and initial object counts are summed (per-image mode).
    A loop whose backend fails drops out with ``error`` set.
    """
    live = list(loops)
    decisions: list[Decision] = []
    bounds = settings.bounds
    t = 0
    while live:
        t += 1
        records = []
        for loop in list(live):
            try:
                records.append(loop.step())
            except BackendError as exc:
                loop.error = str(exc)
                loop.warnings.append(f"crop abandoned: {exc}")
                live.remove(loop)
        if not live:
            break
        counts = IssueCounts(
            sum(r.counts.misses for r in records),
            sum(r.counts.falses for r in records),
            sum(r.counts.refinements for r in records),
        )
        i_t = issue_score(counts)
        n0 = sum(loop.initial_count for loop in live)
        s = encode_state(n0, counts, settings.thresholds, settings.options).s
        at_max = t >= bounds.max_iters
        if decisions:
            prev = decisions[-1]
            prev.reward = reward(prev.issue_score, i_t, Action.CONTINUE, False, settings.hyper, settings.options)
            policy.observe(prev.state, Action.CONTINUE, prev.reward, None if at_max else s, at_max)
        action = Action(policy.decide(s, t))
        forced = t < bounds.min_iters or at_max
        decision = Decision(t, i_t, s, action, forced)
        decisions.append(decision)
        if action == Action.STOP:
            decision.reward = reward(i_t, None, Action.STOP, at_max, settings.hyper, settings.options)
            if not at_max:
                policy.observe(s, Action.STOP, decision.reward, None, True)
            for loop in live:
                loop.discard_pending()
            break
    return decisions


def replay_passes(passes: Sequence[dict[str, Any]]) -> SubjectRegistry:
    """Rebuild a crop's final registry from its logged passes (no model calls)."""
    from .geometry import BoundingBox

    if not passes:
        return SubjectRegistry()
    first = passes[0]["initial"] or []
    registry = SubjectRegistry.seeded(
        [SubjectInstance(s["id"], s["label"], BoundingBox.from_list(s["box_2d"])) for s in first]
    )
    for p in passes[1:]:
        replay_changes(registry, ChangeSummary.from_dict(p["changes"]))
    return registry
