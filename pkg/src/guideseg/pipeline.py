"""End-to-end orchestration: context, per-crop agent loops under the controller, merge, accounting."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .agents.base import ImageView
from .agents.roles import default_roles, load_prompts
from .airc import Controller, FixedIterations, IterationBounds, QTable
from .context import DEFAULT_DOWNSCALE, DEFAULT_K, construct_context
from .errors import ValidationError
from .geometry import BinaryMask, BoundingBox, CropRegion, union_all
from .guidelines import Embedder, GuidelineIndex, HashEmbedder, build_index, load_corpus
from .loop import AgentSet, CropLoop, Decision, drive, replay_passes, settings_for
from .metrics import CostLedger, PriceConfig, ledger_summary
from .sim.model import ErrorModel

log = logging.getLogger(__name__)

MERGE_IOU = 0.5


def bundled_corpus() -> Path:
    return Path(str(resources.files("guideseg") / "data" / "guidelines.json"))


@dataclass(frozen=True)
class RemoteConfig:
    """Endpoints of the generic model-server contract (see ``agents.remote``)."""

    worker: str = ""
    supervisor: str = ""
    boxgen: str = ""
    segmenter: str = ""
    scorer: str = ""
    captioner: str = ""
    detector: str = ""
    embedder: str = ""
    api_key_env: str = "GUIDESEG_API_KEY"
    normalized_scale: float | None = None
    timeout_s: float = 60.0


@dataclass(frozen=True)
class RunConfig:
    prompt: str = "pedestrian"
    corpus: str | None = None
    index: str | None = None
    k: int = DEFAULT_K
    downscale: float = DEFAULT_DOWNSCALE
    margin: int = 0
    worker_temperature: float = 0.5
    eval_temperature: float = 0.3
    boxgen_temperature: float = 0.5
    verifier_buffer: float = 0.1
    verifier_threshold: float = 0.5
    bounds: IterationBounds = field(default_factory=IterationBounds)
    airc_mode: Literal["greedy", "train"] = "greedy"
    scope: Literal["crop", "image"] = "crop"
    backend: Literal["simulated", "remote"] = "simulated"
    prices: PriceConfig = field(default_factory=PriceConfig)
    seed: int = 0
    error_model: ErrorModel = field(default_factory=ErrorModel)
    remote: RemoteConfig = field(default_factory=RemoteConfig)
    prompts_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValidationError("prompt must be non-empty")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not 0 < self.downscale <= 1:
            raise ValidationError("downscale must be in (0, 1]")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        if not 0 <= self.verifier_buffer or not 0 <= self.verifier_threshold <= 1:
            raise ValidationError("verifier buffer must be >= 0 and threshold in [0, 1]")
        if self.airc_mode not in ("greedy", "train"):
            raise ValidationError(f"airc_mode must be 'greedy' or 'train', got {self.airc_mode!r}")
        if self.scope not in ("crop", "image"):
            raise ValidationError(f"scope must be 'crop' or 'image', got {self.scope!r}")
        if self.backend not in ("simulated", "remote"):
            raise ValidationError(f"backend must be 'simulated' or 'remote', got {self.backend!r}")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["error_model"] = self.error_model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ValidationError("run config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown run config fields: {sorted(unknown)}")
        d = dict(data)
        try:
            if "bounds" in d:
                d["bounds"] = IterationBounds(**d["bounds"])
            if "prices" in d:
                d["prices"] = PriceConfig(**d["prices"])
            if "error_model" in d:
                d["error_model"] = ErrorModel.from_dict(d["error_model"])
            if "remote" in d:
                d["remote"] = RemoteConfig(**d["remote"])
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad run config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: run config is not valid JSON: {exc}") from exc


@dataclass
class CropTrace:
    region: CropRegion
    passes: list[dict[str, Any]]
    decisions: list[dict[str, Any]]
    warnings: list[str]
    error: str | None
    final_registry: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "region": self.region.to_dict(),
            "passes": self.passes,
            "decisions": self.decisions,
            "warnings": self.warnings,
            "error": self.error,
            "final_registry": self.final_registry,
        }


@dataclass
class RunTrace:
    image: str
    context: dict[str, Any]
    crops: list[CropTrace]
    decisions: list[dict[str, Any]]
    subjects: list[dict[str, Any]]
    warnings: list[str]
    ledger: CostLedger
    mask: BinaryMask

    @property
    def cost(self) -> dict[str, Any]:
        return ledger_summary(self.ledger)

    def to_dict(self) -> dict[str, Any]:
        return {
            "image": self.image,
            "context": self.context,
            "crops": [c.to_dict() for c in self.crops],
            "decisions": self.decisions,
            "subjects": self.subjects,
            "warnings": self.warnings,
            "ledger": self.ledger.to_dict(),
            "cost": self.cost,
            "mask": self.mask.to_rle(),
        }


def replay_trace(trace: dict[str, Any]) -> list[list[dict[str, Any]]]:
    """Final registry snapshot of every crop, rebuilt from the logged changes alone."""
    return [replay_passes(c["passes"]).snapshot() for c in trace["crops"]]


def image_size(handle: Any) -> tuple[int, int]:
    size = getattr(handle, "size", None)
    if isinstance(size, tuple) and len(size) == 2:
        return int(size[0]), int(size[1])
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise ValidationError("reading image sizes needs Pillow: pip install 'artifact[images]'") from exc
    try:
        with Image.open(handle) as img:
            return img.size
    except OSError as exc:
        raise ValidationError(f"cannot open image {handle}: {exc}") from exc


def remote_agents(cfg: RemoteConfig) -> tuple[AgentSet, Embedder | None]:
    from .agents.remote import HttpBackend, HttpEmbedder, HttpScorer, HttpSegmenter

    required = {"worker": cfg.worker, "supervisor": cfg.supervisor, "boxgen": cfg.boxgen,
                "segmenter": cfg.segmenter, "scorer": cfg.scorer}
    missing = [k for k, v in required.items() if not v]
    if missing:
        raise ValidationError(f"remote backend needs endpoints for: {', '.join(missing)}")
    kw = {"api_key_env": cfg.api_key_env, "timeout": cfg.timeout_s}
    agents = AgentSet(
        worker=HttpBackend(cfg.worker, cfg.normalized_scale, **kw),
        supervisor=HttpBackend(cfg.supervisor, cfg.normalized_scale, **kw),
        boxgen=HttpBackend(cfg.boxgen, cfg.normalized_scale, **kw),
        segmenter=HttpSegmenter(cfg.segmenter, **kw),
        scorer=HttpScorer(cfg.scorer, **kw),
        captioner=HttpBackend(cfg.captioner, **kw) if cfg.captioner else None,
        detector=HttpBackend(cfg.detector, cfg.normalized_scale, **kw) if cfg.detector else None,
    )
    embedder = HttpEmbedder(cfg.embedder, **kw) if cfg.embedder else None
    return agents, embedder


def default_agents(config: RunConfig) -> tuple[AgentSet, Embedder]:
    if config.backend == "remote":
        agents, embedder = remote_agents(config.remote)
        return agents, embedder or HashEmbedder()
    from .sim.doubles import sim_agents

    return sim_agents(), HashEmbedder()


def make_policy(config: RunConfig, table: QTable | None) -> Controller | FixedIterations:
    if table is None:
        table = QTable()
    return Controller(table, config.bounds, config.airc_mode, np.random.default_rng([config.seed, 1]))


def _merge(
    entries: list[tuple[str, BoundingBox, BinaryMask | None]], width: int, height: int, warnings: list[str]
) -> tuple[list[dict[str, Any]], BinaryMask]:
    """Collapse same-label subjects with IoU >= 0.5 (seam duplicates) and union every mask."""
    merged: list[list[Any]] = []
    for label, box, mask in entries:
        for m in merged:
            if m[0] == label and m[1].iou(box) >= MERGE_IOU:
                m[2].append(mask)
                m[3] += 1
                break
        else:
            merged.append([label, box, [mask], 1])
    masks = []
    for label, box, ms, _ in merged:
        present = [m for m in ms if m is not None]
        if not present:
            warnings.append(f"{label} at {box.as_list()} has no mask; left out of the class mask")
        masks.extend(present)
    subjects = [{"label": lbl, "box_2d": b.as_list(), "sources": n} for lbl, b, _, n in merged]
    return subjects, union_all(masks, width, height)


def run_image(
    handle: Any,
    config: RunConfig = RunConfig(),
    q_table: QTable | None = None,
    agents: AgentSet | None = None,
    index: GuidelineIndex | None = None,
    embedder: Embedder | None = None,
    policy: Any = None,
    ledger: CostLedger | None = None,
) -> tuple[BinaryMask, RunTrace]:
    """Segment everything ``config.prompt`` asks for in one image.

    ``handle`` is whatever the backends understand: a path for remote
    models, a :class:`~guideseg.sim.SimImage` for the simulator. Handles
    with a ``crop(region, index)`` method get a fresh handle per crop.
    """
    width, height = image_size(handle)
    if agents is None:
        agents, default_embedder = default_agents(config)
        embedder = embedder or default_embedder
    embedder = embedder or HashEmbedder()
    if index is None and config.index:
        index = GuidelineIndex.load(config.index)
    if index is None:
        corpus = load_corpus(config.corpus or bundled_corpus())
        index = build_index(corpus, embedder)
    if index.embedder_tag != embedder.tag:
        raise ValidationError(
            f"guideline index was built with embedder {index.embedder_tag!r}, but queries use {embedder.tag!r}"
        )
    roles = default_roles(
        load_prompts(config.prompts_dir), config.worker_temperature, config.eval_temperature, config.boxgen_temperature
    )
    ledger = ledger if ledger is not None else CostLedger(config.prices)
    policy = policy if policy is not None else make_policy(config, q_table)
    settings = settings_for(policy, config.bounds, config.verifier_buffer, config.verifier_threshold)

    full = CropRegion.full(width, height)
    ctx = construct_context(
        ImageView(handle, full), config.prompt, index, embedder, roles, ledger,
        agents.captioner, agents.detector, config.k, config.downscale, config.margin,
    )
    loops = []
    for i, region in enumerate(ctx.plan.crops):
        crop_handle = handle.crop(region, i) if hasattr(handle, "crop") else handle
        loops.append(CropLoop(ImageView(crop_handle, region), config.prompt, ctx.guidelines, agents, roles, ledger, settings))

    decisions_by_crop: list[list[Decision]] = [[] for _ in loops]
    shared: list[Decision] = []
    if config.scope == "crop":
        for i, loop in enumerate(loops):
            decisions_by_crop[i] = drive([loop], policy, settings)
    else:
        shared = drive(loops, policy, settings)

    warnings = list(ctx.warnings)
    entries: list[tuple[str, BoundingBox, BinaryMask | None]] = []
    crops = []
    for loop, decisions in zip(loops, decisions_by_crop):
        warnings.extend(loop.warnings)
        region = loop.view.region
        if loop.error is None:
            for s in loop.registry:
                mask = region.mask_to_parent(s.mask) if s.mask is not None else None
                entries.append((s.label, region.to_parent(s.box), mask))
        else:
            log.error("crop %s failed: %s", region.box.as_list(), loop.error)
        crops.append(
            CropTrace(
                region,
                [p.to_dict() for p in loop.passes],
                [d.to_dict() for d in decisions],
                list(loop.warnings),
                loop.error,
                loop.registry.snapshot() if loop.error is None else [],
            )
        )
    subjects, mask = _merge(entries, width, height, warnings)
    trace = RunTrace(
        image=str(getattr(handle, "ref", handle)),
        context=ctx.to_dict(),
        crops=crops,
        decisions=[d.to_dict() for d in shared],
        subjects=subjects,
        warnings=warnings,
        ledger=ledger,
        mask=mask,
    )
    return mask, trace
