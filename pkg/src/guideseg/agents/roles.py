"""The agent roles: Worker, Supervisor_eval, Supervisor_boxgen, plus verifier and segmenter calls."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Sequence

from ..errors import BackendError, BoundsError, ProtocolError
from ..geometry import BinaryMask
from ..guidelines import Guideline
from ..metrics import CostLedger
from ..protocol import (
    CandidateBox,
    SegmenterPrompt,
    SubjectInstance,
    SubjectRegistry,
    SupervisorReport,
    parse_boxgen_output,
    parse_supervisor_eval,
    parse_worker_output,
)
from .base import BackendRequest, Backend, ImageView, RoleConfig, Scorer, Segmenter, call_backend

log = logging.getLogger(__name__)

TEMPLATE_NAMES = ("worker", "worker_refresh", "supervisor_eval", "supervisor_boxgen", "captioner", "detector")


def load_prompts(directory: str | Path | None = None) -> dict[str, str]:
    """Read one ``<name>.txt`` template per role; missing files fall back to the bundled ones."""
    bundled = resources.files("guideseg") / "prompts"
    out = {}
    for name in TEMPLATE_NAMES:
        path = Path(directory) / f"{name}.txt" if directory else None
        if path is not None and path.exists():
            out[name] = path.read_text(encoding="utf-8")
        else:
            out[name] = (bundled / f"{name}.txt").read_text(encoding="utf-8")
    return out


def render(template: str, prompt: str = "", guidelines: str = "", subjects: str = "") -> str:
    # Plain replacement: templates contain literal JSON braces.
    return template.replace("{PROMPT}", prompt).replace("{GUIDELINES}", guidelines).replace("{SUBJECTS}", subjects)


def format_guidelines(guidelines: Sequence[Guideline]) -> str:
    return "\n".join(f"{g.id}: {g.text}" for g in guidelines) or "(none retrieved)"


def format_subjects(registry: SubjectRegistry) -> str:
    return json.dumps(registry.snapshot(), separators=(",", ":"))


def default_roles(
    prompts: dict[str, str] | None = None,
    worker_t: float = 0.5,
    eval_t: float = 0.3,
    boxgen_t: float = 0.5,
) -> dict[str, RoleConfig]:
    p = prompts or load_prompts()
    return {
        "worker": RoleConfig("worker", p["worker"], worker_t),
        "worker_refresh": RoleConfig("worker", p["worker_refresh"], worker_t),
        "supervisor_eval": RoleConfig("supervisor_eval", p["supervisor_eval"], eval_t, thinking_mode=True, response_schema=True),
        "supervisor_boxgen": RoleConfig("supervisor_boxgen", p["supervisor_boxgen"], boxgen_t),
        "captioner": RoleConfig("captioner", p["captioner"], 0.0),
        "detector": RoleConfig("detector", p["detector"], 0.0),
    }


def segment(segmenter: Segmenter, image: ImageView, prompt: SegmenterPrompt) -> BinaryMask:
    if not prompt.box.within(image.width, image.height):
        raise BoundsError(f"segmenter box {prompt.box.as_list()} exceeds view {image.width}x{image.height}")
    return segmenter.segment(image, prompt)


def _mask_for(segmenter: Segmenter, image: ImageView, inst: SubjectInstance, warnings: list[str]) -> BinaryMask | None:
    try:
        return segment(segmenter, image, SegmenterPrompt("box_positive", inst.box))
    except BackendError as exc:
        warnings.append(f"segmenter failed for {inst.id}: {exc}")
        return None


def worker_detect(
    backend: Backend,
    image: ImageView,
    prompt: str,
    guidelines: Sequence[Guideline],
    segmenter: Segmenter,
    ledger: CostLedger,
    role: RoleConfig,
    warnings: list[str],
) -> SubjectRegistry:
    """Initial detection. Backend errors propagate after one retry; parse errors give an empty registry."""
    request = BackendRequest(
        role,
        (render(role.system_prompt, prompt, format_guidelines(guidelines)),),
        (image,),
        {"prompt": prompt, "guideline_ids": [g.id for g in guidelines]},
    )
    resp = call_backend(backend, request, ledger)
    try:
        instances = parse_worker_output(resp.text, image.width, image.height, warnings)
    except ProtocolError as exc:
        warnings.append(f"worker output unparseable, starting empty: {exc}")
        return SubjectRegistry()
    masked = [replace(inst, mask=_mask_for(segmenter, image, inst, warnings)) for inst in instances]
    return SubjectRegistry.seeded(masked)


def worker_refresh(
    backend: Backend,
    image: ImageView,
    prompt: str,
    guidelines: Sequence[Guideline],
    registry: SubjectRegistry,
    report: SupervisorReport,
    verified: Sequence[CandidateBox],
    ledger: CostLedger,
    role: RoleConfig,
    warnings: list[str],
) -> list[SubjectInstance]:
    """Hand the Supervisor's feedback back to the Worker and return its updated instance list."""
    request = BackendRequest(
        role,
        (render(role.system_prompt, prompt, format_guidelines(guidelines), format_subjects(registry)),),
        (image,),
        {
            "prompt": prompt,
            "subjects": registry.snapshot(),
            "refinements": [r.to_dict() for r in report.refinements],
            "verified": [c.to_dict() for c in verified],
        },
    )
    resp = call_backend(backend, request, ledger)
    try:
        return parse_worker_output(resp.text, image.width, image.height, warnings)
    except ProtocolError as exc:
        warnings.append(f"worker refresh unparseable, keeping current subjects: {exc}")
        return []


def supervisor_evaluate(
    backend: Backend,
    image: ImageView,
    prompt: str,
    registry: SubjectRegistry,
    guidelines: Sequence[Guideline],
    ledger: CostLedger,
    role: RoleConfig,
    warnings: list[str],
) -> SupervisorReport:
    """Critique the current subjects. An unparseable report counts as clean (with a loud warning)."""
    annotated = image.annotated(tuple((s.id, s.label, s.box) for s in registry))
    request = BackendRequest(
        role,
        (render(role.system_prompt, prompt, format_guidelines(guidelines), format_subjects(registry)),),
        (image, annotated),
        {"prompt": prompt, "subjects": registry.snapshot(), "guideline_ids": [g.id for g in guidelines]},
    )
    resp = call_backend(backend, request, ledger)
    try:
        return parse_supervisor_eval(resp.text, image.width, image.height, warnings)
    except ProtocolError as exc:
        msg = f"SUPERVISOR REPORT UNPARSEABLE, treating as clean: {exc}"
        log.error(msg)
        warnings.append(msg)
        return SupervisorReport()


def supervisor_boxgen(
    backend: Backend,
    image: ImageView,
    prompt: str,
    registry: SubjectRegistry,
    report: SupervisorReport,
    ledger: CostLedger,
    role: RoleConfig,
    warnings: list[str],
) -> list[CandidateBox]:
    """Ask for boxes around each missing / false-positive entry. Skipped (no call) when there are none."""
    if not report.needs_boxgen:
        return []
    annotated = image.annotated(tuple((s.id, s.label, s.box) for s in registry))
    request = BackendRequest(
        role,
        (
            render(role.system_prompt, prompt, "", format_subjects(registry)),
            json.dumps({"missing_objects": report.to_dict()["missing_objects"],
                        "false_positives": report.to_dict()["false_positives"]}),
        ),
        (image, annotated),
        {"prompt": prompt, "report": report.to_dict(), "subjects": registry.snapshot()},
    )
    resp = call_backend(backend, request, ledger)
    try:
        return parse_boxgen_output(resp.text, report, image.width, image.height, warnings)
    except ProtocolError as exc:
        warnings.append(f"boxgen output unparseable, no candidates this pass: {exc}")
        return []


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def verify_candidates(
    candidates: Sequence[CandidateBox],
    image: ImageView,
    scorer: Scorer,
    buffer_frac: float = 0.1,
    threshold: float = 0.5,
    warnings: list[str] | None = None,
    scored: list[CandidateBox] | None = None,
) -> list[CandidateBox]:
    """Keep candidates whose verifier probability is at least ``threshold``.

    Each crop is the candidate box grown by ``buffer_frac`` of its size per
    side and clamped to the view. Every scored candidate (accepted or not) is
    appended to ``scored`` when given.
    """
    kept = []
    for c in candidates:
        crop = c.box.expand(buffer_frac, image.width, image.height)
        try:
            logit = float(scorer.score(image, crop, c.label))
        except BackendError as exc:
            if warnings is not None:
                warnings.append(f"verifier failed on {c.box_id}, rejecting: {exc}")
            out = replace(c, verified=False, score=None)
        else:
            p = sigmoid(logit)
            out = replace(c, verified=p >= threshold, score=p)
        if scored is not None:
            scored.append(out)
        if out.verified:
            kept.append(out)
    return kept
