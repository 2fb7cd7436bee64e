from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any

from ..errors import ValidationError


@dataclass(frozen=True)
class ErrorModel:
    """Failure rates of the simulated agents.

    Worker: ``worker_miss_rate`` per ground-truth object, ``worker_false_rate``
    per distractor, ``worker_coarse_rate`` for a loose box that needs
    refinement, ``worker_jitter_px`` of uniform box noise, and
    ``new_issue_rate`` for a fresh false positive on each refresh.
    Supervisor: each true issue is reported with ``supervisor_detect_prob``;
    ``spurious_refinement_rate`` flags good boxes anyway.
    Fixes: a reported issue is fixed with ``fix_success_prob`` per pass, unless
    boxgen drops it (``boxgen_drop_rate``) or the verifier's verdict is
    flipped (``verifier_noise``).
    """

    worker_miss_rate: float = 0.25
    worker_false_rate: float = 0.25
    worker_coarse_rate: float = 0.0
    worker_jitter_px: int = 2
    new_issue_rate: float = 0.02
    supervisor_detect_prob: float = 0.9
    spurious_refinement_rate: float = 0.0
    fix_success_prob: float = 0.6
    boxgen_drop_rate: float = 0.1
    verifier_noise: float = 0.05

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "worker_jitter_px":
                if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                    raise ValidationError("worker_jitter_px must be a non-negative integer")
            elif not 0.0 <= float(value) <= 1.0:
                raise ValidationError(f"{f.name}={value} is not a probability")

    @classmethod
    def zero(cls, **overrides: Any) -> ErrorModel:
        """A perfect environment: no Worker errors; the Supervisor sees and fixes everything."""
        base = dict(
            worker_miss_rate=0.0, worker_false_rate=0.0, worker_coarse_rate=0.0, worker_jitter_px=0,
            new_issue_rate=0.0, supervisor_detect_prob=1.0, spurious_refinement_rate=0.0,
            fix_success_prob=1.0, boxgen_drop_rate=0.0, verifier_noise=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ErrorModel:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown error-model fields: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
