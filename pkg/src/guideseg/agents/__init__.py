from ..protocol import SegmenterPrompt
from .base import (
    Backend,
    BackendRequest,
    BackendResponse,
    ImageView,
    RoleConfig,
    Scorer,
    Segmenter,
    call_backend,
)
from .roles import (
    default_roles,
    load_prompts,
    render,
    segment,
    sigmoid,
    supervisor_boxgen,
    supervisor_evaluate,
    verify_candidates,
    worker_detect,
    worker_refresh,
)

__all__ = [
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "ImageView",
    "RoleConfig",
    "Scorer",
    "Segmenter",
    "SegmenterPrompt",
    "call_backend",
    "default_roles",
    "load_prompts",
    "render",
    "segment",
    "sigmoid",
    "supervisor_boxgen",
    "supervisor_evaluate",
    "verify_candidates",
    "worker_detect",
    "worker_refresh",
]
