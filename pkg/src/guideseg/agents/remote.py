"""HTTP adapters speaking the generic model-server contract.

Request body for text roles::

    {"role", "system", "parts": [{"type": "text", "text"} | {"type": "image_ref", ...}],
     "temperature", "thinking", "response_schema", "context"}

Response: ``{"text": ..., "usage": {"input_tokens": n, "output_tokens": m}}``.
Vendor-specific mappings belong in a shim server in front of this contract.
"""

from __future__ import annotations

import json
import os
import time
from typing import Any

import httpx
import numpy as np

from ..errors import BackendError
from ..geometry import BinaryMask, BoundingBox
from ..protocol import SegmenterPrompt, extract_json
from .base import BackendRequest, BackendResponse, ImageView

DEFAULT_KEY_ENV = "GUIDESEG_API_KEY"


class _HttpBase:
    def __init__(
        self,
        url: str,
        api_key_env: str = DEFAULT_KEY_ENV,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ) -> None:
        self.url = url
        self.api_key_env = api_key_env
        self.client = client or httpx.Client(timeout=timeout)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _post(self, payload: dict[str, Any]) -> tuple[dict[str, Any], float]:
        start = time.perf_counter()
        try:
            resp = self.client.post(self.url, json=payload, headers=self._headers())
            resp.raise_for_status()
            body = resp.json()
        except httpx.HTTPError as exc:
            raise BackendError(f"POST {self.url} failed: {exc}") from exc
        except ValueError as exc:
            raise BackendError(f"POST {self.url} returned non-JSON body") from exc
        if not isinstance(body, dict):
            raise BackendError(f"POST {self.url} returned {type(body).__name__}, expected an object")
        return body, (time.perf_counter() - start) * 1e3

    def close(self) -> None:
        self.client.close()


def image_part(view: ImageView) -> dict[str, Any]:
    return {
        "type": "image_ref",
        "ref": view.ref(),
        "crop": view.region.box.as_list(),
        "scale": view.scale,
        "annotations": [{"id": i, "label": lbl, "box_2d": b.as_list()} for i, lbl, b in view.annotations],
    }


def _rescale_boxes(value: Any, sy: float, sx: float) -> Any:
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if k in ("box_2d", "replacement_box") and isinstance(v, list) and len(v) == 4:
                try:
                    out[k] = [round(v[0] * sy), round(v[1] * sx), round(v[2] * sy), round(v[3] * sx)]
                    continue
                except TypeError:
                    pass
            out[k] = _rescale_boxes(v, sy, sx)
        return out
    if isinstance(value, list):
        return [_rescale_boxes(v, sy, sx) for v in value]
    return value


class HttpBackend(_HttpBase):
    """Text-role backend (Worker, Supervisor, captioner, coarse detector).

    ``normalized_scale``: if the model answers in normalized coordinates
    (e.g. 0-1000), every ``box_2d`` in its reply is converted to pixels of the
    first image in the request before the text reaches the parsers.
    """

    def __init__(self, url: str, normalized_scale: float | None = None, **kwargs: Any) -> None:
        super().__init__(url, **kwargs)
        self.normalized_scale = normalized_scale

    def complete(self, request: BackendRequest) -> BackendResponse:
        role = request.role
        payload = {
            "role": role.role,
            "system": request.text[0] if request.text else "",
            "parts": [{"type": "text", "text": t} for t in request.text[1:]]
            + [image_part(v) for v in request.images],
            "temperature": role.temperature,
            "thinking": role.thinking_mode,
            "response_schema": role.response_schema,
            "context": dict(request.context),
        }
        body, latency = self._post(payload)
        text = body.get("text")
        usage = body.get("usage") or {}
        if not isinstance(text, str):
            raise BackendError(f"{role.role}: response has no 'text'")
        try:
            in_tok = max(0, int(usage.get("input_tokens", 0)))
            out_tok = max(0, int(usage.get("output_tokens", 0)))
        except (TypeError, ValueError) as exc:
            raise BackendError(f"{role.role}: malformed usage block") from exc
        if self.normalized_scale and request.images:
            text = self._denormalize(text, request.images[0])
        return BackendResponse(text, in_tok, out_tok, latency)

    def _denormalize(self, text: str, view: ImageView) -> str:
        try:
            data = extract_json(text)
        except Exception:  # noqa: BLE001 - leave unparseable text for the protocol layer to report
            return text
        w, h = view.scaled_size
        scale = float(self.normalized_scale)  # type: ignore[arg-type]
        return json.dumps(_rescale_boxes(data, h / scale, w / scale))


class HttpSegmenter(_HttpBase):
    """POST ``{image_ref, crop, mode, box_2d, point}`` -> ``{"mask": {width, height, rle}}``."""

    def segment(self, image: ImageView, prompt: SegmenterPrompt) -> BinaryMask:
        body, _ = self._post(
            {
                "image_ref": image.ref(),
                "crop": image.region.box.as_list(),
                "mode": prompt.mode,
                "box_2d": prompt.box.as_list(),
                "point": list(prompt.point) if prompt.point else None,
            }
        )
        try:
            mask = BinaryMask.from_rle(body["mask"])
        except (KeyError, ValueError) as exc:
            raise BackendError(f"segmenter returned a malformed mask: {exc}") from exc
        if (mask.width, mask.height) != (image.width, image.height):
            raise BackendError("segmenter mask does not match the crop size")
        return mask


class HttpScorer(_HttpBase):
    """POST ``{image_ref, crop, box_2d, label}`` -> ``{"logit": float}``."""

    def score(self, image: ImageView, crop: BoundingBox, label: str) -> float:
        body, _ = self._post(
            {"image_ref": image.ref(), "crop": image.region.box.as_list(), "box_2d": crop.as_list(), "label": label}
        )
        try:
            return float(body["logit"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError("scorer response has no numeric 'logit'") from exc


class HttpEmbedder(_HttpBase):
    """POST ``{"input": text}`` -> ``{"embedding": [...]}``."""

    def __init__(self, url: str, tag: str = "remote", **kwargs: Any) -> None:
        super().__init__(url, **kwargs)
        self.tag = tag

    def embed(self, text: str) -> np.ndarray:
        body, _ = self._post({"input": text})
        try:
            return np.asarray(body["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError("embedder response has no numeric 'embedding'") from exc
