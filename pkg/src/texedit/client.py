"""Thin HTTP client for a running texedit service."""
from __future__ import annotations

import httpx
import numpy as np

from .config import Settings
from .errors import RuntimeFailure, ValidationError
from .service import schemas as S

TIMEOUT = httpx.Timeout(10.0, read=3600.0)


class RemoteError(RuntimeFailure):
    pass


def _post(server: str, path: str, payload: dict, client: httpx.Client | None = None) -> dict:
    own = client is None
    client = client or httpx.Client(base_url=server, timeout=TIMEOUT)
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise RemoteError(f"service at {server} unreachable: {exc}") from exc
    finally:
        if own:
            client.close()
    if resp.status_code == 200:
        return resp.json()
    try:
        body = resp.json()
    except ValueError:
        body = {"message": resp.text}
    if resp.status_code == 422:
        field = body.get("field")
        if "detail" in body:  # FastAPI's own request validation
            loc = body["detail"][0].get("loc", []) if body["detail"] else []
            field = str(loc[-1]) if loc else None
        raise ValidationError(body.get("message") or str(body.get("detail")), field=field)
    raise RemoteError(body.get("message") or f"HTTP {resp.status_code}")


def remote_edit(server: str, settings: Settings, image: np.ndarray, mask: np.ndarray | None = None,
                client: httpx.Client | None = None) -> S.EditResponse:
    payload = {"image": S.encode_png(image), "mask": S.encode_png(mask) if mask is not None else None,
               "settings": settings.model_dump(exclude_none=True)}
    return S.EditResponse.model_validate(_post(server, "/edit", payload, client))


def remote_reconstruct(server: str, settings: Settings, image: np.ndarray,
                       client: httpx.Client | None = None) -> S.ReconstructResponse:
    payload = {"image": S.encode_png(image), "settings": settings.model_dump(exclude_none=True)}
    return S.ReconstructResponse.model_validate(_post(server, "/reconstruct", payload, client))
