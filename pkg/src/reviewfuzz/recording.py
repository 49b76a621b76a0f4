"""Record/replay of HTTP exchanges so live runs can be repeated offline.

Every request is keyed by a SHA-256 over its method, URL, sorted query
parameters and JSON body.  In ``record`` mode the response body is written
verbatim to ``<dir>/<key>.json``; in ``replay`` mode the file is read back
and the network is never touched.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import httpx


class RetriableError(RuntimeError):
    """Transport or authentication failure that a caller may retry."""


class ReplayMiss(LookupError):
    pass


def request_key(method: str, url: str, params: Optional[dict] = None, body: Any = None) -> str:
    payload = json.dumps(
        {"method": method.upper(), "url": url, "params": sorted((params or {}).items()), "body": body},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()


class RecordingTransport:
    def __init__(
        self,
        fixtures_dir: Path,
        mode: str = "record",
        headers: Optional[dict] = None,
        timeout: float = 60.0,
    ) -> None:
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown recording mode {mode!r}")
        self.dir = Path(fixtures_dir)
        self.mode = mode
        self.headers = headers or {}
        self.timeout = timeout

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def request(self, method: str, url: str, params: Optional[dict] = None, body: Any = None) -> Any:
        key = request_key(method, url, params, body)
        path = self._path(key)
        if self.mode == "replay":
            if not path.exists():
                raise ReplayMiss(f"no recorded response for {method} {url} ({key[:12]})")
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        try:
            resp = httpx.request(
                method, url, params=params, json=body, headers=self.headers, timeout=self.timeout
            )
        except httpx.HTTPError as exc:
            raise RetriableError(f"{method} {url}: {exc}") from exc
        if resp.status_code in (401, 403, 429) or resp.status_code >= 500:
            raise RetriableError(f"{method} {url}: HTTP {resp.status_code}")
        resp.raise_for_status()
        data = resp.json()
        self.dir.mkdir(parents=True, exist_ok=True)
        record = {"request": {"method": method.upper(), "url": url, "params": params, "body": body},
                  "response": data}
        path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return data
