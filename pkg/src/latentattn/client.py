"""Thin HTTP client for the service.

Without a base URL the app runs in-process over an ASGI transport, so the
CLI works on a fresh checkout with no server daemon; pass a URL to target
a running instance instead. Either way every command goes through the
same request/response schema.
"""

from __future__ import annotations

import asyncio

import httpx

from .errors import ConfigError


class ServiceError(ConfigError):
    """The service rejected the request or failed to respond."""


class ServiceClient:
    def __init__(self, base_url: str | None = None, timeout: float = 900.0):
        self._base_url = base_url
        self._timeout = timeout
        self._app = None
        if base_url is None:
            from .service.app import create_app

            self._app = create_app()

    def get(self, path: str) -> dict:
        return self._request("GET", path, None)

    def post(self, path: str, payload: dict) -> dict:
        return self._request("POST", path, payload)

    def _request(self, method: str, path: str, payload: dict | None) -> dict:
        if self._app is not None:
            return asyncio.run(self._asgi_request(method, path, payload))
        try:
            with httpx.Client(base_url=self._base_url, timeout=self._timeout) as client:
                return self._finish(client.request(method, path, json=payload))
        except httpx.HTTPError as exc:
            raise ServiceError(f"request to {self._base_url}{path} failed: {exc}") from exc

    async def _asgi_request(self, method: str, path: str, payload: dict | None) -> dict:
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://latent-attn", timeout=self._timeout
        ) as client:
            return self._finish(await client.request(method, path, json=payload))

    @staticmethod
    def _finish(response: httpx.Response) -> dict:
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise ServiceError(f"service returned {response.status_code}: {detail}")
        return response.json()
