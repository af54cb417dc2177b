"""HTTP transport for real provider endpoints.

Sends one JSON POST per request. The API key is read from the environment
variable named in the provider config, never from the config itself, and is
attached as a bearer token.
"""

from __future__ import annotations

import os

import requests

from icl_re.providers.base import TransportError

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class HttpTransport:
    def __init__(
        self,
        base_url: str,
        api_key_env: str = "",
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        if not base_url:
            raise ValueError("http transport needs a base_url")
        self.base_url = base_url
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise TransportError(
                    f"environment variable {self.api_key_env!r} is not set",
                    retryable=False,
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def send(self, body: dict) -> dict:
        try:
            response = self.session.post(
                self.base_url, json=body, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}", retryable=True) from exc
        if response.status_code in RETRYABLE_STATUS:
            raise TransportError(
                f"HTTP {response.status_code} from {self.base_url}", retryable=True
            )
        if response.status_code >= 400:
            raise TransportError(
                f"HTTP {response.status_code} from {self.base_url}: "
                f"{response.text[:200]}",
                retryable=False,
            )
        try:
            payload = response.json()
        except ValueError as exc:
            raise TransportError(
                f"non-JSON response from {self.base_url}", retryable=False
            ) from exc
        if not isinstance(payload, dict):
            raise TransportError(
                f"expected a JSON object from {self.base_url}", retryable=False
            )
        return payload
