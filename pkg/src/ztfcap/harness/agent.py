"""Device agent: answers certificate link challenges over the CAP API.

Private keys live in memory only. The agent can be told to misbehave
(sign with a wrong key, replay a challenge) for negative-path scenarios.
"""

from __future__ import annotations

from typing import Optional, Sequence

import httpx

from ..linking import sign_pop
from ..model import b64url_decode, b64url_encode
from .pki import DeviceCredential


class DeviceAgent:
    def __init__(
        self,
        cap_id: str,
        device_token: str,
        credential: DeviceCredential,
        chain: Optional[Sequence[bytes]] = None,
    ):
        self.cap_id = cap_id
        self.device_token = device_token
        self.credential = credential
        self.chain = list(chain) if chain is not None else [credential.der]
        self.last_challenge_id: Optional[str] = None

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.device_token}"}

    def request_challenge(self, endpoint: str, client: Optional[httpx.Client] = None) -> dict:
        post = (client or httpx).post
        resp = post(f"{endpoint}/link/challenge", headers=self._headers())
        resp.raise_for_status()
        data = resp.json()
        self.last_challenge_id = data["challenge_id"]
        return data

    def respond(
        self,
        endpoint: str,
        challenge: dict,
        client: Optional[httpx.Client] = None,
        signing_key: Optional[object] = None,
    ) -> httpx.Response:
        nonce = b64url_decode(challenge["nonce"])
        signature = sign_pop(signing_key or self.credential.private_key, nonce, self.cap_id)
        body = {
            "challenge_id": challenge["challenge_id"],
            "cert_chain": [b64url_encode(der) for der in self.chain],
            "signature": b64url_encode(signature),
        }
        post = (client or httpx).post
        return post(f"{endpoint}/link/response", headers=self._headers(), json=body)

    def run_challenge(
        self,
        endpoint: str,
        client: Optional[httpx.Client] = None,
        signing_key: Optional[object] = None,
    ) -> httpx.Response:
        """Full challenge round-trip; returns the /link/response reply."""
        challenge = self.request_challenge(endpoint, client)
        return self.respond(endpoint, challenge, client, signing_key=signing_key)
