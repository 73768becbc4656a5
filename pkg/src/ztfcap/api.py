"""HTTP surface of the CAP: linking, ingestion, provision, administration."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Header, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import errors
from .linking import key_from_dict, parse_admin_table_csv
from .model import (
    ContextRecord,
    b64url_decode,
    b64url_encode,
    from_rfc3339,
    to_rfc3339,
)
from .service import CapConfig, CapService

_STATUS_BY_CODE = {
    "AuthFailed": 401,
    "Expired": 401,
    "BadSignature": 401,
    "BadPopSignature": 401,
    "WrongAudience": 401,
    "ConsentDenied": 403,
    "UnknownCapId": 404,
    "UnknownCtxC": 404,
    "UnknownRp": 404,
    "UnknownChallenge": 404,
    "NoSuchBinding": 404,
    "NoSuchConsent": 404,
    "BindingConflict": 409,
    "ChallengeReplayed": 409,
    "ChallengeExpired": 410,
    "MdmUnavailable": 502,
    "MdmAuthFailed": 502,
}


class ChallengeRequest(BaseModel):
    pass


class ChallengeResponseBody(BaseModel):
    challenge_id: str
    cert_chain: list[str] = Field(description="base64url DER certificates, leaf first")
    signature: str


class ConsentBody(BaseModel):
    cap_id: str
    rp_id: str
    prefixes: list[str]
    expires_at: Optional[str] = None


class CapIdBody(BaseModel):
    cap_id: str


class CtxCBody(BaseModel):
    name: str


class RpBody(BaseModel):
    rp_id: str
    webhook_url: Optional[str] = None


class PseudoIdBody(BaseModel):
    cap_id: str
    audience: str


class RevokeBindingBody(BaseModel):
    key: dict


def _bearer(authorization: Optional[str]) -> str:
    if not authorization or not authorization.startswith("Bearer "):
        raise errors.AuthFailed("missing bearer token")
    return authorization[len("Bearer ") :]


def create_app(service: CapService) -> FastAPI:
    app = FastAPI(title="ztf-cap", version="0.1.0")
    app.state.service = service

    @app.exception_handler(errors.ZtfError)
    async def ztf_error_handler(request: Request, exc: errors.ZtfError):
        status = _STATUS_BY_CODE.get(exc.code, 400)
        return JSONResponse(status_code=status, content={"error": exc.code, "detail": exc.message})

    def admin_auth(authorization: Optional[str] = Header(default=None)) -> None:
        service.authenticate_admin(_bearer(authorization))

    def ctxc_auth(authorization: Optional[str] = Header(default=None)) -> str:
        return service.authenticate_ctxc(_bearer(authorization))

    def rp_auth(authorization: Optional[str] = Header(default=None)) -> str:
        return service.authenticate_rp(_bearer(authorization))

    def device_auth(authorization: Optional[str] = Header(default=None)) -> str:
        return service.authenticate_device(_bearer(authorization))

    # -- public key ----------------------------------------------------------

    @app.get("/keys")
    def get_keys():
        return service.linking.public_key_info()

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    # -- certificate linking ---------------------------------------------------

    @app.post("/link/challenge")
    def link_challenge(cap_id: str = Depends(device_auth)):
        challenge = service.linking.create_challenge(cap_id)
        return {
            "challenge_id": challenge.challenge_id,
            "nonce": b64url_encode(challenge.nonce),
            "expires_at": to_rfc3339(challenge.expires_at),
        }

    @app.post("/link/response")
    def link_response(body: ChallengeResponseBody, cap_id: str = Depends(device_auth)):
        binding = service.linking.verify_challenge_response(
            challenge_id=body.challenge_id,
            cert_chain=[b64url_decode(c) for c in body.cert_chain],
            signature=b64url_decode(body.signature),
        )
        return binding.to_dict()

    # -- ingestion ----------------------------------------------------------------

    @app.post("/ingest/radius")
    async def ingest_radius(
        request: Request,
        source: str = Depends(ctxc_auth),
        x_ctxc_name: Optional[str] = Header(default=None),
    ):
        if x_ctxc_name and x_ctxc_name != source:
            raise errors.AuthFailed(f"token does not belong to CtxC {x_ctxc_name!r}")
        text = (await request.body()).decode("utf-8", errors="replace")
        return service.ingest_detail_text(source, text)

    @app.post("/ingest/context")
    async def ingest_context(request: Request, source: str = Depends(ctxc_auth)):
        record = ContextRecord.from_dict(await request.json())
        result = service.ingest_context(record, authenticated_source=source)
        return {
            "status": result.status,
            "sequence": result.stored.seq if result.stored else None,
        }

    # -- RP provision ----------------------------------------------------------------

    @app.get("/contexts/{cap_id}")
    def get_contexts(
        cap_id: str,
        types: Optional[str] = None,
        since: Optional[str] = None,
        limit: int = 500,
        rp_id: str = Depends(rp_auth),
    ):
        type_list = [t for t in types.split(",") if t] if types else None
        since_ts = from_rfc3339(since) if since else None
        records, state = service.rp_get_contexts(
            rp_id=rp_id, cap_id=cap_id, types=type_list, since=since_ts, limit=limit
        )
        return {"contexts": [s.to_dict() for s in records], "derived_state": state}

    # -- consents -------------------------------------------------------------------

    @app.post("/consents", dependencies=[Depends(admin_auth)])
    def post_consent(body: ConsentBody):
        expires = from_rfc3339(body.expires_at) if body.expires_at else None
        consent = service.consents.grant(body.cap_id, body.rp_id, body.prefixes, expires)
        return consent.to_dict()

    @app.delete("/consents/{cap_id}/{rp_id}", dependencies=[Depends(admin_auth)])
    def delete_consent(cap_id: str, rp_id: str):
        service.consents.revoke(cap_id, rp_id)
        return Response(status_code=204)

    @app.get("/consents", dependencies=[Depends(admin_auth)])
    def list_consents():
        return {"consents": [c.to_dict() for c in service.consents.list()]}

    # -- administration ---------------------------------------------------------------

    @app.post("/admin/capids", dependencies=[Depends(admin_auth)])
    def register_cap_id(body: CapIdBody):
        entry = service.register_cap_id(body.cap_id)
        return {"cap_id": entry.cap_id, "device_token": entry.device_token}

    @app.get("/admin/capids", dependencies=[Depends(admin_auth)])
    def list_cap_ids():
        return {"cap_ids": service.list_cap_ids()}

    @app.post("/admin/ctxcs", dependencies=[Depends(admin_auth)])
    def register_ctxc(body: CtxCBody):
        entry = service.register_ctxc(body.name)
        return {"name": entry.name, "token": entry.token}

    @app.get("/admin/ctxcs", dependencies=[Depends(admin_auth)])
    def list_ctxcs():
        return {"ctxcs": service.list_ctxcs()}

    @app.post("/admin/rps", dependencies=[Depends(admin_auth)])
    def register_rp(body: RpBody):
        entry = service.register_rp(body.rp_id, body.webhook_url)
        return {"rp_id": entry.rp_id, "token": entry.token, "webhook_url": entry.webhook_url}

    @app.get("/admin/rps", dependencies=[Depends(admin_auth)])
    def list_rps():
        return {
            "rps": [
                {"rp_id": e.rp_id, "webhook_url": e.webhook_url} for e in service.list_rps()
            ]
        }

    @app.post("/admin/table/import", dependencies=[Depends(admin_auth)])
    async def import_table(request: Request):
        text = (await request.body()).decode("utf-8")
        rows, malformed = parse_admin_table_csv(text)
        report = service.linking.import_admin_table(rows)
        report.rejected = list(malformed) + report.rejected
        return report.to_dict()

    @app.post("/admin/pseudoid", dependencies=[Depends(admin_auth)])
    def issue_pseudo_id(body: PseudoIdBody):
        token = service.linking.issue_pseudo_id(body.cap_id, body.audience)
        return {
            "token": token.compact,
            "pseudo_id": token.pseudo_id,
            "audience": token.audience,
            "expires_at": token.expires_at,
        }

    @app.get("/admin/bindings", dependencies=[Depends(admin_auth)])
    def list_bindings():
        return {"bindings": [b.to_dict() for b in service.linking.list_bindings()]}

    @app.post("/admin/bindings/revoke", dependencies=[Depends(admin_auth)])
    def revoke_binding(body: RevokeBindingBody):
        binding = service.linking.revoke_binding(key_from_dict(body.key))
        return binding.to_dict()

    @app.get("/admin/contexts/{cap_id}", dependencies=[Depends(admin_auth)])
    def admin_contexts(cap_id: str, limit: int = 20):
        derived = service.store.derived_state(cap_id)
        records = service.store.query(cap_id, limit=10**9)
        return {
            "derived_state": derived.to_dict(),
            "contexts": [s.to_dict() for s in records[-limit:]],
        }

    return app


def main() -> None:
    """Run the CAP service (configuration via environment variables)."""
    import uvicorn

    config = CapConfig(
        data_dir=Path(os.environ.get("ZTF_DATA_DIR", "./ztf-data")),
        admin_token=os.environ.get("ZTF_ADMIN_TOKEN", ""),
    )
    service = CapService(config)
    print(f"admin token: {service.config.admin_token}")
    uvicorn.run(
        create_app(service),
        host=os.environ.get("ZTF_HOST", "127.0.0.1"),
        port=int(os.environ.get("ZTF_PORT", "8080")),
    )


if __name__ == "__main__":
    main()
