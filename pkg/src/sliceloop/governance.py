"""Access policies, the dataset lifecycle log and sealed sharing.

Authorization is the conjunction of every policy's verdict, so an empty
policy list grants access. Deployments that want default-deny must add a
policy that always fails unless explicitly satisfied.

Sealed package layout (all integers big-endian)::

    offset  size  field
    0       4     magic b"SLPK"
    4       1     format version (1)
    5       1     key_id length L (0..26)
    6       26    key_id bytes, UTF-8, zero padded
    32      12    AES-GCM nonce
    44      16    AES-GCM tag
    60      4     reserved, zero
    64      ...   ciphertext

The header bytes before the tag (magic, version, key id) are bound to the
ciphertext as associated data.
"""

from __future__ import annotations

import hashlib
import json
import operator
import os
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import canonical
from .errors import (
    AuthFailure,
    ChainCorrupt,
    Denied,
    IllegalTransition,
    MalformedPolicy,
    NotCertified,
    WrongKeyLength,
)
from .numerics import RngStream

# -- policies -------------------------------------------------------------------

POLICY_KINDS = ("role_required", "consent_required", "certification_required",
                "metadata_predicate")
_REQUIRED_PARAMS = {
    "role_required": ("role",),
    "consent_required": ("consent",),
    "certification_required": (),
    "metadata_predicate": ("key", "op", "value"),
}
_COMPARATORS = {
    "==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le,
    ">": operator.gt, ">=": operator.ge,
    "in": lambda a, b: a in b,
}


@dataclass(frozen=True)
class Policy:
    policy_id: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise MalformedPolicy(f"{self.policy_id}: unknown kind {self.kind!r}")
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise MalformedPolicy(f"{self.policy_id}: missing params {missing}")
        if self.kind == "metadata_predicate" and self.params["op"] not in _COMPARATORS:
            raise MalformedPolicy(f"{self.policy_id}: unknown comparator {self.params['op']!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        try:
            return cls(d["policy_id"], d["kind"], dict(d.get("params", {})))
        except KeyError as exc:
            raise MalformedPolicy(f"policy lacks field {exc}") from exc

    def to_dict(self) -> dict:
        return {"policy_id": self.policy_id, "kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class UserContext:
    user_id: str
    roles: frozenset = frozenset()
    consents: frozenset = frozenset()

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        object.__setattr__(self, "roles", frozenset(self.roles))
        object.__setattr__(self, "consents", frozenset(self.consents))


def is_certified(meta: dict) -> bool:
    """Metadata shows a passing validation verdict (or a Certified lifecycle state)."""
    return meta.get("validation_verdict") == "pass" or meta.get("lifecycle_state") == "Certified"


def evaluate(policy: Policy, user: UserContext, meta: dict) -> bool:
    p = policy.params
    if policy.kind == "role_required":
        return p["role"] in user.roles
    if policy.kind == "consent_required":
        return p["consent"] in user.consents
    if policy.kind == "certification_required":
        return is_certified(meta)
    if p["key"] not in meta:
        return False
    try:
        return bool(_COMPARATORS[p["op"]](meta[p["key"]], p["value"]))
    except TypeError:
        return False


def authorize(user: UserContext, meta: dict, policies) -> tuple[bool, dict[str, bool]]:
    """Conjunction of all policy verdicts; vacuously true for no policies."""
    verdicts = {}
    for pol in policies:
        if not isinstance(pol, Policy):
            raise MalformedPolicy(f"not a policy: {pol!r}")
        if pol.policy_id in verdicts:
            raise MalformedPolicy(f"duplicate policy id {pol.policy_id!r}")
        verdicts[pol.policy_id] = evaluate(pol, user, meta)
    return all(verdicts.values()), verdicts


def load_policies(path) -> list[Policy]:
    return [Policy.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


# -- lifecycle ------------------------------------------------------------------

STATES = ("Generated", "Augmented", "Calibrated", "Validated", "Certified", "Rejected", "Archived")
TRANSITIONS = {
    ("Generated", "ercd_complete"): "Augmented",
    ("Augmented", "fl_round_complete"): "Calibrated",
    ("Calibrated", "fl_round_complete"): "Calibrated",
    ("Calibrated", "metrics_computed"): "Validated",
    ("Validated", "audit_pass"): "Certified",
    ("Validated", "audit_fail"): "Rejected",
    ("Rejected", "recalibrate"): "Calibrated",
    ("Certified", "archive"): "Archived",
}
# Recorded in the chain without changing state.
ANNOTATIONS = {("Certified", "share")}
ACTIONS = tuple(sorted({a for _, a in TRANSITIONS} | {a for _, a in ANNOTATIONS}))
GENESIS_HASH = "00" * 32


@dataclass(frozen=True)
class LogEntry:
    prev_state: str
    action: str
    actor: str
    timestamp: str
    details: dict
    prev_hash: str
    entry_hash: str

    def content(self) -> dict:
        return {"prev_state": self.prev_state, "action": self.action, "actor": self.actor,
                "timestamp": self.timestamp, "details": self.details}

    def to_dict(self) -> dict:
        return {**self.content(), "prev_hash": self.prev_hash, "entry_hash": self.entry_hash}

    @classmethod
    def from_dict(cls, d: dict) -> "LogEntry":
        return cls(d["prev_state"], d["action"], d["actor"], d["timestamp"],
                   dict(d.get("details", {})), d["prev_hash"], d["entry_hash"])


def entry_hash(prev_hash: str, content: dict) -> str:
    h = hashlib.sha256()
    h.update(bytes.fromhex(prev_hash))
    h.update(canonical.dump_bytes(content))
    return h.hexdigest()


def next_state(state: str, action: str) -> str:
    if (state, action) in TRANSITIONS:
        return TRANSITIONS[(state, action)]
    if (state, action) in ANNOTATIONS:
        return state
    raise IllegalTransition(state, action)


@dataclass(frozen=True)
class LifecycleRecord:
    state: str = "Generated"
    history: tuple[LogEntry, ...] = ()
    dataset_digest: str = ""

    @property
    def head(self) -> str:
        return self.history[-1].entry_hash if self.history else GENESIS_HASH

    def to_jsonl(self) -> str:
        return "".join(canonical.dumps(e.to_dict()) + "\n" for e in self.history)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path, dataset_digest: str = "") -> "LifecycleRecord":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        history = tuple(LogEntry.from_dict(json.loads(line)) for line in lines if line)
        state = replay(history)
        if state is None:
            raise ChainCorrupt(f"lifecycle log {path} fails verification")
        return cls(state, history, dataset_digest)


def replay(history) -> str | None:
    """Final state from folding the history, or None when any link is broken."""
    state, prev = "Generated", GENESIS_HASH
    for e in history:
        if e.prev_state != state or e.prev_hash != prev:
            return None
        if entry_hash(prev, e.content()) != e.entry_hash:
            return None
        try:
            state = next_state(state, e.action)
        except IllegalTransition:
            return None
        prev = e.entry_hash
    return state


def verify_chain(rec: LifecycleRecord) -> bool:
    return replay(rec.history) == rec.state


def transition(rec: LifecycleRecord, action: str, actor: str, now: str,
               details: dict | None = None) -> LifecycleRecord:
    if not verify_chain(rec):
        raise ChainCorrupt("lifecycle history fails replay")
    new_state = next_state(rec.state, action)
    content = {"prev_state": rec.state, "action": action, "actor": actor, "timestamp": now,
               "details": dict(details or {})}
    h = entry_hash(rec.head, content)
    entry = LogEntry(rec.state, action, actor, now, content["details"], rec.head, h)
    return LifecycleRecord(new_state, rec.history + (entry,), rec.dataset_digest)


# -- sealing --------------------------------------------------------------------

MAGIC = b"SLPK"
FORMAT_VERSION = 1
HEADER_SIZE = 64
KEY_ID_MAX = 26
NONCE_SIZE = 12
TAG_SIZE = 16
KEY_SIZE = 32


@dataclass(frozen=True)
class SealedPackage:
    ciphertext: bytes
    nonce: bytes
    auth_tag: bytes
    key_id: str
    plaintext_digest: str

    def header(self) -> bytes:
        kid = self.key_id.encode("utf-8")
        return (MAGIC + bytes([FORMAT_VERSION, len(kid)]) + kid.ljust(KEY_ID_MAX, b"\0")
                + self.nonce + self.auth_tag + b"\0\0\0\0")

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, blob: bytes, plaintext_digest: str = "") -> "SealedPackage":
        if len(blob) < HEADER_SIZE or blob[:4] != MAGIC:
            raise AuthFailure("not a sealed package")
        if blob[4] != FORMAT_VERSION:
            raise AuthFailure(f"unsupported package version {blob[4]}")
        n = blob[5]
        if n > KEY_ID_MAX:
            raise AuthFailure("corrupt key id length")
        # padding and reserved bytes sit outside the AAD, so insist they are zero
        if any(blob[6 + n:32]) or any(blob[60:HEADER_SIZE]):
            raise AuthFailure("non-zero padding in package header")
        try:
            key_id = blob[6:6 + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AuthFailure("corrupt key id") from exc
        return cls(blob[HEADER_SIZE:], blob[32:44], blob[44:60], key_id, plaintext_digest)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def _aad(key_id: str) -> bytes:
    kid = key_id.encode("utf-8")
    return MAGIC + bytes([FORMAT_VERSION, len(kid)]) + kid


def _check_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_SIZE:
        raise WrongKeyLength(f"key must be {KEY_SIZE} bytes")


def seal(payload: bytes, key: bytes, rng: RngStream | None = None,
         key_id: str = "default") -> SealedPackage:
    """AES-256-GCM encryption with a fresh nonce.

    Without ``rng`` the nonce comes from the OS CSPRNG; passing a stream makes
    sealing reproducible, which is only safe when every (key, stream) pair is
    used once.
    """
    _check_key(key)
    if len(key_id.encode("utf-8")) > KEY_ID_MAX:
        raise ValueError(f"key_id longer than {KEY_ID_MAX} bytes")
    if rng is None:
        nonce = os.urandom(NONCE_SIZE)
    else:
        nonce = rng.gen.bytes(NONCE_SIZE)
    sealed = AESGCM(bytes(key)).encrypt(nonce, bytes(payload), _aad(key_id))
    return SealedPackage(sealed[:-TAG_SIZE], nonce, sealed[-TAG_SIZE:], key_id,
                         canonical.sha256_hex(bytes(payload)))


def unseal(pkg: SealedPackage, key: bytes) -> bytes:
    _check_key(key)
    try:
        plain = AESGCM(bytes(key)).decrypt(pkg.nonce, pkg.ciphertext + pkg.auth_tag,
                                           _aad(pkg.key_id))
    except InvalidTag as exc:
        raise AuthFailure("authentication failed") from exc
    if pkg.plaintext_digest and canonical.sha256_hex(plain) != pkg.plaintext_digest:
        raise AuthFailure("plaintext digest mismatch")
    return plain


def share(dprime, rec: LifecycleRecord, user: UserContext, policies, key: bytes,
          now: str, rng: RngStream | None = None, key_id: str = "default",
          meta: dict | None = None) -> tuple[SealedPackage, LifecycleRecord]:
    """Seal a certified dataset for ``user``; the lifecycle gains a share entry.

    Nothing is appended when any check fails.
    """
    if rec.state != "Certified":
        raise NotCertified(f"dataset is {rec.state}, not Certified")
    meta = {**(meta or {}), "lifecycle_state": rec.state}
    granted, verdicts = authorize(user, meta, policies)
    if not granted:
        raise Denied(verdicts)
    payload = dprime.serialize() if hasattr(dprime, "serialize") else bytes(dprime)
    pkg = seal(payload, key, rng, key_id)
    new = transition(rec, "share", user.user_id, now,
                     {"key_id": key_id, "plaintext_digest": pkg.plaintext_digest})
    return pkg, new
