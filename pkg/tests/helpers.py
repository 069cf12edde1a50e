"""Builders shared by the test modules."""

import numpy as np

from sliceloop.datagen.dataset import SCHEMA, Dataset


def make_dataset(n=None, metadata=None, **cols):
    """Schema-complete dataset; unspecified columns are filled with neutral values."""
    if n is None:
        n = len(next(iter(cols.values())))
    out = {}
    for name, dtype, _ in SCHEMA:
        if name in cols:
            out[name] = np.asarray(cols[name])
        elif name == "sample_id":
            out[name] = np.arange(n)
        elif name == "user_id":
            out[name] = np.arange(n) % 10
        elif name == "window":
            out[name] = np.arange(n) // 10
        else:
            out[name] = np.zeros(n, dtype=dtype)
    return Dataset(out, metadata or {"seed": 0})


def reference_scm(n, gen):
    """Z ~ Bern(.5); X = Z w.p. .9 else 1 - Z; Y = Z w.p. .8 else 1 - Z."""
    z = gen.random(n) < 0.5
    x = np.where(gen.random(n) < 0.9, z, ~z)
    y = np.where(gen.random(n) < 0.8, z, ~z)
    return x.astype(int), y.astype(int), z.astype(int)


def reference_scm_exact():
    """Enumerate the 8-cell joint of the reference SCM; returns the score."""
    p_xy, p_x, do = 0.0, 0.0, 0.0
    for z in (0, 1):
        pz = 0.5
        px1 = 0.9 if z == 1 else 0.1
        py1 = 0.8 if z == 1 else 0.2
        p_x += pz * px1
        p_xy += pz * px1 * py1
        do += pz * py1
    return abs(p_xy / p_x - do)


FULL_FLOW = ("ercd_complete", "fl_round_complete", "fl_round_complete", "metrics_computed",
             "audit_fail", "recalibrate", "fl_round_complete", "metrics_computed", "audit_pass",
             "share", "archive")


def full_record():
    """Lifecycle record that walks every legal transition once."""
    from sliceloop.governance import LifecycleRecord, transition

    rec = LifecycleRecord()
    for i, action in enumerate(FULL_FLOW):
        rec = transition(rec, action, f"actor{i % 3}", f"step-{i:04d}", {"i": i})
    return rec


def flip_one_bit(rec, gen):
    """Copy of ``rec`` with one bit flipped in one field of one historical entry."""
    import dataclasses

    fields = ("prev_state", "action", "actor", "timestamp", "details", "prev_hash", "entry_hash")
    k = int(gen.integers(len(rec.history)))
    entry = rec.history[k]
    name = fields[int(gen.integers(len(fields)))]
    if name == "details":
        value = {"i": entry.details["i"] ^ (1 << int(gen.integers(8)))}
    else:
        s = getattr(entry, name)
        j = int(gen.integers(len(s)))
        value = s[:j] + chr(ord(s[j]) ^ 1) + s[j + 1:]
    history = list(rec.history)
    history[k] = dataclasses.replace(entry, **{name: value})
    return dataclasses.replace(rec, history=tuple(history))


def seal_trials(n, seed):
    """(round trips ok, tamperings rejected) over ``n`` random payloads."""
    from sliceloop.errors import AuthFailure
    from sliceloop.governance import SealedPackage, seal, unseal

    gen = np.random.default_rng(seed)
    ok = rejected = 0
    for _ in range(n):
        key = gen.bytes(32)
        payload = gen.bytes(int(gen.integers(0, 512)))
        pkg = seal(payload, key, key_id=f"k{int(gen.integers(1000))}")
        blob = bytearray(pkg.to_bytes())
        ok += unseal(SealedPackage.from_bytes(bytes(blob)), key) == payload
        bit = int(gen.integers(len(blob) * 8))
        blob[bit // 8] ^= 1 << (bit % 8)
        try:
            unseal(SealedPackage.from_bytes(bytes(blob)), key)
        except AuthFailure:
            rejected += 1
    return ok, rejected
