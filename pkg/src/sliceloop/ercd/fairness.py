"""Group-balancing resampler."""

from __future__ import annotations

import numpy as np

from ..datagen.dataset import Dataset
from ..errors import SingleGroupDataset
from ..numerics import RngStream


def fairness_resample(d: Dataset, rng: RngStream) -> Dataset:
    """Stratified resampling with replacement to equal group counts.

    Output size equals the input size. When the size is odd the extra sample
    goes to whichever group was larger in the input, so an already balanced
    dataset keeps its counts.
    """
    g = np.asarray(d["group"])
    members = {k: np.flatnonzero(g == k) for k in (0, 1)}
    if any(v.size == 0 for v in members.values()):
        raise SingleGroupDataset("fairness resampling needs both groups present")
    n = g.size
    big = 1 if members[1].size >= members[0].size else 0
    want = {big: (n + 1) // 2, 1 - big: n // 2}
    idx = np.concatenate([
        np.sort(rng.child("group", k).gen.choice(members[k], size=want[k], replace=True))
        for k in (0, 1)
    ])
    event = {
        "event": "fairness_resample",
        "group_counts_before": {str(k): int(v.size) for k, v in members.items()},
        "group_counts_after": {str(k): int(want[k]) for k in (0, 1)},
    }
    return d.take(idx, event=event)
