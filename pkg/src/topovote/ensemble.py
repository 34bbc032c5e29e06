"""Voting ensemble with abstention.

Each member votes its argmax class; the ensemble answers the modal class
only when its count reaches the threshold tau, and abstains otherwise.
tau is confined to [ceil((N+1)/2), N]: above half the members, so at most
one class can ever clear the bar and accepted ties are impossible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradnet as gn


def min_tau(num_members: int) -> int:
    """Smallest allowed threshold: strict majority of the member count."""
    return (num_members + 2) // 2


@dataclass(frozen=True)
class Verdict:
    """outcome is the accepted class, or None for an abstention."""

    outcome: int | None
    votes: tuple
    tau: int

    def __post_init__(self):
        votes = tuple(int(v) for v in self.votes)
        object.__setattr__(self, "votes", votes)
        if self.outcome is not None:
            if votes.count(int(self.outcome)) < self.tau:
                raise ValueError(
                    f"accepted class {self.outcome} has fewer than tau="
                    f"{self.tau} votes in {votes}"
                )

    @property
    def accepted(self) -> bool:
        return self.outcome is not None


@dataclass(frozen=True)
class NmlEnsemble:
    """members: trained Networks; specs: per-member training metadata (or
    None for standard members); tau: acceptance threshold.

    allow_single=True bypasses the N >= 2 minimum so that degenerate
    one-member reductions stay testable; persisted manifests never use it.
    """

    members: tuple
    tau: int
    specs: tuple | None = None
    allow_single: bool = False

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        n = len(members)
        minimum = 1 if self.allow_single else 2
        if n < minimum:
            raise ValueError(f"ensemble needs at least {minimum} members, got {n}")
        shape = members[0].input_shape
        classes = members[0].num_classes
        for i, m in enumerate(members[1:], start=1):
            if m.input_shape != shape or m.num_classes != classes:
                raise ValueError(
                    f"member {i} disagrees on input shape or class count"
                )
        if not min_tau(n) <= self.tau <= n:
            raise ValueError(
                f"tau={self.tau} outside the valid range "
                f"[{min_tau(n)}, {n}] for {n} members"
            )
        if self.specs is not None and len(self.specs) != n:
            raise ValueError("specs must match the member count")

    @property
    def num_members(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    @property
    def tau_range(self) -> range:
        return range(min_tau(self.num_members), self.num_members + 1)


def member_votes(ens: NmlEnsemble, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-member argmax classes, shape [N, B]. Computed once per input set;
    every tau sweep reuses it."""
    inputs = gn.as_tensor(inputs)
    votes = np.empty((ens.num_members, inputs.shape[0]), dtype=np.int64)
    for i, m in enumerate(ens.members):
        preds = [
            gn.predict(m, inputs[s : s + batch_size])
            for s in range(0, inputs.shape[0], batch_size)
        ]
        votes[i] = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    return votes


def outcomes_at_tau(votes: np.ndarray, classes: int, tau: int) -> np.ndarray:
    """Outcome per column of votes [N, B]: the modal class if its count
    reaches tau, else -1. Ties cannot be accepted since tau > N/2."""
    n, b = votes.shape
    counts = np.zeros((classes, b), dtype=np.int64)
    for i in range(n):
        np.add.at(counts, (votes[i], np.arange(b)), 1)
    winner = counts.argmax(axis=0)  # lowest class index on modal ties
    top = counts[winner, np.arange(b)]
    out = np.where(top >= tau, winner, -1)
    return out.astype(np.int64)


def vote_outcome(votes, classes: int, tau: int) -> int | None:
    """Accepted class for one vote multiset, or None. The counting rule in
    one place: modal class wins iff its count reaches tau."""
    arr = np.asarray(votes, dtype=np.int64).reshape(-1, 1)
    out = outcomes_at_tau(arr, classes, tau)[0]
    return None if out < 0 else int(out)


def classify(ens: NmlEnsemble, x: np.ndarray) -> Verdict:
    """Verdict for a single input sample."""
    x = gn.as_tensor(x)
    if tuple(x.shape) != ens.members[0].input_shape:
        raise gn.ShapeError(
            f"input shape {tuple(x.shape)} does not match ensemble "
            f"{ens.members[0].input_shape}"
        )
    votes = member_votes(ens, x[None])[:, 0]
    out = outcomes_at_tau(votes.reshape(-1, 1), ens.num_classes, ens.tau)[0]
    return Verdict(None if out < 0 else int(out), tuple(votes), ens.tau)


def sweep_tau(ens: NmlEnsemble, inputs: np.ndarray, votes: np.ndarray | None = None) -> dict:
    """Outcome tables for every tau in the valid range.

    Returns {tau: int64 array of per-sample outcomes, -1 for abstain}.
    Pass precomputed ``votes`` (from member_votes) to skip re-inference.
    """
    if votes is None:
        votes = member_votes(ens, inputs)
    return {
        tau: outcomes_at_tau(votes, ens.num_classes, tau)
        for tau in ens.tau_range
    }


def save_manifest(path, member_paths, num_classes, derangements=None):
    """Write an ensemble manifest: ordered member checkpoint references
    plus the derangement metadata, the class count and the member count.

    Manifests always describe real ensembles, so fewer than two members
    is rejected here regardless of the allow_single testing bypass.
    """
    import json

    member_paths = [str(p) for p in member_paths]
    if len(member_paths) < 2:
        raise ValueError("a manifest needs at least 2 members")
    if derangements is not None:
        derangements = [list(d) for d in derangements]
        if len(derangements) != len(member_paths):
            raise ValueError("one derangement per member, or none")
    doc = {
        "kind": "nml-ensemble",
        "num_members": len(member_paths),
        "num_classes": int(num_classes),
        "members": member_paths,
        "derangements": derangements,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return str(path)


def load_ensemble(path, tau=None):
    """Build an NmlEnsemble from a manifest file.

    Member paths are resolved relative to the manifest's directory so a
    run directory can be moved as a whole. tau defaults to the largest
    threshold (all members must agree).
    """
    import json
    import os

    from . import checkpoint as ck

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("kind", "num_members", "num_classes", "members"):
        if key not in doc:
            raise ValueError(f"manifest is missing the {key!r} field")
    if doc["kind"] != "nml-ensemble":
        raise ValueError(f"not an ensemble manifest: kind {doc['kind']!r}")
    if len(doc["members"]) != doc["num_members"] or doc["num_members"] < 2:
        raise ValueError("member list does not match num_members")
    base = os.path.dirname(os.path.abspath(path))
    members = tuple(
        ck.load_checkpoint(os.path.join(base, m)) for m in doc["members"]
    )
    if any(net.num_classes != doc["num_classes"] for net in members):
        raise ValueError("a member's class count disagrees with the manifest")
    return NmlEnsemble(members, len(members) if tau is None else tau)
