"""Scenario runners and defense metrics.

Three adversary strengths against a voting defense, differing only in
which models the attack optimizes against:
  black: standard (non-manipulated) surrogate networks,
  grey:  an independently built surrogate ensemble of the same shape,
  white: the defended ensemble's own members.
The attack generates C-1 targeted candidates per sample; a sample counts
as evaded when ANY candidate is accepted as a class other than the truth.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from . import attack as atk
from . import ensemble as ens_mod
from .seeding import derive_seed, spawn_rng

SCENARIOS = ("black", "grey", "white")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    attack: atk.AttackConfig
    surrogates: tuple | None = None
    sample_budget: int = 0  # 0 means: use every sample

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.surrogates is not None:
            object.__setattr__(self, "surrogates", tuple(self.surrogates))
        if self.scenario in ("black", "grey"):
            if not self.surrogates:
                raise ValueError(f"{self.scenario}-box evaluation needs surrogates")
        elif self.surrogates is not None:
            raise ValueError("white-box evaluation must not carry surrogates")
        if self.sample_budget < 0:
            raise ValueError("sample_budget must be >= 0")


@dataclass(frozen=True)
class EvalReport:
    """Per-tau metric rows plus a provenance block identifying the run."""

    rows: tuple
    provenance: dict

    def __post_init__(self):
        rows = tuple(dict(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise ValueError("report needs at least one row")
        taus = [r["tau"] for r in rows]
        if taus != sorted(taus) or len(set(taus)) != len(taus):
            raise ValueError("rows must be ordered by strictly increasing tau")
        for r in rows:
            for key in ("benign_accuracy", "attack_success_rate",
                        "abstain_rate_benign", "abstain_rate_adv"):
                if not 0.0 <= r[key] <= 1.0:
                    raise ValueError(f"{key}={r[key]} outside [0, 1]")
        for key in ("benign_accuracy", "attack_success_rate"):
            vals = [r[key] for r in rows]
            if any(a < b - 1e-12 for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{key} must be non-increasing in tau")


def stratified_subsample(labels, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded class-stratified pick of ``budget`` indices (all, if budget is 0
    or exceeds the population). Quotas differ by at most one across classes
    unless a class runs out of samples."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if budget <= 0 or budget >= n:
        return np.arange(n)
    classes = np.unique(labels)
    pools = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    quota = {c: 0 for c in classes}
    filled = 0
    # round-robin so quotas stay balanced even when classes run dry
    while filled < budget:
        progressed = False
        for c in classes:
            if filled == budget:
                break
            if quota[c] < pools[c].size:
                quota[c] += 1
                filled += 1
                progressed = True
        if not progressed:
            break
    picked = np.concatenate([pools[c][: quota[c]] for c in classes])
    return np.sort(picked)


def benign_accuracy(defense: ens_mod.NmlEnsemble, testset, tau: int | None = None,
                    votes: np.ndarray | None = None) -> float:
    """Fraction of samples accepted as exactly their true label."""
    labels = np.asarray(testset.labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty test set")
    tau = defense.tau if tau is None else tau
    if votes is None:
        votes = ens_mod.member_votes(defense, np.asarray(testset.inputs))
    outcomes = ens_mod.outcomes_at_tau(votes, defense.num_classes, tau)
    return float(np.mean(outcomes == labels))


def generate_candidates(cfg: ScenarioConfig, defense: ens_mod.NmlEnsemble,
                        data, master_seed: int):
    """Targeted candidates for every (sample, wrong class) pair, attacked
    against the scenario's model set. One PGD run per candidate."""
    models = list(cfg.surrogates) if cfg.scenario in ("black", "grey") \
        else list(defense.members)
    return atk.build_transfer_set(
        models,
        data,
        "all",
        cfg.attack,
        epsilons=[cfg.attack.epsilon],
        master_seed=derive_seed(master_seed, "eval-candidates", cfg.scenario),
        source_tag=f"{cfg.scenario}-box",
    )


def _adv_metrics(defense, candidates, labels, votes_adv, tau):
    outcomes = ens_mod.outcomes_at_tau(votes_adv, defense.num_classes, tau)
    trues = np.array([r.true_class for r in candidates.records], dtype=np.int64)
    sample_ids = np.array([r.sample_id for r in candidates.records], dtype=np.int64)
    accepted_wrong = (outcomes >= 0) & (outcomes != trues)
    evaded = {int(sid) for sid, hit in zip(sample_ids, accepted_wrong) if hit}
    success = len(evaded) / labels.shape[0]
    abstain = float(np.mean(outcomes < 0)) if outcomes.size else 0.0
    return success, abstain


def attack_success_untargeted(defense: ens_mod.NmlEnsemble, data,
                              cfg: ScenarioConfig, master_seed: int,
                              tau: int | None = None) -> float:
    """Untargeted evasion rate at one tau: a sample is evaded when any of its
    C-1 targeted candidates is accepted as a wrong class."""
    labels = np.asarray(data.labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    tau = defense.tau if tau is None else tau
    candidates = generate_candidates(cfg, defense, data, master_seed)
    votes_adv = ens_mod.member_votes(defense, candidates.inputs())
    success, _ = _adv_metrics(defense, candidates, labels, votes_adv, tau)
    return success


class Subset:
    """Array-backed view handed to the attack builder after subsampling."""

    def __init__(self, inputs, labels):
        self.inputs = inputs
        self.labels = labels


def run_scenario(cfg: ScenarioConfig, defense: ens_mod.NmlEnsemble, data,
                 master_seed: int) -> EvalReport:
    """Build the scenario's candidate set once, then sweep every tau."""
    inputs = np.asarray(data.inputs, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty evaluation set")
    keep = stratified_subsample(
        labels, cfg.sample_budget, spawn_rng(master_seed, "eval-subsample", cfg.scenario)
    )
    subset = Subset(inputs[keep], labels[keep])

    candidates = generate_candidates(cfg, defense, subset, master_seed)
    votes_benign = ens_mod.member_votes(defense, subset.inputs)
    votes_adv = ens_mod.member_votes(defense, candidates.inputs())

    rows = []
    for tau in defense.tau_range:
        acc = benign_accuracy(defense, subset, tau, votes=votes_benign)
        outcomes_b = ens_mod.outcomes_at_tau(votes_benign, defense.num_classes, tau)
        success, abstain_adv = _adv_metrics(
            defense, candidates, subset.labels, votes_adv, tau
        )
        rows.append(
            {
                "tau": tau,
                "benign_accuracy": acc,
                "attack_success_rate": success,
                "abstain_rate_benign": float(np.mean(outcomes_b < 0)),
                "abstain_rate_adv": abstain_adv,
            }
        )
    provenance = {
        "scenario": cfg.scenario,
        "master_seed": int(master_seed),
        "epsilon": cfg.attack.epsilon,
        "norm": cfg.attack.norm,
        "iterations": cfg.attack.iterations,
        "sample_budget": int(cfg.sample_budget),
        "samples_used": int(keep.size),
        "num_members": defense.num_members,
        "num_classes": defense.num_classes,
        "tau_values": list(defense.tau_range),
    }
    return EvalReport(tuple(rows), provenance)


FIELDS = ("tau", "benign_accuracy", "attack_success_rate",
          "abstain_rate_benign", "abstain_rate_adv")


def report_csv_bytes(report: EvalReport) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for r in report.rows:
        writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in FIELDS])
    return buf.getvalue().encode("utf-8")


def report_json_bytes(report: EvalReport) -> bytes:
    doc = {"provenance": report.provenance, "rows": list(report.rows)}
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")


def write_report(report: EvalReport, out_dir: str) -> tuple:
    """Write the CSV table and the JSON document; file names embed the
    scenario and master seed. Returns (csv_path, json_path)."""
    os.makedirs(out_dir, exist_ok=True)
    stem = f"report_{report.provenance['scenario']}_seed{report.provenance['master_seed']}"
    csv_path = os.path.join(out_dir, stem + ".csv")
    json_path = os.path.join(out_dir, stem + ".json")
    with open(csv_path, "wb") as fh:
        fh.write(report_csv_bytes(report))
    with open(json_path, "wb") as fh:
        fh.write(report_json_bytes(report))
    return csv_path, json_path
