"""Six train/test split protocols with machine-checked disjointness.

Each constructor returns a SplitResult whose train/test id sets are disjoint
by construction and re-checked at construction time. The candidate-pool
sampling policy is attached to the split so evaluation cannot mix
conventions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (NoMultiPlanProblems, SameDomain, TooFewProblems,
                     TooFewTransitions, UnknownDomain)

POOL_UNIFORM_DOMAIN = "uniform_domain"
POOL_WITHIN_PROBLEM = "within_problem"

PROTOCOL_NAMES = ("interpolation", "plan_variant", "extrapolation",
                  "multi_domain", "cross_domain", "loo")


class TransitionRef(NamedTuple):
    tid: str
    domain: str
    problem: str
    plan_id: int


def refs_of(transitions):
    return [TransitionRef(t.tid, t.domain, t.problem, t.plan_id)
            for t in transitions]


@dataclass
class SplitResult:
    name: str
    seed: int
    train_ids: frozenset
    test_ids: frozenset
    pool_policy: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_ids = frozenset(self.train_ids)
        self.test_ids = frozenset(self.test_ids)
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise AssertionError(
                f"{self.name}: {len(overlap)} ids in both train and test")
        if self.name not in PROTOCOL_NAMES:
            raise ValueError(f"unknown protocol name '{self.name}'")
        if self.pool_policy not in (POOL_UNIFORM_DOMAIN, POOL_WITHIN_PROBLEM):
            raise ValueError(f"unknown pool policy '{self.pool_policy}'")

    def to_json_obj(self):
        return {"name": self.name, "seed": self.seed,
                "train_ids": sorted(self.train_ids),
                "test_ids": sorted(self.test_ids),
                "pool_policy": self.pool_policy,
                "metadata": self.metadata}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(name=obj["name"], seed=obj["seed"],
                   train_ids=frozenset(obj["train_ids"]),
                   test_ids=frozenset(obj["test_ids"]),
                   pool_policy=obj["pool_policy"],
                   metadata=obj.get("metadata", {}))


def _rng(seed, *salt):
    key = seed & (2**64 - 1)
    if salt:
        digest = hashlib.blake2b("/".join(str(s) for s in salt).encode("utf-8"),
                                 digest_size=8).digest()
        return np.random.Generator(
            np.random.Philox(key=[key, int.from_bytes(digest, "little")]))
    return np.random.Generator(np.random.Philox(key=key))


def _single_domain(refs, op):
    domains = {r.domain for r in refs}
    if len(domains) != 1:
        raise ValueError(f"{op} expects transitions from exactly one domain, "
                         f"got {sorted(domains)}")
    return domains.pop()


def split_interpolation(refs, ratio=0.8, seed=0):
    """Uniformly random transition-level split within one domain."""
    refs = list(refs)
    domain = _single_domain(refs, "split_interpolation")
    if len(refs) < 5:
        raise TooFewTransitions(f"{domain}: need >= 5 transitions, got {len(refs)}")
    tids = sorted(r.tid for r in refs)
    n_train = int(round(ratio * len(tids)))
    n_train = min(max(n_train, 1), len(tids) - 1)
    perm = _rng(seed, "interpolation", domain).permutation(len(tids))
    train = frozenset(tids[i] for i in perm[:n_train])
    test = frozenset(tids[i] for i in perm[n_train:])
    return SplitResult(name="interpolation", seed=seed, train_ids=train,
                       test_ids=test, pool_policy=POOL_UNIFORM_DOMAIN,
                       metadata={"domain": domain, "ratio": ratio,
                                 "n_train": len(train), "n_test": len(test)})


def split_plan_variant(refs, seed=0):
    """Per-problem disjoint plan partition; single-plan problems excluded."""
    refs = list(refs)
    domain = _single_domain(refs, "split_plan_variant")
    plans = {}
    for r in refs:
        plans.setdefault(r.problem, set()).add(r.plan_id)
    eligible = sorted(p for p, ids in plans.items() if len(ids) >= 2)
    excluded = sorted(p for p in plans if p not in eligible)
    if not eligible:
        raise NoMultiPlanProblems(
            f"{domain}: no problem has more than one optimal plan")

    partition = {}
    for prob in eligible:
        plan_ids = sorted(plans[prob])
        perm = _rng(seed, "plan_variant", domain, prob).permutation(len(plan_ids))
        n_train = math.ceil(len(plan_ids) / 2)
        train_plans = sorted(plan_ids[i] for i in perm[:n_train])
        test_plans = sorted(plan_ids[i] for i in perm[n_train:])
        partition[prob] = {"train_plans": train_plans, "test_plans": test_plans}

    train, test = set(), set()
    for r in refs:
        if r.problem not in partition:
            continue
        if r.plan_id in partition[r.problem]["train_plans"]:
            train.add(r.tid)
        else:
            test.add(r.tid)
    return SplitResult(name="plan_variant", seed=seed, train_ids=train,
                       test_ids=test, pool_policy=POOL_UNIFORM_DOMAIN,
                       metadata={"domain": domain, "plan_partition": partition,
                                 "excluded_problems": excluded})


def split_extrapolation(refs, ratio=0.8, seed=0):
    """Problem-level split: every problem's transitions go wholly to one side."""
    refs = list(refs)
    domain = _single_domain(refs, "split_extrapolation")
    problems = sorted({r.problem for r in refs})
    if len(problems) < 2:
        raise TooFewProblems(f"{domain}: need >= 2 problems, got {len(problems)}")
    n_train = math.ceil(ratio * len(problems))
    n_train = min(max(n_train, 1), len(problems) - 1)
    perm = _rng(seed, "extrapolation", domain).permutation(len(problems))
    train_probs = {problems[i] for i in perm[:n_train]}
    test_probs = {problems[i] for i in perm[n_train:]}
    train = {r.tid for r in refs if r.problem in train_probs}
    test = {r.tid for r in refs if r.problem in test_probs}
    return SplitResult(name="extrapolation", seed=seed, train_ids=train,
                       test_ids=test, pool_policy=POOL_WITHIN_PROBLEM,
                       metadata={"domain": domain,
                                 "train_problems": sorted(train_probs),
                                 "test_problems": sorted(test_probs)})


def make_multi_domain(refs, ratio=0.8, seed=0):
    """Union of per-domain extrapolation splits; evaluated per domain."""
    refs = list(refs)
    by_domain = {}
    for r in refs:
        by_domain.setdefault(r.domain, []).append(r)
    train, test = set(), set()
    per_domain = {}
    for domain in sorted(by_domain):
        sub = split_extrapolation(by_domain[domain], ratio=ratio, seed=seed)
        train |= sub.train_ids
        test |= sub.test_ids
        per_domain[domain] = {
            "train_problems": sub.metadata["train_problems"],
            "test_problems": sub.metadata["test_problems"]}
    return SplitResult(name="multi_domain", seed=seed, train_ids=train,
                       test_ids=test, pool_policy=POOL_WITHIN_PROBLEM,
                       metadata={"domains": sorted(by_domain),
                                 "per_domain": per_domain, "ratio": ratio})


def make_cross_domain(refs, src, tgt):
    """Train on all of the source domain, test on all of the target domain."""
    if src == tgt:
        raise SameDomain(f"source and target are both '{src}'")
    refs = list(refs)
    domains = {r.domain for r in refs}
    for d in (src, tgt):
        if d not in domains:
            raise UnknownDomain(f"domain '{d}' has no transitions")
    train = {r.tid for r in refs if r.domain == src}
    test = {r.tid for r in refs if r.domain == tgt}
    return SplitResult(name="cross_domain", seed=0, train_ids=train,
                       test_ids=test, pool_policy=POOL_WITHIN_PROBLEM,
                       metadata={"source": src, "target": tgt})


def make_loo(refs, held):
    """Train on every other domain's transitions, test on the held-out domain."""
    refs = list(refs)
    domains = sorted({r.domain for r in refs})
    if held not in domains:
        raise UnknownDomain(f"domain '{held}' has no transitions")
    train = {r.tid for r in refs if r.domain != held}
    test = {r.tid for r in refs if r.domain == held}
    return SplitResult(name="loo", seed=0, train_ids=train, test_ids=test,
                       pool_policy=POOL_WITHIN_PROBLEM,
                       metadata={"held_out": held,
                                 "train_domains": [d for d in domains if d != held]})
