"""Retrieval metrics, plan execution, transfer matrices, stats, and probes.

All candidate scoring projects raw embeddings through the state head and
ranks by cosine similarity in the 128-d space. Per-query RNG streams are
derived from (seed, transition id) so parallel or reordered evaluation
cannot change any outcome.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr, stdtrit

from .embed import action_key
from .errors import ConstantInput, DegenerateVariance, MissingModel
from .model import project
from .protocols import POOL_UNIFORM_DOMAIN, POOL_WITHIN_PROBLEM

POOL_SIZE = 128


def query_rng(seed, tid, tag):
    digest = hashlib.blake2b(f"{tag}/{tid}".encode("utf-8"), digest_size=8).digest()
    return np.random.Generator(np.random.Philox(
        key=[seed & (2**64 - 1), int.from_bytes(digest, "little")]))


# --- candidate pools -------------------------------------------------------------

@dataclass
class CandidatePool:
    query_tid: str
    candidates: list                     # state-id strings, ground truth included
    gt: str
    policy: str
    effective_size: int
    underfull: bool = False

    def __post_init__(self):
        if self.candidates.count(self.gt) != 1:
            raise AssertionError("ground truth must appear exactly once in pool")
        if len(set(self.candidates)) != len(self.candidates):
            raise AssertionError("pool candidates must be distinct")


def build_pool(query, policy, bundle, rng, pool_size=POOL_SIZE):
    """GT next state plus up to pool_size-1 seeded distractors.

    uniform_domain samples from all domain states, within_problem from the
    query problem's reachable states. Underfull pools keep every eligible
    state and record the smaller effective size.
    """
    gt = str(query.s_next)
    if policy == POOL_UNIFORM_DOMAIN:
        eligible = bundle.domain_states[query.domain]
    elif policy == POOL_WITHIN_PROBLEM:
        eligible = bundle.problem_states[(query.domain, query.problem)]
    else:
        raise ValueError(f"unknown pool policy '{policy}'")
    others = [s for s in eligible if s != gt]
    n_distract = pool_size - 1
    underfull = len(others) < n_distract
    if underfull:
        picked = list(others)
    else:
        idx = rng.choice(len(others), size=n_distract, replace=False)
        picked = [others[i] for i in idx]
    cands = picked + [gt]
    order = rng.permutation(len(cands))
    cands = [cands[i] for i in order]
    return CandidatePool(query_tid=query.tid, candidates=cands, gt=gt,
                         policy=policy, effective_size=len(cands),
                         underfull=underfull)


def _rank_of(scores, target_idx, rng):
    """1-based rank under descending score; ties broken by seeded shuffle."""
    jitter = rng.permutation(len(scores))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], jitter[i]))
    return order.index(target_idx) + 1


def hit_at_k(model, query, pool, table, k, rng):
    """Ground-truth rank <= k under cosine scoring of projected candidates."""
    z_s = table.vector(str(query.s))
    z_a = table.vector(action_key(query.a))
    _, _, h_hat, _ = model.forward_tape(z_s, z_a)
    z_cands = np.stack([table.vector(c) for c in pool.candidates]).astype(np.float64)
    h_cands = project(model.pi_s, z_cands)
    scores = _cosine_to(h_hat[0], h_cands)
    return _rank_of(scores, pool.candidates.index(pool.gt), rng) <= k


def _cosine_to(vec, rows):
    v = vec / np.linalg.norm(vec)
    r = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return r @ v


def action_acc_at_k(model, query, bundle, k, rng):
    """True action's prediction ranks <= k among all of the problem's actions."""
    table = bundle.table
    actions = bundle.all_actions(query.domain, query.problem)
    z_s = np.tile(table.vector(str(query.s)).astype(np.float64), (len(actions), 1))
    z_a = np.stack([table.vector(action_key(a)) for a in actions]).astype(np.float64)
    _, _, h_pred, _ = model.forward_tape(z_s, z_a)
    h_next = project(model.pi_s, table.vector(str(query.s_next)))[0]
    scores = _cosine_to(h_next, h_pred)
    return _rank_of(scores, actions.index(query.a), rng) <= k


def plan_execute(model, trajectory, bundle, policy, k=5, seed=0,
                 pool_size=POOL_SIZE):
    """Teacher-forced execution: per-step Hit@k, resumed from ground truth.

    Returns (mean hit fraction, exact: every step hit).
    """
    steps = _trajectory_transitions(trajectory, bundle)
    if not steps:
        return 1.0, True
    hits = 0
    for t in steps:
        pool = build_pool(t, policy, bundle, query_rng(seed, t.tid, "pool"),
                          pool_size=pool_size)
        if hit_at_k(model, t, pool, bundle.table, k,
                    query_rng(seed, t.tid, "tie")):
            hits += 1
    mean = hits / len(steps)
    return mean, hits == len(steps)


def _trajectory_transitions(trajectory, bundle):
    out = []
    for step in range(len(trajectory.actions)):
        tid = f"{trajectory.domain}/{trajectory.problem}/{trajectory.plan_id}/{step}"
        out.append(bundle.transitions[tid])
    return out


# --- batched split evaluation ------------------------------------------------------

def evaluate_hits(model, bundle, tids, policy, seed, ks=(1, 5, 10),
                  pool_size=POOL_SIZE):
    """Hit@k rates over the given queries, with shared candidate projection."""
    table = bundle.table
    pools = [build_pool(bundle.transitions[tid], policy, bundle,
                        query_rng(seed, tid, "pool"), pool_size=pool_size)
             for tid in tids]
    cand_ids = sorted({c for pool in pools for c in pool.candidates})
    index = {c: i for i, c in enumerate(cand_ids)}
    h_all = project(model.pi_s, np.stack(
        [table.vector(c) for c in cand_ids]).astype(np.float64))
    h_all = h_all / np.linalg.norm(h_all, axis=1, keepdims=True)

    z_s = np.stack([table.vector(str(bundle.transitions[tid].s)) for tid in tids])
    z_a = np.stack([table.vector(action_key(bundle.transitions[tid].a))
                    for tid in tids])
    _, _, h_hat, _ = model.forward_tape(z_s.astype(np.float64),
                                        z_a.astype(np.float64))
    h_hat = h_hat / np.linalg.norm(h_hat, axis=1, keepdims=True)

    hits = {k: 0 for k in ks}
    sizes = []
    for i, (tid, pool) in enumerate(zip(tids, pools)):
        rows = [index[c] for c in pool.candidates]
        scores = h_all[rows] @ h_hat[i]
        rank = _rank_of(scores, pool.candidates.index(pool.gt),
                        query_rng(seed, tid, "tie"))
        sizes.append(pool.effective_size)
        for k in ks:
            if rank <= k:
                hits[k] += 1
    n = len(tids)
    rates = {k: hits[k] / n for k in ks}
    return rates, {"n_queries": n, "mean_pool_size": float(np.mean(sizes)),
                   "underfull": sum(1 for s in sizes if s < pool_size)}


def evaluate_action_acc(model, bundle, tids, seed, ks=(1, 5, 10)):
    hits = {k: 0 for k in ks}
    for tid in tids:
        t = bundle.transitions[tid]
        actions = bundle.all_actions(t.domain, t.problem)
        rng = query_rng(seed, tid, "act-tie")
        table = bundle.table
        z_s = np.tile(table.vector(str(t.s)).astype(np.float64),
                      (len(actions), 1))
        z_a = np.stack([table.vector(action_key(a))
                        for a in actions]).astype(np.float64)
        _, _, h_pred, _ = model.forward_tape(z_s, z_a)
        h_next = project(model.pi_s, table.vector(str(t.s_next)))[0]
        scores = _cosine_to(h_next, h_pred)
        rank = _rank_of(scores, actions.index(t.a), rng)
        for k in ks:
            if rank <= k:
                hits[k] += 1
    n = max(len(tids), 1)
    return {k: hits[k] / n for k in ks}


# --- transfer matrix ------------------------------------------------------------

def cross_domain_matrix(models_by_source, domains, eval_fn):
    """Off-diagonal Hit@5 for every ordered (source, target) pair.

    eval_fn(model, target_domain) -> hit5. Returns a dict with cells,
    row/column means, and the global off-diagonal mean.
    """
    cells = {}
    for src in domains:
        if src not in models_by_source:
            raise MissingModel(f"no trained model for source domain '{src}'")
        for tgt in domains:
            if src == tgt:
                continue
            cells[(src, tgt)] = float(eval_fn(models_by_source[src], tgt))
    row_means = {src: float(np.mean([cells[(src, t)] for t in domains if t != src]))
                 for src in domains}
    col_means = {tgt: float(np.mean([cells[(s, tgt)] for s in domains if s != tgt]))
                 for tgt in domains}
    return {"domains": list(domains), "cells": cells,
            "row_means": row_means, "col_means": col_means,
            "mean": float(np.mean(list(cells.values())))}


def write_matrix_csv(matrix, path):
    domains = matrix["domains"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("train\\test," + ",".join(domains) + ",mean\n")
        for src in domains:
            row = [src]
            for tgt in domains:
                row.append("" if src == tgt
                           else _fmt6(matrix["cells"][(src, tgt)]))
            row.append(_fmt6(matrix["row_means"][src]))
            fh.write(",".join(row) + "\n")
        fh.write("mean," + ",".join(_fmt6(matrix["col_means"][t]) for t in domains)
                 + "," + _fmt6(matrix["mean"]) + "\n")


# --- statistics -------------------------------------------------------------------

def stats_compare(series_a, series_b, paired):
    """t statistic, two-sided p, Cohen's d, and 95% CI of the mean difference.

    Paired mode runs the paired t-test on the differences. Cohen's d uses the
    pooled standard deviation of the two groups (population variances), the
    convention behind reported effect sizes this code is checked against.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if paired and a.shape != b.shape:
        raise ValueError("paired series must have equal lengths")
    if min(a.size, b.size) < 2:
        raise ValueError("need n >= 2")

    pooled_pop = np.sqrt((a.var(ddof=0) + b.var(ddof=0)) / 2.0)
    mean_diff = float(a.mean() - b.mean())
    cohen_d = float(mean_diff / pooled_pop) if pooled_pop > 0 else 0.0

    if paired:
        d = a - b
        sd = d.std(ddof=1)
        n = d.size
        df = n - 1
        if sd == 0.0:
            if mean_diff != 0.0:
                raise DegenerateVariance(
                    "paired differences are a non-zero constant")
            # identical series: no effect, no variance
            return {"t": 0.0, "df": df, "p": 1.0, "cohen_d": 0.0,
                    "mean_diff": 0.0, "ci95": [0.0, 0.0], "paired": True}
        se = sd / np.sqrt(n)
        t = float(d.mean() / se)
    else:
        va, vb = a.var(ddof=1), b.var(ddof=1)
        na, nb = a.size, b.size
        df = na + nb - 2
        if va == 0.0 and vb == 0.0:
            if mean_diff != 0.0:
                raise DegenerateVariance(
                    "both series constant with differing means")
            return {"t": 0.0, "df": df, "p": 1.0, "cohen_d": 0.0,
                    "mean_diff": 0.0, "ci95": [0.0, 0.0], "paired": False}
        sp2 = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        se = np.sqrt(sp2 * (1.0 / na + 1.0 / nb))
        t = float(mean_diff / se)

    p = float(2.0 * stdtr(df, -abs(t)))
    tcrit = float(stdtrit(df, 0.975))
    ci = [mean_diff - tcrit * float(se), mean_diff + tcrit * float(se)]
    return {"t": t, "df": df, "p": p, "cohen_d": cohen_d,
            "mean_diff": mean_diff, "ci95": ci, "paired": bool(paired)}


def _pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        raise ConstantInput("constant input series")
    return float((xc * yc).sum() / denom)


def lda_probe(state_ids, goal_ids, costs, lengths, table):
    """Correlation of state-goal cosine distance with optimal plan cost.

    Also reports the partial correlation controlling for prompt length.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size < 3:
        raise ValueError("need at least 3 pairs")
    dists = []
    for sid, gid in zip(state_ids, goal_ids):
        es = table.vector(str(sid)).astype(np.float64)
        eg = table.vector(str(gid)).astype(np.float64)
        dists.append(1.0 - float(es @ eg / (np.linalg.norm(es) * np.linalg.norm(eg))))
    dists = np.asarray(dists)
    lengths = np.asarray(lengths, dtype=np.float64)
    r_dc = _pearson(dists, costs)
    if lengths.std() == 0.0:
        # constant control variable: nothing to partial out
        r_dl = r_cl = 0.0
    else:
        r_dl = _pearson(dists, lengths)
        r_cl = _pearson(costs, lengths)
    denom = np.sqrt((1.0 - r_dl ** 2) * (1.0 - r_cl ** 2))
    partial = (r_dc - r_dl * r_cl) / denom if denom > 0 else 0.0
    return {"pearson_r": r_dc, "partial_r_controlling_length": float(partial),
            "n": int(costs.size)}


# --- PCA export -------------------------------------------------------------------

def pca_export(vectors_by_id, rows, dims=2):
    """Project tagged vectors onto the top principal directions.

    rows: list of (id, kind, problem); vectors_by_id maps id -> vector.
    Returns CSV-ready dicts with columns id, kind, problem, pc1, pc2[, ...].
    """
    ids = [r[0] for r in rows]
    x = np.stack([np.asarray(vectors_by_id[i], dtype=np.float64) for i in ids])
    xc = x - x.mean(axis=0, keepdims=True)
    cov = (xc.T @ xc) / max(len(ids), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    basis = evecs[:, order]
    # deterministic sign: largest-magnitude loading is positive
    for j in range(basis.shape[1]):
        jmax = int(np.argmax(np.abs(basis[:, j])))
        if basis[jmax, j] < 0:
            basis[:, j] = -basis[:, j]
    coords = xc @ basis
    out = []
    for (rid, kind, problem), row in zip(rows, coords):
        rec = {"id": rid, "kind": kind, "problem": problem}
        for j in range(dims):
            rec[f"pc{j + 1}"] = _sig6(float(row[j]))
        out.append(rec)
    return out


def write_pca_csv(rows, path, dims=2):
    cols = ["id", "kind", "problem"] + [f"pc{j + 1}" for j in range(dims)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for rec in rows:
            fh.write(",".join(str(rec[c]) for c in cols) + "\n")


# --- reports ----------------------------------------------------------------------

@dataclass
class MetricReport:
    protocol: str
    domain: str
    hit: dict                            # k -> rate
    acc: dict = field(default_factory=dict)
    plan_mean5: float = None
    plan_exact5: float = None
    n_queries: int = 0
    seeds: list = field(default_factory=list)
    stderr: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = sorted(self.hit)
        for lo, hi in zip(ks, ks[1:]):
            if self.hit[lo] > self.hit[hi] + 1e-12:
                raise AssertionError(f"hit@{lo} > hit@{hi}")
        ks = sorted(self.acc)
        for lo, hi in zip(ks, ks[1:]):
            if self.acc[lo] > self.acc[hi] + 1e-12:
                raise AssertionError(f"acc@{lo} > acc@{hi}")
        if (self.plan_mean5 is not None and self.plan_exact5 is not None
                and self.plan_exact5 > self.plan_mean5 + 1e-12):
            raise AssertionError("plan exact > plan mean")

    def to_json_obj(self):
        obj = {"protocol": self.protocol, "domain": self.domain,
               "n_queries": self.n_queries, "seeds": self.seeds}
        for k in sorted(self.hit):
            obj[f"hit@{k}"] = _sig6(self.hit[k])
        for k in sorted(self.acc):
            obj[f"acc@{k}"] = _sig6(self.acc[k])
        if self.plan_mean5 is not None:
            obj["plan_mean@5"] = _sig6(self.plan_mean5)
        if self.plan_exact5 is not None:
            obj["plan_exact@5"] = _sig6(self.plan_exact5)
        if self.stderr:
            obj["stderr"] = {m: _sig6(v) for m, v in sorted(self.stderr.items())}
        if self.meta:
            obj["meta"] = self.meta
        return obj


def _sig6(x):
    if x is None:
        return None
    return float(f"{float(x):.6g}")


def _fmt6(x):
    return f"{float(x):.6g}"


def write_report_json(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json_obj() for r in reports], fh, sort_keys=True, indent=1)
        fh.write("\n")
