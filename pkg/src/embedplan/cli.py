"""Pipeline CLI: gen | embed | train | eval | matrix | report.

Every stage stamps its artifacts with the experiment config hash (via
manifest.json in the output directory) and refuses to mix artifacts
produced under a different config. Exit codes: 0 ok, 2 input error,
3 missing/stale artifact, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import pddl, protocols, world
from .data import bundle_from_artifacts, bundle_from_domain_data, write_catalog
from .embed import (BuiltinEncoderSpec, action_key, embed_corpus, load_table,
                    read_states_jsonl, save_table)
from .errors import EmbedPlanError, StaleArtifact
from .model import init_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING = 3
EXIT_INVARIANT = 4


@dataclass
class ExperimentConfig:
    domains: list
    data_dir: str = "domains"
    out_dir: str = "out"
    encoder: dict = field(default_factory=lambda: {"builtin": {"dim": 256, "seed": 0}})
    train: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=lambda: {"name": "interpolation", "ratio": 0.8})
    seeds: list = field(default_factory=lambda: [42, 123, 456])
    arch: str = "mlp"
    max_plans: int = 100
    state_cap: int = 100_000
    pool_size: int = 128
    eval_max_queries: int = None
    plan_k: int = 5

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.domains:
            raise ValueError("domains must be non-empty")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(**obj)

    def to_json_obj(self):
        return {"domains": self.domains, "data_dir": self.data_dir,
                "out_dir": self.out_dir, "encoder": self.encoder,
                "train": self.train, "protocol": self.protocol,
                "seeds": self.seeds, "arch": self.arch,
                "max_plans": self.max_plans, "state_cap": self.state_cap,
                "pool_size": self.pool_size,
                "eval_max_queries": self.eval_max_queries,
                "plan_k": self.plan_k}

    def hash(self):
        # out_dir is a location, not an experiment parameter: identical
        # experiments written to different directories share a hash
        obj = self.to_json_obj()
        obj.pop("out_dir")
        blob = json.dumps(obj, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_config(self, seed):
        return TrainConfig.from_json_obj({**self.train, "seed": seed})


# --- manifest ---------------------------------------------------------------------

def _manifest_path(out):
    return Path(out) / "manifest.json"


def _load_manifest(out):
    path = _manifest_path(out)
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _stamp(out, config, artifact_names):
    path = _manifest_path(out)
    manifest = _load_manifest(out) or {"config_hash": config.hash(), "artifacts": {}}
    if manifest["config_hash"] != config.hash():
        raise StaleArtifact(
            f"{out}: manifest was produced under config {manifest['config_hash']}, "
            f"current config is {config.hash()}")
    for name in artifact_names:
        fp = Path(out) / name
        digest = hashlib.sha256(fp.read_bytes()).hexdigest()[:16]
        manifest["artifacts"][name] = digest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _require(out, config, *artifact_names):
    manifest = _load_manifest(out)
    if manifest is None:
        raise StaleArtifact(f"{out}: no manifest; run earlier stages first")
    if manifest["config_hash"] != config.hash():
        raise StaleArtifact(
            f"{out}: artifacts were produced under config {manifest['config_hash']}, "
            f"current config is {config.hash()}")
    for name in artifact_names:
        fp = Path(out) / name
        if name not in manifest["artifacts"] or not fp.exists():
            raise StaleArtifact(f"{out}/{name}: missing artifact")
        digest = hashlib.sha256(fp.read_bytes()).hexdigest()[:16]
        if digest != manifest["artifacts"][name]:
            raise StaleArtifact(f"{out}/{name}: artifact does not match manifest")


# --- stages -----------------------------------------------------------------------

def _domain_dirs(config):
    for name in config.domains:
        d = Path(config.data_dir) / name
        if not d.is_dir():
            raise FileNotFoundError(f"domain directory not found: {d}")
        yield name, d


def _build_domain_datas(config):
    datas = []
    for name, d in _domain_dirs(config):
        dom, probs = pddl.load_domain_dir(d)
        templates = world.TemplateSet.from_json(d / "templates.json")
        datas.append(world.build_domain_data(
            dom, probs, templates, max_plans=config.max_plans,
            state_cap=config.state_cap))
    return datas


def cmd_gen(config, verbose=False):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datas = _build_domain_datas(config)
    bundle = bundle_from_domain_data(datas)
    all_transitions = [bundle.transitions[tid] for tid in bundle.order]
    world.write_transitions_jsonl(all_transitions, out / "transitions.jsonl")
    world.write_states_jsonl(datas, out / "states.jsonl")
    write_catalog(bundle, out / "catalog.json")
    _stamp(out, config, ["transitions.jsonl", "states.jsonl", "catalog.json"])

    print(f"{'Domain':<14}{'Problems':>9}{'States':>8}{'Transitions':>13}{'Actions':>9}")
    for name, dd in zip(config.domains, datas):
        dom, probs = pddl.load_domain_dir(Path(config.data_dir) / name)
        n_trans = sum(1 for t in dd.transitions)
        print(f"{name:<14}{len(dd.grounded):>9}{len(dd.state_ids):>8}"
              f"{n_trans:>13}{len(dom.action_schemas):>9}")
    return EXIT_OK


def cmd_embed(config, verbose=False):
    out = Path(config.out_dir)
    _require(out, config, "states.jsonl", "catalog.json")
    states = read_states_jsonl(out / "states.jsonl")
    with open(out / "catalog.json", encoding="utf-8") as fh:
        cat = json.load(fh)
    action_ids = sorted({a for dobj in cat["domains"].values()
                         for pobj in dobj["problems"].values()
                         for a in pobj["actions"]})
    if "builtin" in config.encoder:
        spec = BuiltinEncoderSpec(**config.encoder["builtin"])
        table = embed_corpus(states, action_ids, spec)
    elif "external" in config.encoder:
        table = load_table(config.encoder["external"])
        missing = [sid for sid, _ in states if str(sid) not in table]
        missing += [action_key(a) for a in action_ids
                    if action_key(a) not in table]
        if missing:
            raise EmbedPlanError(
                f"external table lacks {len(missing)} corpus ids "
                f"(first: {missing[0]})")
    else:
        raise ValueError("encoder config needs 'builtin' or 'external'")
    save_table(table, out / "embeddings.embt")
    _stamp(out, config, ["embeddings.embt"])
    if verbose:
        print(f"embedded {len(table)} ids at dim {table.dim}")
    return EXIT_OK


def _load_bundle(config):
    out = Path(config.out_dir)
    _require(out, config, "transitions.jsonl", "catalog.json", "embeddings.embt")
    table = load_table(out / "embeddings.embt")
    return bundle_from_artifacts(out / "transitions.jsonl",
                                 out / "catalog.json", table,
                                 states_path=out / "states.jsonl")


def build_split(config, bundle, seed):
    refs = bundle.refs()
    proto = dict(config.protocol)
    name = proto.pop("name")
    if name == "interpolation":
        dom = proto.get("domain", config.domains[0])
        sub = [r for r in refs if r.domain == dom]
        return protocols.split_interpolation(sub, ratio=proto.get("ratio", 0.8),
                                             seed=seed)
    if name == "plan_variant":
        dom = proto.get("domain", config.domains[0])
        sub = [r for r in refs if r.domain == dom]
        return protocols.split_plan_variant(sub, seed=seed)
    if name == "extrapolation":
        dom = proto.get("domain", config.domains[0])
        sub = [r for r in refs if r.domain == dom]
        return protocols.split_extrapolation(sub, ratio=proto.get("ratio", 0.8),
                                             seed=seed)
    if name == "multi_domain":
        return protocols.make_multi_domain(refs, ratio=proto.get("ratio", 0.8),
                                           seed=seed)
    if name == "cross_domain":
        return protocols.make_cross_domain(refs, proto["source"], proto["target"])
    if name == "loo":
        return protocols.make_loo(refs, proto["held_out"])
    raise ValueError(f"unknown protocol '{name}'")


def _seed_tag(config, seed):
    return f"{config.protocol['name']}_{config.arch}_{seed}"


def cmd_train(config, verbose=False, only_seed=None):
    out = Path(config.out_dir)
    bundle = _load_bundle(config)
    seeds = [only_seed] if only_seed is not None else config.seeds
    names = []
    for seed in seeds:
        split = build_split(config, bundle, seed)
        split.metadata["config_hash"] = config.hash()
        tag = _seed_tag(config, seed)
        split.save(out / f"split_{tag}.json")
        model = init_model(config.arch, bundle.table.dim, bundle.table.dim, seed)
        cfg = config.train_config(seed)
        model, history = fit(bundle, split, model, cfg,
                             history_path=out / f"history_{tag}.jsonl")
        save_checkpoint(model, out / f"ckpt_{tag}.ckpt",
                        extra={"config_hash": config.hash(), "seed": seed})
        names += [f"split_{tag}.json", f"history_{tag}.jsonl", f"ckpt_{tag}.ckpt"]
        if verbose:
            best = max(h["val_hit5"] for h in history)
            print(f"seed {seed}: {len(history)} epochs, best val hit@5 {best:.3f}")
    _stamp(out, config, names)
    return EXIT_OK


def _eval_one(config, bundle, model, split, seed):
    """MetricReport rows (one per domain present in the test set)."""
    k_hits = (1, 5, 10)
    test_ids = sorted(split.test_ids)
    rng = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))
    if config.eval_max_queries and len(test_ids) > config.eval_max_queries:
        idx = rng.choice(len(test_ids), size=config.eval_max_queries, replace=False)
        test_ids = [test_ids[i] for i in sorted(idx)]

    by_domain = {}
    for tid in test_ids:
        by_domain.setdefault(bundle.transitions[tid].domain, []).append(tid)

    reports = []
    for domain in sorted(by_domain):
        tids = by_domain[domain]
        rates, info = ev.evaluate_hits(model, bundle, tids, split.pool_policy,
                                       seed, ks=k_hits, pool_size=config.pool_size)
        accs = ev.evaluate_action_acc(model, bundle, tids, seed, ks=k_hits)
        plan_mean, plan_exact = _plan_metrics(config, bundle, model, split,
                                              domain, seed)
        reports.append(ev.MetricReport(
            protocol=split.name, domain=domain, hit=rates, acc=accs,
            plan_mean5=plan_mean, plan_exact5=plan_exact,
            n_queries=info["n_queries"], seeds=[seed],
            meta={"mean_pool_size": ev._sig6(info["mean_pool_size"]),
                  "underfull_pools": info["underfull"],
                  "chance@5": ev._sig6(5.0 / info["mean_pool_size"]),
                  "pool_policy": split.pool_policy,
                  "config_hash": config.hash()}))
    return reports


def _plan_metrics(config, bundle, model, split, domain, seed):
    """Teacher-forced plan metrics over test-side trajectories, if derivable."""
    trajs = _test_trajectories(bundle, split, domain)
    if not trajs:
        return None, None
    means, exacts = [], []
    for traj in trajs:
        mean, exact = ev.plan_execute(model, traj, bundle, split.pool_policy,
                                      k=config.plan_k, seed=seed,
                                      pool_size=config.pool_size)
        means.append(mean)
        exacts.append(1.0 if exact else 0.0)
    return float(np.mean(means)), float(np.mean(exacts))


def _test_trajectories(bundle, split, domain):
    """Trajectories whose transitions all lie in the test split."""
    groups = {}
    for tid in split.test_ids:
        t = bundle.transitions[tid]
        if t.domain != domain:
            continue
        groups.setdefault((t.domain, t.problem, t.plan_id), set()).add(t.step)
    out = []
    for (dom, prob, plan_id), steps in sorted(groups.items()):
        n = max(steps) + 1
        if len(steps) != n:
            continue  # partial plan (interpolation split): not executable
        tids = [f"{dom}/{prob}/{plan_id}/{s}" for s in range(n)]
        if not all(tid in bundle.transitions for tid in tids):
            continue
        first = bundle.transitions[tids[0]]
        states = [first.s] + [bundle.transitions[tid].s_next for tid in tids]
        actions = [bundle.transitions[tid].a for tid in tids]
        out.append(world.Trajectory(domain=dom, problem=prob, plan_id=plan_id,
                                    states=states, actions=actions))
    return out


def cmd_eval(config, verbose=False, only_seed=None):
    out = Path(config.out_dir)
    bundle = _load_bundle(config)
    seeds = [only_seed] if only_seed is not None else config.seeds
    names = []
    for seed in seeds:
        tag = _seed_tag(config, seed)
        _require(out, config, f"ckpt_{tag}.ckpt", f"split_{tag}.json")
        model, header = load_checkpoint(out / f"ckpt_{tag}.ckpt")
        split = protocols.SplitResult.load(out / f"split_{tag}.json")
        reports = _eval_one(config, bundle, model, split, seed)
        ev.write_report_json(reports, out / f"eval_{tag}.json")
        names.append(f"eval_{tag}.json")
        names += _write_probes(config, bundle, model, split, seed, out, tag)
        if verbose:
            for r in reports:
                print(f"seed {seed} {r.domain}: hit@5 {r.hit[5]:.3f}")
    _stamp(out, config, names)
    return EXIT_OK


def _write_probes(config, bundle, model, split, seed, out, tag):
    """Latent-distance probe (lda.json) and 2-d projection export (pca.csv)."""
    import numpy as np
    from .model import forward

    # distance/cost alignment over states of the test-side domains
    test_domains = sorted({bundle.transitions[t].domain
                           for t in split.test_ids})
    state_ids, goal_ids, costs, lengths = [], [], [], []
    for (domain, prob), gid in sorted(bundle.goals.items()):
        if domain not in test_domains:
            continue
        for sid, dist in sorted(bundle.togo.get((domain, prob), {}).items()):
            state_ids.append(sid)
            goal_ids.append(gid)
            costs.append(float(dist))
            lengths.append(float(len(bundle.state_texts.get(sid, ""))))
    lda_name = None
    if len(set(costs)) > 1:
        probe = ev.lda_probe(state_ids, goal_ids, costs, lengths, bundle.table)
        lda_name = f"lda_{tag}.json"
        with open(out / lda_name, "w", encoding="utf-8") as fh:
            json.dump({k: ev._sig6(v) if isinstance(v, float) else v
                       for k, v in probe.items()}, fh, sort_keys=True)
            fh.write("\n")

    # projected states / predictions / next states for a sample of queries
    tids = sorted(split.test_ids)[:200]
    vectors, rows = {}, []
    for tid in tids:
        t = bundle.transitions[tid]
        z_s = bundle.table.vector(str(t.s))
        z_a = bundle.table.vector(ev.action_key(t.a))
        z_n = bundle.table.vector(str(t.s_next))
        h_s, _, h_hat = forward(model, z_s, z_a)
        h_n = ev.project(model.pi_s, z_n)
        vectors[f"{tid}:s"] = h_s[0]
        vectors[f"{tid}:s_pred"] = h_hat[0]
        vectors[f"{tid}:s_next"] = h_n[0]
        rows += [(f"{tid}:s", "s", t.problem),
                 (f"{tid}:s_pred", "s_pred", t.problem),
                 (f"{tid}:s_next", "s_next", t.problem)]
    pca_rows = ev.pca_export(vectors, rows)
    pca_name = f"pca_{tag}.csv"
    ev.write_pca_csv(pca_rows, out / pca_name)
    return ([lda_name] if lda_name else []) + [pca_name]


def cmd_matrix(config, verbose=False):
    out = Path(config.out_dir)
    bundle = _load_bundle(config)
    refs = bundle.refs()
    seed = config.seeds[0]
    models = {}
    for src in config.domains:
        tag = f"cross_{src}_{config.arch}_{seed}"
        ckpt = out / f"ckpt_{tag}.ckpt"
        if ckpt.exists():
            models[src], _ = load_checkpoint(ckpt)
            continue
        split = protocols.make_cross_domain(
            refs, src, [d for d in config.domains if d != src][0])
        model = init_model(config.arch, bundle.table.dim, bundle.table.dim, seed)
        model, _ = fit(bundle, split, model, config.train_config(seed))
        save_checkpoint(model, ckpt, extra={"config_hash": config.hash()})
        models[src] = model

    def eval_fn(model, tgt):
        split = protocols.make_cross_domain(refs, src=[d for d in config.domains
                                                       if d != tgt][0], tgt=tgt)
        tids = sorted(split.test_ids)
        if config.eval_max_queries and len(tids) > config.eval_max_queries:
            rng = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))
            idx = rng.choice(len(tids), size=config.eval_max_queries, replace=False)
            tids = [tids[i] for i in sorted(idx)]
        rates, _ = ev.evaluate_hits(model, bundle, tids, split.pool_policy,
                                    seed, ks=(5,), pool_size=config.pool_size)
        return rates[5]

    matrix = ev.cross_domain_matrix(models, config.domains, eval_fn)
    ev.write_matrix_csv(matrix, out / "matrix.csv")
    _stamp(out, config, ["matrix.csv"] +
           [f"ckpt_cross_{s}_{config.arch}_{seed}.ckpt" for s in config.domains])
    if verbose:
        print(f"matrix mean hit@5: {matrix['mean']:.3f}")
    return EXIT_OK


def cmd_report(config, verbose=False, compare_dir=None):
    out = Path(config.out_dir)
    per_seed = []
    for seed in config.seeds:
        tag = _seed_tag(config, seed)
        _require(out, config, f"eval_{tag}.json")
        with open(out / f"eval_{tag}.json", encoding="utf-8") as fh:
            per_seed.append((seed, json.load(fh)))

    by_domain = {}
    for seed, rows in per_seed:
        for row in rows:
            by_domain.setdefault(row["domain"], []).append(row)

    metrics = ["hit@1", "hit@5", "hit@10", "acc@1", "acc@5", "acc@10",
               "plan_mean@5", "plan_exact@5"]
    aggregated = []
    for domain in sorted(by_domain):
        rows = by_domain[domain]
        agg = {"protocol": rows[0]["protocol"], "domain": domain,
               "n_queries": int(np.mean([r["n_queries"] for r in rows])),
               "seeds": sorted(s for s, _ in per_seed)}
        stderr = {}
        for m in metrics:
            vals = [r[m] for r in rows if r.get(m) is not None]
            if not vals:
                continue
            agg[m] = ev._sig6(float(np.mean(vals)))
            if len(vals) > 1:
                stderr[m] = ev._sig6(float(np.std(vals, ddof=1) / np.sqrt(len(vals))))
        if stderr:
            agg["stderr"] = stderr
        aggregated.append(agg)

    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(aggregated, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _stamp(out, config, ["report.json"])

    print(f"{'Protocol':<16}{'Domain':<14}{'Hit@5':>8}{'+/-':>8}")
    for row in aggregated:
        se = row.get("stderr", {}).get("hit@5")
        print(f"{row['protocol']:<16}{row['domain']:<14}"
              f"{row.get('hit@5', float('nan')):>8.3f}"
              f"{(se if se is not None else 0.0):>8.3f}")

    if compare_dir is not None:
        _print_gap_table(aggregated, Path(compare_dir))
    return EXIT_OK


def _print_gap_table(aggregated, compare_dir):
    """Per-domain gap and paired t against another run's aggregated report."""
    other_path = compare_dir / "report.json"
    if not other_path.exists():
        raise StaleArtifact(f"{other_path}: run report there first")
    with open(other_path, encoding="utf-8") as fh:
        other = {row["domain"]: row for row in json.load(fh)}
    common = [row for row in aggregated if row["domain"] in other
              and row.get("hit@5") is not None
              and other[row["domain"]].get("hit@5") is not None]
    if not common:
        print("no common domains to compare")
        return
    a = [row["hit@5"] for row in common]
    b = [other[row["domain"]]["hit@5"] for row in common]
    print(f"\n{'Domain':<14}{'This':>8}{'Other':>8}{'Gap':>8}")
    for row, x, y in zip(common, a, b):
        print(f"{row['domain']:<14}{x:>8.3f}{y:>8.3f}{x - y:>8.3f}")
    if len(common) >= 2:
        try:
            stats = ev.stats_compare(a, b, paired=True)
            print(f"paired t({stats['df']}) = {stats['t']:.3f}, "
                  f"p = {stats['p']:.3g}, d = {stats['cohen_d']:.2f}, "
                  f"95% CI [{stats['ci95'][0]:.3f}, {stats['ci95'][1]:.3f}]")
        except EmbedPlanError as exc:
            print(f"paired t unavailable: {exc}")


# --- entry point -------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="embedplan",
        description="latent transition learning over planning domains")
    parser.add_argument("command",
                        choices=["gen", "embed", "train", "eval", "matrix",
                                 "report"])
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", help="override output directory")
    parser.add_argument("--seed", type=int, help="run a single seed")
    parser.add_argument("--compare", help="report: other run's out dir for "
                                          "per-domain gap and paired t")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig.load(args.config)
        if args.out:
            config.out_dir = args.out
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_INPUT

    try:
        if args.command == "gen":
            return cmd_gen(config, args.verbose)
        if args.command == "embed":
            return cmd_embed(config, args.verbose)
        if args.command == "train":
            return cmd_train(config, args.verbose, only_seed=args.seed)
        if args.command == "eval":
            return cmd_eval(config, args.verbose, only_seed=args.seed)
        if args.command == "matrix":
            return cmd_matrix(config, args.verbose)
        if args.command == "report":
            return cmd_report(config, args.verbose, compare_dir=args.compare)
    except StaleArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (EmbedPlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
