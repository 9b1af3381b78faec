"""Dataset bundle: transitions + state/action catalogs + embedding table.

Train and eval consume this one object; it can be built in memory from
DomainData or reloaded from the gen-stage artifacts (transitions.jsonl,
catalog.json) plus an EMBT table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .protocols import TransitionRef
from .world import Transition


@dataclass
class DatasetBundle:
    transitions: dict                    # tid -> Transition
    order: list                          # tids in artifact order
    domain_states: dict                  # domain -> [state-id str, ...]
    problem_states: dict                 # (domain, problem) -> [state-id str, ...]
    problem_actions: dict                # (domain, problem) -> [action id, ...]
    applicable: dict                     # (domain, problem, state id int) -> (aid, ...)
    table: object = None                 # EmbeddingTable
    trajectories: list = field(default_factory=list)
    goals: dict = field(default_factory=dict)       # (domain, problem) -> goal id str
    togo: dict = field(default_factory=dict)        # (domain, problem) -> {sid str: dist}
    state_texts: dict = field(default_factory=dict)  # state-id str -> text

    def refs(self, tids=None):
        tids = self.order if tids is None else tids
        return [TransitionRef(t.tid, t.domain, t.problem, t.plan_id)
                for t in (self.transitions[tid] for tid in tids)]

    def domains(self):
        return sorted(self.domain_states)

    def applicable_actions(self, domain, problem, state_id):
        return self.applicable[(domain, problem, state_id)]

    def all_actions(self, domain, problem):
        return self.problem_actions[(domain, problem)]


def bundle_from_domain_data(domain_datas, table=None):
    from .world import render_state

    transitions = {}
    order = []
    domain_states = {}
    problem_states = {}
    problem_actions = {}
    applicable = {}
    trajectories = []
    goals, togo, state_texts = {}, {}, {}
    for dd in domain_datas:
        domain_states[dd.name] = [str(s) for s in dd.state_ids]
        for prob, gp in dd.grounded.items():
            problem_actions[(dd.name, prob)] = [a.id for a in gp.actions]
        for prob, graph in dd.graphs.items():
            problem_states[(dd.name, prob)] = [str(s) for s in graph.states]
            for sid, outs in graph.edges.items():
                applicable[(dd.name, prob, sid)] = tuple(a for a, _ in outs)
        for prob, (gid, text) in dd.goals.items():
            goals[(dd.name, prob)] = str(gid)
            state_texts[str(gid)] = text
        for prob, labels in dd.togo.items():
            togo[(dd.name, prob)] = {str(s): d for s, d in labels.items()}
        for sid in dd.state_ids:
            state_texts[str(sid)] = render_state(dd.registry.get(sid),
                                                 dd.templates)
        for t in dd.transitions:
            transitions[t.tid] = t
            order.append(t.tid)
        trajectories.extend(dd.trajectories)
    return DatasetBundle(transitions=transitions, order=order,
                         domain_states=domain_states,
                         problem_states=problem_states,
                         problem_actions=problem_actions,
                         applicable=applicable, table=table,
                         trajectories=trajectories, goals=goals, togo=togo,
                         state_texts=state_texts)


def write_catalog(bundle, path):
    """Persist state/action catalogs so later stages need no re-grounding."""
    obj = {"domains": {}}
    for domain in bundle.domains():
        problems = {}
        probs = sorted(p for (d, p) in bundle.problem_states if d == domain)
        for p in probs:
            applicable = {}
            for sid in bundle.problem_states[(domain, p)]:
                applicable[sid] = list(
                    bundle.applicable[(domain, p, int(sid))])
            problems[p] = {"states": bundle.problem_states[(domain, p)],
                           "actions": bundle.problem_actions[(domain, p)],
                           "applicable": applicable,
                           "goal": bundle.goals.get((domain, p)),
                           "togo": bundle.togo.get((domain, p), {})}
        obj["domains"][domain] = {"states": bundle.domain_states[domain],
                                  "problems": problems}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def read_transitions_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            o = json.loads(line)
            out.append(Transition(
                domain=o["domain"], problem=o["problem"],
                plan_id=o["plan_id"], step=o["step"],
                s=int(o["s"]), a=o["a"], s_next=int(o["s_next"]),
                s_text=o["s_text"], a_text=o["a_text"],
                s_next_text=o["s_next_text"]))
    return out


def bundle_from_artifacts(transitions_path, catalog_path, table=None,
                          states_path=None):
    transitions = read_transitions_jsonl(transitions_path)
    with open(catalog_path, encoding="utf-8") as fh:
        cat = json.load(fh)
    domain_states = {}
    problem_states = {}
    problem_actions = {}
    applicable = {}
    goals, togo = {}, {}
    for domain, dobj in cat["domains"].items():
        domain_states[domain] = list(dobj["states"])
        for prob, pobj in dobj["problems"].items():
            problem_states[(domain, prob)] = list(pobj["states"])
            problem_actions[(domain, prob)] = list(pobj["actions"])
            for sid, aids in pobj["applicable"].items():
                applicable[(domain, prob, int(sid))] = tuple(aids)
            if pobj.get("goal") is not None:
                goals[(domain, prob)] = pobj["goal"]
            togo[(domain, prob)] = dict(pobj.get("togo", {}))
    state_texts = {}
    if states_path is not None:
        with open(states_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    state_texts[str(obj["id"])] = obj.get("text", "")
    by_tid = {t.tid: t for t in transitions}
    return DatasetBundle(transitions=by_tid, order=[t.tid for t in transitions],
                         domain_states=domain_states,
                         problem_states=problem_states,
                         problem_actions=problem_actions,
                         applicable=applicable, table=table, goals=goals,
                         togo=togo, state_texts=state_texts)
