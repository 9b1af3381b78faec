"""Reachable state spaces, optimal-plan enumeration, and text rendering.

States are canonical sorted atom sets with stable 64-bit ids; every id
assignment is collision-checked so a hash collision fails hard instead of
silently merging two states.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

from .errors import (GoalUnreachable, MissingTemplate, StateCapExceeded,
                     StateIdCollision)
from .pddl import apply_action, applicable


def canonical_serialization(atoms):
    """Atoms sorted lexicographically (predicate, args), space-joined."""
    return " ".join(a.serialize() for a in sorted(atoms, key=lambda a: a.sort_key()))


def state_id_of(serialization):
    digest = hashlib.blake2b(serialization.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class State:
    atoms: frozenset
    id: int

    @property
    def serialization(self):
        return canonical_serialization(self.atoms)


class StateRegistry:
    """id -> canonical serialization map; detects 64-bit hash collisions."""

    def __init__(self):
        self._by_id = {}
        self._states = {}

    def intern(self, atoms):
        ser = canonical_serialization(atoms)
        sid = state_id_of(ser)
        known = self._by_id.get(sid)
        if known is None:
            self._by_id[sid] = ser
            state = State(atoms=frozenset(atoms), id=sid)
            self._states[sid] = state
            return state
        if known != ser:
            raise StateIdCollision(
                f"state id {sid} assigned to two serializations:\n  {known}\n  {ser}")
        return self._states[sid]

    def get(self, sid):
        return self._states[sid]

    def __contains__(self, sid):
        return sid in self._states

    def ids(self):
        return list(self._states)


@dataclass
class StateGraph:
    problem: str
    initial: int
    states: dict                       # id -> State, insertion = BFS order
    edges: dict                        # id -> [(action_id, next_id), ...]

    def __len__(self):
        return len(self.states)


def reachable_states(gp, cap, registry=None):
    """Breadth-first closure of gp's initial state under applicable actions.

    Successor edges are ordered by ground-action id, making iteration order
    (and therefore every downstream artifact) deterministic.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    registry = registry if registry is not None else StateRegistry()
    init = registry.intern(gp.init)
    states = {init.id: init}
    edges = {}
    queue = deque([init.id])
    while queue:
        sid = queue.popleft()
        atoms = states[sid].atoms
        outs = []
        for action in gp.actions:           # already sorted by id
            if applicable(atoms, action):
                succ = registry.intern(apply_action(atoms, action))
                outs.append((action.id, succ.id))
                if succ.id not in states:
                    states[succ.id] = succ
                    if len(states) > cap:
                        raise StateCapExceeded(
                            f"{gp.domain}/{gp.problem}: reachable states exceed cap {cap}")
                    queue.append(succ.id)
        edges[sid] = outs
    return StateGraph(problem=gp.problem, initial=init.id, states=states, edges=edges)


@dataclass
class Trajectory:
    domain: str
    problem: str
    plan_id: int
    states: list                        # state ids, len = len(actions) + 1
    actions: list                       # ground-action id strings

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("trajectory must have len(states) == len(actions) + 1")

    def __len__(self):
        return len(self.actions)


def distance_to_goal(gp, graph):
    """Exact distance-to-go labels via backward BFS from all goal states.

    Only states that can reach the goal get a label.
    """
    goal_ids = [sid for sid, st in graph.states.items() if gp.goal <= st.atoms]
    preds = {}
    for sid, outs in graph.edges.items():
        for _, nid in outs:
            preds.setdefault(nid, []).append(sid)
    togo = {sid: 0 for sid in goal_ids}
    frontier = deque(goal_ids)
    while frontier:
        nid = frontier.popleft()
        for sid in preds.get(nid, ()):
            if sid not in togo:
                togo[sid] = togo[nid] + 1
                frontier.append(sid)
    return togo


def optimal_plans(gp, max_plans=100, cap=1_000_000, graph=None, registry=None):
    """Enumerate optimal plans, deterministically, at most max_plans.

    Forward BFS builds the reachable graph; backward BFS from goal states
    labels each state with its exact distance-to-go; DFS then walks only
    edges that decrease that distance by 1, children ordered by action id.
    """
    registry = registry if registry is not None else StateRegistry()
    if graph is None:
        graph = reachable_states(gp, cap, registry=registry)

    togo = distance_to_goal(gp, graph)
    if not togo:
        raise GoalUnreachable(f"{gp.domain}/{gp.problem}: goal not reachable")

    start = graph.initial
    if start not in togo:
        raise GoalUnreachable(f"{gp.domain}/{gp.problem}: goal not reachable")

    plans = []

    def dfs(sid, state_acc, action_acc):
        if len(plans) >= max_plans:
            return
        if togo[sid] == 0:
            plans.append((list(state_acc), list(action_acc)))
            return
        for aid, nid in graph.edges[sid]:
            if togo.get(nid, -1) == togo[sid] - 1:
                state_acc.append(nid)
                action_acc.append(aid)
                dfs(nid, state_acc, action_acc)
                state_acc.pop()
                action_acc.pop()
                if len(plans) >= max_plans:
                    return

    dfs(start, [start], [])
    return [Trajectory(domain=gp.domain, problem=gp.problem, plan_id=i,
                       states=states, actions=actions)
            for i, (states, actions) in enumerate(plans)]


# --- transitions ---------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    domain: str
    problem: str
    plan_id: int
    step: int
    s: int
    a: str
    s_next: int
    s_text: str
    a_text: str
    s_next_text: str

    @property
    def tid(self):
        return f"{self.domain}/{self.problem}/{self.plan_id}/{self.step}"

    def to_json_obj(self):
        return {"domain": self.domain, "problem": self.problem,
                "plan_id": self.plan_id, "step": self.step,
                "s": str(self.s), "a": self.a, "s_next": str(self.s_next),
                "s_text": self.s_text, "a_text": self.a_text,
                "s_next_text": self.s_next_text}


@dataclass
class TemplateSet:
    """Per-domain predicate templates plus the sentence-join rule."""
    predicates: dict
    sep: str = ", "
    last_sep: str = ", and "
    end: str = "."

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        join = obj.get("join", {})
        return cls(predicates=obj["predicates"],
                   sep=join.get("sep", ", "),
                   last_sep=join.get("last", ", and "),
                   end=join.get("end", "."))

    def render_atom(self, atom):
        tpl = self.predicates.get(atom.predicate)
        if tpl is None:
            raise MissingTemplate(f"no template for predicate '{atom.predicate}'")
        return tpl.format(*atom.args)

    def render_atoms(self, atoms):
        ordered = sorted(atoms, key=lambda a: a.sort_key())
        parts = [self.render_atom(a) for a in ordered]
        if not parts:
            return ""
        if len(parts) == 1:
            return parts[0] + self.end
        return self.sep.join(parts[:-1]) + self.last_sep + parts[-1] + self.end


def render_state(state, templates):
    return templates.render_atoms(state.atoms)


def render_action(action):
    """Parenthesized schema + args, exactly the ground-action id."""
    return action.id


def extract_transitions(trajectories, registry, templates):
    """One Transition per plan step; duplicates across plans are retained."""
    out = []
    for traj in trajectories:
        for step in range(len(traj.actions)):
            s_id = traj.states[step]
            n_id = traj.states[step + 1]
            out.append(Transition(
                domain=traj.domain, problem=traj.problem,
                plan_id=traj.plan_id, step=step,
                s=s_id, a=traj.actions[step], s_next=n_id,
                s_text=render_state(registry.get(s_id), templates),
                a_text=traj.actions[step],
                s_next_text=render_state(registry.get(n_id), templates)))
    return out


# --- dataset generation --------------------------------------------------------

@dataclass
class DomainData:
    """Everything the pipeline needs from one domain's fixtures."""
    name: str
    grounded: dict                      # problem -> GroundedProblem
    graphs: dict                        # problem -> StateGraph
    trajectories: list
    transitions: list
    registry: StateRegistry
    templates: TemplateSet
    problem_states: dict = field(default_factory=dict)   # problem -> [state ids]
    goals: dict = field(default_factory=dict)            # problem -> (goal id, text)
    togo: dict = field(default_factory=dict)             # problem -> {sid: dist}

    @property
    def state_ids(self):
        seen = []
        got = set()
        for ids in self.problem_states.values():
            for sid in ids:
                if sid not in got:
                    got.add(sid)
                    seen.append(sid)
        return seen


def build_domain_data(dom, problems, templates, max_plans=100, state_cap=100_000):
    """Ground every problem, enumerate plans, and extract transitions."""
    from .pddl import ground

    registry = StateRegistry()
    grounded, graphs, problem_states = {}, {}, {}
    goals, togo_by_problem = {}, {}
    trajectories, transitions = [], []
    for prob in problems:
        gp = ground(dom, prob)
        grounded[prob.name] = gp
        graph = reachable_states(gp, state_cap, registry=registry)
        graphs[prob.name] = graph
        problem_states[prob.name] = list(graph.states)
        togo_by_problem[prob.name] = distance_to_goal(gp, graph)
        goal_state = registry.intern(gp.goal)
        goals[prob.name] = (goal_state.id, templates.render_atoms(gp.goal))
        trajs = optimal_plans(gp, max_plans=max_plans, graph=graph, registry=registry)
        trajectories.extend(trajs)
        transitions.extend(extract_transitions(trajs, registry, templates))
    return DomainData(name=dom.name, grounded=grounded, graphs=graphs,
                      trajectories=trajectories, transitions=transitions,
                      registry=registry, templates=templates,
                      problem_states=problem_states, goals=goals,
                      togo=togo_by_problem)


def write_transitions_jsonl(transitions, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in transitions:
            fh.write(json.dumps(t.to_json_obj(), sort_keys=True) + "\n")


def write_states_jsonl(domain_datas, path):
    """One row per distinct state id per domain, plus goal pseudo-states.

    Goal rows carry the rendered goal-atom text so goals get embeddings; they
    are not listed in the candidate catalogs unless they coincide with a
    reachable state.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for dd in domain_datas:
            problem_of = {}
            for prob, ids in dd.problem_states.items():
                for sid in ids:
                    problem_of.setdefault(sid, prob)
            for sid in dd.state_ids:
                text = render_state(dd.registry.get(sid), dd.templates)
                fh.write(json.dumps(
                    {"domain": dd.name, "problem": problem_of[sid],
                     "id": str(sid), "text": text}, sort_keys=True) + "\n")
            written = set(dd.state_ids)
            for prob in sorted(dd.goals):
                gid, text = dd.goals[prob]
                if gid in written:
                    continue
                written.add(gid)
                fh.write(json.dumps(
                    {"domain": dd.name, "problem": prob,
                     "id": str(gid), "text": text}, sort_keys=True) + "\n")
