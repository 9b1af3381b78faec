"""Shared fixtures: inline micro-domains, fixture-dir bundles, oracles."""

import numpy as np
import pytest

from embedplan import pddl, world
from embedplan.data import DatasetBundle, bundle_from_domain_data
from embedplan.embed import BuiltinEncoderSpec, EmbeddingTable, embed_corpus
from embedplan.world import Transition

FIXTURES = "/root/pkg/domains"

BW_DOMAIN = """
(define (domain blocksworld)
  (:requirements :strips :typing)
  (:types block)
  (:predicates (on ?x - block ?y - block) (ontable ?x - block)
               (clear ?x - block) (handempty) (holding ?x - block))
  (:action pick-up :parameters (?x - block)
    :precondition (and (clear ?x) (ontable ?x) (handempty))
    :effect (and (not (ontable ?x)) (not (clear ?x)) (not (handempty))
                 (holding ?x)))
  (:action put-down :parameters (?x - block)
    :precondition (holding ?x)
    :effect (and (not (holding ?x)) (clear ?x) (handempty) (ontable ?x)))
  (:action stack :parameters (?x - block ?y - block)
    :precondition (and (holding ?x) (clear ?y))
    :effect (and (not (holding ?x)) (not (clear ?y)) (clear ?x) (handempty)
                 (on ?x ?y)))
  (:action unstack :parameters (?x - block ?y - block)
    :precondition (and (on ?x ?y) (clear ?x) (handempty))
    :effect (and (holding ?x) (clear ?y) (not (clear ?x)) (not (handempty))
                 (not (on ?x ?y)))))
"""

BW3_PROBLEM = """
(define (problem bw3)
  (:domain blocksworld)
  (:objects b1 b2 b3 - block)
  (:init (ontable b1) (ontable b2) (ontable b3)
         (clear b1) (clear b2) (clear b3) (handempty))
  (:goal (and (on b1 b2) (on b2 b3))))
"""

BW3_SWAP = """
(define (problem bw3-swap)
  (:domain blocksworld)
  (:objects b1 b2 b3 - block)
  (:init (on b1 b2) (ontable b2) (ontable b3)
         (clear b1) (clear b3) (handempty))
  (:goal (and (on b3 b2))))
"""

FERRY_DOMAIN = """
(define (domain ferry)
  (:requirements :strips :typing)
  (:types car location)
  (:predicates (at-ferry ?l - location) (at ?c - car ?l - location)
               (empty-ferry) (on ?c - car))
  (:action sail :parameters (?from - location ?to - location)
    :precondition (at-ferry ?from)
    :effect (and (at-ferry ?to) (not (at-ferry ?from))))
  (:action board :parameters (?car - car ?loc - location)
    :precondition (and (at ?car ?loc) (at-ferry ?loc) (empty-ferry))
    :effect (and (on ?car) (not (at ?car ?loc)) (not (empty-ferry))))
  (:action debark :parameters (?car - car ?loc - location)
    :precondition (and (on ?car) (at-ferry ?loc))
    :effect (and (at ?car ?loc) (empty-ferry) (not (on ?car)))))
"""

FERRY_1CAR = """
(define (problem ferry1)
  (:domain ferry)
  (:objects c1 - car l0 l1 - location)
  (:init (at c1 l0) (at-ferry l0) (empty-ferry))
  (:goal (and (at c1 l1))))
"""

FERRY_2SYM = """
(define (problem ferry2sym)
  (:domain ferry)
  (:objects c1 c2 - car l0 l1 - location)
  (:init (at c1 l0) (at c2 l0) (at-ferry l0) (empty-ferry))
  (:goal (and (at c1 l1) (at c2 l1))))
"""


@pytest.fixture(scope="session")
def bw_domain():
    return pddl.parse_domain(BW_DOMAIN)


@pytest.fixture(scope="session")
def ferry_domain():
    return pddl.parse_domain(FERRY_DOMAIN)


@pytest.fixture(scope="session")
def bw3_grounded(bw_domain):
    prob = pddl.parse_problem(BW3_PROBLEM, bw_domain)
    return pddl.ground(bw_domain, prob)


@pytest.fixture(scope="session")
def bw_templates():
    return world.TemplateSet.from_json(f"{FIXTURES}/blocksworld/templates.json")


@pytest.fixture(scope="session")
def ferry_templates():
    return world.TemplateSet.from_json(f"{FIXTURES}/ferry/templates.json")


def load_fixture_domain(name, max_plans=100):
    dom, probs = pddl.load_domain_dir(f"{FIXTURES}/{name}")
    templates = world.TemplateSet.from_json(f"{FIXTURES}/{name}/templates.json")
    return world.build_domain_data(dom, probs, templates, max_plans=max_plans)


@pytest.fixture(scope="session")
def fixture_bundle():
    """Both fixture domains with the builtin 256-d encoder, fully embedded."""
    datas = [load_fixture_domain("blocksworld"), load_fixture_domain("ferry")]
    bundle = bundle_from_domain_data(datas)
    spec = BuiltinEncoderSpec(dim=256, seed=0)
    states = []
    for dd in datas:
        for sid in dd.state_ids:
            states.append((str(sid),
                           world.render_state(dd.registry.get(sid), dd.templates)))
    actions = sorted({a for dd in datas for gp in dd.grounded.values()
                      for a in [x.id for x in gp.actions]})
    bundle.table = embed_corpus(states, actions, spec)
    return bundle


class RiggedModel:
    """Predicts the ground-truth direction on chosen steps and its negation
    elsewhere; the state head is the identity, so retrieval ranks are forced
    (rank 1 on hits, last on misses)."""

    def __init__(self, table, plan_steps, hits):
        self.table = table
        self.targets = {}
        for step, t in enumerate(plan_steps):
            sign = 1.0 if step in hits else -1.0
            self.targets[str(t.s)] = sign * \
                table.vector(str(t.s_next)).astype(np.float64)

        class _IdentityHead:
            def forward(self, z):
                return np.atleast_2d(np.asarray(z, dtype=np.float64)), None

        self.pi_s = _IdentityHead()

    def forward_tape(self, z_s, z_a):
        z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
        key = None
        for k, v in self.table.entries.items():
            if np.array_equal(v.astype(np.float64), z_s[0]):
                key = k
                break
        h_hat = self.targets[key][None, :]
        return z_s, z_s, h_hat, None


def synthetic_bundle(n_states=600, n_actions=40, n_queries=2600, dim=64, seed=11):
    """Exchangeable corpus: iid unit embeddings, uniformly random pairings.

    The ground truth is a uniformly random state, so retrieval ranks are
    exchangeable and Hit@k is analytically k / pool_size.
    """
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n_states + n_actions, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    entries = {str(i): vecs[i].astype(np.float32) for i in range(n_states)}
    for j in range(n_actions):
        entries[f"act:(op{j})"] = vecs[n_states + j].astype(np.float32)
    table = EmbeddingTable(dim=dim, entries=entries)

    transitions, order = {}, []
    applicable = {}
    all_actions = tuple(f"(op{j})" for j in range(n_actions))
    for q in range(n_queries):
        s, s_next = rng.choice(n_states, size=2, replace=False)
        a = f"(op{rng.integers(n_actions)})"
        t = Transition(domain="synth", problem="p0", plan_id=0, step=q,
                       s=int(s), a=a, s_next=int(s_next),
                       s_text="", a_text=a, s_next_text="")
        transitions[t.tid] = t
        order.append(t.tid)
        applicable[("synth", "p0", int(s))] = all_actions
    return DatasetBundle(
        transitions=transitions, order=order,
        domain_states={"synth": [str(i) for i in range(n_states)]},
        problem_states={("synth", "p0"): [str(i) for i in range(n_states)]},
        problem_actions={("synth", "p0"): list(all_actions)},
        applicable=applicable, table=table)
