"""STRIPS-subset PDDL: parsing, type checking, and grounding.

Supported fragment: `:strips` + `:typing` with single inheritance, positive
preconditions, add/delete effects. Anything else (ADL connectives, numeric
fluents, derived predicates, ...) is rejected with a diagnostic naming the
construct and its line.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .errors import GroundingExplosion, ParseError, TypeMismatch, UnsupportedFeature

ROOT_TYPE = "object"

SUPPORTED_REQUIREMENTS = {":strips", ":typing"}


# --- s-expression reader -----------------------------------------------------

@dataclass
class Sym:
    """Atom of an s-expression, with the source line for diagnostics."""
    text: str
    line: int


def _tokenize(text):
    toks = []
    i, line, n = 0, 1, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch in " \t\r":
            i += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "()":
            toks.append(Sym(ch, line))
            i += 1
        else:
            j = i
            while j < n and text[j] not in " \t\r\n();":
                j += 1
            toks.append(Sym(text[i:j].lower(), line))
            i = j
    return toks


def _read_sexp(toks, pos):
    if pos >= len(toks):
        raise ParseError("unexpected end of input, expected expression")
    t = toks[pos]
    if t.text == "(":
        items = []
        pos += 1
        while True:
            if pos >= len(toks):
                raise ParseError("unbalanced '(', expected ')'", t.line)
            if toks[pos].text == ")":
                return items, pos + 1
            item, pos = _read_sexp(toks, pos)
            items.append(item)
    if t.text == ")":
        raise ParseError("unexpected ')'", t.line)
    return t, pos + 1


def _parse_sexp(text):
    toks = _tokenize(text)
    sexp, pos = _read_sexp(toks, 0)
    if pos != len(toks):
        raise ParseError("trailing content after top-level expression",
                         toks[pos].line)
    return sexp


def _head(sexp):
    return sexp[0].text if sexp and isinstance(sexp[0], Sym) else None


def _line(sexp):
    node = sexp
    while isinstance(node, list):
        if not node:
            return None
        node = node[0]
    return node.line


# --- domain structures -------------------------------------------------------

@dataclass(frozen=True)
class GroundAtom:
    predicate: str
    args: tuple[str, ...]

    def sort_key(self):
        return (self.predicate, self.args)

    def serialize(self):
        return "(" + " ".join((self.predicate,) + self.args) + ")"


@dataclass
class ActionSchema:
    name: str
    params: list[tuple[str, str]]          # (?var, type)
    preconditions: list[tuple[str, tuple[str, ...]]]
    add_effects: list[tuple[str, tuple[str, ...]]]
    del_effects: list[tuple[str, tuple[str, ...]]]


@dataclass
class DomainDef:
    name: str
    types: list[tuple[str, str]]           # (type, parent)
    predicates: list[tuple[str, list[tuple[str, str]]]]
    action_schemas: list[ActionSchema]
    _ancestors: dict[str, set[str]] = field(default_factory=dict, repr=False)

    def predicate_arity(self):
        return {name: len(params) for name, params in self.predicates}

    def type_compatible(self, obj_type, want_type):
        """True when an object of `obj_type` can fill a `want_type` slot."""
        return want_type in self._ancestors.get(obj_type, {obj_type, ROOT_TYPE})


@dataclass
class ProblemDef:
    name: str
    domain_name: str
    objects: list[tuple[str, str]]
    init: frozenset[GroundAtom]
    goal: frozenset[GroundAtom]


@dataclass(frozen=True)
class GroundAction:
    schema: str
    binding: tuple[str, ...]
    pre: frozenset[GroundAtom]
    add: frozenset[GroundAtom]
    dele: frozenset[GroundAtom]

    @property
    def id(self):
        return "(" + " ".join((self.schema,) + self.binding) + ")"


@dataclass
class GroundedProblem:
    domain: str
    problem: str
    objects: list[tuple[str, str]]
    actions: list[GroundAction]            # sorted by id
    init: frozenset[GroundAtom]
    goal: frozenset[GroundAtom]
    _by_id: dict[str, GroundAction] = field(default_factory=dict, repr=False)

    def action(self, action_id):
        return self._by_id[action_id]


def applicable(atoms, action):
    return action.pre <= atoms


def apply_action(atoms, action):
    """Successor atom set: (s - del) | add."""
    return frozenset((atoms - action.dele) | action.add)


# --- parsing helpers ---------------------------------------------------------

def _typed_list(items, kind):
    """Parse a PDDL typed list `a b - t c - u ...` into [(name, type), ...]."""
    out = []
    pending = []
    i = 0
    while i < len(items):
        it = items[i]
        if not isinstance(it, Sym):
            raise ParseError(f"expected name in {kind} list, got a sub-expression",
                             _line(it))
        if it.text == "-":
            if i + 1 >= len(items) or not isinstance(items[i + 1], Sym):
                raise ParseError(f"expected type name after '-' in {kind} list", it.line)
            ty = items[i + 1].text
            out.extend((name, ty) for name in pending)
            pending = []
            i += 2
        else:
            pending.append(it.text)
            i += 1
    out.extend((name, ROOT_TYPE) for name in pending)
    return out


def _parse_atom_template(sexp, param_types, dom, where):
    if not isinstance(sexp, list) or not sexp or not isinstance(sexp[0], Sym):
        raise ParseError(f"malformed atom in {where}", _line(sexp))
    pred = sexp[0].text
    arity = dom.predicate_arity()
    if pred not in arity:
        raise ParseError(f"unknown predicate '{pred}' in {where}", sexp[0].line)
    args = []
    for a in sexp[1:]:
        if not isinstance(a, Sym):
            raise ParseError(f"malformed argument in {where}", _line(a))
        args.append(a.text)
    if len(args) != arity[pred]:
        raise ParseError(
            f"predicate '{pred}' expects {arity[pred]} args, got {len(args)} in {where}",
            sexp[0].line)
    for a, line in zip(args, (s.line for s in sexp[1:])):
        if a.startswith("?") and a not in param_types:
            raise ParseError(f"unbound variable '{a}' in {where}", line)
    return pred, tuple(args)


def _parse_condition(sexp, param_types, dom, where):
    """Positive conjunction only; rejects ADL constructs by name."""
    head = _head(sexp)
    if head in ("not", "or", "imply", "exists", "forall", "when",
                "increase", "decrease", "assign", "=", "<", ">", "<=", ">="):
        raise UnsupportedFeature(
            f"line {_line(sexp)}: construct '{head}' in {where} is outside the "
            f"STRIPS subset (positive preconditions only)")
    if head == "and":
        atoms = []
        for part in sexp[1:]:
            atoms.extend(_parse_condition(part, param_types, dom, where))
        return atoms
    return [_parse_atom_template(sexp, param_types, dom, where)]


def _parse_effect(sexp, param_types, dom, where):
    head = _head(sexp)
    if head in ("when", "forall", "increase", "decrease", "assign"):
        raise UnsupportedFeature(
            f"line {_line(sexp)}: construct '{head}' in {where} is outside the "
            f"STRIPS subset (add/delete effects only)")
    if head == "and":
        adds, dels = [], []
        for part in sexp[1:]:
            a, d = _parse_effect(part, param_types, dom, where)
            adds.extend(a)
            dels.extend(d)
        return adds, dels
    if head == "not":
        if len(sexp) != 2:
            raise ParseError(f"malformed (not ...) in {where}", _line(sexp))
        return [], [_parse_atom_template(sexp[1], param_types, dom, where)]
    return [_parse_atom_template(sexp, param_types, dom, where)], []


# --- public operations -------------------------------------------------------

def parse_domain(text):
    """Parse a STRIPS-subset PDDL domain into a DomainDef."""
    sexp = _parse_sexp(text)
    if _head(sexp) != "define":
        raise ParseError("expected (define (domain ...) ...)", _line(sexp))
    name = None
    types = []
    predicates = []
    schemas = []

    for section in sexp[1:]:
        head = _head(section)
        if head == "domain":
            name = section[1].text
        elif head == ":requirements":
            for req in section[1:]:
                if req.text not in SUPPORTED_REQUIREMENTS:
                    raise UnsupportedFeature(
                        f"line {req.line}: requirement '{req.text}' is not "
                        f"supported (only :strips and :typing)")
        elif head == ":types":
            types = _typed_list(section[1:], ":types")
        elif head == ":constants":
            raise UnsupportedFeature(
                f"line {_line(section)}: ':constants' are not supported")
        elif head == ":predicates":
            for p in section[1:]:
                if not isinstance(p, list) or not p:
                    raise ParseError("malformed predicate declaration", _line(p))
                pname = p[0].text
                if any(existing == pname for existing, _ in predicates):
                    raise ParseError(f"duplicate predicate '{pname}'", p[0].line)
                predicates.append((pname, _typed_list(p[1:], "predicate parameters")))
        elif head == ":functions":
            raise UnsupportedFeature(
                f"line {_line(section)}: numeric fluents (':functions') are not supported")
        elif head == ":action":
            schemas.append(section)   # resolved after predicates are known
        elif head in (":derived", ":durative-action"):
            raise UnsupportedFeature(
                f"line {_line(section)}: '{head}' is not supported")
        else:
            raise ParseError(f"unknown domain section '{head}'", _line(section))

    if name is None:
        raise ParseError("domain has no (domain <name>) declaration")

    known_types = {ROOT_TYPE} | {t for t, _ in types} | {p for _, p in types}
    for pname, params in predicates:
        for _, ty in params:
            if ty not in known_types:
                raise TypeMismatch(
                    f"predicate '{pname}' uses undeclared type '{ty}'")

    dom = DomainDef(name=name, types=types, predicates=predicates, action_schemas=[])
    dom._ancestors = _ancestor_map(types)

    seen_schemas = set()
    for section in schemas:
        schema = _parse_schema(section, dom, known_types)
        if schema.name in seen_schemas:
            raise ParseError(f"duplicate action schema '{schema.name}'",
                             _line(section))
        seen_schemas.add(schema.name)
        dom.action_schemas.append(schema)
    return dom


def _ancestor_map(types):
    parents = dict(types)
    out = {}
    names = {ROOT_TYPE} | set(parents) | set(parents.values())
    for t in names:
        chain = {t, ROOT_TYPE}
        cur = t
        seen = {t}
        while cur in parents:
            cur = parents[cur]
            if cur in seen:
                raise TypeMismatch(f"type cycle through '{cur}'")
            seen.add(cur)
            chain.add(cur)
        out[t] = chain
    return out


def _parse_schema(section, dom, known_types):
    aname = None
    params = []
    pre = []
    add, dele = [], []
    i = 1
    if i < len(section) and isinstance(section[i], Sym):
        aname = section[i].text
        i += 1
    else:
        raise ParseError("(:action ...) missing name", _line(section))
    while i < len(section):
        key = section[i]
        if not isinstance(key, Sym) or not key.text.startswith(":"):
            raise ParseError(f"expected :parameters/:precondition/:effect in "
                             f"action '{aname}'", _line(key))
        if i + 1 >= len(section):
            raise ParseError(f"'{key.text}' in action '{aname}' has no body", key.line)
        body = section[i + 1]
        if key.text == ":parameters":
            params = _typed_list(body, f"parameters of '{aname}'")
            for v, ty in params:
                if not v.startswith("?"):
                    raise ParseError(f"parameter '{v}' of '{aname}' must start "
                                     f"with '?'", key.line)
                if ty not in known_types:
                    raise TypeMismatch(
                        f"action '{aname}' parameter '{v}' has undeclared type '{ty}'")
        elif key.text == ":precondition":
            param_types = dict(params)
            pre = _parse_condition(body, param_types, dom,
                                   f"precondition of '{aname}'")
        elif key.text == ":effect":
            param_types = dict(params)
            add, dele = _parse_effect(body, param_types, dom,
                                      f"effect of '{aname}'")
        else:
            raise UnsupportedFeature(
                f"line {key.line}: action field '{key.text}' is not supported")
        i += 2
    return ActionSchema(name=aname, params=params, preconditions=pre,
                        add_effects=add, del_effects=dele)


def parse_problem(text, dom):
    """Parse and type-check a problem file against its domain."""
    sexp = _parse_sexp(text)
    if _head(sexp) != "define":
        raise ParseError("expected (define (problem ...) ...)", _line(sexp))
    name = None
    domain_name = None
    objects = []
    init = []
    goal = []

    for section in sexp[1:]:
        head = _head(section)
        if head == "problem":
            name = section[1].text
        elif head == ":domain":
            domain_name = section[1].text
        elif head == ":objects":
            objects = _typed_list(section[1:], ":objects")
        elif head == ":init":
            init = section[1:]
        elif head == ":goal":
            if len(section) != 2:
                raise ParseError("malformed (:goal ...)", _line(section))
            goal = section[1]
        elif head in (":metric", ":constraints"):
            raise UnsupportedFeature(
                f"line {_line(section)}: '{head}' is not supported")
        else:
            raise ParseError(f"unknown problem section '{head}'", _line(section))

    if name is None or domain_name is None:
        raise ParseError("problem needs (problem <name>) and (:domain <name>)")
    if domain_name != dom.name:
        raise TypeMismatch(
            f"problem '{name}' declares domain '{domain_name}', expected '{dom.name}'")

    known_types = {ROOT_TYPE} | {t for t, _ in dom.types} | {p for _, p in dom.types}
    seen = set()
    for obj, ty in objects:
        if obj in seen:
            raise ParseError(f"duplicate object '{obj}'")
        seen.add(obj)
        if ty not in known_types:
            raise TypeMismatch(f"object '{obj}' has undeclared type '{ty}'")

    obj_types = dict(objects)
    pred_params = dict(dom.predicates)

    def ground_atom(sexp_atom, where):
        if not isinstance(sexp_atom, list) or not sexp_atom:
            raise ParseError(f"malformed atom in {where}", _line(sexp_atom))
        pred = sexp_atom[0].text
        if pred not in pred_params:
            raise TypeMismatch(f"unknown predicate '{pred}' in {where}")
        want = pred_params[pred]
        args = [a.text for a in sexp_atom[1:]]
        if len(args) != len(want):
            raise TypeMismatch(
                f"predicate '{pred}' expects {len(want)} args, got {len(args)} in {where}")
        for a, (_, ty) in zip(args, want):
            if a not in obj_types:
                raise TypeMismatch(f"undeclared object '{a}' in {where}")
            if not dom.type_compatible(obj_types[a], ty):
                raise TypeMismatch(
                    f"object '{a}' of type '{obj_types[a]}' cannot fill "
                    f"'{ty}' slot of '{pred}' in {where}")
        return GroundAtom(pred, tuple(args))

    init_atoms = frozenset(ground_atom(a, ":init") for a in init)
    goal_head = _head(goal)
    goal_atoms = []
    if goal_head == "and":
        goal_atoms = [ground_atom(a, ":goal") for a in goal[1:]]
    elif goal_head in ("not", "or", "imply", "exists", "forall"):
        raise UnsupportedFeature(
            f"line {_line(goal)}: '{goal_head}' goals are not supported")
    else:
        goal_atoms = [ground_atom(goal, ":goal")]

    return ProblemDef(name=name, domain_name=domain_name, objects=objects,
                      init=init_atoms, goal=frozenset(goal_atoms))


def ground(dom, prob, max_actions=10**6):
    """Enumerate type-consistent ground actions under the distinct-binding rule.

    Bindings that assign one object to two parameters of the same schema are
    excluded; this is what removes statically inapplicable actions such as
    stacking a block onto itself.
    """
    objs_by_type = {}
    for obj, ty in prob.objects:
        objs_by_type.setdefault(ty, []).append(obj)

    def candidates(want_type):
        out = []
        for ty, objs in objs_by_type.items():
            if dom.type_compatible(ty, want_type):
                out.extend(objs)
        return sorted(out)

    actions = []
    for schema in dom.action_schemas:
        pools = [candidates(ty) for _, ty in schema.params]
        for binding in itertools.product(*pools):
            if len(set(binding)) != len(binding):
                continue
            env = {v: b for (v, _), b in zip(schema.params, binding)}

            def inst(templates):
                return frozenset(
                    GroundAtom(p, tuple(env.get(a, a) for a in args))
                    for p, args in templates)

            ga = GroundAction(schema=schema.name, binding=tuple(binding),
                              pre=inst(schema.preconditions),
                              add=inst(schema.add_effects),
                              dele=inst(schema.del_effects))
            if ga.add & ga.dele:
                raise TypeMismatch(
                    f"ground action {ga.id} has overlapping add and delete effects")
            actions.append(ga)
            if len(actions) > max_actions:
                raise GroundingExplosion(
                    f"{dom.name}/{prob.name}: ground-action count exceeds "
                    f"cap {max_actions}")

    actions.sort(key=lambda a: a.id)
    gp = GroundedProblem(domain=dom.name, problem=prob.name,
                         objects=list(prob.objects), actions=actions,
                         init=prob.init, goal=prob.goal)
    gp._by_id = {a.id: a for a in actions}
    return gp


def load_domain_dir(path):
    """Read domains/<name>/domain.pddl plus p*.pddl fixtures.

    Returns (DomainDef, [ProblemDef, ...]) with problems sorted by filename.
    """
    from pathlib import Path

    root = Path(path)
    dom = parse_domain((root / "domain.pddl").read_text(encoding="utf-8"))
    problems = []
    for pfile in sorted(root.glob("p*.pddl")):
        problems.append(parse_problem(pfile.read_text(encoding="utf-8"), dom))
    return dom, problems
