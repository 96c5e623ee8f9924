"""Grounded propositional STRIPS: states, actions, progression, regression and A*.

States are Python ints used as bitsets: bit ``f`` holds proposition ``z{f}``.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class PlanExecutionError(RuntimeError):
    def __init__(self, step: int, action: str, missing: Sequence[int], violated: Sequence[int]):
        self.step, self.action = step, action
        self.missing, self.violated = list(missing), list(violated)
        parts = []
        if self.missing:
            parts.append("requires " + ", ".join(f"z{f}" for f in self.missing))
        if self.violated:
            parts.append("forbids " + ", ".join(f"z{f}" for f in self.violated))
        super().__init__(f"step {step}: action {action} is not applicable ({'; '.join(parts)})")


class IncompleteActionError(ValueError):
    pass


def mask(props: Iterable[int]) -> int:
    m = 0
    for p in props:
        m |= 1 << int(p)
    return m


def props(m: int) -> frozenset[int]:
    out = []
    f = 0
    while m:
        if m & 1:
            out.append(f)
        m >>= 1
        f += 1
    return frozenset(out)


def from_bits(bits) -> int:
    """Bit vector (z0 first) to state int."""
    return mask(i for i, b in enumerate(np.asarray(bits).ravel()) if b)


def to_bits(state: int, F: int) -> np.ndarray:
    return np.array([(state >> f) & 1 for f in range(F)], dtype=np.int8)


def from_string(s: str) -> int:
    """'0011' -> state with z2, z3 true."""
    return mask(i for i, ch in enumerate(s) if ch == "1")


def to_string(state: int, F: int) -> str:
    return "".join(str((state >> f) & 1) for f in range(F))


@dataclass(frozen=True)
class GroundAction:
    name: str
    pos: frozenset = frozenset()
    neg: frozenset = frozenset()
    add: frozenset = frozenset()
    delete: frozenset = frozenset()
    pos_mask: int = field(init=False, repr=False, compare=False)
    neg_mask: int = field(init=False, repr=False, compare=False)
    add_mask: int = field(init=False, repr=False, compare=False)
    del_mask: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("pos", "neg", "add", "delete"):
            object.__setattr__(self, attr, frozenset(int(p) for p in getattr(self, attr)))
        if self.pos & self.neg:
            raise ValueError(f"{self.name}: pos and neg overlap on {sorted(self.pos & self.neg)}")
        if self.add & self.delete:
            raise ValueError(f"{self.name}: add and del overlap on {sorted(self.add & self.delete)}")
        object.__setattr__(self, "pos_mask", mask(self.pos))
        object.__setattr__(self, "neg_mask", mask(self.neg))
        object.__setattr__(self, "add_mask", mask(self.add))
        object.__setattr__(self, "del_mask", mask(self.delete))


@dataclass(frozen=True)
class PlanningProblem:
    F: int
    actions: tuple
    init: int
    goal_pos: frozenset = frozenset()
    goal_neg: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "goal_pos", frozenset(self.goal_pos))
        object.__setattr__(self, "goal_neg", frozenset(self.goal_neg))
        if self.goal_pos & self.goal_neg:
            raise ValueError("goal literal sets overlap")

    @property
    def goal_pos_mask(self) -> int:
        return mask(self.goal_pos)

    @property
    def goal_neg_mask(self) -> int:
        return mask(self.goal_neg)

    def is_goal(self, s: int) -> bool:
        return goal_count(self, s) == 0


def is_applicable(s: int, a: GroundAction) -> bool:
    return (s & a.pos_mask) == a.pos_mask and not (s & a.neg_mask)


def progress(s: int, a: GroundAction) -> int:
    if not is_applicable(s, a):
        raise PlanExecutionError(0, a.name, sorted(props(a.pos_mask & ~s)), sorted(props(a.neg_mask & s)))
    return (s & ~a.del_mask) | a.add_mask


def regress_complete(t: int, a: GroundAction, prevail: Iterable[int], F: int | None = None) -> int:
    """Deterministic regression: pos bits -> 1, neg bits -> 0, prevail bits copy t."""
    prevail = frozenset(int(p) for p in prevail)
    if F is not None:
        missing = set(range(F)) - a.pos - a.neg - prevail
        if missing:
            raise IncompleteActionError(f"{a.name}: bits {sorted(missing)} are neither pos, neg nor prevail")
    return (t & mask(prevail)) | a.pos_mask


def goal_count(problem: PlanningProblem, s: int) -> int:
    unmet_pos = problem.goal_pos_mask & ~s
    unmet_neg = problem.goal_neg_mask & s
    return bin(unmet_pos).count("1") + bin(unmet_neg).count("1")


@dataclass
class SearchResult:
    status: str  # solved | exhausted | timeout
    plan: list = field(default_factory=list)
    expanded: int = 0
    generated: int = 0
    elapsed: float = 0.0

    @property
    def found(self) -> bool:
        return self.status == "solved"


HEURISTICS = {
    "blind": lambda problem, s: 0,
    "goal_count": goal_count,
}


def astar(problem: PlanningProblem, heuristic: str = "blind", max_expansions: int = 1_000_000,
          time_limit: float | None = None) -> SearchResult:
    """A* with unit costs; ties go to lower h, then first-in-first-out.

    ``goal_count`` counts unsatisfied goal literals and is inadmissible when an
    action can fix several literals at once, so optimality holds only for ``blind``.
    """
    h = HEURISTICS[heuristic]
    start_time = time.monotonic()
    counter = itertools.count()
    init = problem.init
    g_best = {init: 0}
    parent: dict[int, tuple[int, GroundAction] | None] = {init: None}
    h0 = h(problem, init)
    open_list = [(h0, h0, next(counter), init)]
    closed = set()
    expanded = generated = 0
    actions = problem.actions
    while open_list:
        f, hs, _, s = heapq.heappop(open_list)
        if s in closed:
            continue
        g = g_best[s]
        if problem.is_goal(s):
            plan = []
            node = s
            while parent[node] is not None:
                prev, a = parent[node]
                plan.append(a)
                node = prev
            return SearchResult("solved", plan[::-1], expanded, generated, time.monotonic() - start_time)
        closed.add(s)
        expanded += 1
        if expanded > max_expansions or (
                time_limit is not None and time.monotonic() - start_time > time_limit):
            return SearchResult("timeout", [], expanded, generated, time.monotonic() - start_time)
        for a in actions:
            if (s & a.pos_mask) != a.pos_mask or (s & a.neg_mask):
                continue
            t = (s & ~a.del_mask) | a.add_mask
            generated += 1
            if t in closed:
                continue
            if g + 1 < g_best.get(t, 1 << 62):
                g_best[t] = g + 1
                parent[t] = (s, a)
                ht = h(problem, t)
                heapq.heappush(open_list, (g + 1 + ht, ht, next(counter), t))
    return SearchResult("exhausted", [], expanded, generated, time.monotonic() - start_time)


def simulate(plan: Sequence, init: int, actions: dict | Iterable[GroundAction] | None = None) -> list[int]:
    """Apply ``plan`` (actions or names) from ``init``; raise at the first inapplicable step."""
    lookup = None
    if actions is not None:
        lookup = actions if isinstance(actions, dict) else {a.name: a for a in actions}
    trace = [init]
    s = init
    for step, item in enumerate(plan):
        a = lookup[item] if isinstance(item, str) else item
        if not is_applicable(s, a):
            raise PlanExecutionError(step, a.name, sorted(props(a.pos_mask & ~s)), sorted(props(a.neg_mask & s)))
        s = (s & ~a.del_mask) | a.add_mask
        trace.append(s)
    return trace


def read_plan(text: str) -> list[str]:
    """One action per line; parentheses and ``;`` comments (common planner output) are stripped."""
    names = []
    for line in text.splitlines():
        line = line.split(";", 1)[0].strip()
        if not line:
            continue
        names.append(line.strip("()").split()[0])
    return names


def write_plan(plan: Sequence) -> str:
    return "".join(f"({a if isinstance(a, str) else a.name})\n" for a in plan)


# -- PDDL text I/O ----------------------------------------------------------------

REQUIREMENTS = "(:requirements :strips :negative-preconditions)"


class PDDLParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        self.line, self.col = line, col
        super().__init__(f"line {line}, column {col}: {message}")


@dataclass(frozen=True)
class Domain:
    name: str
    F: int
    actions: tuple

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))


@dataclass(frozen=True)
class Problem:
    name: str
    domain: str
    F: int
    init: int
    goal_pos: frozenset
    goal_neg: frozenset

    def planning_problem(self, domain: Domain) -> PlanningProblem:
        if domain.F != self.F:
            raise ValueError(f"domain has {domain.F} propositions, problem has {self.F}")
        return PlanningProblem(self.F, domain.actions, self.init, self.goal_pos, self.goal_neg)


def _literals(pos_or_add: frozenset, neg_or_del: frozenset) -> str:
    lits = [(f, True) for f in pos_or_add] + [(f, False) for f in neg_or_del]
    lits.sort()
    return " ".join(f"(z{f})" if v else f"(not (z{f}))" for f, v in lits)


def emit_action(a: GroundAction) -> str:
    return (f"  (:action {a.name}\n"
            f"   :parameters ()\n"
            f"   :precondition (and {_literals(a.pos, a.neg)})\n"
            f"   :effect (and {_literals(a.add, a.delete)}))\n")


def emit_domain(domain: Domain) -> str:
    preds = " ".join(f"(z{f})" for f in range(domain.F))
    body = "".join(emit_action(a) for a in domain.actions)
    return (f"(define (domain {domain.name})\n"
            f"  {REQUIREMENTS}\n"
            f"  (:predicates {preds})\n"
            f"{body})\n")


def emit_problem(problem: Problem) -> str:
    init = " ".join(f"(z{f})" for f in sorted(props(problem.init)))
    return (f"(define (problem {problem.name})\n"
            f"  (:domain {problem.domain})\n"
            f"  (:init {init})\n"
            f"  (:goal (and {_literals(problem.goal_pos, problem.goal_neg)})))\n")


@dataclass
class _Tok:
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line, col = line + 1, 1
            i += 1
        elif ch.isspace():
            i += 1
            col += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "()":
            toks.append(_Tok(ch, line, col))
            i += 1
            col += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "();":
                j += 1
            toks.append(_Tok(text[i:j].lower(), line, col))
            col += j - i
            i = j
    return toks


class _Node(list):
    line = 1
    col = 1


def _sexpr(text: str):
    toks = _tokenize(text)
    if not toks:
        raise PDDLParseError("empty input", 1, 1)
    stack: list[_Node] = []
    root = None
    for t in toks:
        if t.text == "(":
            node = _Node()
            node.line, node.col = t.line, t.col
            if stack:
                stack[-1].append(node)
            stack.append(node)
        elif t.text == ")":
            if not stack:
                raise PDDLParseError("unbalanced ')'", t.line, t.col)
            node = stack.pop()
            if not stack:
                if root is not None:
                    raise PDDLParseError("trailing content after the top-level form", node.line, node.col)
                root = node
        else:
            if not stack:
                raise PDDLParseError(f"unexpected token {t.text!r} outside parentheses", t.line, t.col)
            stack[-1].append(t)
    if stack:
        raise PDDLParseError("unclosed '('", stack[-1].line, stack[-1].col)
    return root


def _word(x, what: str) -> str:
    if not isinstance(x, _Tok):
        raise PDDLParseError(f"expected {what}, found a list", x.line, x.col)
    return x.text


def _where(x):
    return (x.line, x.col)


def _prop(node) -> int:
    if not isinstance(node, _Node) or len(node) != 1 or not isinstance(node[0], _Tok):
        raise PDDLParseError("expected an atom like (z3)", *_where(node))
    name = node[0].text
    if not (name.startswith("z") and name[1:].isdigit()):
        raise PDDLParseError(f"unknown proposition {name!r}; expected z<index>", *_where(node[0]))
    return int(name[1:])


def _conjunction(node) -> tuple[set, set]:
    """(and lit...) or a single literal -> (positive, negative) index sets."""
    pos, neg = set(), set()
    if not isinstance(node, _Node):
        raise PDDLParseError("expected a literal or (and ...)", *_where(node))
    items = node[1:] if node and isinstance(node[0], _Tok) and node[0].text == "and" else [node]
    for lit in items:
        if isinstance(lit, _Node) and lit and isinstance(lit[0], _Tok) and lit[0].text == "not":
            if len(lit) != 2:
                raise PDDLParseError("(not ...) takes exactly one atom", lit.line, lit.col)
            neg.add(_prop(lit[1]))
        else:
            pos.add(_prop(lit))
    return pos, neg


def _header(root, kind: str):
    if not isinstance(root, _Node) or len(root) < 2 or _word(root[0], "'define'") != "define":
        raise PDDLParseError("expected (define ...)", *_where(root))
    head = root[1]
    if not isinstance(head, _Node) or len(head) != 2 or _word(head[0], kind) != kind:
        raise PDDLParseError(f"expected ({kind} <name>)", *_where(head))
    return _word(head[1], "a name"), root[2:]


def parse_domain(text: str) -> Domain:
    root = _sexpr(text)
    name, sections = _header(root, "domain")
    F = None
    actions = []
    for sec in sections:
        if not isinstance(sec, _Node) or not sec:
            raise PDDLParseError("expected a (:section ...)", *_where(sec))
        key = _word(sec[0], "a section keyword")
        if key == ":requirements":
            reqs = {_word(r, "a requirement") for r in sec[1:]}
            unknown = reqs - {":strips", ":negative-preconditions"}
            if unknown:
                raise PDDLParseError(f"unsupported requirements {sorted(unknown)}", sec.line, sec.col)
        elif key == ":predicates":
            idx = [_prop(p) for p in sec[1:]]
            if sorted(idx) != list(range(len(idx))):
                raise PDDLParseError("predicates must be z0 ... z{F-1}", sec.line, sec.col)
            F = len(idx)
        elif key == ":action":
            actions.append(_parse_action(sec))
        else:
            raise PDDLParseError(f"unsupported domain section {key!r}", *_where(sec[0]))
    if F is None:
        raise PDDLParseError("missing (:predicates ...)", root.line, root.col)
    for a in actions:
        used = a.pos | a.neg | a.add | a.delete
        if used and max(used) >= F:
            raise PDDLParseError(f"action {a.name} uses an undeclared proposition z{max(used)}", root.line, root.col)
    return Domain(name, F, actions)


def _parse_action(sec) -> GroundAction:
    if len(sec) < 2:
        raise PDDLParseError("action without a name", sec.line, sec.col)
    name = _word(sec[1], "an action name")
    fields = {}
    rest = sec[2:]
    if len(rest) % 2:
        raise PDDLParseError(f"action {name}: keyword without a value", sec.line, sec.col)
    for k, v in zip(rest[::2], rest[1::2]):
        key = _word(k, "an action keyword")
        key = {":preconditions": ":precondition", ":effects": ":effect"}.get(key, key)
        if key not in (":parameters", ":precondition", ":effect"):
            raise PDDLParseError(f"action {name}: unsupported keyword {key!r}", k.line, k.col)
        fields[key] = v
    params = fields.get(":parameters")
    if params is not None and (not isinstance(params, _Node) or len(params) > 0):
        raise PDDLParseError(f"action {name}: only grounded actions are supported", *_where(params))
    pos, neg = _conjunction(fields[":precondition"]) if ":precondition" in fields else (set(), set())
    add, dele = _conjunction(fields[":effect"]) if ":effect" in fields else (set(), set())
    try:
        return GroundAction(name, pos, neg, add, dele)
    except ValueError as e:
        raise PDDLParseError(str(e), sec.line, sec.col) from None


def parse_problem(text: str, F: int | None = None) -> Problem:
    """``F`` defaults to one past the largest proposition index mentioned."""
    root = _sexpr(text)
    name, sections = _header(root, "problem")
    domain, init, gpos, gneg = None, set(), set(), set()
    for sec in sections:
        if not isinstance(sec, _Node) or not sec:
            raise PDDLParseError("expected a (:section ...)", *_where(sec))
        key = _word(sec[0], "a section keyword")
        if key == ":domain":
            domain = _word(sec[1], "a domain name")
        elif key == ":objects":
            if len(sec) > 1:
                raise PDDLParseError("objects are not supported", sec.line, sec.col)
        elif key == ":init":
            init = {_prop(p) for p in sec[1:]}
        elif key == ":goal":
            gpos, gneg = _conjunction(sec[1])
        else:
            raise PDDLParseError(f"unsupported problem section {key!r}", *_where(sec[0]))
    if domain is None:
        raise PDDLParseError("missing (:domain ...)", root.line, root.col)
    if F is None:
        F = max(init | gpos | gneg, default=-1) + 1
    return Problem(name, domain, F, mask(init), frozenset(gpos), frozenset(gneg))


def problem_from_states(name: str, domain: str, F: int, init: int, goal: int) -> Problem:
    """Single-goal-state problem: the goal is the complete literal assignment of ``goal``."""
    gpos = props(goal)
    return Problem(name, domain, F, init, gpos, frozenset(range(F)) - gpos)
