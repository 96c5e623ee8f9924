"""Turn trained models into grounded STRIPS domains.

AMA1 copies observed transitions verbatim.  Cube-Space models are read off the
Back-to-Logit layers by feeding all-zero and all-one states: with a positive
batch-norm slope every bit then behaves as set, clear or copy, and anything
else is an XOR bit that gets compiled away by splitting the action.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from . import strips as S
from .models import BidirectionalCSAE, CubeSpaceAE, StateAE, TwoPhaseAAE

MAX_XOR_BITS = 20


class XorBlowupError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractedAction:
    label: int
    add: frozenset = frozenset()
    delete: frozenset = frozenset()
    pos: frozenset = frozenset()
    neg: frozenset = frozenset()
    prevail: frozenset = frozenset()
    xor_effect: frozenset = frozenset()
    xor_precondition: frozenset = frozenset()
    provenance: str = "ama3_adhoc"
    variant: str = ""
    defects: tuple = ()

    def __post_init__(self):
        for name in ("add", "delete", "pos", "neg", "prevail", "xor_effect", "xor_precondition"):
            object.__setattr__(self, name, frozenset(int(b) for b in getattr(self, name)))

    @property
    def name(self) -> str:
        return f"a{self.label}" + (f"-{self.variant}" if self.variant else "")

    @property
    def xor_bits(self) -> frozenset:
        return self.xor_effect | self.xor_precondition

    def ground(self) -> S.GroundAction:
        if self.xor_bits:
            raise ValueError(f"{self.name} still has xor bits {sorted(self.xor_bits)}; run compile_xor first")
        return S.GroundAction(self.name, self.pos, self.neg, self.add, self.delete)


def _bits(z) -> np.ndarray:
    return np.asarray(z.detach().cpu() if torch.is_tensor(z) else z).astype(np.int8)


# -- AMA1 -------------------------------------------------------------------------

def ama1_translate(z0s, z1s) -> list[S.GroundAction]:
    """One action per distinct (z0, z1): full z0 as precondition, flips as effects."""
    z0s, z1s = _bits(z0s), _bits(z1s)
    seen = {}
    for a, b in zip(z0s, z1s):
        key = (S.to_string(S.from_bits(a), len(a)), S.to_string(S.from_bits(b), len(b)))
        if key in seen:
            continue
        on = np.flatnonzero(a)
        off = np.flatnonzero(a == 0)
        seen[key] = S.GroundAction(f"action-{key[0]}-{key[1]}", on, off,
                                   np.flatnonzero((a == 0) & (b == 1)), np.flatnonzero((a == 1) & (b == 0)))
    return list(seen.values())


# -- Back-to-Logit readouts -------------------------------------------------------

@torch.no_grad()
def _btl_corners(btl, labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Determinized outputs on the all-zero and all-one state for each label."""
    was = btl.training
    btl.eval()
    try:
        labels = torch.as_tensor(list(labels), dtype=torch.long)
        a = torch.nn.functional.one_hot(labels, btl.A).float()
        zeros = torch.zeros(len(labels), btl.F)
        out0 = (btl(zeros, a) >= 0).numpy().astype(np.int8)
        out1 = (btl(torch.ones_like(zeros), a) >= 0).numpy().astype(np.int8)
    finally:
        btl.train(was)
    return out0, out1


def _split_corners(out0: np.ndarray, out1: np.ndarray):
    """(set-on-zero, cleared-on-one, both) bit sets per row."""
    rows = []
    for r0, r1 in zip(out0, out1):
        up = set(np.flatnonzero(r0 == 1).tolist())
        down = set(np.flatnonzero(r1 == 0).tolist())
        rows.append((up - down, down - up, up & down))
    return rows


def extract_effects(model: CubeSpaceAE, label: int) -> tuple[frozenset, frozenset, frozenset]:
    """(add, del, xor_effect) of ``label`` read from apply(0, a) and apply(1, a)."""
    (add, dele, xor), = _split_corners(*_btl_corners(model.apply_btl, [label]))
    return frozenset(add), frozenset(dele), frozenset(xor)


def extract_preconditions_regression(model: BidirectionalCSAE, label: int):
    """(pos, neg, prevail, xor_precondition) from regress(0, a) and regress(1, a)."""
    (pos, neg, xor), = _split_corners(*_btl_corners(model.regress_btl, [label]))
    prevail = set(range(model.latent.F)) - pos - neg - xor
    return frozenset(pos), frozenset(neg), frozenset(prevail), frozenset(xor)


def extract_preconditions_adhoc(z0s, labels, label: int) -> tuple[frozenset, frozenset]:
    """Bits constant at 1 (pos) or at 0 (neg) across every z0 observed with ``label``."""
    z0s, labels = _bits(z0s), np.asarray(labels)
    rows = z0s[labels == label]
    if len(rows) == 0:
        raise ValueError(f"label {label} is never used; prune it instead")
    return (frozenset(np.flatnonzero(rows.min(0) == 1).tolist()),
            frozenset(np.flatnonzero(rows.max(0) == 0).tolist()))


# -- reconciliation and compilation -------------------------------------------------

def reconcile_prevail(action: ExtractedAction, observed_pre=None) -> list[ExtractedAction]:
    """Give every prevail bit that carries an add/del effect a definite precondition.

    ``observed_pre`` holds the z0 rows of training transitions with this label.
    A bit only ever seen at the value its effect leaves unchanged keeps that as
    its precondition (add -> pos, del -> neg); a bit only seen flipping gets the
    opposite one.  A bit observed at both values splits the action into one
    variant per value, since the effect is genuinely conditional on it.  Without
    observations the flip reading is used.
    """
    bits = sorted(action.prevail & (action.add | action.delete))
    if not bits:
        return [action]
    obs = None if observed_pre is None else _bits(observed_pre)
    if obs is not None and obs.ndim == 1:
        obs = obs[None]
    choices = []
    defects = list(action.defects)
    for j in bits:
        flip_value = 0 if j in action.add else 1
        seen = {flip_value} if obs is None or len(obs) == 0 else set(obs[:, j].tolist())
        if len(seen) == 2:
            defects.append(f"z{j}: prevail with {'add' if flip_value == 0 else 'del'} effect seen at both values")
        choices.append([(j, v) for v in sorted(seen)])
    out = []
    for combo in itertools.product(*choices):
        pos, neg = set(action.pos), set(action.neg)
        for j, v in combo:
            (pos if v else neg).add(j)
        suffix = "".join(str(v) for _, v in combo) if any(len(c) > 1 for c in choices) else ""
        variant = "-".join(x for x in (action.variant, f"p{suffix}" if suffix else "") if x)
        out.append(replace(action, pos=frozenset(pos), neg=frozenset(neg),
                           prevail=action.prevail - set(bits), variant=variant, defects=tuple(defects)))
    return out


def compile_xor(actions: Sequence[ExtractedAction], max_bits: int = MAX_XOR_BITS) -> list[ExtractedAction]:
    """Split each action over the pre-values of its xor bits; each variant flips those bits.

    A bit that is xor in both the effect and the precondition contributes one
    split.  Variants whose fixed pre-value contradicts an existing precondition
    can never fire and are dropped.
    """
    out = []
    for act in actions:
        bits = sorted(act.xor_bits)
        if not bits:
            out.append(act)
            continue
        if len(bits) > max_bits:
            raise XorBlowupError(f"{act.name}: {len(bits)} xor bits would create 2^{len(bits)} variants "
                                 f"(limit {max_bits}); the model violates monotonicity too often")
        base_pos = act.pos - set(bits)
        base_neg = act.neg - set(bits)
        for values in itertools.product((0, 1), repeat=len(bits)):
            if any((v == 0 and j in act.pos) or (v == 1 and j in act.neg) for j, v in zip(bits, values)):
                continue
            on = {j for j, v in zip(bits, values) if v}
            off = set(bits) - on
            tag = "x" + "".join(map(str, values))
            out.append(replace(
                act, pos=base_pos | on, neg=base_neg | off,
                add=(act.add - set(bits)) | off, delete=(act.delete - set(bits)) | on,
                prevail=act.prevail - set(bits), xor_effect=frozenset(), xor_precondition=frozenset(),
                variant="-".join(x for x in (act.variant, tag) if x)))
    return out


# -- label usage ---------------------------------------------------------------------

@torch.no_grad()
def encode_pairs(model, x0, x1, batch: int = 512):
    """Determinized (z0, z1, labels) for normalized image pairs; labels are None for AMA1."""
    x0 = torch.as_tensor(np.asarray(x0), dtype=torch.float32)
    x1 = torch.as_tensor(np.asarray(x1), dtype=torch.float32)
    z0s, z1s, labs = [], [], []
    for i in range(0, len(x0), batch):
        b0, b1 = x0[i:i + batch], x1[i:i + batch]
        z0s.append(model.encode_bits(b0))
        z1s.append(model.encode_bits(b1))
        if isinstance(model, CubeSpaceAE):
            labs.append(model.action_labels(b0, b1))
        elif isinstance(model, TwoPhaseAAE):
            labs.append(model.aae.labels(z0s[-1], z1s[-1]))
    z0 = _bits(torch.cat(z0s)) if z0s else np.zeros((0, model.latent.F), np.int8)
    z1 = _bits(torch.cat(z1s)) if z1s else np.zeros((0, model.latent.F), np.int8)
    labels = torch.cat(labs).numpy() if labs else None
    return z0, z1, labels


def prune_unused(labels) -> list[int]:
    """Labels selected at least once, ascending."""
    return sorted(set(np.asarray(labels).astype(int).tolist()))


@torch.no_grad()
def predict_successors(model: CubeSpaceAE, z0, labels) -> np.ndarray:
    model.eval()
    z = torch.as_tensor(np.asarray(z0), dtype=torch.float32)
    a = torch.nn.functional.one_hot(torch.as_tensor(np.asarray(labels), dtype=torch.long), model.latent.A).float()
    return (model.apply_btl(z, a) >= 0).numpy().astype(np.int8)


@torch.no_grad()
def predict_predecessors(model: BidirectionalCSAE, z1, labels) -> np.ndarray:
    model.eval()
    z = torch.as_tensor(np.asarray(z1), dtype=torch.float32)
    a = torch.nn.functional.one_hot(torch.as_tensor(np.asarray(labels), dtype=torch.long), model.latent.A).float()
    return (model.regress_btl(z, a) >= 0).numpy().astype(np.int8)


# -- whole-domain extraction -------------------------------------------------------------

@dataclass
class ExtractionReport:
    kind: str
    F: int
    A: int
    A1: int = 0  # labels surviving pruning (or distinct AMA1 pairs)
    A2: int = 0  # grounded actions after xor compilation
    xor_effect: dict = field(default_factory=dict)  # label -> count
    xor_precondition: dict = field(default_factory=dict)
    defects: list = field(default_factory=list)
    fidelity: dict = field(default_factory=dict)

    @property
    def xor_effect_mean(self) -> float:
        return float(np.mean(list(self.xor_effect.values()))) if self.xor_effect else 0.0

    @property
    def xor_precondition_mean(self) -> float:
        return float(np.mean(list(self.xor_precondition.values()))) if self.xor_precondition else 0.0

    def summary(self) -> dict:
        return {"kind": self.kind, "F": self.F, "A": self.A, "A1": self.A1, "A2": self.A2,
                "xor_effect_mean": self.xor_effect_mean, "xor_precondition_mean": self.xor_precondition_mean,
                "defects": len(self.defects), **{f"fidelity_{k}": v for k, v in self.fidelity.items()}}

    def write(self, path) -> None:
        """Summary block, then one row per surviving label."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            for k, v in self.summary().items():
                w.writerow(["#", k, f"{v:.6g}" if isinstance(v, float) else v])
            w.writerow(["label", "xor_effect_bits", "xor_precondition_bits"])
            for lab in sorted(set(self.xor_effect) | set(self.xor_precondition)):
                w.writerow([lab, self.xor_effect.get(lab, 0), self.xor_precondition.get(lab, 0)])
            for d in self.defects:
                w.writerow(["# defect", d])


def extract_actions(model, z0, z1, labels) -> tuple[list[ExtractedAction], ExtractionReport]:
    """Uncompiled actions (xor bits still attached) for every used label."""
    F, A = model.latent.F, model.latent.A
    used = prune_unused(labels)
    report = ExtractionReport(model.kind, F, A, A1=len(used))
    if not used:
        return [], report
    eff = _split_corners(*_btl_corners(model.apply_btl, used))
    pre = _split_corners(*_btl_corners(model.regress_btl, used)) if isinstance(model, BidirectionalCSAE) else None
    actions = []
    for i, lab in enumerate(used):
        add, dele, xe = eff[i]
        rows = z0[labels == lab]
        if pre is not None:
            pos, neg, xp = pre[i]
            prevail = set(range(F)) - pos - neg - xp
            act = ExtractedAction(lab, add, dele, pos, neg, prevail, xe, xp, "ama4_regression")
            variants = reconcile_prevail(act, rows)
        else:
            pos, neg = extract_preconditions_adhoc(rows, np.full(len(rows), lab), lab)
            variants = [ExtractedAction(lab, add, dele, pos, neg, frozenset(), xe, frozenset(), "ama3_adhoc")]
        report.xor_effect[lab] = len(xe)
        report.xor_precondition[lab] = len(variants[0].xor_precondition)
        for v in variants:
            report.defects.extend(f"a{lab}: {d}" for d in v.defects if f"a{lab}: {d}" not in report.defects)
        actions.extend(variants)
    return actions, report


def fidelity_sweep(model, z0, z1, labels, compiled: Sequence[ExtractedAction]) -> dict:
    """How often the compiled domain reproduces the model on its own training transitions.

    ``exact`` counts transitions where the model's successor prediction equals
    z1; among those, ``reproduced`` counts transitions where some variant of the
    assigned label is applicable at z0 and progresses it to z1.
    """
    z2 = predict_successors(model, z0, labels)
    by_label: dict[int, list[S.GroundAction]] = {}
    for act in compiled:
        by_label.setdefault(act.label, []).append(act.ground())
    exact = reproduced = applicable = effect_match = 0
    mismatches = []
    for i, (a, b, c, lab) in enumerate(zip(z0, z1, z2, labels)):
        s, t, p = S.from_bits(a), S.from_bits(b), S.from_bits(c)
        cands = [g for g in by_label.get(int(lab), []) if S.is_applicable(s, g)]
        applicable += bool(cands)
        effect_match += any(S.progress(s, g) == p for g in cands)
        if p != t:
            continue
        exact += 1
        if any(S.progress(s, g) == t for g in cands):
            reproduced += 1
        else:
            mismatches.append(i)
    n = len(z0)
    return {"transitions": n, "applicable": applicable, "matches_model": effect_match,
            "model_exact": exact, "reproduced": reproduced,
            "rate": reproduced / exact if exact else 1.0, "mismatches": mismatches}


def effect_fidelity(model, z0, labels, actions: Sequence[ExtractedAction]) -> dict:
    """Effects-only check: does ``(z0 - del) | add`` equal the determinized BTL successor?

    Preconditions are ignored and only transitions whose label has no xor effect
    bits are counted, so the rate is 1.0 whenever extraction is faithful.
    """
    z2 = predict_successors(model, z0, labels)
    eff = {}
    for act in actions:
        if not act.xor_effect:
            eff[act.label] = (S.mask(act.add), S.mask(act.delete))
    checked = matched = 0
    for a, c, lab in zip(z0, z2, labels):
        if int(lab) not in eff:
            continue
        add, dele = eff[int(lab)]
        checked += 1
        matched += ((S.from_bits(a) & ~dele) | add) == S.from_bits(c)
    return {"effect_checked": checked, "effect_matched": matched,
            "effect_rate": matched / checked if checked else 1.0}


def generate_domain(model, x0, x1, name: str = "latent", check_monotone: bool = True):
    """Normalized training pairs -> (strips.Domain, ExtractionReport)."""
    if isinstance(model, TwoPhaseAAE):
        raise ValueError("an AMA2 model predicts successors with a black-box network and has no STRIPS "
                         "extraction; train ama3plus or ama4plus to export PDDL")
    model.eval()
    z0, z1, labels = encode_pairs(model, x0, x1)
    F = model.latent.F
    if isinstance(model, StateAE):
        actions = ama1_translate(z0, z1)
        report = ExtractionReport(model.kind, F, 0, A1=len(actions), A2=len(actions))
        return S.Domain(name, F, actions), report
    if check_monotone:
        from .networks import check_monotonicity
        bad = check_monotonicity(model.apply_btl, getattr(model, "regress_btl", None))
    else:
        bad = []
    actions, report = extract_actions(model, z0, z1, labels)
    report.defects.extend(f"z{b}: negative batch-norm slope on the {tag} path" for b, tag in bad)
    compiled = compile_xor(actions)
    report.A2 = len(compiled)
    fid = fidelity_sweep(model, z0, z1, labels, compiled)
    report.fidelity = {k: v for k, v in fid.items() if k != "mismatches"}
    report.fidelity.update(effect_fidelity(model, z0, labels, actions))
    return S.Domain(name, F, [a.ground() for a in compiled]), report


@torch.no_grad()
def encode_state(model, x) -> int:
    """One normalized image (H, W, C) -> state int."""
    model.eval()
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if tuple(x.shape) != tuple(model.image_shape):
        raise ValueError(f"image shape {tuple(x.shape)} does not match the model's {tuple(model.image_shape)}")
    return S.from_bits(_bits(model.encode_bits(x[None]))[0])


def generate_problem(model, x_init, x_goal, normalizer=None, name: str = "instance",
                     domain: str = "latent") -> S.Problem:
    """Raw (or, with ``normalizer=None``, already normalized) images -> single-goal-state problem."""
    if normalizer is not None:
        x_init, x_goal = normalizer.normalize(x_init), normalizer.normalize(x_goal)
    init, goal = encode_state(model, x_init), encode_state(model, x_goal)
    return S.problem_from_states(name, domain, model.latent.F, init, goal)
