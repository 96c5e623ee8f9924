"""Acceptance gate: one PASS/FAIL line per criterion is printed in the pytest summary.

Criteria 5, 8, 9 and 10 train desk-scale models (several minutes each on one
CPU).  Set CUBESPACE_ACCEPTANCE_CACHE=<dir> to keep the trained checkpoints
between runs; they are keyed by the full training config.
"""

import hashlib
import json
import math
import os
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import criterion
from cubespace import cli
from cubespace import discrete as D
from cubespace import extraction as X
from cubespace import metrics as M
from cubespace import networks as N
from cubespace import strips as S
from cubespace import validate as V
from cubespace.domains import DomainSpec, bfs_distances, make_domain
from cubespace.training import load_checkpoint, save_checkpoint, train
from test_networks import fd_relative_error
from test_strips import EXAMPLE, hanoi_actions, hanoi_state, lightsout_actions
from test_validate import SPECS, mutate, random_walk

LO3 = DomainSpec("lights_out", n=3, cell=3)
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


# -- 1. closed-form oracles --------------------------------------------------------------------

def test_c1_closed_form_oracles():
    with criterion(1, "closed-form oracles") as d:
        t = time.perf_counter()
        kl = float(D.kl_bernoulli(torch.tensor(0.9, dtype=torch.float64), 0.1))
        klc = float(D.kl_categorical_uniform(torch.eye(4, dtype=torch.float64)[1]))
        tau = D.anneal_tau(D.AnnealSchedule(5.0, 0.5, 1000), 500)
        d.update(kl_bernoulli=kl, kl_categorical=klc, tau_500=tau, seconds=time.perf_counter() - t)
        assert abs(kl - 1.75778) <= 1e-4
        assert abs(klc - math.log(4)) <= 1e-6
        assert abs(tau - 1.58114) <= 1e-5
        assert d["seconds"] < 1.0


# -- 2. sampling fidelity ---------------------------------------------------------------------

def test_c2_sampling_fidelity():
    with criterion(2, "sampling fidelity at tau=0.05") as d:
        t = time.perf_counter()
        n = 100_000
        worst = 0.0
        for i, logit in enumerate((-2.0, 0.0, 2.0)):
            s = D.binary_concrete_sample(torch.full((n,), logit, dtype=torch.float64), 0.05, D.make_generator(i))
            p = 1 / (1 + math.exp(-logit))
            z = abs(float(s.round().mean()) - p) / math.sqrt(p * (1 - p) / n)
            worst = max(worst, z)
        logits = torch.tensor([1.0, 0.0, -1.0, 0.5], dtype=torch.float64)
        g = D.gumbel_softmax_sample(logits.expand(n, 4), 0.05, D.make_generator(7))
        freq = torch.bincount(g.argmax(-1), minlength=4).double() / n
        p = torch.softmax(logits, -1)
        worst = max(worst, float(((freq - p).abs() / torch.sqrt(p * (1 - p) / n)).max()))
        d.update(max_sigma=worst, seconds=time.perf_counter() - t)
        assert worst <= 3.0
        assert d["seconds"] < 30


# -- 3. gradient checks -----------------------------------------------------------------------

def _gradient_cases():
    f64 = dict(dtype=torch.float64)
    torch.manual_seed(0)
    enc = N.Encoder((6, 6, 1), 4, channels=3, kernel=3).double().eval()
    dec = N.Decoder((6, 6, 1), 4, channels=3, kernel=3).double().eval()
    act = N.ActionNet(4, 5, hidden=7).double().eval()
    prior = N.ActionPrior(4, 5).double()
    btl = N.BackToLogit(4, 3).double()
    btl_eval = N.BackToLogit(4, 3).double().eval()
    l1, w3 = torch.randn(3, 4, **f64), torch.randn(5, 4, **f64)
    a = torch.softmax(torch.randn(5, 3, **f64), -1)
    z5 = torch.rand(5, 4, **f64)
    q, p = torch.rand(6, **f64) * 0.9 + 0.05, torch.rand(6, **f64) * 0.9 + 0.05
    c = torch.softmax(torch.randn(3, 5, **f64), -1)
    y = torch.randn(5, **f64)
    wg = torch.randn(2, 4, **f64)
    return {
        "encoder": (lambda v: enc(v).sum(), torch.randn(2, 6, 6, 1, **f64)),
        "decoder": (lambda v: (dec(v) ** 2).sum(), torch.rand(2, 4, **f64)),
        "action_head": (lambda v: torch.log_softmax(act(v, l1), -1)[:, 0].sum(), torch.randn(3, 4, **f64)),
        "action_prior": (lambda v: (prior(v) ** 2).sum(), torch.rand(3, 4, **f64)),
        "btl_state_train": (lambda v: (btl(v, a) * w3).sum(), torch.rand(5, 4, **f64)),
        "btl_action_train": (lambda v: (btl(z5, v) * w3).sum(), a),
        "btl_state_eval": (lambda v: (btl_eval(v, a) * w3).sum(), torch.rand(5, 4, **f64)),
        "binary_concrete": (lambda v: (D.binary_concrete_sample(v, 0.7, D.make_generator(0)) ** 2).sum(),
                            torch.randn(6, **f64)),
        "gumbel_softmax": (lambda v: (D.gumbel_softmax_sample(v, 0.7, D.make_generator(0)) * wg).sum(),
                           torch.randn(2, 4, **f64)),
        "kl_bernoulli": (lambda v: D.kl_bernoulli(v, 0.1).sum(), q),
        "kl_bernoulli_pair": (lambda v: D.kl_bernoulli_pair(v, p), q),
        "kl_categorical": (lambda v: D.kl_categorical(torch.softmax(v, -1), c).sum(), torch.randn(3, 5, **f64)),
        "kl_categorical_uniform": (lambda v: D.kl_categorical_uniform(torch.softmax(v, -1)).sum(),
                                   torch.randn(3, 5, **f64)),
        "gaussian_nll": (lambda v: D.gaussian_nll(y, v, 0.1), torch.randn(5, **f64)),
    }


def test_c3_gradient_checks():
    with criterion(3, "finite-difference gradient checks") as d:
        t = time.perf_counter()
        errors = {name: fd_relative_error(f, x) for name, (f, x) in _gradient_cases().items()}
        worst = max(errors, key=errors.get)
        d.update(ops=len(errors), worst=worst, rel_error=errors[worst], seconds=time.perf_counter() - t)
        assert errors[worst] < 1e-3, errors
        assert d["seconds"] < 60


# -- 4. STRIPS oracles ------------------------------------------------------------------------

def test_c4_strips_oracles():
    with criterion(4, "blind A* equals BFS; example round trip") as d:
        t = time.perf_counter()
        lo_acts, rng = lightsout_actions(), random.Random(0)
        matched = 0
        for _ in range(50):
            init = np.array([rng.randint(0, 1) for _ in range(9)])
            goal = np.array([rng.randint(0, 1) for _ in range(9)])
            gs = S.from_bits(goal)
            r = S.astar(S.PlanningProblem(9, lo_acts, S.from_bits(init), S.props(gs),
                                          frozenset(range(9)) - S.props(gs)), "blind")
            matched += r.found and len(r.plan) == bfs_distances(LO3, init)[tuple(goal)]
        hspec = DomainSpec("hanoi", disks=3, towers=3)
        hdom, h_acts, nrng = make_domain(hspec), hanoi_actions(), np.random.default_rng(0)
        for _ in range(50):
            init, goal = hdom.random_state(nrng), hdom.random_state(nrng)
            gs = hanoi_state(goal)
            r = S.astar(S.PlanningProblem(9, h_acts, hanoi_state(init), S.props(gs),
                                          frozenset(range(9)) - S.props(gs)), "blind")
            matched += r.found and len(r.plan) == bfs_distances(hspec, init)[tuple(goal)]
        domain = S.parse_domain(S.emit_domain(S.Domain("latent", 4, [EXAMPLE])))
        trace = S.simulate(S.read_plan(S.write_plan([EXAMPLE])), S.from_string("0011"), domain.actions)
        d.update(matched=f"{matched}/100", example=S.to_string(trace[-1], 4), seconds=time.perf_counter() - t)
        assert matched == 100
        assert domain.actions == (EXAMPLE,) and trace[-1] == S.from_string("0101")
        assert d["seconds"] < 60


# -- 6. XOR compilation -----------------------------------------------------------------------

def _random_action(rng, F=10):
    bits = rng.permutation(F)
    k = int(rng.integers(0, 5))
    xe = set(bits[:k].tolist())
    xp = set(bits[k - 1:k + 1].tolist()) if k and rng.random() < 0.5 else set()
    rest = bits[k + 1:]
    roles = rng.integers(0, 5, len(rest))
    pick = lambda r: {int(b) for b, x in zip(rest, roles) if x == r}  # noqa: E731
    pos, neg, add, dele = pick(0), pick(1), pick(2) - pick(0), pick(3)
    # a precondition may also sit on an xor bit; that variant gets dropped
    if xe and rng.random() < 0.3:
        pos |= {next(iter(xe))}
    return X.ExtractedAction(int(rng.integers(0, 50)), add, dele, pos, neg, frozenset(), xe, xp - pos - neg)


def test_c6_xor_compilation():
    with criterion(6, "xor compilation counts and well-formedness") as d:
        five = len(X.compile_xor([X.ExtractedAction(0, xor_effect={0, 1, 2, 3, 4})]))
        plain = [X.ExtractedAction(i, add={7}) for i in range(5, 10)]
        one = [X.ExtractedAction(i, xor_effect={i}) for i in range(5)]
        plus = len(X.compile_xor(one + plain)) - len(one + plain)
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(300):
            acts = list({a.name: a for a in (_random_action(rng) for _ in range(4))}.values())
            out = X.compile_xor(acts)
            expected = sum(2 ** len(a.xor_bits) - sum(
                1 for vals in np.ndindex(*(2,) * len(a.xor_bits))
                if any((v == 0 and j in a.pos) or (v == 1 and j in a.neg)
                       for j, v in zip(sorted(a.xor_bits), vals))) for a in acts)
            assert len(out) == expected
            assert len({v.name for v in out}) == len(out)
            for v in out:
                g = v.ground()  # raises when malformed
                assert not (g.pos & g.neg) and not (g.add & g.delete)
                assert not (g.pos & g.add) and not (g.neg & g.delete)
            for a in acts:
                for v in X.compile_xor([a]):
                    g = v.ground()
                    s = S.mask(g.pos)
                    t = S.progress(s, g)
                    for j in a.xor_bits:
                        assert bool(s >> j & 1) != bool(t >> j & 1)
            checked += len(out)
        d.update(five_bits=five, added=plus, fuzzed_variants=checked)
        assert five == 32 and plus == 5


# -- 7. validators ----------------------------------------------------------------------------

def test_c7_validator_soundness_and_sensitivity():
    with criterion(7, "validators accept legal walks and reject single mutations") as d:
        t = time.perf_counter()
        accepted = rejected = total = 0
        for name, spec in SPECS.items():
            rng = np.random.default_rng(0)
            for _ in range(200):
                configs, images = random_walk(spec, int(rng.integers(2, 6)), rng)
                accepted += V.validate_trace(images, spec).valid
                rejected += not V.validate_trace(mutate(spec, configs, images, rng), spec).valid
                total += 1
        d.update(accepted=f"{accepted}/{total}", rejected=f"{rejected}/{total}", seconds=time.perf_counter() - t)
        assert accepted == total and rejected == total
        assert d["seconds"] < 120


# -- desk trainings shared by criteria 5, 8, 9 and 10 ---------------------------------------------

def _cache_dir(tmp_path_factory) -> Path:
    env = os.environ.get("CUBESPACE_ACCEPTANCE_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    """The CLI pipeline on the default (desk) config: train, export, instances, plan, validate."""
    cfg = cli.ExperimentConfig()
    root = _cache_dir(tmp_path_factory) / f"desk-{cfg.digest()}"
    stages = cli.PIPELINE
    if (root / "model" / "checkpoint.pt").exists():  # cached checkpoint; redo everything downstream
        stages = [s for s in stages if s not in ("generate-data", "train")]
    exp = cli.Experiment.open(root)
    t = time.perf_counter()
    for stage in stages:
        if stage == "validate":
            cli.cmd_validate(exp, images=False)
        else:
            cli.COMMANDS[stage](exp)
    return exp, time.perf_counter() - t


@pytest.fixture(scope="session")
def epsilon_pairs(tmp_path_factory, desk_experiment):
    """state_variance of paired eps=0.1 / eps=0.5 desk trainings; the seed-0 eps=0.1 run is the desk model."""
    exp, _ = desk_experiment
    ds = cli._load_dataset(exp)
    base = exp.config.train_config
    x0, x1 = ds.split("train")
    held = np.concatenate([ds.split("val")[0], ds.split("test")[0]])
    cache = _cache_dir(tmp_path_factory)
    out = {}
    for seed in SEEDS:
        for eps in (0.1, 0.5):
            cfg = replace(base, seed=seed, latent=replace(base.latent, epsilon=eps))
            if cfg == base:
                model, _ = load_checkpoint(exp.checkpoint)
            else:
                key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
                path = cache / f"pair-{key}.pt"
                if path.exists():
                    model, _ = load_checkpoint(path)
                else:
                    model, _ = train("ama4plus", x0, x1, cfg)
                    save_checkpoint(model, path, cfg, ds.normalizer)
            out[seed, eps] = (model, M.state_variance(model, held, sigma=0.3, seed=seed))
    return out


def _all_checkpoints(desk_experiment, epsilon_pairs):
    exp, _ = desk_experiment
    models = {"desk": load_checkpoint(exp.checkpoint)[0]}
    models.update({f"s{s}-eps{e}": m for (s, e), (m, _) in epsilon_pairs.items() if (s, e) != (0, 0.1)})
    return models


# -- 8. end-to-end desk run ---------------------------------------------------------------------

def test_c8_end_to_end_desk_run(desk_experiment):
    with criterion(8, "desk AMA4+ run on 3x3 LightsOut, 20 instances") as d:
        exp, seconds = desk_experiment
        rows = cli._read_tsv(exp.root / "validate" / "verdicts.tsv")
        found = sum(r["found"] == "True" for r in rows)
        valid = sum(r["valid"] == "True" for r in rows)
        optimal = sum(r["optimal"] == "True" for r in rows)
        length_g = [r for r in rows if r["valid"] == "True" and r["plan_length"] == r["g"]]
        d.update(found=f"{found}/{len(rows)}", valid=valid, optimal=optimal, minutes=seconds / 60)
        assert len(rows) == 20 and (exp.root / "pddl" / "domain.pddl").exists()
        assert found >= valid >= optimal
        assert all(r["optimal"] == "True" for r in length_g)
        assert found >= 15, f"found {found} < 15"
        assert valid >= 12, f"valid {valid} < 12"


# -- 9. directional stability ---------------------------------------------------------------------

def test_c9_epsilon_stability(epsilon_pairs):
    with criterion(9, "state variance eps=0.1 <= eps=0.5 over 3 seed pairs") as d:
        low = [epsilon_pairs[s, 0.1][1] for s in SEEDS]
        high = [epsilon_pairs[s, 0.5][1] for s in SEEDS]
        d.update(var_eps01=float(np.mean(low)), var_eps05=float(np.mean(high)),
                 pairs_in_order=sum(a <= b for a, b in zip(low, high)))
        assert np.mean(low) <= np.mean(high), f"reversed: {low} vs {high}"


# -- 5. Theorem 1 and effect fidelity on every checkpoint ------------------------------------------

def _btl_behaviour(btl):
    """Per (action, bit): output on input 0 and on input 1, exhaustively."""
    btl.eval()
    with torch.no_grad():
        a = torch.eye(btl.A)
        out0 = btl(torch.zeros(btl.A, btl.F), a) >= 0
        out1 = btl(torch.ones(btl.A, btl.F), a) >= 0
    return out0.numpy(), out1.numpy()


def test_c5_theorem_one_and_effect_fidelity(desk_experiment, epsilon_pairs):
    with criterion(5, "set/clear/copy on monotone BTL bits; effect fidelity 100%") as d:
        exp, _ = desk_experiment
        ds = cli._load_dataset(exp)
        x0, x1 = ds.split("train")
        violations, flagged, rates = 0, 0, []
        for name, model in _all_checkpoints(desk_experiment, epsilon_pairs).items():
            bad = N.check_monotonicity(model.apply_btl, model.regress_btl)
            flagged += len(bad)
            for tag, btl in (("apply", model.apply_btl), ("regress", model.regress_btl)):
                out0, out1 = _btl_behaviour(btl)
                mono = np.array([(f, tag) not in bad for f in range(btl.F)])
                # the only excluded pattern is 1 -> 0 (a flip), which is neither set, clear nor copy
                violations += int((out0 & ~out1)[:, mono].sum())
            z0, z1, labels = X.encode_pairs(model, x0, x1)
            actions, _ = X.extract_actions(model, z0, z1, labels)
            eff = {a.label: (S.mask(a.add), S.mask(a.delete)) for a in actions if not a.xor_effect}
            with torch.no_grad():
                a = torch.nn.functional.one_hot(torch.as_tensor(labels), model.latent.A).float()
                z2 = (model.apply_btl(torch.as_tensor(z0, dtype=torch.float32), a) >= 0).numpy()
            hits = [((S.from_bits(p) & ~eff[int(lab)][1]) | eff[int(lab)][0]) == S.from_bits(q)
                    for p, q, lab in zip(z0, z2, labels) if int(lab) in eff]
            rates.append(float(np.mean(hits)) if hits else 1.0)
        d.update(checkpoints=len(rates), theorem_violations=violations, negative_slope_bits=flagged,
                 min_effect_rate=min(rates))
        assert violations == 0
        assert min(rates) == 1.0


# -- 10. metrics invariants --------------------------------------------------------------------------

def test_c10_metrics_invariants(desk_experiment, epsilon_pairs):
    with criterion(10, "bit partition sums to F; beta=1 ELBO bound") as d:
        exp, _ = desk_experiment
        x0, x1 = cli._load_dataset(exp).split("test")
        n = gaps = 0
        for name, model in _all_checkpoints(desk_experiment, epsilon_pairs).items():
            r = M.evaluate(model, x0, x1)
            assert r.effective_bits + r.constant_zero_bits + r.constant_one_bits == model.latent.F, name
            assert r.neg_elbo_beta1 <= r.objective, name
            gaps += r.objective - r.neg_elbo_beta1 >= 0
            n += 1
        d.update(checkpoints=n, bound_holds=f"{gaps}/{n}")
