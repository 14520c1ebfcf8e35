"""Acceptance criteria, one PASS/FAIL line each (also repeated in the terminal summary)."""
import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from frozenadv.attack import KINDS, AttackConfig, bim_attack, gaussian_control
from frozenadv.autodiff import OPS
from frozenadv.cli import main as cli_main
from frozenadv.harness import ExperimentConfig, run_experiment
from frozenadv.taskhead import TASKS
from gradcases import check_encoder, check_op

RESULTS: list[str] = []
CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ATTACKED = ("gaussian", "zero_knowledge", "limited_knowledge")


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def damage(task, clean, value):
    """Degradation in metric points; PRA is an error rate, the rest are accuracies."""
    return value - clean if task == "PRA" else clean - value


@pytest.fixture(scope="module")
def full_run(pipeline):
    t0 = time.perf_counter()
    rep = run_experiment(pipeline["cfg"], dataset=pipeline["dataset"], models=pipeline["models"],
                         heads=pipeline["heads"])
    return rep, time.perf_counter() - t0


def _cells(report, target):
    return {(s, t): report.cell(s, t, target) for s in KINDS for t in TASKS}


def test_1_gradient_oracle(pipeline):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_op = max(check_op(name, rng) for name in sorted(OPS) for _ in range(20))
    worst_enc = max(check_encoder(pipeline["models"][a], rng) for a in ("a", "b") for _ in range(20))
    dt = time.perf_counter() - t0
    verdict(1, worst_op < 1e-4 and worst_enc < 1e-4 and dt < 120,
            f"max rel err ops {worst_op:.1e}, encoders {worst_enc:.1e} ({len(OPS)} ops x 20, 2 encoders x 20), "
            f"{dt:.0f}s")


def test_2_budget_exactness(pipeline):
    X = pipeline["dataset"].waves("test").astype(np.float64)
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    n, worst, inside = 0, -np.inf, True
    for b in range(40):
        eps = float(rng.choice([0.0, rng.uniform(0, 0.2), 1.0]) if b % 8 == 0 else rng.uniform(0, 0.2))
        alpha = None if rng.random() < 0.3 or eps == 0 else float(rng.uniform(0, 1) * eps) or None
        cfg = AttackConfig(epsilon=eps, alpha=alpha, n_iters=int(rng.integers(0, 11)), seed=b)
        arch = "ab"[b % 2]
        x = X[rng.choice(len(X), 25, replace=False)]
        for xi, r in zip(x, bim_attack(pipeline["models"][arch], x, cfg)):
            adv = r.adversarial.samples
            worst = max(worst, float(np.max(np.abs(adv - xi) - eps)))
            inside &= bool(np.all((adv >= -1) & (adv <= 1)))
            n += 1
    dt = time.perf_counter() - t0
    verdict(2, n == 1000 and worst <= 0 and inside and dt < 120,
            f"{n} attacks, max(|x~-x| - eps) = {worst:.2e}, in range: {inside}, {dt:.0f}s")


def test_3_zero_budget_identity(pipeline):
    X = pipeline["dataset"].waves("test")[:10].astype(np.float64)
    ok, notes = True, []
    for over in (dict(epsilon=0.0), dict(n_iters=0)):
        same = all(r.adversarial.samples.tobytes() == x.tobytes()
                   for a in ("a", "b") for x, r in zip(X, bim_attack(pipeline["models"][a], X, AttackConfig(**over))))
        cfg = dataclasses.replace(pipeline["cfg"], n_reps=1, scenarios=("clean", "limited_knowledge"), **over)
        rep = run_experiment(cfg, dataset=pipeline["dataset"], models=pipeline["models"], heads=pipeline["heads"])
        clean = {(r.task, r.target_arch): r.metric for r in rep.rows if r.scenario == "clean"}
        equal = all(r.metric == clean[r.task, r.target_arch] and r.nsr == 0 and r.edr == 0
                    for r in rep.rows if r.scenario == "limited_knowledge")
        ok &= same and equal
        notes.append(f"{over}: waves identical {same}, metrics equal {equal}")
    verdict(3, ok, "; ".join(notes))


def test_4_clean_headroom(pipeline, full_run):
    heads = pipeline["heads"]
    parts, ok = [], True
    for a in ("a", "b"):
        m = {t: heads[a].clean[t]["test"] for t in TASKS}
        ok &= all(m[t] >= 90 for t in ("KS", "SID", "ASV")) and m["PRA"] <= 10
        parts.append(f"{a}: " + " ".join(f"{t} {m[t]:.1f}" for t in TASKS))
    total = pipeline["seconds"] + full_run[1]
    ok &= total < 900
    verdict(4, ok, "; ".join(parts) + f"; pipeline {total:.0f}s")


def test_5_degradation_ordering(full_run):
    report, _ = full_run
    parts, ok = [], True
    for a in ("a", "b"):
        c = _cells(report, a)
        ordered, big_drop = 0, 0
        for t in TASKS:
            d = [damage(t, c["clean", t]["metric_mean"], c[s, t]["metric_mean"]) for s in KINDS]
            ordered += all(x <= y for x, y in zip(d, d[1:]))
            big_drop += d[-1] >= 15
        ok &= ordered >= 3 and big_drop >= 2
        parts.append(f"{a}: ordering on {ordered}/4 tasks, limited drop >= 15 on {big_drop}/4")
    verdict(5, ok, "; ".join(parts))


def test_6_edr_ordering(full_run):
    report, _ = full_run
    parts, ok = [], True
    for a in ("a", "b"):
        e = {s: np.mean([r.edr for r in report.rows if r.scenario == s and r.target_arch == a]) for s in ATTACKED}
        ok &= e["limited_knowledge"] > e["zero_knowledge"] > e["gaussian"]
        ok &= e["limited_knowledge"] >= 2 * e["gaussian"]
        parts.append(f"{a}: limited {e['limited_knowledge']:.3f} > zero {e['zero_knowledge']:.3f} "
                     f"> gaussian {e['gaussian']:.3f}")
    verdict(6, ok, "; ".join(parts))


def test_7_edr_degradation_consistency(full_run):
    report, _ = full_run
    inversions = 0
    for a in ("a", "b"):
        c = _cells(report, a)
        for t in TASKS:
            for s1, s2 in itertools.combinations(ATTACKED, 2):
                de = c[s1, t]["edr_mean"] - c[s2, t]["edr_mean"]
                dd = (damage(t, c["clean", t]["metric_mean"], c[s1, t]["metric_mean"])
                      - damage(t, c["clean", t]["metric_mean"], c[s2, t]["metric_mean"]))
                inversions += de * dd < 0
    verdict(7, inversions <= 1, f"{inversions} pairwise inversion(s) over 2 targets x 4 tasks x 3 scenario pairs")


def test_8_gaussian_matching(pipeline):
    X = pipeline["dataset"].waves("test")[:100].astype(np.float64)
    res = bim_attack(pipeline["models"]["a"], X, pipeline["cfg"].attack_config())
    err = max(abs(gaussian_control(x, r.nsr, 7).nsr_preclamp - r.nsr) for x, r in zip(X, res))
    verdict(8, err <= 1e-9, f"max |NSR_gauss - NSR_attack| = {err:.1e} over 100 utterances")


def test_9_determinism(tmp_path):
    cfg = str(CONFIGS / "small.cfg")
    outs = []
    for i, threads in enumerate((1, 1, 8)):
        wd = tmp_path / f"run{i}"
        assert cli_main(["run-all", "--config", cfg, "--workdir", str(wd), "--threads", str(threads)]) == 0
        outs.append(((wd / "report.csv").read_bytes(), (wd / "report.json").read_bytes()))
    verdict(9, outs[0] == outs[1] == outs[2], "run-all twice with --threads 1 and once with --threads 8: "
            f"CSV identical {outs[0][0] == outs[1][0] == outs[2][0]}, JSON identical {outs[0][1] == outs[1][1] == outs[2][1]}")


def test_10_protocol(full_run, default_cfg):
    report, _ = full_run
    ok = default_cfg.n_reps == 3 and default_cfg.n_items == 100 and default_cfg.n_trials == 50
    agg = report.aggregate()
    std_ok = True
    for a in agg:
        reps = [r.metric for r in report.rows
                if (r.scenario, r.task, r.target_arch) == (a["scenario"], a["task"], a["target_arch"])]
        ok &= len(reps) == 3 and np.isclose(a["metric_std"], np.std(reps, ddof=1))
    nonzero = {s: sum(a["metric_std"] > 0 for a in agg if a["scenario"] == s) for s in ATTACKED}
    std_ok = all(nonzero.values())
    verdict(10, ok and std_ok, f"3 reps x 100 items, 50/50 trials, std ddof=1 recomputed; nonzero std cells "
            + ", ".join(f"{s} {n}/8" for s, n in nonzero.items()))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
