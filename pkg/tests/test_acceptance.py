"""Acceptance gate: twelve end-to-end checks at stated tolerances.

Each test prints exactly one "criterion N: PASS/FAIL - detail" line with the
measured quantities, then asserts. Data-dependent margins (forgetting,
mitigation, adaptivity benefit) run on frozen streams and seeds, and the
engine is single-worker deterministic, so the measured numbers are stable
across reruns.
"""

import itertools
import json
import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from adacl.cli import _bench_random, _bench_tpe
from adacl.errors import ConfigurationError
from adacl.estimator import ContinualClassifier
from adacl.experiment import ExperimentConfig, constancy_schedules, run_experiment
from adacl.hpo import HyperConfig, TrialLedger, sh_prune_decision, sh_rungs
from adacl.memory import herding_select, memory_total
from adacl.metrics import acc, bwt
from adacl.network import init_model, expand_head
from adacl.strategies import LossSpec, estimate_fisher, snapshot_teacher
from adacl.stream import StreamSpec, generate_stream
from adacl.training import grad_check


def judge(criterion: int, ok: bool, detail: str) -> None:
    """Print the criterion verdict line, then enforce it."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# ----------------------------------------------------------------------
# frozen streams and shared runs

FORGETTING_STREAM = {
    "kind": "gaussian-blobs",
    "num_tasks": 5,
    "classes_per_task": 2,
    "samples_per_class": 60,
    "feature_dim": 16,
    "class_separation": 6.0,
    "noise": 1.0,
    "seed": 20,
}

FORGETTING_COMMON = dict(
    mode="fixed",
    stream=FORGETTING_STREAM,
    eta=0.02,
    epochs=40,
    validation_per_class=10,
    test_per_class=10,
    seeds=(0, 1, 2),
    hidden_sizes=(32,),
    batch_size=32,
)


def forgetting_config(**overrides) -> ExperimentConfig:
    base = dict(strategy="none", **FORGETTING_COMMON)
    base.update(overrides)
    return ExperimentConfig(**base)


@lru_cache(maxsize=None)
def forgetting_runs():
    """The three mitigation-study aggregates, computed once per session."""
    none = run_experiment(forgetting_config()).aggregates()
    ewc = run_experiment(
        forgetting_config(strategy="ewc", reg_weight=10000.0)
    ).aggregates()
    replay = run_experiment(forgetting_config(memory_per_class=10)).aggregates()
    return none, ewc, replay


def write_heterogeneous_stream(path: Path) -> Path:
    """Six tasks alternating easy and hard blob geometry, disjoint classes."""
    dim = 12
    easy = generate_stream(StreamSpec(
        kind="gaussian-blobs", num_tasks=3, classes_per_task=2,
        samples_per_class=50, feature_dim=dim, class_separation=9.0,
        noise=1.0, seed=31,
    ))
    hard = generate_stream(StreamSpec(
        kind="gaussian-blobs", num_tasks=3, classes_per_task=2,
        samples_per_class=50, feature_dim=dim, class_separation=4.0,
        noise=1.0, seed=32,
    ))
    lines = ["task_id,label," + ",".join(f"f_{i + 1}" for i in range(dim))]
    order = [
        (easy[0], 0), (hard[0], 6), (easy[1], 0),
        (hard[1], 6), (easy[2], 0), (hard[2], 6),
    ]
    for t, (task, offset) in enumerate(order, start=1):
        for row, label in zip(task.features, task.labels):
            lines.append(
                f"{t},{int(label) + offset},"
                + ",".join(repr(float(v)) for v in row)
            )
    path.write_text("\n".join(lines) + "\n")
    return path


SMALL_STREAM = {
    "kind": "gaussian-blobs",
    "num_tasks": 3,
    "classes_per_task": 2,
    "samples_per_class": 36,
    "feature_dim": 6,
    "class_separation": 5.0,
    "noise": 1.0,
    "seed": 11,
}


class TestAcceptance:
    def test_criterion_01_gradient_correctness(self):
        """100 random architecture/strategy/batch configs pass grad_check."""
        rng = np.random.default_rng(1001)
        strategies = itertools.cycle(["none", "ewc", "lwf", "icarl", "wa"])
        worst = 0.0
        for _ in range(100):
            strategy = next(strategies)
            d = int(rng.integers(2, 6))
            depth = int(rng.integers(0, 3))
            hidden = [int(rng.integers(3, 9)) for _ in range(depth)]
            old_c = int(rng.integers(2, 4))
            new_c = int(rng.integers(1, 3))
            teacher = init_model(
                [d, *hidden, old_c], "tanh", seed=int(rng.integers(1e6))
            )
            student = expand_head(
                teacher, list(range(old_c, old_c + new_c)),
                seed=int(rng.integers(1e6)),
            )
            n = int(rng.integers(1, 13))
            X = rng.normal(size=(n, d))
            y = rng.integers(0, old_c + new_c, size=n)
            if strategy == "none":
                spec = LossSpec()
            else:
                lam = float(rng.uniform(0.1, 5.0))
                fisher = (
                    estimate_fisher(
                        teacher, X, np.clip(y, 0, old_c - 1)
                    )
                    if strategy == "ewc"
                    else None
                )
                spec = LossSpec(
                    strategy, lam, snapshot_teacher(teacher, fisher),
                    temperature=float(rng.uniform(1.0, 4.0)),
                )
            err = grad_check(student, X, y, spec, n_coords=40, seed=0)
            worst = max(worst, err)
        judge(1, worst <= 1e-4, f"max relative gradient error {worst:.2e} <= 1e-4")

    def test_criterion_02_metric_oracles(self):
        """Hand metric values exact; 200 random matrices match re-summation."""
        matrix = [[100.0], [90.0, 100.0], [80.0, 90.0, 100.0]]
        hand_ok = acc(matrix) == 90.0 and bwt(matrix) == -15.0
        rng = np.random.default_rng(1002)
        worst = 0.0
        for _ in range(200):
            T = int(rng.integers(2, 9))
            m = [list(rng.uniform(0.0, 100.0, size=i + 1)) for i in range(T)]
            acc_ref = sum(m[-1]) / T
            bwt_ref = sum(m[-1][i] - m[i][i] for i in range(T - 1)) / (T - 1)
            worst = max(worst, abs(acc(m) - acc_ref), abs(bwt(m) - bwt_ref))
        judge(
            2, hand_ok and worst <= 1e-9,
            f"hand values exact, max random-matrix deviation {worst:.2e} <= 1e-9",
        )

    def test_criterion_03_constancy_schedules(self):
        """Both per-task schedules match their closed forms exactly."""
        lam_ok = all(
            constancy_schedules("lambda", t, c=c) == t / (t + 1)
            for t in range(1, 13)
            for c in (1, 2, 5, 10, 50)
        )
        m_ok = all(
            constancy_schedules("m", t, total=M) == M // t
            for t in range(1, 13)
            for M in (0, 7, 45, 360, 4500)
        )
        anchors = (
            constancy_schedules("lambda", 1, c=10) == 0.5
            and constancy_schedules("lambda", 9, c=10) == 0.9
            and constancy_schedules("m", 3, total=4500) == 1500
        )
        judge(3, lam_ok and m_ok and anchors, "lambda and memory grids exact")

    def test_criterion_04_tpe_beats_random(self):
        """Best-of-50 suggestion beats random search in >= 14 of 20 pairs."""
        wins = 0
        margins = []
        for rep in range(20):
            tpe = _bench_tpe(0, rep, 50)
            rand = _bench_random(0, rep, 50)
            wins += tpe <= rand
            margins.append(rand - tpe)
        judge(
            4, wins >= 14,
            f"sampler wins {wins}/20 paired seeds "
            f"(mean margin {np.mean(margins):+.4f})",
        )

    def test_criterion_05_successive_halving(self):
        """Rung grid, a 9-trial scripted pruning replay, and budget bound."""
        rungs_ok = sh_rungs(1, 3, 27) == [1, 3, 9, 27]
        # per trial: loss at rungs 1/3/9 (None = never reaches that rung),
        # hand-enumerated expected fate under the keep-best-third rule
        script = [
            ((5.0, 4.0, 3.0), "completed", None),
            ((6.0, None, None), "pruned", 1),
            ((4.0, 5.0, None), "pruned", 3),
            ((3.0, 3.5, 4.0), "pruned", 9),
            ((4.5, None, None), "pruned", 1),
            ((2.0, 2.5, 2.8), "completed", None),
            ((3.2, 5.0, None), "pruned", 3),
            ((1.0, 1.5, 3.1), "pruned", 9),
            ((7.0, None, None), "pruned", 1),
        ]
        finals = {0: 2.9, 5: 2.6}
        ledger = TrialLedger(task=1)
        consumed = 0
        fates_ok = True
        for trial_id, (losses, want_status, want_prune_epoch) in enumerate(script):
            record = ledger.new_trial(
                HyperConfig(eta=0.1, lam=1.0, m=0), seed=trial_id
            )
            pruned_at = None
            for epoch, loss in zip((1, 3, 9), losses):
                if loss is None:
                    break
                ledger.record_rung(record, epoch, loss)
                if sh_prune_decision(ledger, record, epoch, loss, 3):
                    ledger.record_result(record, "pruned")
                    pruned_at = epoch
                    break
            if pruned_at is None:
                ledger.record_result(record, "completed", final=finals[trial_id])
                consumed += 27
            else:
                consumed += pruned_at
            got_status = record.status
            fates_ok &= got_status == want_status and pruned_at == want_prune_epoch
        best_ok = ledger.best_trial().trial_id == 5
        judge(
            5, rungs_ok and fates_ok and best_ok and consumed < 9 * 27,
            f"rungs [1, 3, 9, 27], scripted fates match, "
            f"{consumed} epochs consumed < 243",
        )

    def test_criterion_06_herding_oracle(self):
        """Greedy herding equals an exhaustive per-step scan on 50 sets."""
        rng = np.random.default_rng(1006)
        agree = True
        for _ in range(50):
            n = int(rng.integers(2, 13))
            d = int(rng.integers(1, 5))
            k = int(rng.integers(1, min(n, 12) + 1))
            feats = rng.normal(size=(n, d))
            target = feats.mean(axis=0)
            chosen, running = [], np.zeros(d)
            for step in range(1, k + 1):
                best_i, best_dist = None, math.inf
                for i in range(n):
                    if i in chosen:
                        continue
                    dist = float(
                        np.linalg.norm((running + feats[i]) / step - target)
                    )
                    if dist < best_dist:
                        best_i, best_dist = i, dist
                chosen.append(best_i)
                running += feats[best_i]
            agree &= list(herding_select(feats, k)) == chosen
        judge(6, agree, "herding picks match the exhaustive scan on 50 sets")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_criterion_07_forgetting_and_mitigation(self):
        """Plain training forgets; anchoring and replay recover margins."""
        none, ewc, replay = forgetting_runs()
        bwt_none = none["bwt"]["mean"]
        d_bwt = ewc["bwt"]["mean"] - bwt_none
        d_acc = replay["acc"]["mean"] - none["acc"]["mean"]
        judge(
            7,
            bwt_none <= -20.0 and d_bwt >= 8.0 and d_acc >= 8.0,
            f"none BWT {bwt_none:.2f} <= -20; weight anchoring "
            f"BWT {d_bwt:+.2f} >= +8; replay ACC {d_acc:+.2f} >= +8",
        )

    def test_criterion_08_adaptivity_benefit(self, tmp_path):
        """Per-task tuning meets or beats the fixed schedule on mixed tasks."""
        stream_file = str(write_heterogeneous_stream(tmp_path / "hetero.csv"))
        common = dict(
            strategy="lwf", stream_file=stream_file, eta=0.05, epochs=30,
            validation_per_class=10, test_per_class=10, seeds=(0, 1, 2),
            hidden_sizes=(32,), batch_size=32,
        )
        fixed = run_experiment(
            ExperimentConfig(mode="fixed", lambda_schedule=True, **common)
        ).aggregates()
        ada = run_experiment(
            ExperimentConfig(
                mode="adaptive", tune_eta=True, tune_lambda=True,
                configs=25, **common,
            )
        ).aggregates()
        margin = ada["acc"]["mean"] - fixed["acc"]["mean"]
        judge(
            8, margin >= 0.0,
            f"tuned ACC {ada['acc']['mean']:.2f} vs schedule "
            f"{fixed['acc']['mean']:.2f}, margin {margin:+.2f} points",
        )

    def test_criterion_09_memory_accounting(self):
        """Fixed replay totals are exact; tuned replay respects the cap."""
        big = run_experiment(ExperimentConfig(
            strategy="none", mode="fixed", memory_per_class=45,
            stream={
                "kind": "gaussian-blobs", "num_tasks": 10,
                "classes_per_task": 10, "samples_per_class": 70,
                "feature_dim": 8, "class_separation": 6.0,
                "noise": 1.0, "seed": 40,
            },
            eta=0.05, epochs=3, validation_per_class=10, test_per_class=10,
            seeds=(0,), hidden_sizes=(16,), batch_size=64,
        ))
        totals = [o.memory_total for o in big.per_seed[0].outcomes]
        fixed_ok = totals == [450 * t for t in range(1, 11)]

        est = ContinualClassifier(
            strategy="none", tune=("m",), n_trials=6, m_space=(1, 20),
            epochs=5, eta=0.05, hidden_sizes=(12,), batch_size=16,
            validation_per_class=5, seed=0,
        )
        for task in generate_stream(StreamSpec(**SMALL_STREAM)):
            est.partial_fit(task.features, task.labels)
        counts = [len(rows) for rows in est.memory_.entries.values()]
        cap_ok = all(c <= 50 for c in counts)
        expected = sum(est.chosen_[t].m * 2 for t in (1, 2, 3))
        tuned_ok = memory_total(est.memory_) == expected
        judge(
            9, fixed_ok and cap_ok and tuned_ok,
            f"fixed replay total {totals[-1]} == 4500; tuned replay "
            f"{memory_total(est.memory_)} == sum(m*_t x c) with counts <= 50",
        )

    def test_criterion_10_byte_determinism(self, tmp_path):
        """Two single-worker runs of one config persist identical bytes."""
        config = ExperimentConfig(
            strategy="icarl", mode="adaptive", tune_eta=True,
            tune_lambda=True, tune_m=True, configs=4, epochs=5,
            stream=SMALL_STREAM, m_space=(1, 12),
            validation_per_class=5, test_per_class=5, seeds=(0,),
            hidden_sizes=(12,), batch_size=16,
        )
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        run_experiment(config, out_dir=dir_a)
        run_experiment(config, out_dir=dir_b)
        same = {
            rel: (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes()
            for rel in (
                "results.json", "seed_0/trials.jsonl", "seed_0/memory.json",
            )
        }
        judge(
            10, all(same.values()),
            "results.json, trials.jsonl, memory.json byte-identical across reruns",
        )

    def test_criterion_11_ablation_plumbing(self, tmp_path):
        """All 7 tuned-dimension subsets run; untuned values never move."""
        subsets = [
            ("eta",), ("lambda",), ("m",),
            ("eta", "lambda"), ("eta", "m"), ("lambda", "m"),
            ("eta", "lambda", "m"),
        ]
        fixed_values = {"eta": 0.05, "lambda": 3.0, "m": 4}
        constant_ok = True
        for i, subset in enumerate(subsets):
            out = tmp_path / f"subset_{i}"
            run_experiment(ExperimentConfig(
                strategy="lwf", mode="adaptive",
                tune_eta="eta" in subset,
                tune_lambda="lambda" in subset,
                tune_m="m" in subset,
                configs=5, epochs=5, stream=SMALL_STREAM,
                eta=0.05, reg_weight=3.0, memory_per_class=4,
                m_space=(1, 12), validation_per_class=5, test_per_class=5,
                seeds=(0,), hidden_sizes=(12,), batch_size=16,
            ), out_dir=out)
            lines = (out / "seed_0" / "trials.jsonl").read_text().splitlines()
            for line in lines:
                entry = json.loads(line)
                for dim in ("eta", "lambda", "m"):
                    if dim not in subset:
                        constant_ok &= entry["config"][dim] == fixed_values[dim]
        judge(
            11, constant_ok,
            "7/7 subsets completed; untuned dimensions constant in every trial",
        )

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_criterion_12_selector_ablation(self, tmp_path):
        """Both exemplar selectors finish the mitigation stream on budget."""
        none, ewc, replay_herding = forgetting_runs()
        out = tmp_path / "random_selector"
        random_run = run_experiment(
            forgetting_config(memory_per_class=10, selector="random"),
            out_dir=out,
        )
        manifest = json.loads((out / "seed_0" / "memory.json").read_text())
        budget_ok = (
            all(e["count"] == 10 for e in manifest["entries"])
            and manifest["total"] == 100
        )
        diff = abs(
            replay_herding["acc"]["mean"]
            - random_run.aggregates()["acc"]["mean"]
        )
        judge(
            12, budget_ok and math.isfinite(diff),
            f"both selectors completed within budget; |ACC difference| "
            f"= {diff:.2f} points",
        )
