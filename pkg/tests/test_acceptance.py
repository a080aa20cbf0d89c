"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Heavy artifacts (the synthetic task and its trained model
variants) are session fixtures shared across criteria.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import time
import numpy as np
import pytest

from strm.cli import EXIT_OK, main as cli_main
from strm.diffcore import Tape, Tensor
from strm.enrichment import (fle_forward, init_fle_params, init_ple_params,
                             ple_forward)
from strm.episodes import (EpisodeSpec, SyntheticSpec, filter_labels,
                           generate_synthetic, sample_episode)
from strm.matching import (enumerate_tuples, init_qc_params, init_trm_params,
                           qc_similarity, trm_distance)
from strm.model import ModelConfig, forward_episode
from strm.training import (ABLATION_VARIANTS, TrainConfig, evaluate,
                           gradcheck_model, mean_pool_baseline, train)

from test_matching import qc_similarity_oracle, trm_distance_oracle

TRAIN_EPISODES = 2000
EVAL_EPISODES = 1000
EPISODE_SEED = 0
EVAL_SEED = 777
DATA_SEED = 1
MODEL_SEED = 0


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{criterion}: {detail}"


@pytest.fixture(scope="session")
def task():
    """The canonical desk-scale temporal task: one bank, 15 permuted classes,
    split 10 train / 5 test."""
    ds = generate_synthetic(SyntheticSpec(seed=DATA_SEED))
    return (filter_labels(ds, range(10)), filter_labels(ds, range(10, 15)))


@pytest.fixture(scope="session")
def trained_variants(task):
    """Every toggle variant trained with identical seeds and budget."""
    train_ds, test_ds = task
    spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=EPISODE_SEED)
    eval_spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=EVAL_SEED)
    tc = TrainConfig(episodes=TRAIN_EPISODES, learning_rate=0.1,
                     eval_every=TRAIN_EPISODES, eval_episodes=10)
    out = {}
    for name, use_ple, use_fle, use_qc in ABLATION_VARIANTS:
        cfg = ModelConfig(use_ple=use_ple, use_fle=use_fle, use_qc=use_qc,
                          seed=MODEL_SEED)
        t0 = time.monotonic()
        params, _ = train(train_ds, cfg, tc, spec, eval_dataset=test_ds)
        train_seconds = time.monotonic() - t0
        t0 = time.monotonic()
        rep = evaluate(test_ds, params, cfg, eval_spec, EVAL_EPISODES)
        eval_seconds = time.monotonic() - t0
        out[name] = dict(params=params, config=cfg, report=rep,
                         train_seconds=train_seconds, eval_seconds=eval_seconds)
    return out


def test_criterion_01_gradient_fidelity():
    cfg = ModelConfig(frames=4, patches=4, channels=8, refine_hidden=8,
                      embed_dim=12, code_dim=6, omegas=(2,), qc_weight=0.1,
                      seed=MODEL_SEED)
    synth = SyntheticSpec(num_classes=2, clips_per_class=2, frames=4, patches=4,
                          channels=8, motif_strength=1.0, seed=0)
    episode = sample_episode(generate_synthetic(synth),
                             EpisodeSpec(ways=2, shots=1, queries_per_class=1,
                                         seed=0), 0)
    t0 = time.monotonic()
    rows = gradcheck_model(cfg, episode, step=1e-5, threshold=1e-5)
    elapsed = time.monotonic() - t0
    worst = max(r.max_rel_error for r in rows)
    ok = all(r.passed for r in rows) and elapsed < 60.0
    report("01 gradient-fidelity",
           ok, f"{len(rows)} params, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_tuple_combinatorics(capsys):
    expected = {"2": 28, "3": 56, "4": 70, "2,3": 84, "2,4": 98,
                "3,4": 126, "2,3,4": 154}
    t0 = time.monotonic()
    totals = {}
    for omega, want in expected.items():
        assert cli_main(["tuples", "--frames", "8", "--omega", omega]) == EXIT_OK
        out = capsys.readouterr().out
        total = int(out.strip().splitlines()[-1].split(":")[1])
        totals[omega] = total
    elapsed = time.monotonic() - t0
    ok = totals == expected and elapsed < 1.0
    with capsys.disabled():
        report("02 tuple-combinatorics", ok,
               f"{'/'.join(str(totals[k]) for k in expected)} in {elapsed:.3f}s")


def test_criterion_03_residual_identities():
    rng = np.random.default_rng(0)

    def seed_for(name):
        return [0, sum(name.encode())]

    ple = init_ple_params(16, 8, seed_for)
    fle = init_fle_params(8, 16, seed_for)
    for p in ple.all() + fle.all():
        p.value.data[...] = 0.0
    x = rng.standard_normal((9, 16))
    h = rng.standard_normal((8, 16))
    ple_err = np.abs(ple_forward(Tape(), Tensor(x), ple).data - x).max()
    fle_err = np.abs(fle_forward(Tape(), Tensor(h), fle).data - h).max()
    ok = ple_err <= 1e-12 and fle_err <= 1e-12
    report("03 residual-identities", ok,
           f"ple err {ple_err:.1e}, fle err {fle_err:.1e}")


def test_criterion_04_equivariance_suite():
    eq_failures = 0
    worst_eq = 0.0
    for seed in range(100):
        rng = np.random.default_rng([4, seed])
        params = init_ple_params(8, 6, lambda n: [seed, sum(n.encode())])
        x = rng.standard_normal((9, 8))
        perm = rng.permutation(9)
        direct = ple_forward(Tape(), Tensor(x[perm]), params).data
        permuted = ple_forward(Tape(), Tensor(x), params).data[perm]
        err = float(np.abs(direct - permuted).max())
        worst_eq = max(worst_eq, err)
        if err > 1e-9:
            eq_failures += 1

    witnesses = 0
    for seed in range(100):
        rng = np.random.default_rng([5, seed])
        params = init_fle_params(6, 5, lambda n: [seed, 3, sum(n.encode())])
        h = rng.standard_normal((6, 5))
        perm = rng.permutation(6)
        while np.array_equal(perm, np.arange(6)):
            perm = rng.permutation(6)
        base = fle_forward(Tape(), Tensor(h), params).data
        moved = fle_forward(Tape(), Tensor(h[perm]), params).data
        base_rows = np.array(sorted(map(tuple, np.round(base, 8))))
        moved_rows = np.array(sorted(map(tuple, np.round(moved, 8))))
        if not np.allclose(base_rows, moved_rows, atol=1e-7):
            witnesses += 1
    ok = eq_failures == 0 and witnesses == 100
    report("04 equivariance-suite", ok,
           f"ple worst {worst_eq:.1e} over 100 perms; "
           f"fle witness {witnesses}/100")


def test_criterion_05_oracle_equivalence():
    worst = 0.0
    checked = 0
    for case in range(50):
        rng = np.random.default_rng([6, case])
        frames = int(rng.integers(2, 5))
        shots = int(rng.integers(1, 4))
        ways = int(rng.integers(2, 4))
        channels = int(rng.integers(2, 4))
        embed = int(rng.integers(2, 5))
        code = int(rng.integers(2, 5))
        trm = {2: init_trm_params(2, channels, embed,
                                  lambda n: [case, 1, sum(n.encode())])}
        qc = {2: init_qc_params(2, channels, code,
                                lambda n: [case, 2, sum(n.encode())])}
        tuples = {2: enumerate_tuples(frames, [2])}
        query = rng.standard_normal((frames, channels))
        for _ in range(ways):
            supports = [rng.standard_normal((frames, channels))
                        for _ in range(shots)]
            got_d = trm_distance(Tape(), Tensor(query),
                                 [Tensor(s) for s in supports], tuples, trm).item()
            want_d = trm_distance_oracle(query, supports, tuples, trm)
            got_m = qc_similarity(Tape(), Tensor(query),
                                  [Tensor(s) for s in supports], tuples, qc).item()
            want_m = qc_similarity_oracle(query, supports, tuples, qc)
            worst = max(worst, abs(got_d - want_d), abs(got_m - want_m))
            checked += 1
    ok = worst <= 1e-10
    report("05 oracle-equivalence", ok,
           f"{checked} class-instances over 50 cases, worst abs err {worst:.1e}")


def test_criterion_06_synthetic_temporal_task(task, trained_variants):
    _, test_ds = task
    eval_spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=EVAL_SEED)
    oracle = mean_pool_baseline(test_ds, eval_spec, EVAL_EPISODES)
    full = trained_variants["full"]
    runtime = full["train_seconds"] + full["eval_seconds"]
    acc = full["report"].accuracy
    ok = oracle.accuracy <= 0.35 and acc >= 0.90 and runtime < 600.0
    report("06 synthetic-temporal-task", ok,
           f"mean-pool {oracle.accuracy:.3f} <= 0.35, full {acc:.3f} >= 0.90, "
           f"train+eval {runtime:.0f}s < 600s")


def test_criterion_07_ablation_direction(trained_variants):
    accs = {name: trained_variants[name]["report"].accuracy
            for name, *_ in ABLATION_VARIANTS}
    ok = (accs["full"] >= accs["baseline"] + 0.05
          and accs["+ple"] >= accs["baseline"]
          and accs["+fle"] >= accs["baseline"])
    detail = ", ".join(f"{k} {v:.3f}" for k, v in accs.items())
    report("07 ablation-direction", ok, detail)


def test_criterion_08_one_shot_regime(task, trained_variants):
    _, test_ds = task
    one_shot = EpisodeSpec(ways=5, shots=1, queries_per_class=1, seed=EVAL_SEED)
    accs = {}
    for name in ("baseline", "full"):
        entry = trained_variants[name]
        accs[name] = evaluate(test_ds, entry["params"], entry["config"],
                              one_shot, EVAL_EPISODES).accuracy
    ok = accs["full"] >= accs["baseline"]
    report("08 one-shot-regime", ok,
           f"full {accs['full']:.3f} >= baseline {accs['baseline']:.3f}")


def test_criterion_09_overfit_sanity():
    ds = generate_synthetic(SyntheticSpec(num_classes=10, motif_strength=0.3,
                                          seed=DATA_SEED))
    spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=0)
    episode = sample_episode(ds, spec, 0)
    cfg = ModelConfig(seed=MODEL_SEED)
    tc = TrainConfig(episodes=500, learning_rate=0.01, eval_every=500,
                     eval_episodes=2)
    params, _ = train(ds, cfg, tc, spec, fixed_episode=episode)
    loss_tm = forward_episode(Tape(), episode, params, cfg).loss_tm
    ok = loss_tm < 0.01
    report("09 overfit-sanity", ok, f"L_TM {loss_tm:.5f} < 0.01 in 500 steps")


def test_criterion_10_determinism(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("det") / "ds"
    assert cli_main(["synth", "--out", str(data_dir), "--classes", "6",
                     "--clips", "8", "--seed", "3"]) == EXIT_OK
    flags = ["--data", str(data_dir), "--episodes", "150", "--eval-every", "50",
             "--eval-episodes", "25", "--ways", "3", "--shots", "2",
             "--seed", "11"]
    runs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"det_{tag}") / "run"
        assert cli_main(["train", "--out", str(out), *flags]) == EXIT_OK
        runs.append(((out / "metrics.tsv").read_text(),
                     (out / "checkpoint.stck").read_bytes()))
    ok = runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    report("10 determinism", ok,
           "bit-identical metrics log and checkpoint across reruns")


def test_criterion_11_tuple_subsampling(task, trained_variants):
    train_ds, test_ds = task
    spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=EPISODE_SEED)
    eval_spec = EpisodeSpec(ways=5, shots=5, queries_per_class=1, seed=EVAL_SEED)
    cfg = ModelConfig(tuple_keep_ratio=0.2, seed=MODEL_SEED)
    tc = TrainConfig(episodes=TRAIN_EPISODES, learning_rate=0.1,
                     eval_every=TRAIN_EPISODES, eval_episodes=10)
    params, _ = train(train_ds, cfg, tc, spec, eval_dataset=test_ds)
    sub = evaluate(test_ds, params, cfg, eval_spec, EVAL_EPISODES).accuracy
    full_acc = trained_variants["full"]["report"].accuracy
    ok = sub >= full_acc - 0.05
    report("11 tuple-subsampling", ok,
           f"rho=0.2 {sub:.3f} vs rho=1.0 {full_acc:.3f} (drop <= 5 pts)")
