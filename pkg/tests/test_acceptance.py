"""Acceptance criteria, one test each; verdict lines are printed at the end of the run."""
import itertools
import time

import numpy as np
import pytest

from conftest import record
from tsvod.config import RunConfig
from tsvod.correlation import CorrelationLayer, attention_imbalance_report, format_imbalance_tsv
from tsvod.decode import QueryAssembler
from tsvod.encoder import MemoryMap
from tsvod.evaluation import ap_single_class, eval_samples, evaluate, model_predictor
from tsvod.gradcheck import TOLERANCE, run_gradcheck
from tsvod.matching import assignment_cost, focal_loss, giou, hungarian
from tsvod.nn import init_params
from tsvod.synthvid import SceneSpec, generate_dataset, sample_training_item
from tsvod.tensor import Tensor
from tsvod.train import train

# toy ablation setup, see the decisions ledger for how it was chosen. Bars as
# wide as the largest object hide objects completely, so a single frame cannot
# see them while a context frame usually can.
ABLATION_SCENE = dict(seed=7, num_sequences=200, frame_count=24, image_size=32, max_objects=3,
                      min_size=8, max_size=12, max_speed=0.75, num_bars=2, bar_width=12,
                      bar_speed=1.5, occlusion_prob=0.5)
ABLATION_VAL_SEED = 1007
ABLATION_VAL_SEQUENCES = 40
# equal budgets for both models: 15000 steps of 8 samples, constant lr
ABLATION_RUN = dict(num_queries=4, window_half=3, lr=3e-4, epochs=15, steps_per_epoch=1000,
                    lr_drop_epoch=15, batch_size=8, eval_frames_per_sequence=0)
ABLATION_EVAL_FRAMES = 6
ABLATION_SCORE_THRESHOLD = 0.0


def test_c1_full_scale_benchmark_is_substituted():
    record("C1", None, "large-scale benchmark numbers are out of scope; substituted by C2-C9")


def test_c2_gradient_check_suite():
    t0 = time.perf_counter()
    results = run_gradcheck(seed=0, probes=10)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.worst_rel_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 120 and all(r.probes == 10 for r in results)
    record("C2", ok, f"{len(results)} ops x 10 probes, worst {worst.name} {worst.worst_rel_error:.2e} "
                     f"(< {TOLERANCE:g}), {elapsed:.1f}s (< 120s), failed={failed}")
    assert ok


def test_c3_zero_gate_identities():
    rng = np.random.default_rng(0)
    q, v = rng.standard_normal((7, 12)), rng.standard_normal((7, 12))
    layer = CorrelationLayer(12, heads=1, gated=True, identity=True, use_ffn=False)
    init_params(layer, 0)
    out, _, mask = layer.mix(Tensor(q), Tensor(v))
    logits = q @ v.T / np.sqrt(12)
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    err = np.abs(out.data - (a @ v + 0.5 * q + 0.5 * v)).max()
    exact_half = bool(np.all(mask.data == 0.5))
    ok = exact_half and err <= 1e-12
    record("C3", ok, f"M == 0.5 everywhere: {exact_half}; |out - (AV + Q/2 + V/2)| = {err:.1e} (<= 1e-12)")
    assert ok


def test_c4_attention_imbalance_report():
    rows = attention_imbalance_report([1, 10, 100])
    errs = [abs(w - 1.0 / n) for n, w, _ in rows]
    ok = max(errs) < 1e-15 and all(r == 1.0 for _, _, r in rows)
    print(format_imbalance_tsv(rows), end="")
    detail = ", ".join(f"N_V={n}: {w:.6g} vs residual {r:g}" for n, w, r in rows)
    record("C4", ok, f"{detail}; max |w - 1/N_V| = {max(errs):.1e}")
    assert ok


def test_c5_hungarian_against_brute_force():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        n_cols = int(rng.integers(1, 8))
        n_rows = int(rng.integers(n_cols, 8))
        # integer costs make "exact" a meaningful comparison
        cost = rng.integers(0, 1000, size=(n_rows, n_cols)).astype(float)
        best = min(sum(cost[r, c] for c, r in enumerate(rows))
                   for rows in itertools.permutations(range(n_rows), n_cols))
        mismatches += assignment_cost(cost, hungarian(cost)) != best
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record("C5", ok, f"1000 matrices up to 7x7, {mismatches} mismatches, {elapsed:.1f}s (< 60s)")
    assert ok


def test_c6_loss_and_ap_oracles():
    from test_evaluation import reference_ap

    g = giou([0, 0, 1, 1], [1, 1, 2, 2])
    f = focal_loss(0.0, 1.0, alpha=0.25, gamma=2.0)
    gt = [[0.5, 0.5, 0.2, 0.2]]
    hand = ap_single_class([(0.9, [0.5, 0.5, 0.2, 0.06]), (0.8, [0.5, 0.5, 0.2, 0.14])], gt)
    cells = [[0.1 + 0.2 * k, 0.5, 0.1, 0.1] for k in range(5)]
    cases = worst = 0
    for n_gt in range(1, 4):
        for n_det in range(1, 5):
            for targets in itertools.product(range(-1, n_gt), repeat=n_det):
                scores = [1.0 - 0.1 * i for i in range(n_det)]
                boxes = [cells[j] if j >= 0 else cells[4] for j in targets]
                got = ap_single_class(list(zip(scores, boxes)), cells[:n_gt])
                worst = max(worst, abs(got - reference_ap(scores, boxes, cells[:n_gt])))
                cases += 1
    ok = abs(g + 0.5) < 1e-12 and abs(f - 0.0433) < 1e-4 and hand == 0.5 and worst < 1e-12
    record("C6", ok, f"GIoU {g!r}, focal {f:.6f}, AP hand case {hand!r}, "
                     f"{cases} exhaustive AP cases max dev {worst:.1e}")
    assert ok


def test_c7_structural_laws():
    from test_aggregation import build, memories

    cfg = RunConfig()
    qa = QueryAssembler(cfg.d, cfg.num_queries, cfg.heads, cfg.sd_layers)
    init_params(qa, 0)
    rng = np.random.default_rng(7)
    grid = cfg.image_size // 8
    ctx = [MemoryMap(Tensor(rng.standard_normal((grid * grid, cfg.d))), grid, grid, i + 1)
           for i in range(cfg.num_context)]
    n_queries = qa.assemble_queries(ctx).count

    m_t, *others = memories(rng, 4)
    agg = build()
    _, fwd = agg(m_t, others)
    shapes = {s: fwd.stage(s)[0].shape for s in ("M_t", "h_t", "E_t", "R_t")}
    conserved = len(set(shapes.values())) == 1
    dev = 0.0
    for perm in itertools.permutations(range(3)):
        _, alt = agg(m_t, [others[i] for i in perm])
        dev = max(dev, np.abs(alt.h_t.data - fwd.h_t.data).max(), np.abs(alt.e_t.data - fwd.e_t.data).max())
    ok = n_queries == 300 and conserved and dev <= 1e-12
    record("C7", ok, f"assembled queries {n_queries} (= 300), shapes {sorted(set(shapes.values()))}, "
                     f"order deviation {dev:.1e} (<= 1e-12)")
    assert ok


@pytest.mark.slow
def test_c8_toy_ablation():
    t0 = time.perf_counter()
    spec = SceneSpec(**ABLATION_SCENE)
    train_seqs = generate_dataset(spec)
    val_seqs = generate_dataset(SceneSpec(**{**ABLATION_SCENE, "seed": ABLATION_VAL_SEED,
                                             "num_sequences": ABLATION_VAL_SEQUENCES}))
    samples = list(eval_samples(val_seqs, 2, ABLATION_EVAL_FRAMES))
    full = RunConfig(**ABLATION_RUN, image_size=spec.image_size)
    single = full.replace(enable_tfam=False, enable_stam=False, enable_qam=False)
    scores = {}
    for name, cfg in (("single", single), ("full", full)):
        model = train(cfg, train_seqs).model
        report, _ = evaluate(model_predictor(model, ABLATION_SCORE_THRESHOLD), samples, cfg.num_classes)
        scores[name] = report
    elapsed = time.perf_counter() - t0
    occluded = scores["full"].splits["occluded"].frames
    s_all, f_all = scores["single"].mAP, scores["full"].mAP
    s_occ, f_occ = scores["single"].splits["occluded"].mAP, scores["full"].splits["occluded"].mAP
    margin = 100 * (f_occ - s_occ)
    ok = (len(train_seqs) >= 200 and f_all > s_all and margin >= 5.0 and elapsed < 45 * 60)
    record("C8", ok, f"mAP@0.5 full {f_all:.4f} vs single {s_all:.4f}; occluded split ({occluded} frames) "
                     f"full {f_occ:.4f} vs single {s_occ:.4f}, margin {margin:+.1f} pts (>= +5); "
                     f"{elapsed / 60:.1f} min (< 45)")
    assert ok


@pytest.mark.slow
def test_c9_overfit_and_determinism():
    seqs = generate_dataset(SceneSpec(seed=3, num_sequences=8, frame_count=12))
    rng = np.random.default_rng(0)
    samples = [sample_training_item(s, 6, 3, 2, rng) for s in seqs]
    # one optimiser step sees all 8 samples
    cfg = RunConfig(num_queries=10, window_half=3, lr=1e-3, epochs=1, steps_per_epoch=500,
                    lr_drop_epoch=1, batch_size=8, eval_frames_per_sequence=0)
    a = train(cfg, [], fixed_samples=samples).step_losses
    b = train(cfg, [], fixed_samples=samples).step_losses
    identical = np.asarray(a).tobytes() == np.asarray(b).tobytes()
    ratio = a[0] / a[-1]
    ok = len(a) == 500 and ratio >= 10 and identical
    record("C9", ok, f"loss {a[0]:.3f} -> {a[-1]:.4f} over {len(a)} steps ({ratio:.1f}x, >= 10x); "
                     f"curves byte-identical: {identical}")
    assert ok
