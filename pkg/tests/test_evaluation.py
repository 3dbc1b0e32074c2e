import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import xmdistill.evaluation as ev
from xmdistill.data import PairedExample, SyntheticSpec, generate_dataset
from xmdistill.distill import TrainConfig
from xmdistill.errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    InsufficientDataError,
    SingularSystemError,
    UndefinedCorrelationError,
)
from xmdistill.evaluation import (
    FewShotSpec,
    LinearHead,
    MetricReport,
    RidgeConfig,
    Task,
    metric_accuracy,
    metric_exact_match,
    metric_mae,
    metric_pearson,
    metric_weighted_f1,
    regression_metrics,
    retrofit_round,
    ridge_fit,
    ridge_predict,
    run_finetune_head,
    run_probe,
    sample_k_shot,
    sign_classes,
    trainable_parameter_count,
)
from xmdistill.model import StudentConfig, init_student

TINY = StudentConfig(conv_layers=((4, 8, 4), (4, 4, 2)), d_model=8, n_heads=2, n_layers=1, d_ff=16, d_embed=8)
SPEC = SyntheticSpec(seed=0, vocab_size=6, d_embed=8, segment_len=16, n_classes=3)


# ridge

def test_ridge_exact_fit():
    w = ridge_fit([[1.0], [2.0]], [1.0, 2.0], RidgeConfig(0.0))
    assert np.allclose(w, [1.0, 0.0], atol=1e-12)


def test_ridge_hand_solve_without_bias():
    w = ridge_fit([[1.0], [1.0]], [1.0, 3.0], RidgeConfig(2.0), fit_bias=False)
    assert w.tolist() == [1.0]


def test_ridge_huge_alpha_shrinks_weights_not_bias():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 4))
    y = X @ [1.0, -2.0, 0.5, 3.0] + 7.0
    w = ridge_fit(X, y, RidgeConfig(1e9))
    assert np.linalg.norm(w[:-1]) < 1e-6
    assert abs(w[-1] - y.mean()) < 1e-4


def test_ridge_singular_at_zero_alpha():
    with pytest.raises(SingularSystemError):
        ridge_fit([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]], [1.0, 2.0, 3.0], RidgeConfig(0.0))
    ridge_fit([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]], [1.0, 2.0, 3.0], RidgeConfig(1.0))


def test_ridge_matches_explicit_inverse():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(1, 17))
        n = int(rng.integers(1, 65))
        alpha = float(rng.uniform(0.1, 50))
        X, y = rng.normal(size=(n, d)), rng.normal(size=(n, 2))
        Xa = np.hstack([X, np.ones((n, 1))])
        P = np.diag([alpha] * d + [0.0])
        if np.linalg.matrix_rank(Xa.T @ Xa + P) < d + 1:
            continue
        ref = np.linalg.inv(Xa.T @ Xa + P) @ Xa.T @ y
        w = ridge_fit(X, y, RidgeConfig(alpha))
        assert np.linalg.norm(w - ref) <= 1e-8 * np.linalg.norm(ref)


def test_ridge_predict_and_head():
    w = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
    X = np.array([[1.0, 1.0]])
    assert ridge_predict(w, X).tolist() == [[3.0, 0.0]]
    head = LinearHead.from_ridge(w, Task("classification", 2))
    assert head.outputs(X).tolist() == [[3.0, 0.0]]
    with pytest.raises(ConfigError):
        LinearHead(np.zeros((2, 3)), np.zeros(3), Task("classification", 2))


def test_ridge_config_validation():
    with pytest.raises(ConfigError):
        RidgeConfig(-1.0)
    with pytest.raises(ConfigError):
        RidgeConfig(math.inf)
    assert RidgeConfig().alpha == 100.0


# k-shot

def _labelled(counts):
    out = []
    for c, n in enumerate(counts):
        out += [PairedExample(f"c{c}-{i}", [float(i)], [0.0], label=c) for i in range(n)]
    return out


def test_k_shot_balanced_and_deterministic():
    data = _labelled([5, 4, 6])
    sub = sample_k_shot(data, FewShotSpec(2, (0, 1, 2), seed=3))
    assert len(sub) == 6
    assert [ex.label for ex in sub] == [0, 0, 1, 1, 2, 2]
    assert len({ex.id for ex in sub}) == 6
    assert sub == sample_k_shot(data, FewShotSpec(2, (0, 1, 2), seed=3))


def test_k_shot_seeds_differ():
    data = _labelled([30, 30])
    subsets = {tuple(ex.id for ex in sample_k_shot(data, FewShotSpec(3, (0, 1), s))) for s in range(5)}
    assert len(subsets) > 1


def test_k_shot_insufficient_names_class():
    with pytest.raises(InsufficientDataError, match="class 1"):
        sample_k_shot(_labelled([3, 1]), FewShotSpec(2, (0, 1)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=4), st.integers(1, 6), st.integers(0, 10_000))
def test_k_shot_property(counts, k, seed):
    assume(min(counts) >= k)
    data = _labelled(counts)
    sub = sample_k_shot(data, FewShotSpec(k, tuple(range(len(counts))), seed))
    for c in range(len(counts)):
        assert sum(1 for ex in sub if ex.label == c) == k
    assert len({ex.id for ex in sub}) == len(sub)


# rounding

@pytest.mark.parametrize("x,want", [(2.6, 3), (-3.4, -3), (0.5, 1), (-0.5, -1), (2.5, 3), (-1.49, -1),
                                    (0.49999999999999994, 0), (9.0, 3), (0.0, 0)])
def test_retrofit_examples(x, want):
    assert retrofit_round(x, -3, 3) == want


@given(st.floats(-1e6, 1e6), st.integers(-5, 0), st.integers(1, 5))
def test_retrofit_in_range(x, lo, hi):
    assert lo <= retrofit_round(x, lo, hi) <= hi


def test_retrofit_rejects_nan():
    with pytest.raises(DomainError):
        retrofit_round(float("nan"), -3, 3)


# metrics

def test_mae_examples():
    assert metric_mae([0, 2], [1, 2]) == 0.5
    assert metric_mae([1.5, 2], [1.5, 2]) == 0.0
    assert metric_mae([-1], [2]) == 3.0
    with pytest.raises(ContractError):
        metric_mae([], [])


def test_pearson_examples():
    assert abs(metric_pearson([1, 2, 3], [2, 4, 6]) - 1.0) <= 1e-12
    assert abs(metric_pearson([1, 2, 3], [3, 2, 1]) + 1.0) <= 1e-12
    assert abs(metric_pearson([1, 2, 3], [1, 3, 2]) - 0.5) <= 1e-12
    with pytest.raises(UndefinedCorrelationError):
        metric_pearson([1, 1, 1], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(p, t, a, b):
    assume(np.ptp(p) > 1e-3 and np.ptp(t) > 1e-3)
    r = metric_pearson(p, t)
    assert abs(metric_pearson(a * p + b, t) - r) <= 1e-12
    assert abs(metric_pearson(p, a * t + b) - r) <= 1e-12
    assert abs(metric_pearson(-p, t) + r) <= 1e-12


def test_weighted_f1_examples():
    assert metric_weighted_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert abs(metric_weighted_f1(["A", "B", "B"], ["A", "A", "B"]) - 2 / 3) < 1e-15
    assert abs(metric_weighted_f1([0, 0, 0, 0], [0, 0, 1, 1]) - 1 / 3) < 1e-15


def test_accuracy_and_exact_match():
    assert metric_accuracy([1, 2], [1, 2]) == 1.0
    assert metric_accuracy([1, 3], [1, 2]) == 0.5
    with pytest.raises(ContractError):
        metric_accuracy([], [])
    assert metric_exact_match([(1, 2), (0, 0)], [(1, 2), (0, 0)]) == 1.0
    assert metric_exact_match([(1, 2), (0, 1)], [(1, 2), (0, 0)]) == 0.5
    with pytest.raises(ContractError):
        metric_exact_match([(1, 2)], [(1, 2, 3)])


def test_metrics_against_brute_force_confusion():
    rng = np.random.default_rng(5)
    for _ in range(500):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        t, p = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        conf = np.zeros((k, k), dtype=int)
        for a, b in zip(t, p):
            conf[a, b] += 1
        f1 = Fraction(0)
        for c in range(k):
            tp, fn, fp = conf[c, c], conf[c].sum() - conf[c, c], conf[:, c].sum() - conf[c, c]
            if tp + fn:
                f1 += Fraction(int(2 * tp), int(2 * tp + fp + fn)) * int(tp + fn)
        assert metric_weighted_f1(p, t) == float(f1 / n)
        assert metric_accuracy(p, t) == float(Fraction(int(np.trace(conf)), n))


def test_sign_classes_zero_is_positive():
    assert sign_classes([-0.4, 0.0, 0.3, -0.6, 2.0], -3, 3) == [1, 1, 1, 0, 1]


def test_regression_metrics_keys():
    out = regression_metrics([0.2, -1.7, 2.9, 0.4], [0.0, -2.0, 3.0, -1.0], -3, 3)
    assert set(out) == {"mae", "weighted_f1", "acc2", "acc7", "pearson"}
    # rounded predictions 0, -2, 3, 0 against 0, -2, 3, -1
    assert out["acc7"] == 0.75
    # signs: pred all >= 0 except -2; targets 0, 3 positive, -2, -1 negative
    assert out["acc2"] == 0.75


def test_task_validation():
    assert Task("regression").n_out == 1
    assert Task("multihead", [3, 4]).n_out == 7
    with pytest.raises(ConfigError):
        Task("ranking")
    with pytest.raises(ConfigError):
        Task("multihead", [3, 1])


def test_report_json_is_canonical():
    rep = MetricReport("t", {"b": 1.0, "a": 0.5}, {"seed": 0})
    assert rep.to_json() == '{"metrics":{"a":0.5,"b":1.0},"provenance":{"seed":0},"task":"t"}'


# probes

@pytest.fixture(scope="module")
def labelled():
    return generate_dataset(SPEC, 60)


def test_probe_deterministic_with_provenance(labelled):
    enc = init_student(TINY, 0)
    task = Task("classification", 3)
    a = run_probe(enc, labelled, task, provenance={"checkpoint_step": 40, "seed": 0})
    b = run_probe(enc, labelled, task, provenance={"checkpoint_step": 40, "seed": 0})
    assert a.to_json() == b.to_json()
    assert a.provenance["config_digest"] == TINY.digest().hex()
    assert a.provenance["checkpoint_step"] == 40
    assert a.provenance["n_train"] == 36 and a.provenance["n_test"] == 12
    assert 0.0 <= a.metrics["accuracy"] <= 1.0


def test_probe_does_not_touch_encoder(labelled):
    enc = init_student(TINY, 0)
    before = enc.state_bytes()
    run_probe(enc, labelled, Task("classification", 3), few_shot=FewShotSpec(2, (0, 1, 2), 1), threads=2)
    assert enc.state_bytes() == before


def test_probe_separable_embeddings_alpha_zero(labelled, monkeypatch):
    rng = np.random.default_rng(0)
    centres = np.eye(8)[:3] * 5.0
    table = {ex.id: centres[ex.label] + rng.normal(0, 0.1, 8) for ex in labelled}
    monkeypatch.setattr(ev, "embed_examples", lambda enc, exs, threads=1: np.stack([table[e.id] for e in exs]))
    rep = run_probe(init_student(TINY, 0), labelled, Task("classification", 3), RidgeConfig(0.0))
    assert rep.metrics["accuracy"] == 1.0
    assert rep.metrics["weighted_f1"] == 1.0


def test_probe_regression_paths(labelled):
    spec = SyntheticSpec(seed=0, vocab_size=6, d_embed=8, segment_len=16, label_rule="regression")
    data = generate_dataset(spec, 60)
    enc = init_student(TINY, 0)
    direct = run_probe(enc, data, Task("regression"))
    onehot = run_probe(enc, data, Task("regression"), ridge_target="onehot")
    assert {"mae", "acc7", "acc2", "weighted_f1", "pearson"} == set(direct.metrics)
    assert set(onehot.metrics) == set(direct.metrics)
    with pytest.raises(ConfigError):
        run_probe(enc, data, Task("regression"), ridge_target="ordinal")


def test_probe_requires_labels():
    data = [PairedExample(f"u{i}", np.zeros(64), np.zeros(8)) for i in range(10)]
    with pytest.raises(DataError):
        run_probe(init_student(TINY, 0), data, Task("classification", 3))


def test_few_shot_report_records_k(labelled):
    rep = run_probe(init_student(TINY, 0), labelled, Task("classification", 3), few_shot=FewShotSpec(3, (0, 1, 2), 4))
    assert rep.provenance["k"] == 3 and rep.provenance["sample_seed"] == 4
    assert rep.provenance["n_train"] == 9


# fine-tuning

FT = dict(peak_lr=3e-3, warmup_steps=5, total_steps=50, batch_size=4, checkpoint_every=10, average_last_k=3)


def test_trainable_count_differs_by_encoder_size():
    enc = init_student(TINY, 0)
    task = Task("classification", 3)
    diff = trainable_parameter_count(enc, task, False) - trainable_parameter_count(enc, task, True)
    assert diff == enc.num_parameters()
    assert trainable_parameter_count(enc, task, True) == 8 * 3 + 3


def test_finetune_loss_decreases_and_reports(labelled):
    enc = init_student(TINY, 0)
    before = enc.state_bytes()
    rep = run_finetune_head(enc, labelled, Task("classification", 3), TrainConfig(**FT))
    losses = [h["loss"] for h in rep.history]
    assert len(losses) == 50
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert enc.state_bytes() == before
    assert "averaged" in rep.variants
    assert rep.provenance["best_step"] in (10, 20, 30, 40, 50)
    assert rep.provenance["trainable_params"] == trainable_parameter_count(enc, Task("classification", 3), False)


def test_finetune_frozen_is_deterministic(labelled):
    enc = init_student(TINY, 0)
    cfg = TrainConfig(**{**FT, "total_steps": 20})
    a = run_finetune_head(enc, labelled, Task("classification", 3), cfg, freeze_encoder=True)
    b = run_finetune_head(enc, labelled, Task("classification", 3), cfg, freeze_encoder=True)
    assert a.to_json() == b.to_json()
    assert a.history == b.history
    assert a.provenance["freeze_encoder"] is True


def test_finetune_regression_and_multihead():
    spec = SyntheticSpec(seed=0, vocab_size=6, d_embed=8, segment_len=16, label_rule="regression")
    data = generate_dataset(spec, 40)
    cfg = TrainConfig(**{**FT, "total_steps": 8, "checkpoint_every": 4})
    rep = run_finetune_head(init_student(TINY, 0), data, Task("regression"), cfg, freeze_encoder=True)
    assert "mae" in rep.metrics
    multi = [PairedExample(ex.id, ex.signal, ex.target, label=(ex.tokens[0] % 2, ex.tokens[-1] % 3)) for ex in data]
    rep = run_finetune_head(init_student(TINY, 0), multi, Task("multihead", [2, 3]), cfg, freeze_encoder=True)
    assert {"exact_match", "accuracy_head0", "accuracy_head1"} == set(rep.metrics)


def test_finetune_too_small():
    with pytest.raises(InsufficientDataError):
        run_finetune_head(init_student(TINY, 0), generate_dataset(SPEC, 5), Task("classification", 3),
                          TrainConfig(**FT))
