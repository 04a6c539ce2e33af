import math

import numpy as np
import pytest

from grmp import autodiff as ad
from grmp.model import DualEncoder, finetune_parameter_names, semantic_kl_graph
from grmp.optim import Adam
from grmp.params import GradientVector, Layout
from grmp.qgr import (TELEMETRY_COLUMNS, FinetuneConfig, cosine_lr, draw_labels, evaluate,
                      finetune, finetune_step, gradient_angle, regulate, run_few_shot,
                      semantic_gradient, write_telemetry)
from grmp.synth import build_benchmark


def gv(*vals):
    v = np.array(vals, dtype=np.float64)
    return GradientVector(v, Layout.from_shapes([("g", v.shape)]))


def eq8_oracle(q, s, lam):
    """Direct transcription of the clipping rule, written independently."""
    q, s = list(map(float, q)), list(map(float, s))
    dot = sum(a * b for a, b in zip(q, s))
    if dot <= 0:
        return q
    ss = sum(b * b for b in s)
    return [a - lam * dot / ss * b for a, b in zip(q, s)]


def test_regulate_examples():
    np.testing.assert_array_equal(regulate(gv(1, 1), gv(-1, 0), 5).values, [1, 1])
    np.testing.assert_array_equal(regulate(gv(1, 1), gv(1, 0), 1).values, [0, 1])
    np.testing.assert_array_equal(regulate(gv(1, 1), gv(1, 0), 5).values, [-4, 1])
    assert eq8_oracle([1, 1], [1, 0], 5) == [-4.0, 1.0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, s = rng.normal(size=6), rng.normal(size=6)
        assert regulate(gv(*q), gv(*s), 0.0).values.tobytes() == q.tobytes()


def test_regulate_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        q, s = rng.normal(size=5), rng.normal(size=5)
        lam = float(rng.uniform(0, 8))
        np.testing.assert_allclose(regulate(gv(*q), gv(*s), lam).values, eq8_oracle(q, s, lam),
                                   rtol=1e-12, atol=1e-12)


def test_regulate_span_property():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q, s = rng.normal(size=7), rng.normal(size=7)
        if q @ s <= 0:
            continue
        d = regulate(gv(*q), gv(*s), 3.0).values - q
        cos = d @ s / (np.linalg.norm(d) * np.linalg.norm(s))
        assert abs(abs(cos) - 1) <= 1e-9


def test_regulate_degenerate_semantic_gradient(caplog):
    out = regulate(gv(1.0, 1.0), gv(1e-14, 0.0), 5.0)
    np.testing.assert_array_equal(out.values, [1.0, 1.0])
    assert "degenerate" in caplog.text


def test_regulate_layout_mismatch():
    other = GradientVector(np.ones(2), Layout.from_shapes([("h", (2,))]))
    with pytest.raises(ValueError):
        regulate(gv(1, 1), other, 1.0)


def test_per_tensor_mode_acts_on_each_slice():
    lay = Layout.from_shapes([("a", (2,)), ("b", (2,))])
    q = GradientVector(np.array([1.0, 1.0, 1.0, 1.0]), lay)
    s = GradientVector(np.array([1.0, 0.0, -1.0, 0.0]), lay)
    np.testing.assert_array_equal(regulate(q, s, 1.0, "per_tensor").values, [0, 1, 1, 1])
    # globally the dot product is zero, so nothing changes
    np.testing.assert_array_equal(regulate(q, s, 1.0, "global").values, [1, 1, 1, 1])


def test_gradient_angle_examples():
    assert gradient_angle(gv(1, 0), gv(0, 1)) == 90.0
    assert gradient_angle(gv(1, 0), gv(2, 0)) == 0.0
    assert gradient_angle(gv(1, 0), gv(-1, 1)) == pytest.approx(math.degrees(math.acos(-1 / math.sqrt(2))), abs=1e-12)
    assert gradient_angle(gv(1, 0), gv(-1, 1)) == pytest.approx(135.0, abs=1e-12)
    with pytest.raises(ValueError):
        gradient_angle(gv(0, 0), gv(1, 0))


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(lam=-1)
    with pytest.raises(ValueError):
        FinetuneConfig(mode="tensorwise")
    assert FinetuneConfig(qgr=False).effective_lambda == 0.0


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------- model-level

@pytest.fixture(scope="module")
def setup():
    _, ev = build_benchmark(seed=0)
    model = DualEncoder.initialize(prompt_seed=0)
    store = model.params.with_trainable(finetune_parameter_names(model.params, model.config))
    return ev, model, store


def test_semantic_gradient_zero_at_identical_models(setup):
    ev, model, store = setup
    imgs = ev.images[:4]
    v_qua = model.with_params(store)
    g = semantic_gradient(model, v_qua, imgs)
    assert g.layout == store.layout()
    assert g.norm() < 1e-12


def test_semantic_gradient_finite_differences(setup):
    ev, model, store = setup
    imgs = ev.images[:2]
    p_sem = model.semantic_distribution(imgs)
    # move the tunable copy away from the reference so the KL is non-trivial
    rng = np.random.default_rng(3)
    moved = {k: store[k] + rng.normal(scale=0.05, size=store[k].shape) for k in store.trainable}
    err = ad.grad_check(lambda p: semantic_kl_graph(p, model.config, imgs, p_sem),
                        {**store, **moved}, names=store.trainable, max_coords=3, seed=4)
    assert err <= 1e-4


def test_lambda_zero_step_matches_disabled_step(setup):
    ev, model, store = setup
    imgs, y = ev.images[:8], np.linspace(0, 1, 8)
    p_sem = model.semantic_distribution(imgs)
    a, ta, _ = finetune_step(store, model.config, imgs, y, p_sem, FinetuneConfig(lam=0.0), Adam(1e-3))
    b, tb, _ = finetune_step(store, model.config, imgs, y, p_sem, FinetuneConfig(qgr=False), Adam(1e-3))
    assert a.checksum() == b.checksum()
    assert list(map(repr, ta.row())) == list(map(repr, tb.row()))


def test_step_telemetry_and_projection_identity(setup):
    ev, model, store = setup
    rng = np.random.default_rng(5)
    moved = store.replace({k: store[k] + rng.normal(scale=0.05, size=store[k].shape)
                           for k in store.trainable})
    imgs, y = ev.images[10:18], np.linspace(0, 1, 8)
    p_sem = model.semantic_distribution(imgs)
    cfg = FinetuneConfig(lam=5.0)
    _, tel, g_used = finetune_step(moved, model.config, imgs, y, p_sem, cfg, Adam(1e-3))
    assert 0 <= tel.angle_deg <= 180
    assert tel.lam == 5.0 and tel.dot_sign in (-1, 0, 1)
    if tel.dot_qua > 0:
        assert abs(tel.dot_qgr - (1 - 5.0) * tel.dot_qua) <= 1e-9 * abs(tel.dot_qua)
    else:
        assert tel.dot_qgr == tel.dot_qua


def test_draw_labels_resamples_and_rescales(setup):
    ev, _, _ = setup
    pool = ev.subset(ev.where(split="train-pool"))
    idx, y = draw_labels(pool, 50, [0, 0])
    assert len(set(idx)) == 50 and y.min() == 0 and y.max() == 1
    idx2, _ = draw_labels(pool, 50, [0, 0])
    assert idx.tobytes() == idx2.tobytes()
    with pytest.raises(ValueError):
        draw_labels(pool, len(pool) + 1, 0)
    flat = pool.subset(pool.where(severity=1.0))
    with pytest.raises(ValueError):
        draw_labels(flat, 5, 0)


def test_zero_epochs_equals_zero_shot(setup):
    ev, model, _ = setup
    res = run_few_shot(ev, model, FinetuneConfig(epochs=0, splits=1), seed=0)
    zs = evaluate(model, ev.subset(ev.where(split="test")))
    assert res.medians["srcc"] == zs["srcc"] and res.medians["plcc"] == zs["plcc"]


def test_few_shot_deterministic_and_semantic_frozen(setup):
    ev, model, _ = setup
    cfg = FinetuneConfig(epochs=1, splits=2, few_shot_n=20)
    a = run_few_shot(ev, model, cfg, seed=3)
    b = run_few_shot(ev, model, cfg, seed=3)
    assert a.to_json() == b.to_json()
    assert len(a.splits) == 2 and len(a.telemetry[0]) == 2


def test_finetune_touches_only_the_trainable_subset(setup):
    ev, model, store = setup
    imgs = ev.images[:16]
    run = finetune(model, imgs, np.linspace(0, 1, 16), model.semantic_distribution(imgs),
                   FinetuneConfig(epochs=1), seed=0)
    frozen = [k for k in model.params if k not in store.trainable]
    assert run.params.checksum(frozen) == model.params.checksum(frozen)
    assert run.params.checksum(store.trainable) != model.params.checksum(store.trainable)


def test_telemetry_csv_columns(tmp_path, setup):
    ev, model, _ = setup
    imgs = ev.images[:16]
    run = finetune(model, imgs, np.linspace(0, 1, 16), model.semantic_distribution(imgs),
                   FinetuneConfig(epochs=2), seed=0)
    write_telemetry(tmp_path / "t.csv", run.telemetry)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == TELEMETRY_COLUMNS
    assert len(lines) == 1 + len(run.telemetry)
