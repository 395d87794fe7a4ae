import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from halftruth.autograd import Tensor, ops, parameter
from halftruth.corpus import Label, Manifest
from halftruth.models import MFAAN, CAFNet, ModelOutput, count_params
from halftruth.nn import Linear, read_checkpoint
from halftruth.training import (
    AdamState,
    AdamW,
    Dataset,
    LossWeights,
    NumericalError,
    ParamGroup,
    PlateauScheduler,
    TrainConfig,
    adamw_step,
    boundary_mse,
    clip_grad_norm,
    combine_losses,
    composite_loss,
    finetune_param_groups,
    fit,
    load_dataset,
    weighted_cross_entropy,
)

W = (1.622, 0.811, 0.568)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def plain_ce(logits, labels):
    """Unweighted mean cross-entropy, written out per sample."""
    total = 0.0
    for z, y in zip(logits, labels):
        m = max(z)
        total += m + math.log(sum(math.exp(v - m) for v in z)) - z[y]
    return total / len(labels)


def random_dataset(n, seed=0, labels=None, frames=251):
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels if labels is not None else rng.integers(0, 3, n))
    bounds = np.full((n, 2), np.nan)
    ht = labels == Label.HALF_TRUTH
    start = rng.uniform(0, 0.7, ht.sum())
    bounds[ht] = np.stack([start, start + 0.25], axis=1)
    mk = lambda c: rng.standard_normal((n, c, frames)).astype(np.float32)  # noqa: E731
    # make the class visible in the first MFCC row so short runs can learn something
    m = mk(40)
    m[:, 0, :] += labels[:, None].astype(np.float32)
    return Dataset(m, mk(40), np.abs(mk(12)) / 4, labels, bounds)


# --- weighted cross-entropy ----------------------------------------------------


def test_weighted_ce_uniform_logits():
    loss = weighted_cross_entropy(t64(np.zeros((1, 3))), [0], W)
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-12)
    assert W[0] * math.log(3) == pytest.approx(1.7820, abs=1e-4)


def test_weighted_ce_margin_limit():
    values = [float(weighted_cross_entropy(t64([[m, 0.0, 0.0]]), [0], W).data) for m in (0, 1, 5, 10, 30)]
    assert all(a > b for a, b in zip(values, values[1:])) and values[-1] < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_equal_weights_match_unweighted(data):
    n = data.draw(st.integers(1, 8))
    z = data.draw(hnp.arrays(np.float64, (n, 3), elements=st.floats(-20, 20)))
    y = np.array(data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
    w = data.draw(st.floats(0.1, 5))
    got = float(weighted_cross_entropy(t64(z), y, (w, w, w)).data)
    assert got == pytest.approx(plain_ce(z.tolist(), y), abs=1e-7)


def test_weighted_ce_normalisation_by_weight_sum():
    z = np.array([[2.0, 0.0, -1.0], [0.5, 0.1, 0.3]])
    y = [1, 2]
    per = [plain_ce([z[i].tolist()], [y[i]]) for i in range(2)]
    expected = (W[1] * per[0] + W[2] * per[1]) / (W[1] + W[2])
    assert float(weighted_cross_entropy(t64(z), y, W).data) == pytest.approx(expected, abs=1e-12)


def test_weighted_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        weighted_cross_entropy(t64(np.zeros((1, 3))), [3], W)


# --- boundary MSE and the composite loss ------------------------------------------


def test_boundary_mse_examples():
    assert float(boundary_mse(t64([[0.35, 0.64]]), [[0.3675, 0.6325]], [True]).data) == pytest.approx(
        (0.0175**2 + 0.0075**2) / 2, abs=1e-15
    )
    assert (0.0175**2 + 0.0075**2) / 2 == pytest.approx(1.8125e-4, abs=1e-15)
    assert float(boundary_mse(t64([[0.2, 0.5]]), [[0.2, 0.5]], [True]).data) == 0.0
    empty = boundary_mse(t64([[0.2, 0.5]], grad=True), [[np.nan, np.nan]], [False])
    assert float(empty.data) == 0.0 and not empty.requires_grad


def test_boundary_mse_ignores_unmasked_rows():
    pred = t64([[0.1, 0.9], [0.3, 0.6]], grad=True)
    loss = boundary_mse(pred, [[np.nan, np.nan], [0.25, 0.5]], [False, True])
    assert float(loss.data) == pytest.approx((0.05**2 + 0.1**2) / 2)
    loss.backward()
    assert not pred.grad[0].any()


def test_combine_losses_arithmetic():
    assert combine_losses(1.0, 0.5, 0.2) == pytest.approx(1.26, abs=1e-15)
    assert 1.0 + 0.4 * 0.5 + 0.3 * 0.2 == combine_losses(1.0, 0.5, 0.2)


def _output(rng, n=6, grad=True):
    return ModelOutput(
        t64(rng.standard_normal((n, 3)), grad), t64(rng.standard_normal((n, 3)), grad), t64(rng.uniform(size=(n, 2)), grad)
    )


def test_composite_loss_components():
    rng = np.random.default_rng(0)
    out = _output(rng)
    labels = np.array([0, 1, 2, 2, 1, 0])
    truth = np.where((labels == 2)[:, None], rng.uniform(size=(6, 2)), np.nan)
    total, parts = composite_loss(out, labels, truth)
    assert float(total.data) == pytest.approx(parts["cls"] + 0.4 * parts["aux"] + 0.3 * parts["temp"], abs=1e-12)


def test_ht_free_batch_ignores_boundaries():
    rng = np.random.default_rng(1)
    out = _output(rng)
    labels = np.array([0, 1, 1, 0, 1, 0])
    truth = np.full((6, 2), np.nan)
    total, _ = composite_loss(out, labels, truth)
    other = ModelOutput(out.main_logits, out.aux_logits, t64(rng.uniform(size=(6, 2)), True))
    assert float(composite_loss(other, labels, truth)[0].data) == float(total.data)
    total.backward()
    assert out.boundaries.grad is None or not out.boundaries.grad.any()


def test_temp_coefficient_linearity():
    rng = np.random.default_rng(2)
    out = _output(rng, grad=False)
    labels = np.array([2, 2, 0, 1, 2, 1])
    truth = np.where((labels == 2)[:, None], rng.uniform(size=(6, 2)), np.nan)
    base, parts = composite_loss(out, labels, truth, LossWeights(temp_coeff=0.3))
    doubled, _ = composite_loss(out, labels, truth, LossWeights(temp_coeff=0.6))
    no_temp = float(base.data) - 0.3 * parts["temp"]
    assert float(doubled.data) - no_temp == pytest.approx(2 * (float(base.data) - no_temp), rel=1e-12)


def test_aux_gradient_is_scaled_by_coefficient():
    rng = np.random.default_rng(3)
    fused = t64(rng.standard_normal((5, 8)))
    main, aux = Linear(8, 3, rng).astype(np.float64), Linear(8, 3, rng).astype(np.float64)
    labels = np.array([0, 1, 2, 2, 1])
    truth = np.where((labels == 2)[:, None], 0.4, np.nan)
    bounds = t64(np.full((5, 2), 0.5))

    def total():
        return composite_loss(ModelOutput(main(fused), aux(fused), bounds), labels, truth)[0]

    total().backward()
    g_total = aux.weight.grad.copy()
    aux.weight.grad = None
    weighted_cross_entropy(aux(fused), labels, W).backward()
    np.testing.assert_allclose(g_total, 0.4 * aux.weight.grad, rtol=1e-12, atol=1e-15)
    eps, w = 1e-6, aux.weight.data
    w[0, 0] += eps
    hi = float(total().data)
    w[0, 0] -= 2 * eps
    lo = float(total().data)
    w[0, 0] += eps
    assert (hi - lo) / (2 * eps) == pytest.approx(g_total[0, 0], abs=1e-8)


# --- optimiser -----------------------------------------------------------------


def _state(p):
    return [AdamState(np.zeros_like(p), np.zeros_like(p))]


def test_adamw_examples():
    p = np.array([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], _state(p), 0.1, 0.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    adamw_step([p], [np.zeros(2)], _state(p), 0.1, 0.1)
    np.testing.assert_allclose(p, [0.99, -1.98], rtol=0, atol=1e-15)
    for wd in (0.0, 1e-4, 0.1):
        q = np.array([1.0])
        adamw_step([q], [np.array([1.0])], _state(q), 1e-3, wd)
        assert q[0] == pytest.approx(1 - 1e-3 * (1 / (1 + 1e-8)) - 1e-3 * wd, abs=1e-12)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(3)], _state(p), 0.1, 0.0)


def test_adamw_second_step_by_hand():
    q = np.array([0.5])
    st_ = _state(q)
    adamw_step([q], [np.array([0.2])], st_, 0.01, 0.0)
    adamw_step([q], [np.array([-0.4])], st_, 0.01, 0.0)
    m = 0.9 * 0.1 * 0.2 + 0.1 * -0.4
    v = 0.999 * 0.001 * 0.04 + 0.001 * 0.16
    step2 = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert q[0] == pytest.approx(0.5 - 0.01 * (0.2 / (0.2 + 1e-8)) - 0.01 * step2, abs=1e-12)


def _with_grads(*grads):
    ps = []
    for g in grads:
        p = parameter(np.zeros_like(np.asarray(g, dtype=np.float64)))
        p.grad = np.asarray(g, dtype=np.float64)
        ps.append(p)
    return ps


def test_clip_examples():
    ps = _with_grads([0.3, 0.4])  # norm 0.5
    assert clip_grad_norm(ps, 1.0) == 1.0
    np.testing.assert_array_equal(ps[0].grad, [0.3, 0.4])
    ps = _with_grads([2.0, 2.0], [2.0, 2.0])  # norm 4
    before = [p.grad.copy() for p in ps]
    clip_grad_norm(ps, 1.0)
    assert math.sqrt(sum(float((p.grad**2).sum()) for p in ps)) == pytest.approx(1.0, abs=1e-9)
    for b, p in zip(before, ps):
        np.testing.assert_allclose(p.grad, b / 4)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)), st.floats(0.01, 10))
def test_clip_never_increases_norm(g, max_norm):
    (p,) = _with_grads(g)
    norm = float(np.linalg.norm(g))
    clip_grad_norm([p], max_norm)
    after = float(np.linalg.norm(p.grad))
    assert after <= norm + 1e-12 and after <= max_norm + 1e-9
    if norm > 0:
        assert float(np.dot(p.grad, g)) >= 0


def test_plateau_scheduler():
    s = PlateauScheduler(1.0)
    assert [s.step(m) for m in (5, 4, 3, 2)] == [1.0] * 4
    s = PlateauScheduler(1.0)
    assert [s.step(m) for m in (1, 1, 1, 1)] == [1.0, 1.0, 1.0, 0.5]
    s = PlateauScheduler(1.0)
    assert [s.step(m) for m in (1, 2, 2, 2, 2, 2, 2)][-1] == 0.25


# --- fine-tuning groups ----------------------------------------------------------


def test_finetune_groups_partition():
    model = CAFNet()
    groups = finetune_param_groups(model)
    assert sum(g.size() for g in groups) == count_params(model)
    lrs = {name: g.lr for g in groups for name, _ in g.params}
    assert lrs["main_head.fc1.weight"] == 1e-4 and lrs["fusion.out_proj.weight"] == 1e-4
    assert lrs["temporal_head.lstm.forward_dirs.0.w_ih"] == 1e-4 and lrs["aux_head.bias"] == 1e-4
    assert lrs["mfcc_path.dw1.weight"] == 1e-5 and lrs["fusion.attn.proj.w_q"] == 1e-5
    mf = finetune_param_groups(MFAAN())
    assert {n for n, _ in mf[1].params} == {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}


def test_zero_backbone_lr_freezes_backbone():
    model = MFAAN(seed=1)
    groups = finetune_param_groups(model, backbone_lr=0.0, head_lr=1e-3)
    data = random_dataset(4, labels=[0, 1, 1, 0], frames=32)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = AdamW(groups)
    loss = weighted_cross_entropy(model(data.mfcc, data.lfcc, data.chroma), data.labels, (2.0, 1.0))
    loss.backward()
    opt.step()
    for name, p in groups[0].params:
        assert p.data.tobytes() == before[name].tobytes(), name
    assert any(p.data.tobytes() != before[n].tobytes() for n, p in groups[1].params)


# --- the training loop -----------------------------------------------------------


FAST = dict(batch_size=64, max_epochs=1, augment=False)


def test_one_epoch_on_64_samples_is_one_step(tmp_path):
    model = CAFNet(seed=0)
    res = fit(model, random_dataset(64), random_dataset(8, seed=1), TrainConfig(**FAST))
    assert res.steps == 1 and len(res.log) == 1
    assert set(res.log[0]) == {"epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"}


def _run(tmp_path, tag, epochs=3):
    model = CAFNet(seed=42)
    cfg = TrainConfig(batch_size=8, max_epochs=epochs, augment=True, seed=42)
    ckpt, log = tmp_path / f"{tag}.cafw", tmp_path / f"{tag}.jsonl"
    res = fit(model, random_dataset(16), random_dataset(8, seed=1), cfg, checkpoint=ckpt, log_path=log)
    return res, ckpt, log


def test_training_is_deterministic(tmp_path):
    r1, c1, l1 = _run(tmp_path, "a")
    r2, c2, l2 = _run(tmp_path, "b")
    strip = lambda p: [{k: v for k, v in json.loads(x).items() if k != "seconds"} for x in p.read_text().splitlines()]  # noqa: E731
    assert strip(l1) == strip(l2) and len(strip(l1)) == 3
    assert c1.read_bytes() == c2.read_bytes()
    side = json.loads((tmp_path / "a.cafw.json").read_text())
    assert set(side) == {"config_hash", "epoch", "val_acc"} and side["epoch"] == r1.best_epoch


def test_early_stopping_keeps_best_epoch(tmp_path):
    res, ckpt, _ = _run(tmp_path, "c", epochs=4)
    accs = [r["val_acc"] for r in res.log]
    assert res.best_val_acc == max(accs)
    assert res.log[res.best_epoch - 1]["val_acc"] == max(accs)
    saved = read_checkpoint(ckpt)
    assert all(np.array_equal(saved[k], v) for k, v in res.best_state.items())


def test_patience_stops_the_run():
    # a constant validation set gives no improvement after the first epoch
    cfg = TrainConfig(batch_size=8, max_epochs=6, patience=1, augment=False)
    val = random_dataset(4, seed=3, frames=32)
    val.mfcc[:] = 0
    val.lfcc[:] = 0
    val.chroma[:] = 0
    res = fit(MFAAN(seed=0), random_dataset(8, frames=32), val, cfg)
    assert len(res.log) < 6


def test_mfaan_runs_binary_with_plateau_lr():
    res = fit(
        MFAAN(seed=0), random_dataset(16, frames=32), random_dataset(8, seed=2, frames=32), TrainConfig(batch_size=8, max_epochs=2, augment=False)
    )
    assert res.log[0]["lr"] == 5e-4


def test_non_finite_loss_aborts():
    bad = random_dataset(8)
    bad.mfcc[:] = 1e38
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="epoch 1"):
        fit(CAFNet(seed=0), bad, random_dataset(4), TrainConfig(batch_size=8, max_epochs=1, augment=False))


def test_load_dataset_reports_missing_caches(tmp_path):
    from halftruth.corpus import ClipLabel

    manifest = Manifest([("train/a.wav", ClipLabel(Label.REAL))], "train", 42)
    with pytest.raises(FileNotFoundError, match="1 feature caches missing"):
        load_dataset(manifest, tmp_path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        LossWeights(aux_coeff=0)
