import math
from dataclasses import replace

import numpy as np
import pytest

from pointlf import autodiff as ad
from pointlf.geometry import perturb_poses
from pointlf.lightfield import COUNTERS, DivergenceError
from pointlf.motion import ObjectTrack, Observation, build_masks
from pointlf.scene import SynthConfig, synthesize_scene
from pointlf.trainer import (
    CHECKPOINT_MAGIC,
    SEGMENTS,
    ParameterStore,
    Sampler,
    TrainConfig,
    adam_step,
    batch_loss,
    dump_checkpoint,
    freeze_neighbors,
    gradient_check,
    init_store,
    learning_rate_at,
    load_checkpoint,
    loss_and_grad,
    masked_loss,
    train,
    write_history,
)


def tiny_store(n=2):
    return ParameterStore({"point_features": [("features", (1, n))], "mlp_weights": [],
                           "attention_weights": [], "pose_deltas": [("pose_deltas", (0, 6))]})


# --- loss ------------------------------------------------------------------------------


def test_masked_loss_examples(rng):
    c = rng.random((10, 3))
    assert masked_loss(c, c) == 0.0
    assert masked_loss([[1, 1, 1]], [[0, 0, 0]]) == 3.0
    with pytest.raises(ValueError):
        masked_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_masked_loss_extended_precision(rng):
    a, b = rng.random((512, 3)), rng.random((512, 3))
    exact = math.fsum(((a - b) ** 2).ravel().tolist())
    assert abs(masked_loss(a, b) - exact) < 1e-12


# --- Adam ---------------------------------------------------------------------------------


def test_zero_gradient_leaves_values(rng):
    st = ParameterStore.for_scene(5, 3)
    st.values[:] = rng.normal(size=len(st))
    before = st.values.copy()
    adam_step(st, TrainConfig())
    assert np.array_equal(st.values, before) and st.step == 1


def test_first_step_closed_form(rng):
    st = tiny_store(4)
    g = rng.normal(size=4)
    st.grad[:] = g
    cfg = TrainConfig()
    adam_step(st, cfg)
    np.testing.assert_allclose(st.values, -cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps), rtol=1e-12)
    assert not st.grad.any()


def reference_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = np.zeros_like(x)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


@pytest.mark.parametrize("lazy", [False, True])
def test_adam_matches_textbook(rng, lazy):
    st = tiny_store(3)
    grads = rng.normal(size=(50, 3))
    for g in grads:
        st.grad[:] = g
        adam_step(st, TrainConfig(lazy_sparse=lazy))
    np.testing.assert_allclose(st.values, reference_adam(np.zeros(3), grads, 1e-3), rtol=1e-10, atol=1e-15)


def test_adam_quadratic_toy():
    # no first-moment momentum, so the descent on the bowl is monotone
    st = tiny_store(2)
    A = np.array([1.0, 3.0])
    st.values[:] = 0.1
    cfg = TrainConfig(learning_rate=1e-2, adam_beta1=0.0)
    losses = []
    for _ in range(100):
        losses.append(0.5 * np.sum(A * st.values**2))
        st.grad[:] = A * st.values
        adam_step(st, cfg)
    losses.append(0.5 * np.sum(A * st.values**2))
    assert np.all(np.diff(losses[5:]) < 0)
    assert losses[-1] < 1e-6


def test_lazy_skips_untouched_rows(rng):
    st = ParameterStore.for_scene(4, 2, feature_dim=2)
    st.values[:] = rng.normal(size=len(st))
    before = st.values.copy()
    st.view("features", "grad")[1] = [0.3, -0.2]
    adam_step(st, TrainConfig(lazy_sparse=True))
    feats = st.view("features")
    assert np.array_equal(feats[[0, 2, 3]], before[:8].reshape(4, 2)[[0, 2, 3]])
    assert not np.array_equal(feats[1], before[2:4])


def test_nonfinite_step_raises():
    st = tiny_store(2)
    st.grad[:] = [np.inf, 0.0]
    with pytest.raises(DivergenceError):
        adam_step(st, TrainConfig())


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=3000)
    assert learning_rate_at(cfg, 0) == learning_rate_at(cfg, 1500) == 1e-3
    assert learning_rate_at(cfg, 2999) == pytest.approx(1e-5)
    lrs = [learning_rate_at(cfg, e) for e in range(1500, 3000)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert learning_rate_at(TrainConfig(epochs=200), 199) == 1e-3  # shorter than the hold: constant


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(rays_per_image=0)
    with pytest.raises(ValueError):
        TrainConfig(window_m=-1)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})
    (tmp_path / "c.json").write_text('{"epochs": 7}')
    assert TrainConfig.load(tmp_path / "c.json").epochs == 7


# --- store and checkpoints ---------------------------------------------------------------


def test_store_layout_and_segments():
    st = ParameterStore.for_scene(10, 4)
    assert tuple(st.offsets) == SEGMENTS
    assert st.view("features").shape == (10, 16) and st.view("pose_deltas").shape == (4, 6)
    ends = [st.offsets[s] for s in SEGMENTS]
    assert ends[0][0] == 0 and all(a[1] == b[0] for a, b in zip(ends, ends[1:])) and ends[-1][1] == len(st)
    assert st.segment_of(0) == "point_features" and st.segment_of(len(st) - 1) == "pose_deltas"
    with pytest.raises(ValueError):
        ParameterStore({"mlp_weights": []})


def test_checkpoint_round_trip(tmp_path, rng):
    st = ParameterStore.for_scene(7, 3)
    for a in ("values", "m", "v"):
        getattr(st, a)[:] = rng.normal(size=len(st))
    st.step = 42
    dump_checkpoint(st, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.equals(st)
    fresh = ParameterStore.for_scene(7, 3)
    assert back.offsets == fresh.offsets and back.entries == fresh.entries


def test_checkpoint_errors(tmp_path):
    st = ParameterStore.for_scene(3, 2)
    dump_checkpoint(st, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "h.bin").write_bytes(raw[:20])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "h.bin")
    (tmp_path / "v.bin").write_bytes(CHECKPOINT_MAGIC + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "v.bin")
    (tmp_path / "x.bin").write_bytes(b"nonsense" * 4)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.bin")


# --- gradients through the pipeline ------------------------------------------------------


@pytest.fixture(scope="module")
def noisy_setup():
    cfg = SynthConfig(num_frames=12, width=24, height=20, focal=20.0, points_per_frame=300)
    ds = synthesize_scene(cfg, 0)
    noisy = ds.with_poses(perturb_poses(ds.gt_poses, 0.1, 7))
    tc = TrainConfig(rays_per_image=32, epochs=5)
    return ds, noisy, tc


def test_constant_loss_gives_zero_gradient(noisy_setup):
    ds, _, tc = noisy_setup
    st = init_store(ds, tc)
    batch = Sampler(ds, None, tc).draw(0)
    loss, leaves, _ = batch_loss(st, ds, batch, tc, tape=None)
    tape = ad.Tape()
    tape.backward(loss)
    assert loss.tape is None and all(v.grad is None for v in leaves.values())


def test_every_segment_gets_gradient(noisy_setup):
    ds, noisy, tc = noisy_setup
    st = init_store(noisy, tc)
    batch = Sampler(noisy, None, tc).draw(1500)
    _, grad = loss_and_grad(st, noisy, batch, tc)
    for seg in SEGMENTS:
        a, b = st.offsets[seg]
        assert np.any(grad[a:b] != 0), seg
    deltas = grad[st.offsets["pose_deltas"][0]:].reshape(-1, 6)
    assert np.all(np.any(deltas[batch.frames] != 0, axis=1))
    others = [i for i in range(len(noisy)) if i not in batch.frames]
    assert not deltas[others].any()


def test_frozen_poses_get_no_gradient(noisy_setup):
    _, noisy, tc = noisy_setup
    cfg = replace(tc, refine_poses=False)
    st = init_store(noisy, cfg)
    _, grad = loss_and_grad(st, noisy, Sampler(noisy, None, cfg).draw(0), cfg)
    assert not grad[st.offsets["pose_deltas"][0]:].any()


def test_finite_difference_spot_check(noisy_setup, rng):
    _, noisy, tc = noisy_setup
    st = init_store(noisy, tc)
    st.view("pose_deltas")[:] = rng.normal(0, 1e-3, st.view("pose_deltas").shape)
    batch = freeze_neighbors(st, noisy, Sampler(noisy, None, tc).draw(900), tc)
    _, grad = loss_and_grad(st, noisy, batch, tc)
    probes = []
    for seg in SEGMENTS:
        a, b = st.offsets[seg]
        cand = np.flatnonzero(grad[a:b]) + a
        probes.extend(rng.choice(cand, size=min(5, len(cand)), replace=False))
    chk = gradient_check(st, noisy, batch, tc, probes, h=1e-5)
    smooth = ~chk.kink
    assert smooth.sum() >= len(probes) - 2
    assert np.all(chk.rel_error()[smooth] <= 1e-4), chk.index[smooth][chk.rel_error()[smooth] > 1e-4]
    if chk.kink.any():
        # across a ReLU kink the stencil is one-sided; shrinking h recovers the derivative
        fine = gradient_check(st, noisy, batch, tc, chk.index[chk.kink], h=1e-8)
        assert np.all(fine.rel_error()[~fine.kink] <= 1e-4)


def test_gradient_check_flags_relu_kink():
    # the only non-smooth primitive: a stencil straddling zero is flagged, one that does not is not
    with ad.record_relu_masks() as log:
        ad.relu(np.array([-1e-6, 2.0]))
        ad.relu(np.array([1e-6, 2.0]))
    assert not np.array_equal(log[0], log[1])
    ad.relu(np.array([1.0]))
    assert len(log) == 2  # recording stops with the block


def test_gradient_check_restores_store(noisy_setup):
    _, noisy, tc = noisy_setup
    st = init_store(noisy, tc)
    before = st.copy()
    batch = freeze_neighbors(st, noisy, Sampler(noisy, None, tc).draw(5), tc)
    gradient_check(st, noisy, batch, tc, [0, 1, len(st) - 1])
    assert st.equals(before)


# --- training loop --------------------------------------------------------------------------


def test_zero_epochs_returns_init(noisy_setup):
    ds, _, tc = noisy_setup
    res = train(ds, None, replace(tc, epochs=0))
    assert res.store.equals(init_store(ds, tc)) and res.history == []


def test_history_alpha_coupling_and_ate(noisy_setup):
    ds, noisy, tc = noisy_setup
    res = train(noisy, None, replace(tc, epochs=12, end_epoch_alpha=10), gt_poses=ds.gt_poses)
    for row in res.history:
        assert row["alpha"] == pytest.approx(min(row["epoch"] / 10, 1) * 10)
        assert row["alpha_dir"] == pytest.approx(0.4 * row["alpha"])
        assert row["ate_mean"] > 0


def _mask_everything_but(ds, keep_cols):
    W, H = ds.intrinsics.width, ds.intrinsics.height
    tracks = [ObjectTrack(0, [Observation(i, (0, keep_cols, H, W), 0.9) for i in range(len(ds))])]
    return build_masks(tracks, ds.intrinsics.shape, len(ds))


def test_sampler_never_hits_masked_pixels(noisy_setup):
    ds, _, tc = noisy_setup
    masks = _mask_everything_but(ds, 8)  # 8 columns x 20 rows = 160 unmasked pixels
    cfg = replace(tc, rays_per_image=100)
    sampler = Sampler(ds, masks, cfg)
    COUNTERS.reset()
    for e in range(50):
        b = sampler.draw(e)
        for px in b.pixels:
            assert np.all(px[:, 1] < 8)
            assert len({tuple(p) for p in px}) == len(px)  # without replacement
        assert all(abs(w[0] - ds.window_ids(f, 3)[0]) >= 0 for f, w in zip(b.frames, b.window_ids))
        assert not any(ds.is_held_out(f) for f in b.frames)
    assert COUNTERS.masked_rays == 0


def test_too_few_unmasked_pixels(noisy_setup):
    ds, _, tc = noisy_setup
    with pytest.raises(ValueError, match="unmasked pixels"):
        Sampler(ds, _mask_everything_but(ds, 2), replace(tc, rays_per_image=100))


def test_augmentation_window_within_h(noisy_setup):
    ds, _, tc = noisy_setup
    sampler = Sampler(ds, None, tc)
    starts = {int(ds.window_ids(c, 3)[0]): c for c in range(len(ds))}
    for e in range(100):
        b = sampler.draw(e)
        for f, w in zip(b.frames, b.window_ids):
            center = next(c for c in range(len(ds)) if np.array_equal(ds.window_ids(c, 3), w))
            assert abs(center - f) <= tc.augmentation_H
    assert starts


def test_short_run_deterministic(tmp_path, noisy_setup):
    ds, noisy, tc = noisy_setup
    cfg = replace(tc, epochs=15, checkpoint_every=5)
    a = train(noisy, None, cfg, gt_poses=ds.gt_poses, out_dir=tmp_path / "a")
    b = train(noisy, None, cfg, gt_poses=ds.gt_poses, out_dir=tmp_path / "b")
    assert a.history == b.history and a.store.equals(b.store)
    for name in ("history.csv", "checkpoint_final.bin", "checkpoint_00010.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = train(noisy, None, replace(cfg, rng_seed=1))
    assert c.history != a.history


def test_divergence_writes_last_good(tmp_path, noisy_setup):
    _, noisy, tc = noisy_setup
    st = init_store(noisy, tc)
    st.view("W2")[0, 0] = np.nan
    res = train(noisy, None, replace(tc, epochs=3), store=st, out_dir=tmp_path)
    assert res.diverged and res.history == []
    assert (tmp_path / "checkpoint_last_good.bin").exists()


def test_write_history_columns(tmp_path):
    write_history(tmp_path / "h.csv", [{"epoch": 0, "loss": 1.5, "alpha": 0.0}])
    assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,loss,alpha,ate_mean", "0,1.5,0.0,"]
