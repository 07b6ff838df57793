"""Acceptance criteria 1-10. Run ``pytest tests/test_acceptance.py`` for the PASS/FAIL summary."""
import itertools
import time

import numpy as np
import pytest

from histprompt.encoder import ChannelConfig, EncoderWeights, cbam
from histprompt.geometry import ce_keep_indices, refine_mask
from histprompt.head import LossWeights, focal_loss, giou_loss, total_loss
from histprompt.kernels import available_backends
from histprompt.memory import (MemoryBank, ReadoutConfig, load_snapshot, readout, readout_attention,
                               save_snapshot, update_due)
from histprompt.nn import (ConvSpec, channel_pool, conv2d, mlp_forward, sigmoid, softmax,
                           spatial_pool)
from histprompt.harness.cli import main as cli_main
from histprompt.harness.config import TrackerConfig, WorldConfig
from histprompt.harness.stats import instrumented_macs, model_stats
from histprompt.harness.tracker import run_sequence
from histprompt.harness.world import SyntheticWorld

from oracles import (box_area_on_grid, channel_pool_loops, conv2d_loops, keep_indices_bruteforce,
                     readout_brute, schedule_closed_form, softmax_mp, spatial_pool_loops)

# Mean IoU per drift seed (0..9), 200 frames, drift 0.1, desk analytic weights.
# Produced once by this harness and frozen as regression values.
DRIFT_MEMORY = (0.8243344600062398, 0.7957186374273261, 0.767163403311286, 0.7178336614613556,
                0.8425654349782502, 0.785693376107759, 0.7482093800574613, 0.7025955861824226,
                0.7091469803381002, 0.8182736906705577)
DRIFT_TEMPLATE_ONLY = (0.720917719533312, 0.6027291381419659, 0.6721484350384529, 0.5691174700597812,
                       0.7512673922426824, 0.7645485044265787, 0.5658139499966804, 0.5672673899518523,
                       0.7026210640172352, 0.8041518524672607)
NO_DRIFT_MEAN_IOU = 0.8599237182568127
FROZEN_TOL = 1e-6

DRIFT_SEEDS = range(10)


def drift_world(seed):
    return SyntheticWorld(WorldConfig(frames=200, drift=0.1, seed=seed))


@pytest.fixture(scope="module")
def no_drift_run():
    return run_sequence(SyntheticWorld(WorldConfig(frames=100, seed=0)), TrackerConfig.desk())


@pytest.fixture(scope="module")
def drift_suite():
    cfg = TrackerConfig.desk()
    t0 = time.perf_counter()
    memory = [run_sequence(drift_world(s), cfg).metrics.mean_iou for s in DRIFT_SEEDS]
    template_only = [run_sequence(drift_world(s), cfg.replace(update_memory=False)).metrics.mean_iou
                     for s in DRIFT_SEEDS]
    return memory, template_only, time.perf_counter() - t0


# -- 1 ----------------------------------------------------------------------------------

@pytest.mark.criterion(1, "blocked readout vs 64-bit brute force, 200 instances")
def test_criterion_1_readout_oracle():
    rng = np.random.default_rng(101)
    backends = available_backends()
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(200):
        n, d, c, m = (int(rng.integers(1, hi + 1)) for hi in (1024, 64, 128, 64))
        scale = rng.uniform(0.05, 1.0)
        bank = MemoryBank(d, c)
        bank.insert_frame((rng.normal(size=(1, n, d)) * scale).astype(np.float32),
                          rng.normal(size=(1, n, c)).astype(np.float32), 1)
        q = (rng.normal(size=(1, m, d)) * scale).astype(np.float32)
        cfg = ReadoutConfig("dot" if i % 4 == 3 else "neg_l2")
        ref = readout_brute(bank.keys, bank.values, q[0], cfg.metric == "dot")
        for backend in backends:
            got = readout(bank, q, cfg, backend=backend)[0]
            err = np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300)
            worst = max(worst, err)
            assert err <= 1e-5, (i, backend, err)
        cols = readout_attention(bank, q, cfg).matrix.sum(axis=0)
        assert np.all(np.abs(cols - 1) <= 1e-6)
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert elapsed < 30


# -- 2 ----------------------------------------------------------------------------------

def dyadic(rng, shape, scale):
    # 1/256 grid: shifting by multiples of 1/8 stays exact in float32
    return (np.round(rng.normal(size=shape) * scale * 256) / 256).astype(np.float32)


@pytest.mark.criterion(2, "readout translation, singleton and hull laws, 500 trials")
def test_criterion_2_invariances():
    rng = np.random.default_rng(202)
    for _ in range(500):
        d, c = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        gh, gw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        scale = rng.uniform(0.1, 2.0)
        bank, moved = MemoryBank(d, c), MemoryBank(d, c)
        shift = (rng.integers(-16, 17, d) / 8).astype(np.float32)
        for t in range(1, int(rng.integers(1, 5)) + 1):
            k = dyadic(rng, (gh, gw, d), scale)
            v = rng.normal(size=(gh, gw, c)).astype(np.float32)
            bank.insert_frame(k, v, t)
            moved.insert_frame(k + shift, v, t)
        q = dyadic(rng, (2, 3, d), scale)
        assert np.array_equal((q + shift) - shift, q)
        out = readout(bank, q)
        assert np.abs(out - readout(moved, q + shift)).max() <= 1e-6
        a, b = readout_attention(bank, q), readout_attention(moved, q + shift)
        assert np.abs(a.matrix - b.matrix).max() <= 1e-6
        flat = out.reshape(-1, c)
        assert np.all(flat >= bank.values.min(axis=0)) and np.all(flat <= bank.values.max(axis=0))

        single = MemoryBank(d, c)
        v1 = rng.normal(size=(1, 1, c)).astype(np.float32)
        single.insert_frame(rng.normal(size=(1, 1, d)), v1, 1)
        assert np.array_equal(readout(single, q * 50), np.broadcast_to(v1[0, 0], (2, 3, c)))


# -- 3 ----------------------------------------------------------------------------------

@pytest.mark.criterion(3, "FIFO and update schedule law, 1000 random tuples")
def test_criterion_3_schedule_law():
    rng = np.random.default_rng(303)
    key, value = np.zeros((1, 1, 1), np.float32), np.zeros((1, 1, 1), np.float32)
    for _ in range(1000):
        capacity = int(rng.integers(1, 20))
        interval = int(rng.integers(1, 40))
        n_frames = int(rng.integers(1, 300))
        protected = int(rng.integers(0, 12))
        bank = MemoryBank(1, 1, capacity, protected)
        bank.insert_frame(key, value, 1)
        for t in range(2, n_frames + 1):
            if update_due(t, interval):
                bank.insert_frame(key, value, t)
        assert bank.frames == schedule_closed_form(n_frames, interval, capacity, protected), \
            (capacity, interval, n_frames, protected)


# -- 4 ----------------------------------------------------------------------------------

@pytest.mark.criterion(4, "conv, pool, softmax and CBAM against naive references")
def test_criterion_4_primitives():
    rng = np.random.default_rng(404)
    for _ in range(500):
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        if h + 2 * pad < k or w + 2 * pad < k:
            continue
        x = rng.normal(size=(h, w, cin)).astype(np.float32)
        spec = ConvSpec.random(cin, cout, k, rng, stride=stride, padding=pad)
        assert np.abs(conv2d(x, spec) - conv2d_loops(x, spec.weights, spec.bias, stride, pad)).max() <= 1e-6
    for _ in range(500):
        x = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        x = x.astype(np.float32)
        for mode in ("max", "avg"):
            assert np.abs(spatial_pool(x, mode) - spatial_pool_loops(x, mode)).max() <= 1e-6
            assert np.abs(channel_pool(x, mode) - channel_pool_loops(x, mode)).max() <= 1e-6
    for _ in range(500):
        v = rng.normal(size=int(rng.integers(1, 30))) * rng.uniform(0.1, 30)
        assert np.abs(softmax(v) - softmax_mp(v)).max() <= 1e-6

    ch = ChannelConfig(c_f=8, c_k=4, c_p=32, c_pk=4)
    for _ in range(50):
        weights = EncoderWeights.random(ch, rng)
        x = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6)), ch.c_p)).astype(np.float32)
        w_c = (mlp_forward(spatial_pool(x, "max"), weights.cbam_mlp).astype(np.float64)
               + mlp_forward(spatial_pool(x, "avg"), weights.cbam_mlp))
        pooled = np.concatenate([channel_pool(x, "max"), channel_pool(x, "avg")], axis=2)
        w_s = conv2d(pooled, weights.cbam_conv).astype(np.float64)
        stage = ((sigmoid(w_c)[None, None, :] * x) * sigmoid(w_s)).astype(np.float32)
        assert np.array_equal(cbam(x, weights), stage)


# -- 5 ----------------------------------------------------------------------------------

@pytest.mark.criterion(5, "mask refinement algebra and exhaustive keep-rule check")
def test_criterion_5_mask_algebra():
    rng = np.random.default_rng(505)
    for _ in range(1000):
        shape = (int(rng.integers(1, 25)), int(rng.integers(1, 25)))
        box, ce = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        refined = refine_mask(box, ce)
        want = np.array([[bool(box[i, j]) and bool(ce[i, j]) for j in range(shape[1])] for i in range(shape[0])])
        assert np.array_equal(refined, want)
        assert not np.any(refined & ~box) and not np.any(refined & ~ce)
        assert refined.sum() <= min(box.sum(), ce.sum())
    checked = 0
    for n in range(1, 9):
        ratios = [k / n for k in range(1, n + 1)] + [(k - 0.5) / n for k in range(1, n + 1)]
        for scores in itertools.product((0.0, 1.0, 2.0), repeat=n):
            for r in ratios:
                got = ce_keep_indices(scores, r).tolist()
                assert got == keep_indices_bruteforce(scores, r)
                checked += 1
    print(f"criterion 5: {checked} keep-rule cases")


# -- 6 ----------------------------------------------------------------------------------

@pytest.mark.criterion(6, "GIoU, focal and weighted total loss")
def test_criterion_6_losses():
    assert giou_loss((3, 4, 5, 6), (3, 4, 5, 6)) == 0
    a, b = (0, 0, 2, 2), (1, 1, 2, 2)
    inter, union, hull = (box_area_on_grid([a, b], op) for op in ("inter", "union", "hull"))
    assert (inter, union, hull) == (1, 7, 9)
    assert abs(giou_loss(a, b) - (1 - (inter / union - (hull - union) / hull))) <= 1e-6
    assert abs(giou_loss(a, b) - (1 - (1 / 7 - 2 / 9))) <= 1e-6

    rng = np.random.default_rng(606)
    for _ in range(100):
        shape = (int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        t = (rng.random(shape) < 0.3).astype(float)
        p = rng.uniform(1e-3, 1 - 1e-3, shape)
        bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
        assert abs(focal_loss(p, t, alpha=0.5, gamma=0.0) - 0.5 * bce) <= 1e-6

    assert LossWeights() == LossWeights(1.0, 5.0, 2.0)
    for f, g, l1 in rng.random((100, 3)):
        assert total_loss(f, g, l1) == 1.0 * f + 5.0 * g + 2.0 * l1


# -- 7 ----------------------------------------------------------------------------------

@pytest.mark.criterion(7, "end-to-end: no-drift IoU and memory vs template-only on the drift suite")
def test_criterion_7_end_to_end(no_drift_run, drift_suite):
    memory, template_only, elapsed = drift_suite
    no_drift = no_drift_run.metrics.mean_iou
    wins = sum(m > t for m, t in zip(memory, template_only))
    for s in DRIFT_SEEDS:
        print(f"criterion 7: seed {s} memory {memory[s]:.4f} template-only {template_only[s]:.4f} "
              f"margin {memory[s] - template_only[s]:+.4f}")
    print(f"criterion 7: no-drift mean IoU {no_drift:.4f}; memory wins {wins}/10; suite {elapsed:.0f} s")
    assert no_drift >= 0.7
    assert wins >= 8
    assert elapsed < 300
    assert abs(no_drift - NO_DRIFT_MEAN_IOU) <= FROZEN_TOL
    assert np.allclose(memory, DRIFT_MEMORY, rtol=0, atol=FROZEN_TOL)
    assert np.allclose(template_only, DRIFT_TEMPLATE_ONLY, rtol=0, atol=FROZEN_TOL)


# -- 8 ----------------------------------------------------------------------------------

@pytest.mark.criterion(8, "memory frame ids after 100 frames")
def test_criterion_8_schedule(no_drift_run):
    cfg = TrackerConfig.desk()
    assert (cfg.warmup_len, cfg.warmup_stride, cfg.update_interval, cfg.memory_size) == (10, 5, 20, 150)
    assert no_drift_run.state.memory.frames == [1, 5, 10, 20, 40, 60, 80, 100]


# -- 9 ----------------------------------------------------------------------------------

@pytest.mark.criterion(9, "memory snapshot round trip and malformed-file exit code")
def test_criterion_9_snapshot(no_drift_run, tmp_path):
    bank = no_drift_run.state.memory
    path = tmp_path / "bank.hipm"
    save_snapshot(bank, path)
    back = load_snapshot(path)
    q = np.random.default_rng(909).normal(size=(24, 24, bank.c_pk)).astype(np.float32)
    assert readout(back, q).tobytes() == readout(bank, q).tobytes()
    assert cli_main(["inspect-memory", "--snapshot", str(path), "--frame", "5", "--out", str(tmp_path)]) == 0
    data = path.read_bytes()
    for name, broken in (("magic", b"HIPX" + data[4:]), ("version", data[:4] + b"\x02" + data[5:])):
        bad = tmp_path / f"{name}.hipm"
        bad.write_bytes(broken)
        assert cli_main(["inspect-memory", "--snapshot", str(bad), "--frame", "1", "--out", str(tmp_path)]) == 3


# -- 10 ---------------------------------------------------------------------------------

@pytest.mark.criterion(10, "closed-form counts equal the instrumented counter")
def test_criterion_10_stats():
    configs = [
        TrackerConfig(search_size=64, template_size=32, c_f=12, c_k=6, c_p=32, c_pk=4, c_h=4, memory_size=3),
        TrackerConfig(search_size=32, template_size=32, c_f=8, c_k=4, c_p=16, c_pk=8, c_h=6, memory_size=2,
                      channel_attn=False, phi_single_conv=True),
        TrackerConfig.desk(search_size=96, template_size=48, memory_size=2, spatial_attn=False),
    ]
    for cfg in configs:
        closed, counted = model_stats(cfg), instrumented_macs(cfg)
        assert closed["macs"] == counted["macs"]
        assert closed["macs_by_part"] == counted["macs_by_part"]


# -- related harness invariant, reported alongside the criteria -------------------------

def test_gt_crop_pairing_on_drift_suite(drift_suite):
    """Cropping around the true box against cropping around the prediction, paired seeds.

    Holds on 9 of 10 seeds; on seed 6 the gt-cropped run is 0.002 lower.
    """
    memory, _, _ = drift_suite
    cfg = TrackerConfig.desk(crop_from_gt=True)
    gt = [run_sequence(drift_world(s), cfg).metrics.mean_iou for s in DRIFT_SEEDS]
    for s in DRIFT_SEEDS:
        print(f"gt-crop seed {s}: predicted {memory[s]:.4f} gt {gt[s]:.4f} diff {gt[s] - memory[s]:+.4f}")
    assert np.mean(gt) > np.mean(memory)
    assert sum(g >= m for g, m in zip(gt, memory)) >= 9
