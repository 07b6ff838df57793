import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histprompt.errors import (ConfigError, DimensionError, FrameOrderError, MemoryEmptyError,
                               SnapshotError)
from histprompt.memory import (MemoryBank, ReadoutConfig, load_snapshot, readout, readout_attention,
                               save_snapshot, update_due)

from oracles import readout_brute, readout_scalar, schedule_closed_form


def frame(rng, g=(2, 2), c_pk=3, c_p=5):
    return (rng.normal(size=(*g, c_pk)).astype(np.float32),
            rng.normal(size=(*g, c_p)).astype(np.float32))


def filled_bank(rng, n_frames=4, g=(3, 3), c_pk=3, c_p=5, scale=1.0, **kw):
    bank = MemoryBank(c_pk, c_p, **kw)
    for t in range(1, n_frames + 1):
        k, v = frame(rng, g, c_pk, c_p)
        bank.insert_frame(k * scale, v, t)
    return bank


# -- insertion and eviction ---------------------------------------------------------

def test_insert_row_major(rng):
    bank = MemoryBank(3, 5)
    k, v = frame(rng)
    bank.insert_frame(k, v, 1)
    assert len(bank) == 4 and bank.frames == [1]
    assert np.array_equal(bank.keys, k.reshape(4, 3))
    assert np.array_equal(bank.values[2], v[1, 0])
    assert bank.tokens_per_frame == 4


def test_masked_insert(rng):
    bank = MemoryBank(3, 5)
    k, v = frame(rng)
    mask = np.array([[False, True], [True, False]])
    bank.insert_frame(k, v, 1, mask)
    assert np.array_equal(bank.keys, k.reshape(4, 3)[[1, 2]])
    bank.insert_frame(k, v, 2, np.zeros((2, 2), bool))
    assert bank.frames == [1] and len(bank) == 2


def test_fifo_and_protection(rng):
    bank = MemoryBank(3, 5, capacity_frames=2)
    for t in (1, 2, 3):
        bank.insert_frame(*frame(rng), t)
    assert bank.frames == [2, 3] and len(bank) == 8
    bank = MemoryBank(3, 5, capacity_frames=2, protected_prefix=1)
    for t in (1, 2, 3):
        bank.insert_frame(*frame(rng), t)
    assert bank.frames == [1, 3]
    # protection can never exceed T - 1, so the newest frame always enters
    bank = MemoryBank(3, 5, capacity_frames=2, protected_prefix=5)
    for t in (1, 2, 3, 4):
        bank.insert_frame(*frame(rng), t)
    assert bank.frames == [1, 4]


@given(st.integers(1, 6), st.integers(0, 8), st.integers(0, 7))
def test_fifo_keeps_latest(capacity, extra, protected):
    rng = np.random.default_rng(0)
    bank = MemoryBank(3, 5, capacity_frames=capacity, protected_prefix=protected)
    ids = list(range(1, capacity + extra + 1))
    for t in ids:
        bank.insert_frame(*frame(rng, (1, 2)), t)
    p = min(protected, capacity - 1)
    want = ids if len(ids) <= capacity else ids[:p] + ids[len(ids) - (capacity - p):]
    assert bank.frames == want
    assert len(bank) == 2 * len(want)
    assert np.all(np.diff(bank.frame_ids) >= 0)


def test_schedule_matches_closed_form(rng):
    for interval, capacity, protected, n in [(20, 150, 0, 400), (20, 4, 0, 200), (5, 3, 1, 90), (10, 6, 2, 300)]:
        bank = MemoryBank(2, 2, capacity_frames=capacity, protected_prefix=protected)
        bank.insert_frame(*frame(rng, (1, 1), 2, 2), 1)
        for t in range(2, n + 1):
            if update_due(t, interval):
                bank.insert_frame(*frame(rng, (1, 1), 2, 2), t)
        assert bank.frames == schedule_closed_form(n, interval, capacity, protected)


def test_insert_errors(rng):
    bank = MemoryBank(3, 5)
    k, v = frame(rng)
    bank.insert_frame(k, v, 5)
    with pytest.raises(FrameOrderError):
        bank.insert_frame(k, v, 5)
    with pytest.raises(FrameOrderError):
        bank.insert_frame(k, v, 3)
    with pytest.raises(DimensionError):
        bank.insert_frame(k, v[:1], 6)
    with pytest.raises(DimensionError):
        bank.insert_frame(*frame(rng, (3, 3)), 6)
    with pytest.raises(DimensionError):
        bank.insert_frame(k, v, 6, np.ones((3, 2), bool))
    with pytest.raises(ConfigError):
        bank.insert_frame(k[:, :, :2], v, 6)
    with pytest.raises(ConfigError):
        MemoryBank(3, 5, capacity_frames=0)
    with pytest.raises(ConfigError):
        ReadoutConfig("cosine")


# -- readout ----------------------------------------------------------------------

def test_singleton_and_identical_values(rng):
    bank = MemoryBank(3, 5)
    k = rng.normal(size=(1, 1, 3)).astype(np.float32)
    v = rng.normal(size=(1, 1, 5)).astype(np.float32)
    bank.insert_frame(k, v, 1)
    out = readout(bank, rng.normal(size=(4, 2, 3)) * 10)
    assert np.array_equal(out, np.broadcast_to(v[0, 0], (4, 2, 5)))
    bank = MemoryBank(3, 5)
    bank.insert_frame(rng.normal(size=(2, 1, 3)), np.broadcast_to(v, (2, 1, 5)), 1)
    assert np.allclose(readout(bank, rng.normal(size=(3, 3, 3))), v[0, 0], rtol=0, atol=1e-6)


def test_empty_bank_raises(rng):
    bank = MemoryBank(3, 5)
    with pytest.raises(MemoryEmptyError):
        readout(bank, np.zeros((2, 2, 3)))
    with pytest.raises(MemoryEmptyError):
        readout_attention(bank, np.zeros((2, 2, 3)))


def test_scalar_oracle_agrees_with_brute_oracle(rng):
    k = rng.normal(size=(20, 4))
    v = rng.normal(size=(20, 3))
    q = rng.normal(size=(6, 4))
    for dot in (False, True):
        assert np.allclose(readout_scalar(k, v, q, dot), readout_brute(k, v, q, dot), rtol=1e-12, atol=0)


@pytest.mark.parametrize("metric", ["neg_l2", "dot"])
@pytest.mark.parametrize("n_frames,grid,m_side", [(1, (1, 1), 1), (3, (4, 4), 8), (8, (8, 8), 8), (2, (5, 7), 3)])
def test_readout_matches_double_loop(rng, metric, n_frames, grid, m_side):
    bank = filled_bank(rng, n_frames, grid, c_pk=6, c_p=7, scale=0.6)
    q = (rng.normal(size=(m_side, m_side, 6)) * 0.6).astype(np.float32)
    got = readout(bank, q, ReadoutConfig(metric)).reshape(-1, 7)
    ref = readout_scalar(bank.keys, bank.values, q.reshape(-1, 6), metric == "dot")
    assert np.abs(got - ref).max() <= 1e-5 * np.abs(ref).max()


def test_translation_invariance(rng):
    # keys, queries and shift on a dyadic grid so the shifted inputs are exact in float32
    bank = MemoryBank(3, 5)
    for t in (1, 2, 3):
        bank.insert_frame(np.round(rng.normal(size=(3, 3, 3)) * 256) / 256, rng.normal(size=(3, 3, 5)), t)
    q = (np.round(rng.normal(size=(3, 3, 3)) * 256) / 256).astype(np.float32)
    c = np.array([0.75, -1.5, 0.25], np.float32)
    shifted = MemoryBank(3, 5)
    for t in bank.frames:
        sel = bank.frame_ids == t
        shifted.insert_frame((bank.keys[sel] + c).reshape(3, 3, 3), bank.values[sel].reshape(3, 3, 5), t)
    assert np.abs(readout(bank, q) - readout(shifted, q + c)).max() <= 1e-6
    a, b = readout_attention(bank, q), readout_attention(shifted, q + c)
    assert np.abs(a.matrix - b.matrix).max() <= 1e-6


@given(st.integers(1, 5), st.integers(1, 4), st.floats(0.1, 4.0), st.integers(0, 2**31))
def test_convex_hull_and_normalisation(n_frames, side, scale, seed):
    rng = np.random.default_rng(seed)
    bank = filled_bank(rng, n_frames, (side, side), scale=scale)
    q = (rng.normal(size=(side, 2, 3)) * scale).astype(np.float32)
    out = readout(bank, q).reshape(-1, 5)
    lo, hi = bank.values.min(axis=0), bank.values.max(axis=0)
    assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)
    att = readout_attention(bank, q)
    assert np.all(np.abs(att.matrix.sum(axis=0) - 1) <= 1e-6)
    assert np.allclose(att.per_frame.sum(axis=0), 1, rtol=0, atol=1e-6)


def test_attention_examples(rng):
    bank = MemoryBank(3, 5)
    bank.insert_frame(*frame(rng, (1, 1)), 1)
    att = readout_attention(bank, rng.normal(size=(2, 2, 3)))
    assert np.array_equal(att.matrix, np.ones((1, 4)))
    bank = MemoryBank(3, 5)
    bank.insert_frame(np.ones((2, 3, 3)), rng.normal(size=(2, 3, 5)), 1)
    att = readout_attention(bank, np.ones((2, 2, 3)))
    assert np.allclose(att.matrix, 1 / 6, rtol=0, atol=1e-15)
    bank = filled_bank(rng, 3, (2, 2))
    att = readout_attention(bank, rng.normal(size=(2, 2, 3)))
    assert list(att.frames) == [1, 2, 3]
    for i, t in enumerate(att.frames):
        assert np.allclose(att.per_frame[i], att.matrix[att.frame_ids == t].sum(axis=0))


def test_attention_weights_reproduce_readout(rng):
    bank = filled_bank(rng, 3, (3, 3), scale=0.5)
    q = rng.normal(size=(2, 3, 3)).astype(np.float32) * 0.5
    for metric in ("neg_l2", "dot"):
        att = readout_attention(bank, q, ReadoutConfig(metric))
        mix = att.matrix.T @ bank.values.astype(np.float64)
        assert np.abs(readout(bank, q, ReadoutConfig(metric)).reshape(-1, 5) - mix).max() <= 1e-5


def test_readout_deterministic_across_threads(rng):
    bank = filled_bank(rng, 6, (6, 6), c_pk=8, c_p=16)
    q = rng.normal(size=(6, 6, 8)).astype(np.float32)
    ref = readout(bank, q).tobytes()
    results = [None] * 4

    def work(i):
        results[i] = readout(bank, q).tobytes()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == ref for r in results)


def test_concurrent_insert_and_readout(rng):
    bank = MemoryBank(3, 5, capacity_frames=3)
    bank.insert_frame(*frame(rng, (4, 4)), 1)
    q = rng.normal(size=(4, 4, 3)).astype(np.float32)
    errors = []

    def reader():
        for _ in range(50):
            try:
                out = readout(bank, q)
                assert np.all(np.isfinite(out))
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

    frames = [frame(np.random.default_rng(t), (4, 4)) for t in range(2, 40)]
    th = threading.Thread(target=reader)
    th.start()
    for t, (k, v) in enumerate(frames, start=2):
        bank.insert_frame(k, v, t)
    th.join()
    assert not errors
    assert bank.frames == [37, 38, 39]


# -- schedule -----------------------------------------------------------------------

def test_update_due_examples():
    assert update_due(5) and not update_due(7)
    assert update_due(20) and not update_due(30) and update_due(40)
    assert not update_due(1)
    assert update_due(10) and not update_due(15)


@given(st.integers(1, 1000), st.integers(1, 50))
def test_update_due_rule(t, tau):
    want = (t <= 10 and t % 5 == 0) or (t > 10 and t % tau == 0)
    assert update_due(t, tau) == want


# -- snapshots ------------------------------------------------------------------------

def test_snapshot_round_trip(rng, tmp_path):
    bank = filled_bank(rng, 3, (2, 3))
    path = tmp_path / "m.hipm"
    save_snapshot(bank, path)
    data = path.read_bytes()
    assert data[:4] == b"HIPM"
    assert len(data) == 4 + 4 * 6 + 18 * (8 + 4 * 8)
    back = load_snapshot(path)
    assert np.array_equal(back.keys, bank.keys) and np.array_equal(back.values, bank.values)
    assert np.array_equal(back.frame_ids, bank.frame_ids) and back.tokens_per_frame == 6
    q = rng.normal(size=(2, 2, 3))
    assert np.array_equal(readout(back, q), readout(bank, q))


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "extra", "order"])
def test_snapshot_corruption(rng, tmp_path, damage):
    bank = filled_bank(rng, 2, (1, 2))
    path = tmp_path / "m.hipm"
    save_snapshot(bank, path)
    data = bytearray(path.read_bytes())
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "version":
        data[4] = 9
    elif damage == "truncate":
        data = data[:-3]
    elif damage == "extra":
        data += b"\0"
    else:
        data[28:36], data[52:60] = data[52:60], data[28:36]
    path.write_bytes(bytes(data))
    with pytest.raises(SnapshotError):
        load_snapshot(path)
