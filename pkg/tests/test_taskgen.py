import numpy as np
import pytest

from iclstreams import taskgen
from iclstreams.errors import ConfigError
from iclstreams.rng import stream
from iclstreams.taskgen import TaskKind


@pytest.fixture(scope="module")
def table():
    return taskgen.make_table(128, 128, 64, seed=3)


def test_table_variance_large_e():
    e = 10000
    t = taskgen.make_table(2, 2, e, seed=0)
    for mu in np.concatenate([t.object_mu, t.label_mu]):
        assert 0.9 / e <= mu.var() <= 1.1 / e


def test_table_deterministic_and_seed_sensitive():
    a = taskgen.make_table(4, 3, 16, seed=11)
    b = taskgen.make_table(4, 3, 16, seed=11)
    c = taskgen.make_table(4, 3, 16, seed=12)
    assert a.object_mu.tobytes() == b.object_mu.tobytes()
    assert a.label_mu.tobytes() == b.label_mu.tobytes()
    assert not np.array_equal(a.object_mu, c.object_mu)


def test_table_single_class():
    t = taskgen.make_table(1, 1, 5, seed=0)
    assert t.object_mu.shape == (1, 5) and t.label_mu.shape == (1, 5)


@pytest.mark.parametrize("args", [(0, 1, 4), (1, 0, 4), (1, 1, 0), (-2, 1, 1)])
def test_table_rejects_non_positive(args):
    with pytest.raises(ConfigError):
        taskgen.make_table(*args, seed=0)


def test_instantiate_zero_noise_is_exact():
    mu = np.random.default_rng(0).standard_normal(8)
    np.testing.assert_array_equal(taskgen.instantiate_object(mu, 0.0, stream(0, "x")), mu)


def test_instantiate_noise_energy_monte_carlo():
    e, eps, n = 64, 0.1, 10_000
    rng = np.random.default_rng(1)
    mu = rng.standard_normal(e)
    mu /= np.linalg.norm(mu)
    draws = taskgen.instantiate_object(np.broadcast_to(mu, (n, e)), eps, stream(1, "mc"))
    energy = ((draws - mu / np.sqrt(1 + eps**2)) ** 2).sum(axis=1).mean()
    expected = eps**2 / (1 + eps**2)
    assert expected == pytest.approx(0.0099, abs=1e-4)
    assert energy == pytest.approx(expected, rel=0.02)


def test_instantiate_redraws_noise():
    rng = stream(2, "noise")
    mu = np.zeros(16)
    assert not np.array_equal(taskgen.instantiate_object(mu, 0.1, rng), taskgen.instantiate_object(mu, 0.1, rng))


def test_instantiate_rejects_negative_eps():
    with pytest.raises(ConfigError):
        taskgen.instantiate_object(np.zeros(3), -0.1, stream(0))


def test_test_batch_layout(table):
    b = taskgen.sample_batch(table, "test", 8, 32, 0.1, stream(0, "b"))
    assert b.x.shape == (32, 64, 16)
    assert np.all(b.x[:, :, 15] == 0)
    objs, labs = b.pair_ids[..., 0], b.pair_ids[..., 1]
    for i in range(32):
        assert (objs[i, :-1] == objs[i, -1]).sum() == 1
        assert (labs[i, :-1] == labs[i, -1]).sum() == 1
        assert b.target[i] == labs[i, -1]
    # label columns are exact copies of the label means
    np.testing.assert_array_equal(b.x[:, :, 1:-1:2], np.transpose(table.label_mu[labs[:, :-1]], (0, 2, 1)).astype(np.float32))


def test_test_query_slot_is_spread(table):
    b = taskgen.sample_batch(table, "test", 8, 2000, 0.1, stream(1, "b"))
    slot = np.argmax(b.pair_ids[:, :-1, 0] == b.pair_ids[:, -1:, 0], axis=1)
    counts = np.bincount(slot, minlength=7)
    assert counts.min() > 200  # 2000/7 ~ 286 per slot


def test_test_mapping_is_a_function(table):
    b = taskgen.sample_batch(table, "test", 8, 64, 0.1, stream(2, "b"))
    for row in b.pair_ids:
        seen = {}
        for o, lab in row:
            assert seen.setdefault(int(o), int(lab)) == lab


def test_iw_query_absent_from_context(table):
    b = taskgen.sample_batch(table, TaskKind.IW, 8, 64, 0.1, stream(3, "b"))
    for row in b.pair_ids:
        assert row[-1, 0] not in row[:-1, 0]
        assert row[-1, 1] == table.label_of(row[-1, 0])


def test_ic_uses_no_training_vector(table):
    b = taskgen.sample_batch(table, "ic", 8, 16, 0.1, stream(4, "b"))
    train = {v.astype(np.float32).tobytes() for v in np.concatenate([table.object_mu, table.label_mu])}
    fresh = np.concatenate([b.object_mu.reshape(-1, 64), b.label_mu.reshape(-1, 64)])
    assert not any(v.astype(np.float32).tobytes() in train for v in fresh)
    cols = np.transpose(b.x, (0, 2, 1)).reshape(-1, 64)
    assert not any(c.tobytes() in train for c in cols)


def test_ic2_correlations(table):
    b = taskgen.sample_batch(table, "ic2", 8, 256, 0.1, stream(5, "b"))
    objs = b.pair_ids[..., 0]
    obj_cols = np.transpose(b.x[:, :, 0::2], (0, 2, 1))
    obj_dots = (obj_cols * table.object_mu[objs]).sum(-1)
    assert obj_dots.mean() > 0.5
    lab_cols = np.transpose(b.x[:, :, 1:-1:2], (0, 2, 1))
    train_labels = table.label_mu[table.label_of(objs[:, :-1])]
    lab_dots = (lab_cols * train_labels).sum(-1).ravel()
    # mean of n products with sd ~ 1/sqrt(e): 4 standard errors
    assert abs(lab_dots.mean()) < 4 / np.sqrt(64) / np.sqrt(lab_dots.size)
    # labels stay consistent inside each sequence
    q = b.pair_ids[:, -1]
    for row, (o, lab) in zip(b.pair_ids, q):
        assert lab in row[:-1, 1][row[:-1, 0] == o]


def test_kinds_share_shapes(table):
    shapes = set()
    for kind in TaskKind:
        b = taskgen.sample_batch(table, kind, 6, 8, 0.1, stream(6, kind.value))
        shapes.add((b.x.shape, b.target.shape, b.pair_ids.shape, b.label_mu.shape[-2:]))
        assert b.kind is kind
        assert np.all(b.x[:, :, -1] == 0)
    assert len(shapes) == 1


def test_sample_batch_errors(table):
    small = taskgen.make_table(4, 4, 8, seed=0)
    with pytest.raises(ConfigError):
        taskgen.sample_batch(small, "test", 8, 2, 0.1, stream(0))
    with pytest.raises(ConfigError):
        taskgen.sample_batch(small, "iw", 5, 2, 0.1, stream(0))
    with pytest.raises(ConfigError):
        taskgen.sample_batch(table, "test", 1, 2, 0.1, stream(0))
    with pytest.raises(ConfigError):
        taskgen.sample_batch(table, "bogus", 4, 2, 0.1, stream(0))


def test_sample_batch_reproducible(table):
    a = taskgen.sample_batch(table, "ic2", 8, 8, 0.1, stream(9, "r"))
    b = taskgen.sample_batch(table, "ic2", 8, 8, 0.1, stream(9, "r"))
    assert a.x.tobytes() == b.x.tobytes()
    np.testing.assert_array_equal(a.target, b.target)


def test_dump_round_trip(tmp_path, table):
    b = taskgen.sample_batch(table, "iw", 4, 3, 0.1, stream(7))
    path = tmp_path / "batch.txt"
    taskgen.dump_batch(b, path)
    header = path.read_text().splitlines()[0].split()
    assert header == ["64", "8", "3", "iw", "0.1"]
    x, kind, eps = taskgen.load_dump(path)
    assert kind is TaskKind.IW and eps == 0.1
    np.testing.assert_array_equal(x.astype(np.float32), b.x)
