import math

import numpy as np
import pytest

from izsd.losses import HyperParams
from izsd.protocol import (
    BACKGROUND,
    ClassSplit,
    Dataset,
    ProtocolError,
    SyntheticSpec,
    generate_synthetic,
    reports_to_csv,
    run_protocol,
    separation_stats,
    training_data,
)
from izsd.trainer import TrainConfig

FAST = TrainConfig(learning_rate=0.1, epochs=30)


def test_generator_deterministic():
    spec = SyntheticSpec(num_classes=4, scenes_per_class=6, seed=3)
    assert generate_synthetic(spec).dataset.dumps() == generate_synthetic(spec).dataset.dumps()
    other = SyntheticSpec(num_classes=4, scenes_per_class=6, seed=4)
    assert generate_synthetic(other).dataset.dumps() != generate_synthetic(spec).dataset.dumps()


def test_noise_free_foreground_at_center():
    data = generate_synthetic(SyntheticSpec(num_classes=3, scenes_per_class=4, noise_sigma=0.0, seed=1))
    centers = data.table.embeddings @ data.hidden_map.T
    for sc in data.dataset.train + data.dataset.test:
        for p in sc.proposals:
            if p.label != BACKGROUND:
                assert np.array_equal(p.feature, centers[p.label])


def test_background_count_exact():
    spec = SyntheticSpec(num_classes=10, scenes_per_class=10, proposals_per_scene=10, bg_fraction=0.5, seed=2)
    data = generate_synthetic(spec)
    labels = [p.label for sc in data.dataset.train + data.dataset.test for p in sc.proposals]
    assert len(labels) == 1000
    assert labels.count(BACKGROUND) == 500


def test_one_object_per_foreground_proposal():
    data = generate_synthetic(SyntheticSpec(num_classes=3, scenes_per_class=4, seed=5))
    for sc in data.dataset.test:
        fg = [p for p in sc.proposals if p.label != BACKGROUND]
        assert len(fg) == len(sc.ground_truth)
        assert len({g.class_id for g in sc.ground_truth}) == 1


def test_dataset_round_trip():
    data = generate_synthetic(SyntheticSpec(num_classes=3, scenes_per_class=4, seed=6))
    text = data.dataset.dumps()
    assert Dataset.loads(text).dumps() == text


def test_separation_condition():
    stats = separation_stats(generate_synthetic(SyntheticSpec(seed=0)))
    assert stats["within_p95"] < stats["between_mean"]


def test_split_schedule():
    split = ClassSplit.even(20, 4)
    assert split.groups[1] == (6, 7, 8, 9, 10)
    r2 = split.registry(2)
    assert (r2.n_old, r2.n_new, r2.n_unseen) == (5, 5, 10)
    assert split.registry(4).n_unseen == 0
    assert ClassSplit.loads(split.dumps()) == split
    with pytest.raises(ProtocolError):
        split.registry(5)
    with pytest.raises(ValueError):
        ClassSplit(((1, 2), (2, 3)))
    with pytest.raises(ValueError):
        ClassSplit.even(20, 3)


def test_training_data_selects_groups():
    data = generate_synthetic(SyntheticSpec(num_classes=4, scenes_per_class=4, seed=7))
    feats, ids = training_data(data.dataset.train, {1, 2})
    assert set(feats.labels) <= {0, 1, 2}
    assert len(ids) == len(feats) == len(set(ids))
    with pytest.raises(ProtocolError):
        training_data(data.dataset.test, {1})


@pytest.fixture(scope="module")
def full_run():
    data = generate_synthetic(SyntheticSpec(seed=29))
    split = ClassSplit.even(20, 4)
    snapshots = []
    reports, state = run_protocol(
        split, data.dataset, data.table, HyperParams(), FAST, on_step=lambda t, s, r: snapshots.append((t, s))
    )
    return data, split, reports, state, snapshots


def test_reports_one_per_group(full_run):
    _, split, reports, _, _ = full_run
    assert [r.step for r in reports] == [1, 2, 3, 4]
    csv_text = reports_to_csv(reports)
    rows = [line.split(",") for line in csv_text.splitlines()[1:]]
    seen_map = [r for r in rows if r[1] == "seen" and r[2] == "mAP"]
    assert len(seen_map) == 4


def test_bank_grows_by_group(full_run):
    _, split, _, _, snapshots = full_run
    for t, st in snapshots:
        assert set(st.bank.models) == set(c for g in split.groups[:t] for c in g)


def test_last_step_routes_everything_seen(full_run):
    _, _, reports, _, _ = full_run
    last = reports[-1]
    assert last.get("routing", "seen_recall") == 1.0
    assert last.get("routing", "seen_as_unseen") == 0
    assert math.isnan(last.get("unseen", "mAP"))


def test_seen_map_rises(full_run):
    _, _, reports, _, _ = full_run
    assert reports[-1].get("seen", "mAP") >= reports[0].get("seen", "mAP")


def test_single_step_schedule():
    data = generate_synthetic(SyntheticSpec(num_classes=4, scenes_per_class=40, seed=8))
    split = ClassSplit(((1, 2, 3, 4),))
    reports, state = run_protocol(split, data.dataset, data.table, HyperParams(memory_size=20), FAST, visual_dim=16)
    assert len(reports) == 1
    assert reports[0].get("routing", "seen_recall") == 1.0
    assert set(state.bank.models) == {1, 2, 3, 4}


def test_split_outside_table_rejected():
    data = generate_synthetic(SyntheticSpec(num_classes=4, scenes_per_class=4, seed=9))
    with pytest.raises(ProtocolError):
        run_protocol(ClassSplit(((1, 2), (3, 9))), data.dataset, data.table, HyperParams(), FAST)


def test_memory_smaller_than_seen_rejected():
    data = generate_synthetic(SyntheticSpec(num_classes=4, scenes_per_class=30, seed=10))
    with pytest.raises(ProtocolError):
        run_protocol(ClassSplit.even(4, 1), data.dataset, data.table, HyperParams(memory_size=3), FAST)
