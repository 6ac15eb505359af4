import collections

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hmfdetect import dataset
from hmfdetect.errors import ConfigError, EmptyClassError, StratificationError
from hmfdetect.records import AddressRecord, Label


@pytest.mark.parametrize("n, want", [(2800, (1792, 448, 560)), (10, (6, 2, 2)), (280, (179, 45, 56)), (3, (2, 0, 1))])
def test_split_sizes(n, want):
    assert dataset.split(n, seed=5).sizes() == want


def test_apportion_tie_order():
    # equal remainders go to train first, then val
    assert dataset.apportion(2, (1 / 3, 1 / 3, 1 / 3)) == (1, 1, 0)
    assert dataset.apportion(1, (0.5, 0.5, 0.0)) == (1, 0, 0)


def test_stratified_split_per_class():
    labels = np.array([1] * 280 + [0] * 2520)
    ds = dataset.split(2800, seed=0, stratify_labels=labels)
    pos = [sum(labels[list(getattr(ds, s))]) for s in ("train", "val", "test")]
    assert pos == [179, 45, 56]
    assert ds.sizes() == (179 + 1613, 45 + 403, 56 + 504)
    assert ds.stratified


def test_split_errors():
    with pytest.raises(ConfigError):
        dataset.split(10, ratios=(0.5, 0.3, 0.3))
    with pytest.raises(ConfigError):
        dataset.split(2)
    with pytest.raises(StratificationError):
        dataset.split(10, stratify_labels=[1, 1] + [0] * 8)


@given(n=st.integers(3, 500), seed=st.integers(0, 2**32), strat=st.booleans(), frac=st.floats(0.0, 1.0))
def test_split_partitions(n, seed, strat, frac):
    labels = None
    if strat:
        n_pos = int(round(frac * n))
        if n_pos < 3 or n - n_pos < 3:
            return
        labels = np.array([1] * n_pos + [0] * (n - n_pos))
    ds = dataset.split(n, seed=seed, stratify_labels=labels)
    every = ds.train + ds.val + ds.test
    assert sorted(every) == list(range(n))
    assert ds == dataset.split(n, seed=seed, stratify_labels=labels)
    if labels is not None:
        for cls in (0, 1):
            m = int(np.sum(labels == cls))
            for part, r in zip((ds.train, ds.val, ds.test), dataset.DEFAULT_RATIOS):
                assert abs(int(np.sum(labels[list(part)] == cls)) - m * r) <= 1


@given(n=st.integers(0, 10_000), a=st.integers(0, 100), b=st.integers(0, 100))
def test_apportion_sums_and_floors(n, a, b):
    if a + b > 100:
        return
    ratios = (a / 100, b / 100, (100 - a - b) / 100)
    sizes = dataset.apportion(n, ratios)
    assert sum(sizes) == n
    assert all(abs(s - n * r) < 1 for s, r in zip(sizes, ratios))


def test_assemble_default_ratio_counts(make_world):
    scenes, recs = make_world(280, 10_000)
    tiles = dataset.assemble(recs, scenes, dataset.AssemblyConfig(side_m=10.0, seed=3))
    labels = collections.Counter(t.label for t in tiles)
    assert len(tiles) == 2800 and labels[1] == 280 and labels[0] == 2520


def test_assemble_clamps_to_pool(make_world):
    scenes, recs = make_world(5, 5)
    tiles = dataset.assemble(recs, scenes, dataset.AssemblyConfig(side_m=10.0))
    assert [t.label for t in tiles] == [1] * 5 + [0] * 5


def test_assemble_no_positives(make_world):
    scenes, recs = make_world(0, 10)
    with pytest.raises(EmptyClassError):
        dataset.assemble(recs, scenes, dataset.AssemblyConfig(side_m=10.0))


def test_assemble_skips_outside_records(make_world):
    scenes, recs = make_world(3, 20)
    far = AddressRecord("far", "x", "A1", Label.SINGLE_FAMILY, 80.0, 170.0)
    tally = collections.Counter()
    tiles = dataset.assemble(recs + [far], scenes, dataset.AssemblyConfig(negative_ratio=100, side_m=10.0), tally)
    assert tally["outside"] == 1 and len(tiles) == 23


@given(n_pos=st.integers(1, 12), n_neg=st.integers(0, 40), ratio=st.floats(0.1, 5.0), seed=st.integers(0, 1000))
def test_assemble_properties(n_pos, n_neg, ratio, seed):
    scenes, recs = dataset_world(n_pos, n_neg)
    cfg = dataset.AssemblyConfig(negative_ratio=ratio, side_m=10.0, seed=seed)
    tiles = dataset.assemble(recs, scenes, cfg)
    pos_ids = {r.address_id for r in recs[:n_pos]}
    neg_ids = {r.address_id for r in recs[n_pos:]}
    got_pos = {t.address_id for t in tiles if t.label == 1}
    got_neg = {t.address_id for t in tiles if t.label == 0}
    assert got_pos == pos_ids and got_neg <= neg_ids
    assert len(got_neg) == min(n_neg, int(np.floor(n_pos * ratio + 0.5)))
    again = dataset.assemble(recs, scenes, cfg)
    assert [t.address_id for t in again] == [t.address_id for t in tiles]


def dataset_world(n_pos, n_neg):
    from conftest import grid_world

    return grid_world(n_pos, n_neg, cols=10)


def test_manifest_round_trip(tmp_path, make_world):
    scenes, recs = make_world(4, 8)
    tiles = dataset.assemble(recs, scenes, dataset.AssemblyConfig(negative_ratio=2, side_m=10.0))
    ds = dataset.split(len(tiles), seed=1)
    rows = dataset.manifest_rows(tiles, ds)
    dataset.write_manifest(tmp_path / "m.csv", rows)
    assert dataset.read_manifest(tmp_path / "m.csv") == rows
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head == "address_id,label,split,scene_id,center_x,center_y"


def test_fixture_counts(fixture_data):
    recs = fixture_data.records
    assert len(recs) == 440
    assert len(fixture_data.hidden_ids) == 40
    assert sum(r.official_label == Label.MULTI_FAMILY for r in recs) == 40
    assert sum(fixture_data.truth.values()) == 80
    assert len({r.address_id for r in recs}) == 440


def test_fixture_records_land_in_scenes(fixture_data):
    tiles = [dataset.crop_record(r, fixture_data.scenes, 50.0) for r in fixture_data.records]
    assert all(t is not None and t.pixels.shape == (100, 100, 3) and not t.padded for t in tiles)


def test_fixture_deterministic(fixture_data):
    again = dataset.synthesize_fixture(dataset.FixtureSpec(), seed=0)
    for a, b in zip(fixture_data.scenes, again.scenes):
        assert a.pixels.tobytes() == b.pixels.tobytes()
    assert again.records == fixture_data.records
    other = dataset.synthesize_fixture(dataset.FixtureSpec(), seed=1)
    assert other.scenes[0].pixels.tobytes() != again.scenes[0].pixels.tobytes()


def test_fixture_strength_zero_hides_the_signature():
    # with no signature, the imagery does not depend on which addresses are multi-family
    a = dataset.synthesize_fixture(dataset.FixtureSpec(strength=0.0), seed=4)
    b = dataset.synthesize_fixture(dataset.FixtureSpec(strength=0.0, n_hidden=0), seed=4)
    assert a.truth != b.truth
    for sa, sb in zip(a.scenes, b.scenes):
        assert sa.pixels.tobytes() == sb.pixels.tobytes()


def test_fixture_pattern_larger_than_tile():
    with pytest.raises(ConfigError):
        dataset.synthesize_fixture(dataset.FixtureSpec(pattern_m=60.0), seed=0)


def test_fixture_files(tmp_path):
    spec = dataset.FixtureSpec(n_single=20, n_hidden=3, n_multi=4)
    fx = dataset.synthesize_fixture(spec, seed=2)
    dataset.write_fixture(fx, tmp_path)
    oracle = dataset.read_oracle(tmp_path / "oracle.csv")
    assert sorted(oracle) == fx.hidden_ids and set(oracle.values()) == {1}
    assert (tmp_path / "oracle.csv").read_text().startswith("address_id,true_label,official_label\n")
    assert len(list((tmp_path / "scenes").glob("*.ppm"))) == 1
