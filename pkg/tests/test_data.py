import numpy as np
import pytest
from scipy import stats

from unigrf import data as D
from unigrf.errors import ContractError, DataError
from unigrf.synthetic import generate_ratings, write_ratings


def write(tmp_path, lines, name="ratings.dat"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


def test_parse_dat_row_and_binarization(tmp_path):
    p = write(tmp_path, ["1::1193::5::978300760", "1::661::3::978302109"])
    inter = D.parse_interactions(p, "dat")
    recs = list(inter.records())
    assert recs[0] == D.InteractionRecord("1", "1193", 5.0, 978300760, 1)
    assert recs[1].label == 0
    assert inter.catalog.num_users == 1 and inter.catalog.num_items == 2


def test_catalog_never_assigns_padding(tmp_path):
    p = write(tmp_path, ["2::7::4::1", "1::3::4::2", "1::7::2::3"])
    cat = D.parse_interactions(p, "dat").catalog
    assert sorted(cat.item_index.values()) == [1, 2]
    assert cat.item_ids == ["3", "7"] and cat.user_ids == ["1", "2"]


def test_malformed_rows_over_limit_fail_with_samples(tmp_path):
    p = write(tmp_path, ["1::1::5::1", "garbage line", "1::2::4::2"])
    with pytest.raises(DataError, match="garbage"):
        D.parse_interactions(p, "dat")


def test_few_malformed_rows_are_skipped(tmp_path):
    lines = [f"1::{i}::4::{i}" for i in range(1, 201)] + ["1::x::4::9"]
    inter = D.parse_interactions(write(tmp_path, lines), "dat")
    assert len(inter) == 200 and inter.malformed == 1


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        D.parse_interactions(tmp_path / "missing.dat", "dat")


def test_csv_header_required(tmp_path):
    p = write(tmp_path, ["a,b,c,d", "1,2,3,4"], "r.csv")
    with pytest.raises(DataError):
        D.parse_interactions(p, "csv")


def _inter(tmp_path, rows):
    return D.parse_interactions(write(tmp_path, [f"{u}::{i}::{r}::{t}" for u, i, r, t in rows]), "dat")


def test_split_rule_four_items(tmp_path):
    # items a..d = 11..14, shuffled in the file but timestamped ascending
    rows = [(1, 13, 4, 30), (1, 11, 5, 10), (1, 14, 2, 40), (1, 12, 1, 20)]
    inter = _inter(tmp_path, rows)
    seqs = D.build_sequences(inter, 8)
    idx = inter.catalog.item_index
    s = seqs[0]
    assert s.items.tolist() == [0] * 6 + [idx["11"], idx["12"]]
    assert s.behaviors.tolist() == [0] * 6 + [1, 0]
    assert (s.valid_item, s.test_item) == (idx["13"], idx["14"])
    assert (s.valid_label, s.test_label) == (1, 0)


def test_exactly_three_interactions(tmp_path):
    inter = _inter(tmp_path, [(1, 5, 4, 1), (1, 6, 4, 2), (1, 7, 4, 3)])
    s = D.build_sequences(inter, 5)[0]
    assert s.items.tolist() == [0, 0, 0, 0, 1] and s.valid_item == 2 and s.test_item == 3


def test_short_users_dropped(tmp_path):
    inter = _inter(tmp_path, [(1, 5, 4, 1), (1, 6, 4, 2), (2, 5, 4, 1), (2, 6, 4, 2), (2, 7, 4, 3)])
    seqs = D.build_sequences(inter, 4)
    assert len(seqs) == 1 and inter.catalog.user_ids[seqs.user[0]] == "2"


def test_truncation_keeps_latest(tmp_path):
    rows = [(1, i, 4, i) for i in range(1, 301)]
    inter = _inter(tmp_path, rows)
    s = D.build_sequences(inter, 200)[0]
    ids = [int(inter.catalog.item_ids[i - 1]) for i in s.items]
    assert ids == list(range(99, 299))


def test_timestamp_ties_keep_file_order(tmp_path):
    inter = _inter(tmp_path, [(1, 9, 4, 5), (1, 8, 4, 5), (1, 7, 4, 5), (1, 6, 4, 5)])
    s = D.build_sequences(inter, 4)[0]
    ids = [inter.catalog.item_ids[i - 1] for i in s.items if i]
    assert ids == ["9", "8"]


def test_n_below_three_rejected(tmp_path):
    with pytest.raises(ContractError):
        D.build_sequences(_inter(tmp_path, [(1, 1, 4, 1)] * 3), 2)


@pytest.fixture(scope="module")
def synthetic_seqs(tmp_path_factory):
    p = write_ratings(tmp_path_factory.mktemp("syn") / "r.dat", generate_ratings(num_users=60, seed=1))
    inter = D.parse_interactions(p, "dat")
    return inter, D.build_sequences(inter, 16)


def test_sequence_invariants(synthetic_seqs):
    inter, seqs = synthetic_seqs
    counts = np.bincount(inter.user)
    for row in range(len(seqs)):
        s = seqs[row]
        k = s.num_valid
        assert not s.valid_mask[: s.n - k].any() and s.valid_mask[s.n - k:].all()
        assert (s.behaviors[~s.valid_mask] == 0).all()
        assert k == min(s.n, counts[s.user] - 2)


def test_store_round_trip(tmp_path, synthetic_seqs):
    inter, seqs = synthetic_seqs
    D.save_store(tmp_path / "store", seqs, inter.catalog, D.dataset_statistics(inter))
    back, cat, manifest = D.load_store(tmp_path / "store")
    for name, arr in seqs.to_arrays().items():
        np.testing.assert_array_equal(getattr(back, name), arr)
    assert cat.item_ids == inter.catalog.item_ids
    assert manifest["n"] == 16 and manifest["num_items"] == inter.catalog.num_items


def test_prepare_is_idempotent(tmp_path):
    raw = write_ratings(tmp_path / "r.dat", generate_ratings(num_users=20, seed=2))
    first = D.prepare_data(raw, "dat", 10, tmp_path / "store")
    h = D.manifest_hash(tmp_path / "store")
    mtime = (tmp_path / "store" / "sequences.bin").stat().st_mtime_ns
    assert D.prepare_data(raw, "dat", 10, tmp_path / "store") == first
    assert D.manifest_hash(tmp_path / "store") == h
    assert (tmp_path / "store" / "sequences.bin").stat().st_mtime_ns == mtime


def test_csv_and_dat_give_identical_stores(tmp_path):
    rng = np.random.default_rng(4)
    rows = [(int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(t)) for t in rng.permutation(20)]
    D.prepare_data(write_ratings(tmp_path / "r.dat", rows, "dat"), "dat", 6, tmp_path / "a")
    D.prepare_data(write_ratings(tmp_path / "r.csv", rows, "csv"), "csv", 6, tmp_path / "b")
    for f in D.STORE_FILES:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_negatives_forced_and_empty():
    rng = np.random.default_rng(0)
    assert D.sample_uniform_negatives(10, set(range(1, 10)), 1, rng).tolist() == [10]
    assert D.sample_uniform_negatives(10, set(), 0, rng).size == 0
    with pytest.raises(ContractError):
        D.sample_uniform_negatives(10, set(range(1, 10)), 2, rng)


def test_negatives_respect_exclusion_and_are_distinct():
    rng = np.random.default_rng(1)
    for _ in range(200):
        exclude = rng.choice(np.arange(1, 41), size=10, replace=False)
        s = D.sample_uniform_negatives(40, exclude, 15, rng)
        assert len(set(s.tolist())) == 15 and not set(s.tolist()) & set(exclude.tolist())
        assert s.min() >= 1 and s.max() <= 40


def test_negatives_deterministic_per_user_stream():
    a = D.sample_uniform_negatives(100, [], 5, D.user_rng(7, 3, 1))
    b = D.sample_uniform_negatives(100, [], 5, D.user_rng(7, 3, 1))
    assert a.tolist() == b.tolist()


def test_negatives_uniform_chi_square():
    rng = np.random.default_rng(123)
    counts = np.zeros(101)
    for _ in range(10_000):
        counts[D.sample_uniform_negatives(100, [], 10, rng)] += 1
    _, p = stats.chisquare(counts[1:])
    assert p > 1e-3
