import numpy as np
import pytest

from cari.data import factor_header, load_rating_csv, read_factor_csv, split, write_factor_csv
from cari.errors import ConfigError, DataError
from cari.synthgen import ScmConfig, generate


def test_split_sizes(synth500):
    tr, va, te = split(synth500, (0.6, 0.2, 0.2), seed=0)
    assert (len(tr), len(va), len(te)) == (300, 100, 100)


def test_split_all_train(synth500):
    tr, va, te = split(synth500, (1, 0, 0), seed=0)
    assert len(tr) == 500 and len(va) == 0 and len(te) == 0


def test_split_is_deterministic_disjoint_and_exhaustive(synth500):
    a = split(synth500, seed=3)
    b = split(synth500, seed=3)
    rows = lambda d: {r.tobytes() for r in d.x}  # noqa: E731
    for p, q in zip(a, b):
        assert rows(p) == rows(q)
    sets = [rows(p) for p in a]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert len(sets[0] | sets[1] | sets[2]) == 500
    assert list(a[0].split[:1]) == ["train"]


def test_split_fraction_sum_error(synth500):
    with pytest.raises(ConfigError):
        split(synth500, (0.5, 0.2, 0.2))


def test_factor_csv_round_trip_is_exact(tmp_path):
    ds = generate(ScmConfig(n=25, seed=1))
    path = tmp_path / "d.csv"
    write_factor_csv(ds, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(factor_header(5, 5, 5))
    assert lines[0].startswith("pa_0,") and lines[0].endswith(",dc_4,y")
    assert len(lines) == 26
    back = read_factor_csv(path)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)
    assert np.array_equal(back.pa, ds.pa) and np.array_equal(back.dc, ds.dc)


def test_factor_csv_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_factor_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("pa_0,y\n0.5,1\n0.1\n")
    with pytest.raises(DataError, match=":3:"):
        read_factor_csv(bad)
    empty = tmp_path / "empty.csv"
    empty.write_text("pa_0,y\n")
    with pytest.raises(DataError):
        read_factor_csv(empty)
    wrong = tmp_path / "wrong.csv"
    wrong.write_text("pa_0,zz,y\n1,2,0\n")
    with pytest.raises(DataError):
        read_factor_csv(wrong)


def test_id_rating_fixture_selects_embedding_path(tmp_path):
    p = tmp_path / "ids.csv"
    p.write_text("user_id,item_id,label\n0,3,1\n2,1,0\n1,0,1\n")
    ds = load_rating_csv(p, "id-rating")
    assert len(ds) == 3
    assert ds.encoder_path == "embedding"
    assert ds.meta["n_users"] == 3 and ds.meta["n_items"] == 4
    assert ds.x.dtype == np.int64


def test_feature_rating_width(tmp_path):
    p = tmp_path / "feat.csv"
    names = [f"f{i}" for i in range(14)]
    rng = np.random.default_rng(0)
    rows = [",".join(map(str, rng.standard_normal(14).round(4))) + f",{i % 2}" for i in range(6)]
    p.write_text(",".join(names + ["label"]) + "\n" + "\n".join(rows) + "\n")
    ds = load_rating_csv(p, "feature-rating")
    assert ds.d_in == 14 and ds.encoder_path == "mlp"


def test_rating_label_threshold(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,item_id,label\n0,0,5\n1,1,2\n0,1,4\n")
    ds = load_rating_csv(p, "id-rating", label_threshold=4)
    assert list(ds.y) == [1, 0, 1]
    with pytest.raises(DataError):
        load_rating_csv(p, "id-rating")


def test_rating_errors(tmp_path):
    header_only = tmp_path / "h.csv"
    header_only.write_text("user_id,item_id,label\n")
    with pytest.raises(DataError):
        load_rating_csv(header_only, "id-rating")
    unknown = tmp_path / "u.csv"
    unknown.write_text("user_id,item_id,rating\n0,0,1\n")
    with pytest.raises(DataError):
        load_rating_csv(unknown, "id-rating")
    malformed = tmp_path / "m.csv"
    malformed.write_text("user_id,item_id,label\n0,0,1\n1,x,0\n")
    with pytest.raises(DataError, match=":3:"):
        load_rating_csv(malformed, "id-rating")
    with pytest.raises(ConfigError):
        load_rating_csv(tmp_path / "none.csv", "id-rating")
    with pytest.raises(ConfigError):
        load_rating_csv(malformed, "graph")


def test_loaders_do_not_modify_inputs(tmp_path):
    p = tmp_path / "ids.csv"
    text = "user_id,item_id,label\n0,3,1\n2,1,0\n"
    p.write_text(text)
    load_rating_csv(p, "id-rating")
    assert p.read_text() == text


def test_sample_view(synth500):
    s = synth500[3]
    assert np.array_equal(s.x, np.concatenate([s.pa, s.nd, s.dc]))
    assert s.y in (0, 1)
