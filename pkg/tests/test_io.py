import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradiend import io as gio
from gradiend.core import init_gradiend
from gradiend.gradients import build_flat_index


def independent_read(blob):
    """Minimal reader written straight from the layout description."""
    assert blob[:4] == b"GRD1"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    payload = blob[8 + hlen:]
    out = {}
    for e in header["entries"]:
        raw = payload[e["offset"]: e["offset"] + e["length"]]
        count = e["length"] // 4
        vals = struct.unpack(f"<{count}f", raw)
        out[e["name"]] = np.array(vals, dtype=np.float32).reshape(e["shape"])
    return header, out


def test_layout_matches_independent_reader():
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([-1.5], np.float32),
              "s": np.array(3.25, np.float32)}
    blob = gio.save_container(arrays)
    header, got = independent_read(blob)
    assert header["version"] == 1
    assert [e["dtype"] for e in header["entries"]] == ["f32"] * 3
    for k, v in arrays.items():
        assert got[k].tobytes() == v.tobytes()
    back = gio.load_container(blob)
    assert back["s"].shape == ()


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(width=32, allow_nan=False)),
                       max_size=4))
def test_roundtrip_bit_exact(arrays):
    back = gio.load_container(gio.save_container(arrays))
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def _blob_with(entries, payload=b"\0" * 16, version=1):
    head = json.dumps({"version": version, "entries": entries}).encode()
    return b"GRD1" + struct.pack("<I", len(head)) + head + payload


@pytest.mark.parametrize("blob, msg", [
    (b"XXXX\0\0\0\0", "magic"),
    (b"GRD1" + struct.pack("<I", 100) + b"{}", "truncated header"),
    (_blob_with([], version=2), "version"),
    (_blob_with([{"name": "a", "shape": [2], "dtype": "f64", "offset": 0, "length": 16}]), "dtype"),
    (_blob_with([{"name": "a", "shape": [3], "dtype": "f32", "offset": 0, "length": 8}]), "shape"),
    (_blob_with([{"name": "a", "shape": [4], "dtype": "f32", "offset": 8, "length": 16}]), "truncated payload"),
    (_blob_with([{"name": "a", "shape": [2], "dtype": "f32", "offset": 0, "length": 8},
                 {"name": "b", "shape": [2], "dtype": "f32", "offset": 4, "length": 8}]), "overlapping"),
    (_blob_with([{"name": "a", "shape": [1], "dtype": "f32", "offset": 0, "length": 4},
                 {"name": "a", "shape": [1], "dtype": "f32", "offset": 4, "length": 4}]), "duplicate"),
])
def test_malformed_containers(blob, msg):
    with pytest.raises(gio.ContainerError, match=msg):
        gio.load_container(blob)


def test_duplicate_names_rejected_on_save():
    with pytest.raises(ValueError):
        gio.save_container([("a", np.zeros(1)), ("a", np.zeros(1))])


def test_model_checkpoint_roundtrip(tmp_path, tiny_model):
    p = tmp_path / "m.grd1"
    gio.save_model(p, tiny_model)
    back = gio.load_model(p)
    assert back.config == tiny_model.config
    assert back.tobytes() == tiny_model.tobytes()


def test_gradiend_checkpoint_roundtrip(tmp_path, tiny_model):
    idx = build_flat_index(tiny_model)
    g = init_gradiend(idx.n, 3, index=idx, class_pair=("F", "M"))
    g.b_enc = 0.125
    p = tmp_path / "g.grd1"
    gio.save_gradiend(p, g, {"cor_t": 0.97, "seed": 3})
    back = gio.load_gradiend(p)
    for f in ("w_enc", "w_dec", "b_dec"):
        assert getattr(back, f).tobytes() == getattr(g, f).tobytes()
    assert back.b_enc == 0.125 and back.class_pair == ("F", "M") and back.index == idx
    meta = gio.read_json(str(p) + ".json")
    assert {"class_pair", "n", "sign_standardized", "cor_t", "seed"} <= set(meta)


def test_csv_format(tmp_path):
    rows = [{"name": "a,b", "value": 0.1, "boot_mean": np.float64(1 / 3), "ci_low": 0.0, "ci_high": 1.0,
             "n": np.int64(5)}]
    data = gio.csv_bytes(rows, gio.METRIC_COLUMNS)
    assert data.startswith(b"name,value,boot_mean,ci_low,ci_high,n\r\n")
    assert b'"a,b",0.1,0.3333333333333333,0.0,1.0,5\r\n' in data
    p = tmp_path / "m.csv"
    gio.write_csv(p, rows, gio.METRIC_COLUMNS)
    assert gio.read_csv(p)[0]["name"] == "a,b"
    assert float(gio.read_csv(p)[0]["boot_mean"]) == 1 / 3


def test_sha256_and_json(tmp_path):
    p = tmp_path / "x.json"
    gio.write_json(p, {"b": 1, "a": [1, 2]})
    assert p.read_text().startswith('{\n  "a"')
    assert gio.read_json(p) == {"a": [1, 2], "b": 1}
    import hashlib
    assert gio.sha256_file(p) == hashlib.sha256(p.read_bytes()).hexdigest()
