import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fecanet import io
from fecanet.cli import main
from fecanet.errors import FormatError, ValidationError
from fecanet.pipeline import synthetic_episodes

finite_f32 = arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
                    elements=st.floats(-1e6, 1e6, width=32))


def reference_decode(buf: bytes) -> np.ndarray:
    """Independent reader written straight from the byte layout."""
    assert buf[:4] == b"FECA"
    version, dtype, rank = struct.unpack("<IBB", buf[4:10])
    assert (version, dtype) == (1, 0)
    dims = struct.unpack(f"<{rank}Q", buf[10:10 + 8 * rank])
    n = int(np.prod(dims)) if rank else 1
    vals = struct.unpack(f"<{n}f", buf[10 + 8 * rank:])
    return np.array(vals, dtype=np.float32).reshape(dims)


@given(finite_f32)
def test_container_round_trip_is_bit_exact(a):
    buf = io.encode_tensor(a)
    back, used = io.decode_tensor(buf)
    assert used == len(buf) and back.shape == a.shape and back.tobytes() == a.tobytes()
    assert reference_decode(buf).tobytes() == a.tobytes()


def test_container_file_round_trip(tmp_path, rng):
    a = rng.normal(size=(2, 3, 4)).astype(np.float32)
    io.write_tensor(tmp_path / "a.feca", a)
    assert io.read_tensor(tmp_path / "a.feca").tobytes() == a.tobytes()


def test_truncated_payload_names_byte_counts(tmp_path):
    buf = io.encode_tensor(np.ones((2, 3), np.float32))
    (tmp_path / "t.feca").write_bytes(buf[:-5])
    with pytest.raises(FormatError, match="expected 24 bytes, found 19"):
        io.read_tensor(tmp_path / "t.feca")


def test_bad_magic_and_trailing_bytes(tmp_path):
    buf = io.encode_tensor(np.ones(3, np.float32))
    (tmp_path / "m.feca").write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(FormatError, match="magic"):
        io.read_tensor(tmp_path / "m.feca")
    (tmp_path / "x.feca").write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        io.read_tensor(tmp_path / "x.feca")


def test_bundle_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3,)).astype(np.float32), "bank/q0": np.zeros((1, 2, 2), np.float32)}
    io.write_bundle(tmp_path / "b.feck", tensors, {"steps": 3})
    back, meta = io.read_bundle(tmp_path / "b.feck")
    assert meta == {"steps": 3} and list(back) == list(tensors)
    assert all(back[k].tobytes() == v.tobytes() for k, v in tensors.items())
    raw = (tmp_path / "b.feck").read_bytes()
    (tmp_path / "c.feck").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        io.read_bundle(tmp_path / "c.feck")


def test_pgm_extremes(tmp_path):
    io.write_pgm(tmp_path / "fg.pgm", np.ones((3, 4), np.uint8))
    raw = (tmp_path / "fg.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and set(raw[-12:]) == {255}
    io.write_pgm(tmp_path / "bg.pgm", np.zeros((3, 4), np.uint8))
    assert set((tmp_path / "bg.pgm").read_bytes()[-12:]) == {0}
    with pytest.raises(ValidationError):
        io.write_pgm(tmp_path / "bad.pgm", np.zeros((1, 3, 4)))


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 1)))
def test_pgm_round_trip_against_reference_reader(tmp_path_factory, mask):
    path = tmp_path_factory.mktemp("pgm") / "m.pgm"
    io.write_pgm(path, mask)
    raw = path.read_bytes()
    header, w, h, maxval, pixels = raw.split(maxsplit=4)
    assert (header, int(w), int(h), int(maxval)) == (b"P5", mask.shape[1], mask.shape[0], 255)
    assert np.array_equal(np.frombuffer(pixels, np.uint8).reshape(mask.shape) // 255, mask)
    assert np.array_equal(io.read_mask(path), mask)


def test_pgm_header_comments_and_truncation(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\xff\x00")
    assert io.read_mask(tmp_path / "c.pgm").tolist() == [[1, 0]]
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\xff")
    with pytest.raises(FormatError, match="expected 4 bytes, found 1"):
        io.read_pgm(tmp_path / "t.pgm")
    (tmp_path / "g.pgm").write_bytes(b"P5\n2 1\n255\n\x80\x00")
    with pytest.raises(ValidationError):
        io.read_mask(tmp_path / "g.pgm")


def test_manifest_round_trip(tmp_path):
    eps = synthetic_episodes(2, 16, seed=4, shots=2)
    manifest = io.write_manifest(eps, tmp_path)
    back = io.load_manifest(manifest)
    for a, b in zip(eps, back):
        assert (a.class_id, a.query_id) == (b.class_id, b.query_id)
        assert np.array_equal(a.query_image.astype(np.float32), b.query_image)
        assert np.array_equal(a.query_mask, b.query_mask)
        assert len(b.supports) == 2
    doc = json.loads(manifest.read_text())
    del doc["episodes"][0]["query_id"]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="query_id"):
        io.load_manifest(manifest)


# -- command line --------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["export-fixtures", "--out", str(root / "data"), "--episodes", "2", "--image-size", "24",
                 "--seed", "2"]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"), "--out", str(root / "ck.feck"),
                 "--steps", "2", "--batch-size", "2", "--image-size", "24", "--loss-log", str(root / "loss.csv"),
                 "--save-bank"]) == 0
    return root


def test_train_writes_checkpoint_and_loss_log(trained):
    tensors, meta = io.read_bundle(trained / "ck.feck")
    assert meta["steps"] == 2 and any(k.startswith("bank/") for k in tensors)
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss" and len(rows) == 3


def test_eval_json_and_masks(trained, capsys):
    rc = main(["eval", "--manifest", str(trained / "data" / "manifest.json"), "--checkpoint",
               str(trained / "ck.feck"), "--out", str(trained / "m.json"), "--masks-dir", str(trained / "masks")])
    assert rc == 0
    report = json.loads((trained / "m.json").read_text())
    assert set(report) == {"miou", "fb_iou", "per_class_iou"}
    assert 0.0 <= report["miou"] <= 1.0
    assert sorted(p.name for p in (trained / "masks").iterdir()) == ["q0.pgm", "q1.pgm"]


def test_run_episode_outputs(trained):
    rc = main(["run-episode", "--manifest", str(trained / "data" / "manifest.json"), "--checkpoint",
               str(trained / "ck.feck"), "--index", "1", "--mask-out", str(trained / "one.pgm"),
               "--prob-out", str(trained / "one.feca")])
    assert rc == 0
    assert io.read_mask(trained / "one.pgm").shape == (24, 24)
    probs = io.read_tensor(trained / "one.feca")
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)


def test_oracle_diff_passes(capsys):
    assert main(["oracle-diff", "--seed", "7", "--cases", "5"]) == 0
    assert "max abs diff" in capsys.readouterr().out


def test_grad_check_small(capsys):
    assert main(["grad-check", "--coords", "3", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    for mod in ("fem", "crm", "enc", "dec"):
        assert mod in out


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert main(["eval", "--manifest", str(tmp_path / "missing.json"), "--checkpoint", str(tmp_path / "x")]) == 3
    assert main(["export-fixtures", "--out", str(tmp_path / "d"), "--k", "4"]) == 4
