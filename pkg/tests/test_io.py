import numpy as np
import pytest

from srgd import io
from srgd.model import Arch, regnet_init
from srgd.synth import PhantomSpec, make_pair, make_phantom, random_deformation


def test_grid_round_trip_is_bit_exact(tmp_path):
    a = np.random.default_rng(0).normal(size=(2, 5, 7))
    io.write_grid(tmp_path / "a.srgd", a)
    assert np.array_equal(io.read_grid(tmp_path / "a.srgd"), a)
    b = np.arange(12).reshape(3, 4)
    assert np.array_equal(io.decode_grid(io.encode_grid(b, "u8"))[0], b)


def test_grid_header_layout():
    buf = io.encode_grid(np.zeros((3, 2)))
    assert buf[:4] == b"SRGD"
    assert len(buf) == 4 + 2 + 4 + 4 + 2 + 1 + 3 * 2 * 8


def test_grid_errors():
    buf = io.encode_grid(np.ones((2, 2)))
    with pytest.raises(io.FormatError):
        io.decode_grid(b"XXXX" + buf[4:])
    with pytest.raises(io.FormatError):
        io.decode_grid(buf[:-1])
    with pytest.raises(io.FormatError):
        io.decode_grid(buf[:5])
    with pytest.raises(io.FormatError):
        io.encode_grid(np.array([[0.5]]), "u8")
    with pytest.raises(io.FormatError):
        io.encode_grid(np.zeros((1, 1, 1, 1)))


def test_checkpoint_round_trip(tmp_path):
    net = regnet_init(Arch(widths=(4, 8)), 9)
    io.save_checkpoint(tmp_path / "n.ckpt", net)
    back = io.load_checkpoint(tmp_path / "n.ckpt")
    assert back.seed == 9 and back.arch == net.arch
    assert list(back.params) == list(net.params)
    for k in net.params:
        assert np.array_equal(back.params[k].grid.data, net.params[k].grid.data)
    assert io.encode_checkpoint(back) == io.encode_checkpoint(net)


def test_checkpoint_errors():
    buf = io.encode_checkpoint(regnet_init(Arch(widths=(4, 8)), 0))
    for bad in (buf[:-3], buf + b"\0", b"SRGD" + buf[4:]):
        with pytest.raises(io.FormatError):
            io.decode_checkpoint(bad)


def test_manifest_and_keyvalue(tmp_path):
    io.write_manifest(tmp_path / "m.txt", {"b": 2, "a": "x, y"})
    assert (tmp_path / "m.txt").read_text() == "a = x, y\nb = 2\n"
    assert io.read_manifest(tmp_path / "m.txt") == {"a": "x, y", "b": "2"}
    assert io.parse_keyvalue("# note\nk = v  # trailing\n\n") == {"k": "v"}
    with pytest.raises(io.FormatError, match="line 2"):
        io.parse_keyvalue("a = 1\nnonsense\n")


def test_csv_round_trip(tmp_path):
    rows = [{"x": "1", "y": "a"}, {"x": "2", "y": "b,c"}]
    io.write_csv(tmp_path / "t.csv", ("y", "x"), rows)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "y,x"
    assert io.read_csv(tmp_path / "t.csv") == [{"y": "a", "x": "1"}, {"y": "b,c", "x": "2"}]


def test_sample_round_trip(tmp_path):
    s = make_phantom(PhantomSpec(size=(32, 32), blob_radius=(2.0, 4.0), seed=3))
    f, m = make_pair(s, random_deformation(3, 2.0, 5.0, (32, 32)), np.random.default_rng(3))
    for name, smp in (("f", f), ("m", m)):
        io.save_sample(tmp_path / name, smp)
        back = io.load_sample(tmp_path / name)
        for k in ("img", "labels", "onehot", "mask", "bias_field", "modality_b", "base",
                  "clutter"):
            assert np.array_equal(getattr(back, k), getattr(smp, k)), k
        assert np.array_equal(back.landmarks.points, smp.landmarks.points)
        assert back.n_labels == smp.n_labels and back.sample_id == smp.sample_id
    assert io.load_sample(tmp_path / "f").gt_disp is None
    assert np.array_equal(io.load_sample(tmp_path / "m").gt_disp.data, m.gt_disp.data)


def test_pgm_preview(tmp_path):
    io.write_pgm(tmp_path / "p.pgm", np.array([[0.0, 0.5], [1.0, 0.25]]))
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n") and raw[-4:] == bytes([0, 128, 255, 64])
