import struct

import numpy as np
import pytest

from conftest import TINY_CONFIG, TINY_RANGE, TOY_K
from pcofmod.errors import BadMagicError, ModelFormatError, TruncatedModelError, VersionMismatchError
from pcofmod.geometry import build_pose_lattice
from pcofmod.modelfile import MAGIC, VERSION, load_model, read_model, save_model, write_model
from pcofmod.templates import build_bpt


@pytest.fixture(scope="module")
def blob(tiny_tree):
    return save_model(tiny_tree)


def test_round_trip_is_bit_exact(tiny_tree, blob):
    back = load_model(blob)
    assert back.equals(tiny_tree)
    assert save_model(back) == blob
    np.testing.assert_array_equal(back.mesh.vertices, tiny_tree.mesh.vertices)
    np.testing.assert_array_equal(back.mesh.faces, tiny_tree.mesh.faces)
    assert back.stats == tiny_tree.stats


def test_toy_model_round_trip(toy_tree, toy_model_path):
    back = read_model(toy_model_path)
    assert back.equals(toy_tree)
    for a, b in zip(back.pairs[3], toy_tree.pairs[3]):
        assert a.grad_points.tobytes() == b.grad_points.tobytes()


def test_header_starts_with_magic_and_version(blob):
    assert blob[:8] == MAGIC
    assert struct.unpack("<I", blob[8:12])[0] == VERSION


def test_bad_magic(blob):
    with pytest.raises(BadMagicError):
        load_model(b"NOTAMODEL" + blob[9:])
    with pytest.raises(BadMagicError):
        load_model(b"PCO")


def test_version_mismatch(blob):
    bad = blob[:8] + struct.pack("<I", VERSION + 1) + blob[12:]
    with pytest.raises(VersionMismatchError):
        load_model(bad)


@pytest.mark.parametrize("frac", [0.0005, 0.01, 0.1, 0.5, 0.9, 0.999])
def test_truncation_is_detected(blob, frac):
    cut = max(12, int(len(blob) * frac))
    with pytest.raises(TruncatedModelError):
        load_model(blob[:cut])


def test_trailing_bytes_are_rejected(blob):
    with pytest.raises(ModelFormatError, match="trailing"):
        load_model(blob + b"\0")


def test_corrupt_header_values_are_reported(blob):
    # zero focal length in the intrinsics block
    bad = blob[:12] + struct.pack("<d", 0.0) + blob[20:]
    with pytest.raises(ModelFormatError):
        load_model(bad)


def test_same_seed_gives_identical_files(toy_mesh, blob, tmp_path):
    again = build_bpt(toy_mesh, build_pose_lattice(TINY_RANGE), TOY_K, TINY_CONFIG)
    write_model(again, tmp_path / "a.pcof")
    assert (tmp_path / "a.pcof").read_bytes() == blob
