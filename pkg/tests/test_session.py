import json

import numpy as np
import pytest

from prawnlen.errors import ConfigError, FormatError
from prawnlen.ingest import BinaryMask, dump_mask_pgm
from prawnlen.session import fmt, load_frame, open_session, read_rows, write_rows, write_session
from prawnlen.synth import SeasonSpec, gen_session


@pytest.fixture(scope="module")
def session_dir(tmp_path_factory):
    spec = SeasonSpec(seed=1, ponds=("P9",), docs=(20,), frames_per_session=2, prawns_per_session=2)
    out = tmp_path_factory.mktemp("sess")
    write_session(gen_session(spec, 0, 20), out)
    return out


def test_written_session_opens(session_dir):
    s = open_session(session_dir)
    assert s.manifest.pond_id == "P9" and s.manifest.doc == 20
    assert [f.frame_id for f in s.manifest.frames] == [0, 1]
    assert len(s.manifest.hand_measurements) == 3
    assert (session_dir / "ground_truth.csv").is_file()


def test_frames_load_with_masks(session_dir):
    s = open_session(session_dir)
    depth, masks = load_frame(s, s.manifest.frames[0])
    assert depth.width == s.intrinsics.width and len(masks) == 2
    assert all(m.count > 0 for m in masks)


def test_pgm_annotation_is_one_mask(session_dir, tmp_path):
    s = open_session(session_dir)
    bits = np.zeros((s.intrinsics.height, s.intrinsics.width), dtype=bool)
    bits[10:20, 10:40] = True
    path = session_dir / "annotations" / "mask.pgm"
    path.write_bytes(dump_mask_pgm(BinaryMask(bits)))
    ref = s.manifest.frames[0].__class__(0, s.manifest.frames[0].depth, annotation="annotations/mask.pgm")
    _, masks = load_frame(s, ref)
    assert masks == [BinaryMask(bits)]
    path.write_bytes(dump_mask_pgm(BinaryMask(bits[:, :-1])))
    with pytest.raises(FormatError):
        load_frame(s, ref)
    path.unlink()


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        open_session(tmp_path)


def test_broken_reference(session_dir, tmp_path):
    m = json.loads((session_dir / "manifest.json").read_text())
    m["frames"][0]["depth"] = "frames/nope.pgm"
    (tmp_path / "intrinsics.json").write_text((session_dir / "intrinsics.json").read_text())
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ConfigError) as info:
        open_session(tmp_path)
    assert info.value.field == "frames[0].depth"


def test_rows_round_trip(tmp_path):
    write_rows(tmp_path / "x.csv", ("a", "b"), [[1, fmt(0.5)], [2, fmt(None)]])
    assert read_rows(tmp_path / "x.csv") == [{"a": "1", "b": "0.5000"}, {"a": "2", "b": ""}]
    assert fmt(float("nan")) == ""
