import csv

import numpy as np
import pytest

from matdeform.bench import make_box_mesh, make_smooth_warp
from matdeform.cli import main
from matdeform.field import DisplacementField
from matdeform.mesh import read_stl, save_stl


@pytest.fixture(scope="module")
def stls(tmp_path_factory):
    d = tmp_path_factory.mktemp("stl")
    box = make_box_mesh(size=(12.0, 8.0, 4.0), spacing=1.0)
    W = make_smooth_warp(box.vertices, 0.02)
    save_stl(d / "design.stl", box)
    save_stl(d / "scan.stl", box.with_vertices(W(box.vertices)))
    (d / "bad.stl").write_bytes(b"\x00" * 90)
    return d


def test_no_args_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["compensate", "--nope"])
    assert ei.value.code == 2


@pytest.mark.parametrize("cmd, default", [("compensate", "default: 9"), ("bench", "default: 10"), ("density", "default: 0.002")])
def test_help_shows_defaults(capsys, cmd, default):
    with pytest.raises(SystemExit) as ei:
        main([cmd, "--help"])
    assert ei.value.code == 0
    assert default in capsys.readouterr().out


def test_compensate_writes_outputs(stls, tmp_path, capsys):
    out = tmp_path / "comp.stl"
    args = ["compensate", "--design", str(stls / "design.stl"), "--scan", str(stls / "scan.stl"), "--out", str(out)]
    args += ["--report", str(tmp_path / "r.csv"), "--timing", str(tmp_path / "t.csv"), "--field", str(tmp_path / "f.csv")]
    assert main(args) == 0
    assert "disp_max" in capsys.readouterr().out
    design = read_stl((stls / "design.stl").read_bytes())
    comp = read_stl(out.read_bytes())
    assert comp.vertices.shape == design.vertices.shape
    assert not np.array_equal(comp.vertices, design.vertices)
    assert (tmp_path / "r.csv").read_text().startswith("metric,value")
    assert (tmp_path / "t.csv").read_text().startswith("stage,seconds")
    assert len(DisplacementField.from_csv(tmp_path / "f.csv").samples) > 0
    # same inputs, same bytes
    again = tmp_path / "comp2.stl"
    args[args.index(str(out))] = str(again)
    assert main(args) == 0
    assert again.read_bytes() == out.read_bytes()


def test_register_writes_field_and_trace(stls, tmp_path):
    args = ["register", "--design", str(stls / "design.stl"), "--scan", str(stls / "scan.stl")]
    args += ["--out", str(tmp_path / "u.csv"), "--trace", str(tmp_path / "trace.csv"), "--max-iters", "20"]
    assert main(args) == 0
    f = DisplacementField.from_csv(tmp_path / "u.csv")
    assert f.dim == 3 and np.isfinite(f.vectors).all()
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(rows) >= 2


def test_bad_stl_names_stage(stls, tmp_path, capsys):
    args = ["compensate", "--design", str(stls / "bad.stl"), "--scan", str(stls / "scan.stl"), "--out", str(tmp_path / "x.stl")]
    assert main(args) == 1
    err = capsys.readouterr().err
    assert "read design" in err
    assert main(["compensate", "--design", str(tmp_path / "missing.stl"), "--scan", str(stls / "scan.stl"), "--out", str(tmp_path / "x.stl")]) == 1


def test_bench_small(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--seeds", "1", "--amplitude", "0.05", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    assert {r["mode"] for r in rows} == {"equal", "area"}
    assert "0.05" in capsys.readouterr().out


def test_density_columns(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["density", "--grid", "8", "--variant", "weighted", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["x", "y"] and len(lines) == 65
    assert "ratio" in capsys.readouterr().out
