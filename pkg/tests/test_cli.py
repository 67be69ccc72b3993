import hashlib
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from strokedtw.adaptive import GtTransform, TransformKind, apply_transform
from strokedtw.cli import EXIT_CONFLICT, EXIT_FORMAT, EXIT_MISSING, run
from strokedtw.dataio import DatasetRecord, SynthSpec, read_records, synth_generate, write_records
from strokedtw.render import Transform, read_pgm
from strokedtw.strokes import StrokeSequence

FIXTURES = Path(__file__).parent / "fixtures"
# exhaustive path enumeration over the fixture pair (6 x 7 points), frozen
ALIGN_ORACLE = {"l1": 18.459000000000003, "l2": 14.17371755977315}


def digest(path: Path) -> str:
    if path.is_dir():
        return hashlib.sha256(b"".join(p.name.encode() + p.read_bytes() for p in sorted(path.iterdir()))).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data(tmp_path):
    recs = tmp_path / "recs.rec"
    assert run(["synth", str(recs), "--count", "4", "--points", "24", "--seed", "1"]) == 0
    return tmp_path, recs


class TestSubcommands:
    def test_synth(self, data):
        _, recs = data
        out = read_records(recs)
        assert len(out) == 4 and all(len(r.seq) == 24 for r in out)
        assert out[0].transcript == "line"

    def test_resample(self, data):
        tmp, recs = data
        assert run(["resample", str(recs), str(tmp / "r.rec"), "--density", "8"]) == 0
        for a, b in zip(read_records(recs), read_records(tmp / "r.rec")):
            assert a.id == b.id and b.seq.n_strokes == a.seq.n_strokes

    def test_render(self, data):
        tmp, recs = data
        cfg = tmp / "deg.cfg"
        cfg.write_text("noise_sigma=8\nblur_sigma=0.5\n")
        assert run(["render", str(recs), str(tmp / "img"), "--degrade", str(cfg), "--seed", "3"]) == 0
        for r in read_records(recs):
            img = read_pgm(tmp / "img" / f"{r.id}.pgm")
            tf = Transform.loads((tmp / "img" / f"{r.id}.tf").read_text())
            assert img.height == 60 and tf.scale > 0

    @pytest.mark.parametrize("metric", ["l1", "l2"])
    def test_align_oracle_fixture(self, tmp_path, metric):
        out = tmp_path / "a.tsv"
        args = ["align", str(FIXTURES / "align_pred.rec"), str(FIXTURES / "align_gt.rec"), "-o", str(out),
                "--metric", metric]
        assert run(args) == 0
        header, row = out.read_text().splitlines()
        rid, cost, path = row.split("\t")
        assert header == "id\tcost\tpath" and rid == "pair"
        assert float(cost) == pytest.approx(ALIGN_ORACLE[metric], abs=1e-12)
        assert path.startswith("0,0;") and path.endswith("5,6")
        assert run(args[:-2] + ["--metric", metric, "--band-radius", "7"]) == 0
        assert float(out.read_text().splitlines()[1].split("\t")[1]) == pytest.approx(ALIGN_ORACLE[metric], abs=1e-12)

    def test_align_no_path(self, tmp_path):
        code = run(["align", str(FIXTURES / "align_pred.rec"), str(FIXTURES / "align_gt.rec"),
                    "-o", str(tmp_path / "x"), "--band-radius", "0"])
        assert code == EXIT_CONFLICT

    def test_adapt_gt_restores(self, tmp_path):
        strokes = [np.array([(0, 0), (1, 0), (2, 0.5)]), np.array([(3, 1), (3, 0), (3.5, -1)])]
        good = StrokeSequence.from_strokes(strokes)
        bad = apply_transform(good, GtTransform(TransformKind.REVERSE, 1))
        write_records(tmp_path / "pred.rec", [DatasetRecord("a", good)])
        write_records(tmp_path / "gt.rec", [DatasetRecord("a", bad)])
        code = run(["adapt-gt", str(tmp_path / "gt.rec"), str(tmp_path / "pred.rec"), str(tmp_path / "out.rec"),
                    "--log", str(tmp_path / "log.csv"), "--epochs", "6"])
        assert code == 0
        assert read_records(tmp_path / "out.rec")[0].seq == good
        log = (tmp_path / "log.csv").read_text().splitlines()
        assert log[0] == "epoch,instance_id,transform" and len(log) == 2 and log[1].endswith(",a,reverse(1)")

    def test_pipeline(self, data):
        tmp, recs = data
        assert run(["render", str(recs), str(tmp / "img")]) == 0
        assert run(["train", str(recs), str(tmp / "m.ckpt"), "--history", str(tmp / "h.csv"),
                    "--epochs", "2", "--hidden", "8", "--batch-size", "2", "--pretrain-epochs", "1"]) == 0
        assert (tmp / "h.csv").read_text().count("\n") == 3
        assert run(["predict", str(tmp / "m.ckpt"), str(recs), str(tmp / "img"), str(tmp / "p.rec")]) == 0
        assert [r.id for r in read_records(tmp / "p.rec")] == [r.id for r in read_records(recs)]
        assert run(["eval", str(tmp / "p.rec"), str(recs), "--images", str(tmp / "img"),
                    "-o", str(tmp / "e.csv")]) == 0
        rows = (tmp / "e.csv").read_text().splitlines()
        assert len(rows) == 5 and all(r.split(",")[5] for r in rows[1:])

    def test_eval_identity_zero(self, data, capsys):
        _, recs = data
        assert run(["eval", str(recs), str(recs)]) == 0
        rows = capsys.readouterr().out.splitlines()[1:]
        assert len(rows) == 4
        for r in rows:
            assert r.split(",")[1:5] == ["0", "0", "0", "0"]

    def test_overlay(self, data):
        tmp, recs = data
        assert run(["render", str(recs), str(tmp / "img")]) == 0
        rid = read_records(recs)[2].id
        out = tmp / "o.ppm"
        assert run(["overlay", str(tmp / "img" / f"{rid}.pgm"), str(recs), str(out), "--id", rid]) == 0
        img = read_pgm(tmp / "img" / f"{rid}.pgm")
        raw = out.read_bytes()
        header = f"P6\n{img.width} {img.height}\n255\n".encode()
        assert raw.startswith(header) and len(raw) == len(header) + 3 * img.width * img.height
        rgb = np.frombuffer(raw[len(header):], dtype=np.uint8).reshape(img.height, img.width, 3)
        assert (rgb[:, :, 0] != rgb[:, :, 2]).any()


class TestErrors:
    def test_missing_file(self, tmp_path, capsys):
        assert run(["resample", str(tmp_path / "nope.rec"), str(tmp_path / "o.rec")]) == EXIT_MISSING
        assert "not found" in capsys.readouterr().err

    def test_malformed(self, tmp_path, capsys):
        (tmp_path / "bad.rec").write_text("x\t\t1,2,3,4\n")
        assert run(["resample", str(tmp_path / "bad.rec"), str(tmp_path / "o.rec")]) == EXIT_FORMAT
        assert "malformed" in capsys.readouterr().err

    def test_unknown_flag(self, data):
        tmp, recs = data
        assert run(["resample", str(recs), str(tmp / "o.rec"), "--densty", "3"]) == 2

    def test_bad_value(self, data):
        tmp, recs = data
        assert run(["align", str(recs), str(recs), "--band-radius", "-1"]) == 2

    def test_overwrite_input(self, data):
        _, recs = data
        before = digest(recs)
        assert run(["resample", str(recs), str(recs)]) == EXIT_CONFLICT
        assert digest(recs) == before

    def test_missing_prediction(self, data, tmp_path):
        _, recs = data
        one = tmp_path / "one.rec"
        write_records(one, read_records(recs)[:1])
        assert run(["eval", str(one), str(recs)]) == EXIT_CONFLICT

    def test_unsafe_id(self, tmp_path):
        write_records(tmp_path / "r.rec", [DatasetRecord("../x", synth_generate(SynthSpec("line", seed=0)))])
        assert run(["render", str(tmp_path / "r.rec"), str(tmp_path / "img")]) == EXIT_FORMAT

    def test_bad_degrade(self, data):
        tmp, recs = data
        (tmp / "d.cfg").write_text("sharpen=2\n")
        assert run(["render", str(recs), str(tmp / "img"), "--degrade", str(tmp / "d.cfg")]) == EXIT_FORMAT

    def test_bad_checkpoint(self, data):
        tmp, recs = data
        (tmp / "m.ckpt").write_bytes(b"junk")
        assert run(["predict", str(tmp / "m.ckpt"), str(recs), str(tmp), str(tmp / "p.rec")]) == EXIT_FORMAT

    def test_overlay_needs_id(self, data):
        tmp, recs = data
        assert run(["render", str(recs), str(tmp / "img")]) == 0
        rid = read_records(recs)[0].id
        assert run(["overlay", str(tmp / "img" / f"{rid}.pgm"), str(recs), str(tmp / "o.ppm")]) == EXIT_CONFLICT


def test_inputs_untouched(data):
    tmp, recs = data
    before = digest(recs)
    run(["resample", str(recs), str(tmp / "r.rec")])
    run(["render", str(recs), str(tmp / "img")])
    imgs = digest(tmp / "img")
    run(["align", str(recs), str(recs), "-o", str(tmp / "a.tsv")])
    run(["adapt-gt", str(recs), str(tmp / "r.rec"), str(tmp / "g.rec")])
    run(["eval", str(recs), str(recs), "--images", str(tmp / "img"), "-o", str(tmp / "e.csv")])
    assert digest(recs) == before and digest(tmp / "img") == imgs


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.rec"
    r = subprocess.run([sys.executable, "-m", "strokedtw", "synth", str(out), "--count", "2"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and len(read_records(out)) == 2
    r = subprocess.run([sys.executable, "-m", "strokedtw", "align", str(tmp_path / "missing"), str(out)],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_MISSING and r.stderr.strip()
