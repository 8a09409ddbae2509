import numpy as np
import pytest

from pcacgan.cli import main
from pcacgan.codec import CodecConfig, CodecModel
from pcacgan.metrics import RDCurve
from pcacgan.pointcloud import load_ply

SMALL = CodecConfig(channels=8, latent_channels=4, kernels=(3, 3, 3))


@pytest.fixture
def data_dir(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--count", "2", "--points", "300",
                 "--extent", "10"]) == 0
    return tmp_path / "data"


@pytest.fixture
def sweep_dir(tmp_path):
    out = tmp_path / "models"
    out.mkdir()
    base = CodecModel.initialize(SMALL, seed=1)
    for i, log_scale in enumerate((3.0, 0.0)):
        m = base.copy()
        m.lambda_index = i
        m.gen["entropy.log_scale"].value[...] = log_scale
        m.save(out / f"lambda{i}.ckpt")
    return out


class TestCli:
    def test_synth_is_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--count", "2", "--seed", "4"]) == 0
        for f in ("synth_000.ply", "synth_001.ply"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_encode_decode_round_trip(self, data_dir, sweep_dir, tmp_path):
        src = data_dir / "synth_000.ply"
        streams = []
        for threads in ("1", "3"):
            out = tmp_path / f"a{threads}.pcab"
            assert main(["encode", "--in", str(src), "--model", str(sweep_dir), "--lambda-index", "1",
                         "--threads", threads, "--out", str(out)]) == 0
            streams.append(out.read_bytes())
        assert streams[0] == streams[1]
        rec = tmp_path / "rec.ply"
        assert main(["decode", "--in", str(tmp_path / "a1.pcab"), "--geometry", str(src),
                     "--model", str(sweep_dir), "--out", str(rec)]) == 0
        np.testing.assert_array_equal(load_ply(rec).positions, load_ply(src).positions)

    def test_no_avrpm_encode(self, data_dir, sweep_dir, tmp_path):
        assert main(["encode", "--in", str(data_dir / "synth_001.ply"), "--model", str(sweep_dir),
                     "--no-avrpm", "--out", str(tmp_path / "x.pcab")]) == 0

    def test_eval_and_bd(self, data_dir, sweep_dir, tmp_path, capsys):
        csv = tmp_path / "rd.csv"
        assert main(["eval", "--in", str(data_dir), "--model", str(sweep_dir), "--out", str(csv)]) == 0
        assert len(RDCurve.from_csv(csv)) == 2
        # BD needs four points; fabricate a curve file to exercise the report
        lines = ["lambda_index,bpip,psnr_y,psnr_u,psnr_v,psnr_yuv"]
        lines += [f"{i},{r},{p},{p},{p},{p}" for i, (r, p) in enumerate(
            [(0.1, 28.0), (0.2, 31.0), (0.4, 33.5), (0.8, 35.2)])]
        ref = tmp_path / "ref.csv"
        ref.write_text("\n".join(lines) + "\n")
        capsys.readouterr()
        assert main(["bd", str(ref), str(ref)]) == 0
        rows = capsys.readouterr().out.splitlines()[2:]
        assert len(rows) == 4
        assert all(float(v) == 0.0 for row in rows for v in row.split()[1:])

    def test_bd_insufficient_points_is_runtime_error(self, tmp_path, capsys):
        f = tmp_path / "short.csv"
        f.write_text("lambda_index,bpip,psnr_y,psnr_u,psnr_v,psnr_yuv\n0,0.1,30,30,30,30\n")
        assert main(["bd", str(f), str(f)]) == 1
        assert "InsufficientPoints" in capsys.readouterr().err

    def test_train_and_avrpm(self, data_dir, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("channels=8\nlambda_values=0.02,0.01\nbatch_size=1\n")
        assert main(["train-avrpm", "--in", str(data_dir), "--out", str(tmp_path / "mask.ckpt"),
                     "--iterations", "5"]) == 0
        out = tmp_path / "sweep"
        assert main(["train", "--in", str(data_dir), "--out", str(out), "--config", str(cfg),
                     "--iterations", "1", "--latent-channels", "4", "--no-discriminator",
                     "--avrpm", str(tmp_path / "mask.ckpt")]) == 0
        assert sorted(p.name for p in out.glob("*.ckpt")) == ["lambda0.ckpt", "lambda1.ckpt"]
        assert CodecModel.load(out / "lambda1.ckpt").config.latent_channels == 4

    def test_usage_errors(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["encode", "--in", "x.ply"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", str(tmp_path), "--threads", "0"])
        assert exc.value.code == 2

    def test_missing_input_is_runtime_error(self, sweep_dir, tmp_path):
        assert main(["encode", "--in", str(tmp_path / "none.ply"), "--model", str(sweep_dir),
                     "--out", str(tmp_path / "o.pcab")]) == 1

    def test_corrupt_stream_exit_code(self, data_dir, sweep_dir, tmp_path, capsys):
        bad = tmp_path / "bad.pcab"
        bad.write_bytes(b"PCAB\x01\x00garbage")
        assert main(["decode", "--in", str(bad), "--geometry", str(data_dir / "synth_000.ply"),
                     "--model", str(sweep_dir), "--out", str(tmp_path / "r.ply")]) == 1
        assert "CorruptStream" in capsys.readouterr().err

    def test_bad_log_level(self, monkeypatch):
        monkeypatch.setenv("PCAC_LOG", "chatty")
        with pytest.raises(SystemExit) as exc:
            main(["selftest", "--suite", "bd-metrics"])
        assert exc.value.code == 2

    def test_selftest_subset(self, capsys):
        assert main(["selftest", "--suite", "bd-metrics"]) == 0
        assert capsys.readouterr().out.startswith("PASS bd-metrics")
