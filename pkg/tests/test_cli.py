import json

import numpy as np
import pytest

from phenokit import cli
from phenokit.errors import InvariantError
from phenokit.evaluation import EvalReport, evaluate, imad, read_annotations
from phenokit.pipeline import embed_directory
from phenokit.profiles import ProfileTable, aggregate, correct, read_profiles, sphering_apply, sphering_fit, write_profiles_csv
from phenokit.train import load_checkpoint

COMMANDS = ["synth", "train", "embed", "correct", "evaluate", "imad", "report"]

SMALL_RUN = {
    "train": {"max_epochs": 2, "warmup_epochs": 1, "lr_stages": [[2, 0.01]]},
    "model": {"image_size": 16, "feat_dim": 16, "num_heads": 2, "ffn_hidden": 8,
              "residual_depth": 1, "branch_channels": 4},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def run_pipeline(root, data):
    """Train through report into ``root``; returns the output paths."""
    root.mkdir(exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    p = {k: root / v for k, v in dict(ck="ck", site="site.ptns", tr="tr.ptns", wells="wells.ptns",
                                      rep="rep.json", imad="imad.txt", svg="rep.svg").items()}
    assert run("train", "--config", cfg, "--data", data, "--out", p["ck"]) == 0
    assert run("embed", "--ckpt", p["ck"], "--data", data, "--out", p["site"]) == 0
    assert run("correct", "--in", p["site"], "--out", p["tr"], "--wells-out", p["wells"]) == 0
    assert run("evaluate", "--profiles", p["tr"], "--annotations", data / "annotations.csv",
               "--wells", p["wells"], "--out", p["rep"]) == 0
    assert run("imad", "--wells", p["wells"], "--out", p["imad"]) == 0
    assert run("report", "--report", p["rep"], "--out", p["svg"]) == 0
    return p


@pytest.fixture(scope="module")
def screen(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", base / "ds") == 0
    first = run_pipeline(base / "r1", base / "ds")
    second = run_pipeline(base / "r2", base / "ds")
    return base / "ds", first, second


def fixture_files(tmp_path):
    names = ["a", "b", "c", "d"]
    vec = np.array([[-1.0, 2.0], [-3.0, 2.0], [2.0, -1.0], [-3.0, 0.0]])
    none = [None] * 4
    write_profiles_csv(ProfileTable("treatment", none, none, none, names, ["treated"] * 4, vec),
                       tmp_path / "tr.csv")
    (tmp_path / "ann.csv").write_text("treatment,annotation\na,X\nb,X\nc,X\nd,Y\n")
    return tmp_path / "tr.csv", tmp_path / "ann.csv"


class TestUsage:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_help(self, command, capsys):
        assert run(command, "--help") == 0
        assert "--out" in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        assert run("--help") == 0
        out = capsys.readouterr().out
        assert all(c in out for c in COMMANDS)

    def test_unknown_flag(self):
        assert run("imad", "--wells", "x", "--out", "y", "--bogus") == 2

    def test_missing_required(self):
        assert run("embed", "--ckpt", "x") == 2

    def test_bad_input_file(self, tmp_path, capsys):
        assert run("correct", "--in", tmp_path / "missing.csv", "--out", tmp_path / "o.csv") == 1
        assert "error:" in capsys.readouterr().err

    def test_invariant_exit_code(self, tmp_path, monkeypatch, capsys):
        def boom(args):
            raise InvariantError("covariance not symmetric")
        monkeypatch.setattr(cli, "cmd_report", boom)
        assert run("report", "--report", "x", "--out", tmp_path / "y") == 3
        assert "internal invariant violated" in capsys.readouterr().err


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        tr, ann = fixture_files(tmp_path)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"metrics": {"top_frac": 0.1, "recal_ks": [1]}}))
        assert run("evaluate", "--profiles", tr, "--annotations", ann, "--config", cfg,
                   "--out", tmp_path / "r.json") == 1

    def test_unknown_section_rejected(self):
        with pytest.raises(Exception, match="unknown config keys"):
            cli.RunConfig.from_dict({"pcs": {"alpha": 0.5}, "extra": {}})

    def test_bare_train_config(self):
        run_cfg = cli.RunConfig.from_dict({"max_epochs": 3, "warmup_epochs": 1, "lr_stages": [[3, 0.1]]})
        assert run_cfg.train.max_epochs == 3 and run_cfg.pcs.alpha == 0.7

    def test_alpha_out_of_range(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"pcs": {"alpha": 1.5}}))
        with pytest.raises(Exception, match="alpha"):
            cli.RunConfig.load(cfg)

    def test_flag_beats_config(self, screen, tmp_path):
        _, p, _ = screen
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"pcs": {"alpha": 0.3}}))
        assert run("correct", "--in", p["site"], "--config", cfg, "--alpha", 0,
                   "--out", tmp_path / "a.ptns") == 0
        assert run("correct", "--in", p["site"], "--alpha", 0, "--out", tmp_path / "b.ptns") == 0
        assert (tmp_path / "a.ptns").read_bytes() == (tmp_path / "b.ptns").read_bytes()


class TestEvaluate:
    def test_fixture_map(self, tmp_path):
        tr, ann = fixture_files(tmp_path)
        out = tmp_path / "r.json"
        assert run("evaluate", "--profiles", tr, "--annotations", ann, "--out", out) == 0
        report = EvalReport.load(out)
        assert report.map == pytest.approx(0.8333, abs=1e-4)
        assert report.recall_at[1] == 1.0

    def test_top_frac_flag(self, tmp_path):
        tr, ann = fixture_files(tmp_path)
        out = tmp_path / "r.json"
        assert run("evaluate", "--profiles", tr, "--annotations", ann, "--top-frac", 0.5, "--out", out) == 0
        assert np.isfinite(EvalReport.load(out).foe)

    def test_imad_rejects_treatment_level(self, tmp_path):
        tr, _ = fixture_files(tmp_path)
        assert run("imad", "--wells", tr, "--out", tmp_path / "v.txt") == 1


class TestPipeline:
    def test_outputs_exist(self, screen):
        _, p, _ = screen
        assert all(path.exists() for path in p.values())
        assert float(p["imad"].read_text()) > 0

    @pytest.mark.parametrize("name", ["ck", "site", "tr", "wells", "rep", "imad", "svg"])
    def test_idempotent(self, screen, name):
        _, first, second = screen
        assert first[name].read_bytes() == second[name].read_bytes()

    def test_files_match_in_process(self, screen):
        data, p, _ = screen
        net, _ = load_checkpoint(p["ck"])
        sites = embed_directory(net, data)
        np.testing.assert_array_equal(sites.vectors, read_profiles(p["site"]).vectors)
        res = correct(sites)
        direct = evaluate(res.treatments, read_annotations(data / "annotations.csv"), wells=res.wells)
        from_files = EvalReport.load(p["rep"])
        assert abs(direct.foe - from_files.foe) <= 1e-9
        assert abs(direct.map - from_files.map) <= 1e-9
        for k, v in direct.recall_at.items():
            assert abs(v - from_files.recall_at[k]) <= 1e-9
        assert abs(imad(res.wells) - float(p["imad"].read_text())) <= 1e-9

    def test_alpha_zero_skips_plate_correction(self, screen, tmp_path):
        _, p, _ = screen
        out = tmp_path / "tr0.ptns"
        assert run("correct", "--in", p["site"], "--alpha", 0, "--out", out) == 0
        sites = read_profiles(p["site"])
        wells = aggregate(sites, "well")
        sphered = sphering_apply(wells, sphering_fit(wells.subset(wells.is_control())))
        plain = aggregate(sphered, "treatment")
        got = read_profiles(out)
        assert got.treatments == plain.treatments
        np.testing.assert_allclose(got.vectors, plain.vectors, rtol=0, atol=1e-9)

    def test_csv_output_close_to_binary(self, screen, tmp_path):
        _, p, _ = screen
        out = tmp_path / "tr.csv"
        assert run("correct", "--in", p["site"], "--out", out) == 0
        np.testing.assert_allclose(read_profiles(out).vectors, read_profiles(p["tr"]).vectors, rtol=1e-8, atol=1e-8)
