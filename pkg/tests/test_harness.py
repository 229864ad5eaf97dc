import json
import math
import os

import numpy as np
import pytest

from quatfuse import numcore as nc
from quatfuse.harness import cli, runner
from quatfuse.harness import config as C
from quatfuse.harness.data import load_split, scene_seeds, without_lidar
from quatfuse.harness.gradcheck import gradcheck_all
from quatfuse.numcore import ConfigError


def tiny(**kw):
    base = dict(grid=8, bev_channels=4, gae_hidden=4, dae_hidden=2, depth_state_channels=2,
                x_range=(0.0, 25.6), y_range=(-12.8, 12.8), encoder_layers=1,
                decoder_layers=1, train_scenes=4, eval_scenes=3, steps=6, probe_step=3,
                probe_scenes=2, loss_window=3)
    base.update(kw)
    return C.RunConfig(**base)


def without_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]


class TestConfigParsing:
    TEXT = """
    # comment line
    [run]
    seeds = 0-3, 7   # trailing comment
    [fusion]
    fusion_mode = separate
    dae = off
    [model]
    x_range = 0, 25.6
    [train]
    lr = 0.005
    """

    def test_sections_comments_types(self):
        v = C.parse_config_text(self.TEXT)
        assert v == {"seeds": [0, 1, 2, 3, 7], "fusion_mode": "separate", "dae": False,
                     "x_range": (0.0, 25.6), "lr": 0.005}

    def test_seed_ranges(self):
        assert C.parse_value("seeds", "0-9,12") == list(range(10)) + [12]

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="did you mean 'steps'"):
            C.parse_config_text("stepz = 3")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r"\[fusion\]"):
            C.parse_config_text("[fuson]\n")

    def test_bad_value_and_line(self):
        with pytest.raises(ConfigError, match="lr"):
            C.parse_config_text("lr = fast")
        with pytest.raises(ConfigError, match="key = value"):
            C.parse_config_text("just words")

    @pytest.mark.parametrize("kw", [dict(fusion_mode="late"), dict(qua_fa="depth:0"),
                                    dict(inherit_steps=5, steps=2), dict(seeds=[]),
                                    dict(x_range=(3.0, 1.0)), dict(heat_prior=1.0)])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            C.RunConfig(**kw)

    def test_dump_parse_round_trip(self):
        cfg = C.RunConfig(**C.DESK, seeds=[1, 4], fusion_mode="deep_summation", dae=False)
        back = C.RunConfig(**C.parse_config_text(C.dump_config(cfg)))
        assert back == cfg

    def test_load_config_precedence(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("steps = 40\nlr = 0.1\n")
        cfg = C.load_config(p, {"lr": 0.2})
        assert (cfg.steps, cfg.lr, cfg.momentum) == (40, 0.2, 0.9)


class TestConfigHash:
    def test_deterministic_hex(self):
        h = C.config_hash(C.RunConfig())
        assert h == C.config_hash(C.RunConfig()) and len(h) == 64

    @pytest.mark.parametrize("key,value", [("mode", "eval"), ("seeds", [5]), ("out", "x"),
                                           ("workers", 3)])
    def test_ignores_non_semantic(self, key, value):
        assert C.config_hash(C.RunConfig(**{key: value})) == C.config_hash(C.RunConfig())

    def test_every_semantic_field_changes_hash(self):
        base = C.RunConfig()
        h0 = C.config_hash(base)
        changed = {"fusion_mode": "separate", "qua_fa": "all", "plain_mixer": "mlp",
                   "axis": "lidar_on_r", "x_range": (0.0, 60.0), "y_range": (-5.0, 5.0)}
        for name in C.FIELD_NAMES:
            if name in C.NON_SEMANTIC:
                continue
            v = getattr(base, name)
            if name in changed:
                new = changed[name]
            elif isinstance(v, bool):
                new = not v
            elif isinstance(v, int):
                new = v + 1 if name != "inherit_steps" else 1
            elif isinstance(v, float):
                new = v * 0.5
            else:
                raise AssertionError(name)
            assert C.config_hash(base.replace(**{name: new})) != h0, name


class TestData:
    def test_split_seeds_disjoint(self):
        tr, ev = scene_seeds(3, "train", 100), scene_seeds(3, "eval", 100)
        assert all(s % 2 == 0 for s in tr) and all(s % 2 == 1 for s in ev)
        assert not set(tr) & set(ev)
        assert not set(tr) & set(scene_seeds(4, "train", 100))

    def test_bad_split(self):
        with pytest.raises(ValueError):
            scene_seeds(0, "test", 3)

    def test_samples_shapes_and_no_lidar(self):
        cfg = tiny()
        s = load_split(cfg, "train")
        assert len(s) == 4
        assert s[0].bev.shape[1:] == (8, 8)
        z = load_split(cfg.replace(lidar_present=False), "train")
        assert not z[0].bev.data.any() and not z[0].depths[0].data.any()
        np.testing.assert_array_equal(z[0].images[0].data, s[0].images[0].data)
        assert not without_lidar(s[1]).bev.data.any()


class TestTraining:
    def test_scene_index_stateless(self):
        seq = [runner.scene_index(4, k, 5) for k in range(10)]
        assert sorted(seq[:5]) == list(range(5)) and sorted(seq[5:]) == list(range(5))
        assert seq == [runner.scene_index(4, k, 5) for k in range(10)]

    def test_resume_equals_straight_through(self):
        cfg = tiny(fusion_mode="camera_only")
        samples = load_split(cfg, "train")
        a = runner.build_model(cfg, 1)
        ta = runner.train_model(a, cfg, 1, samples, 0, 6)
        b = runner.build_model(cfg, 1)
        tb = runner.train_model(b, cfg, 1, samples, 0, 6)
        assert ta.losses == tb.losses
        for k, t in a.parameters().items():
            assert t.data.tobytes() == b.parameters()[k].data.tobytes()
        assert set(ta.probe) == {0, 3}

    def test_inherit_starts_from_camera_weights(self):
        cfg = tiny(inherit_steps=3)
        run = runner.run_single(cfg, "progressive", 0)
        cam = runner.run_single(cfg.replace(fusion_mode="camera_only"), "camera_only", 0)
        # the first inherit_steps losses are the shared camera-only phase
        assert run.train.losses[:3] == cam.train.losses[:3]
        assert len(run.train.losses) == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reported(self):
        cfg = tiny(lr=1e30, clip_norm=1e30, steps=4, probe_step=100)
        run = runner.run_single(cfg, "progressive", 0)
        assert run.train.failure is not None
        (row,) = runner.records(run)
        assert math.isnan(row.loss) and math.isnan(row.toy_ap)


class TestAblation:
    def test_variants(self):
        base = tiny()
        assert len(runner.variants(base, "components")) == 8
        assert [n for n, _ in runner.variants(base, "framework")] == [
            "progressive", "separate", "deep_summation", "input_summation", "camera_only"]
        with pytest.raises(ConfigError):
            runner.variants(base, "nope")

    def test_csv_reproducible_and_isolated(self, tmp_path):
        base = tiny(seeds=[0, 1], steps=3, probe_step=100)
        r1 = runner.run_ablation_matrix(base, "quaternion_axis", str(tmp_path / "a"), 1)
        r2 = runner.run_ablation_matrix(base, "quaternion_axis", str(tmp_path / "b"), 1)
        a, b = runner.read_csv(r1.csv_path), runner.read_csv(r2.csv_path)
        assert len(a) == 4 and list(a[0]) == list(runner.CSV_HEADER)
        assert without_wall(a) == without_wall(b)
        # variants of one seed differ only in the axis, so the camera stream and
        # the scene order are shared; their first training losses coincide
        by = {(r.variant, r.seed): r for r in r1.runs}
        for s in (0, 1):
            l_i = by[("lidar_on_i", s)].train.losses
            l_r = by[("lidar_on_r", s)].train.losses
            assert l_i[0] == l_r[0]
        man = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert man["config_hash"] == C.config_hash(base)
        assert man["variants"] == ["lidar_on_i", "lidar_on_r"]

    def test_robustness_two_rows(self):
        base = tiny(seeds=[0], steps=2, probe_step=100)
        rep = runner.run_ablation_matrix(base, "robustness", None, 1)
        assert [r.lidar_present for r in rep.rows] == [True, False]
        assert rep.rows[0].run_id.endswith("-lidar") and rep.rows[1].run_id.endswith("-nolidar")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny(steps=2, probe_step=100)
        run = runner.run_single(cfg, "progressive", 3)
        runner.save_checkpoint(str(tmp_path / "ck"), run.model, cfg, 3)
        model, back, seed = runner.load_checkpoint(str(tmp_path / "ck"))
        assert back == cfg and seed == 3
        for k, t in run.model.parameters().items():
            assert model.parameters()[k].data.tobytes() == t.data.tobytes()
        held = load_split(cfg, "eval")
        assert runner.evaluate(model, held, cfg) == runner.evaluate(run.model, held, cfg)

    def test_mismatch(self, tmp_path):
        cfg = tiny()
        runner.save_checkpoint(str(tmp_path / "ck"), runner.build_model(cfg, 0), cfg, 0)
        man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        man["config"]["bev_channels"] = 8
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(ConfigError):
            runner.load_checkpoint(str(tmp_path / "ck"))


class TestGradcheck:
    def test_subset_passes(self):
        rep = gradcheck_all(0, trials=2, only={"sigmoid", "conv3x3", "qlinear"})
        assert rep.passed and len(rep.results) == 3

    def test_detects_wrong_backward(self, monkeypatch):
        def bad_sigmoid(x):
            x = nc._t(x)
            y = 1.0 / (1.0 + np.exp(-x.data))
            return nc._result(y, (x,), lambda g: (1.01 * g * y * (1.0 - y),), "sigmoid")
        monkeypatch.setattr(nc, "sigmoid", bad_sigmoid)
        rep = gradcheck_all(0, trials=1, only={"sigmoid"})
        assert not rep.passed and rep.failures[0].name == "sigmoid"


class TestCli:
    ARGS = ["--set", "grid=8", "--set", "bev_channels=4", "--set", "gae_hidden=4",
            "--set", "dae_hidden=2", "--set", "train_scenes=3", "--set", "eval_scenes=2",
            "--set", "steps=2", "--set", "probe_step=100", "--set", "x_range=0,25.6",
            "--set", "y_range=-12.8,12.8"]

    def test_train_eval_inspect(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert cli.main(["train", "--seed", "2", "--out", out] + self.ARGS) == 0
        man = json.loads(open(os.path.join(out, "manifest.json")).read())
        assert man["config"]["seeds"] == [2] and man["command"] == "train"
        ck = os.path.join(out, "checkpoints", "progressive-s2")
        assert os.path.exists(os.path.join(ck, "manifest.json"))
        assert cli.main(["eval", "--out", out, "--no-lidar"] + self.ARGS) == 0
        rows = runner.read_csv(os.path.join(out, "metrics.csv"))
        assert [r["lidar_present"] for r in rows] == ["true", "false"]
        capsys.readouterr()
        assert cli.main(["inspect", ck]) == 0
        assert "shape=" in capsys.readouterr().out

    def test_datagen(self, tmp_path):
        out = str(tmp_path / "d")
        assert cli.main(["datagen", "--out", out, "--set", "train_scenes=2",
                         "--set", "eval_scenes=1"]) == 0
        assert sorted(os.listdir(os.path.join(out, "train"))) == ["00000000", "00000002"]
        assert os.listdir(os.path.join(out, "eval")) == ["00000001"]

    @pytest.mark.parametrize("argv", [[], ["train", "--set", "stepz=3"],
                                      ["train", "--set", "steps"],
                                      ["train", "--mode", "late"], ["frobnicate"],
                                      ["inspect", "/nonexistent/path"],
                                      ["train", "--config", "/nonexistent.cfg"]])
    def test_usage_errors(self, argv, capsys):
        assert cli.main(argv) == 2

    def test_suggestion_message(self, capsys):
        cli.main(["train", "--set", "stepz=3"])
        assert "did you mean 'steps'" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_run_failure(self, tmp_path):
        argv = ["train", "--out", str(tmp_path), "--set", "lr=1e30", "--set", "clip_norm=1e30",
                "--set", "steps=3"] + self.ARGS[:-4] + ["--set", "x_range=0,25.6"]
        assert cli.main(argv) == 1

    def test_gradcheck_failure_exit(self, tmp_path, monkeypatch):
        def bad_sigmoid(x):
            x = nc._t(x)
            y = 1.0 / (1.0 + np.exp(-x.data))
            return nc._result(y, (x,), lambda g: (2.0 * g * y * (1.0 - y),), "sigmoid")
        monkeypatch.setattr(nc, "sigmoid", bad_sigmoid)
        monkeypatch.setattr(cli, "gradcheck_all", lambda seed: gradcheck_all(
            seed, trials=1, only={"sigmoid", "add"}))
        assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 1
        assert "FAIL" in (tmp_path / "gradcheck.txt").read_text()
