import csv
import json

import numpy as np
import pytest

from perceiver.cli import RunConfig, bundled_configs, cmd_bench, cmd_count, main, parse_axis
from perceiver.errors import ConfigError
from perceiver.ingestion import save_dataset, synthetic_datasets


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestRunConfig:
    def test_parse_types_and_comments(self):
        cfg = RunConfig.parse("latent_index = 16  # rows\nshare_latent_towers = false\n"
                              "decay_epochs = 3, 5\nlr = 1e-3\n# done\ninput_channels = auto\n")
        assert cfg["latent_index"] == 16 and cfg["share_latent_towers"] is False
        assert cfg["decay_epochs"] == (3, 5) and cfg["lr"] == 1e-3
        assert cfg["input_channels"] == "auto"

    def test_dump_roundtrip(self):
        cfg = RunConfig.load("imagenet-8x")
        again = RunConfig.parse(cfg.dump())
        assert again.values == cfg.values

    @pytest.mark.parametrize("text,field", [("bogus = 1", "bogus"), ("latent_index = many", "latent_index"),
                                            ("lr = nan", "lr"), ("seed = 1\nseed = 2", "seed"),
                                            ("trust_ratio = perhaps", "trust_ratio")])
    def test_errors_name_the_field(self, text, field):
        with pytest.raises(ConfigError, match=field):
            RunConfig.parse(text)

    def test_missing_line_separator(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("latent_index 16")

    def test_bundled_configs_all_parse(self):
        names = bundled_configs()
        for expected in ["imagenet-8x.cfg", "imagenet-8x-unshared.cfg", "imagenet-1x-at-start.cfg",
                         "crossonly-4.cfg", "sign-of-mean.cfg", "shapes.cfg", "parity.cfg", "clouds.cfg"]:
            assert expected in names
        for name in names:
            RunConfig.load(name)

    def test_bundled_model_settings(self):
        cfg = RunConfig.load("imagenet-8x").model_config()
        assert (cfg.num_cross_attends, cfg.self_attends_per_block, cfg.latent_index, cfg.latent_channels) == (8, 6, 512, 1024)
        assert cfg.input_channels == 261 and cfg.cross_heads == 1
        run = RunConfig.load("imagenet-8x")
        assert run["lr"] == 0.004 and run["decay_epochs"] == (84, 102, 114) and run["decay_factor"] == 0.1


class TestCount:
    def test_imagenet_8x(self, capsys):
        assert main(["count", "imagenet-8x"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("layer,params,flops\n")
        r = cmd_count(RunConfig.load("imagenet-8x"))
        assert abs(r.params - 44.9e6) <= 0.02 * 44.9e6
        assert abs(r.flops - 707.2e9) <= 0.05 * 707.2e9
        assert out.rstrip().endswith(r.total_line())

    def test_crossonly_4(self):
        r = cmd_count(RunConfig.load("crossonly-4"))
        assert abs(r.params - 12.7e6) <= 0.02 * 12.7e6
        assert abs(r.flops - 173.1e9) <= 0.05 * 173.1e9

    def test_zero_index_dim(self, capsys):
        assert main(["count", "crossonly-4", "-M", "0"]) == 2
        assert "index_dim" in capsys.readouterr().err

    def test_auto_channels_resolve_from_dataset(self):
        r = cmd_count(RunConfig.load("shapes"), 64)
        assert r.params > 0


class TestTrain:
    def test_sign_of_mean_reaches_target(self, workdir):
        assert main(["train", "sign-of-mean", "--out", "run"]) == 0
        rows = read_csv(workdir / "run" / "metrics.csv")
        assert any(float(r["accuracy"]) >= 0.99 for r in rows)
        summary = json.loads((workdir / "run" / "summary.json").read_text())
        assert summary["test_accuracy"] >= 0.99
        assert (workdir / "run" / "config.cfg").is_file() and (workdir / "run" / "final.npz").is_file()

    def test_rerun_from_written_config_is_identical(self, workdir):
        assert main(["train", "shapes", "--out", "a", "--set", "steps=30"]) == 0
        assert main(["train", str(workdir / "a" / "config.cfg"), "--out", "b"]) == 0
        assert (workdir / "a" / "metrics.csv").read_bytes() == (workdir / "b" / "metrics.csv").read_bytes()

    def test_outputs_stay_in_run_directory(self, workdir):
        assert main(["train", "shapes", "--set", "steps=5", "--set", "output_dir=only"]) == 0
        assert sorted(p.name for p in workdir.iterdir()) == ["only"]

    def test_missing_dataset_path(self, workdir, capsys):
        assert main(["train", "shapes", "--set", "dataset_path=nowhere"]) == 2
        assert "dataset_path" in capsys.readouterr().err

    def test_no_dataset(self, workdir, capsys):
        assert main(["train", "imagenet-8x"]) == 2
        assert "dataset" in capsys.readouterr().err

    def test_saved_dataset(self, workdir):
        save_dataset(synthetic_datasets("sign-of-mean", 60, seed=0), workdir / "data")
        assert main(["train", "sign-of-mean", "--out", "r", "--set", "dataset_path=data", "--set", "steps=3"]) == 0

    def test_divergence_exit_code(self, workdir, capsys):
        assert main(["train", "shapes", "--out", "r", "--set", "lr=1e30", "--set", "steps=5"]) == 1
        assert "non-finite" in capsys.readouterr().err

    def test_evaluate(self, workdir, capsys):
        main(["train", "shapes", "--out", "r", "--set", "steps=5"])
        capsys.readouterr()
        assert main(["evaluate", "r/final.npz"]) == 0
        result = json.loads(capsys.readouterr().out)
        summary = json.loads((workdir / "r" / "summary.json").read_text())
        assert result["accuracy"] == summary["test_accuracy"]

    def test_missing_config_file(self, workdir):
        assert main(["train", "does-not-exist.cfg"]) == 2


class TestAttmaps:
    def test_grid_maps(self, workdir):
        main(["train", "shapes", "--out", "r", "--set", "steps=5"])
        assert main(["attmaps", "r/final.npz", "--latents", "0,5"]) == 0
        files = sorted(p.name for p in (workdir / "r" / "attmaps").iterdir())
        assert "attend0_head0_latent0.pgm" in files and "attend0_head0_latent5.csv" in files
        raw = (workdir / "r" / "attmaps" / "attend0_head0_latent0.pgm").read_bytes()
        assert raw.startswith(b"P5\n8 8\n255\n")

    def test_cloud_maps_csv_only(self, workdir):
        main(["train", "clouds", "--out", "c", "--set", "steps=2", "--set", "dataset_size=20"])
        assert main(["attmaps", "c/final.npz", "--layers", "1"]) == 0
        files = sorted(p.name for p in (workdir / "c" / "attmaps").iterdir())
        assert files == ["attend1_head0_latent0.csv"]
        assert np.loadtxt(workdir / "c" / "attmaps" / files[0], delimiter=",").shape == (64,)

    def test_layer_out_of_range(self, workdir, capsys):
        main(["train", "shapes", "--out", "r", "--set", "steps=2"])
        assert main(["attmaps", "r/final.npz", "--layers", "3"]) == 2
        assert "layers" in capsys.readouterr().err


class TestSweep:
    def test_bands_axis(self, workdir):
        assert main(["sweep", "shapes", "--axis", "fourier_bands=2,8,32", "--out", "sw",
                     "--set", "steps=20", "--set", "dataset_size=200"]) == 0
        rows = read_csv(workdir / "sw" / "sweep.csv")
        assert [r["value"] for r in rows] == ["2", "8", "32"]
        assert all(r["status"] == "ok" and r["test_accuracy"] for r in rows)

    def test_divergent_point_is_recorded(self, workdir):
        assert main(["sweep", "shapes", "--axis", "lr=0.004,1e30", "--out", "sw",
                     "--set", "steps=5", "--set", "dataset_size=100"]) == 0
        rows = read_csv(workdir / "sw" / "sweep.csv")
        assert [r["status"] for r in rows] == ["ok", "diverged"]

    def test_init_scale_axis_does_not_crash(self, workdir):
        assert main(["sweep", "shapes", "--axis", "latent_init_scale=0.02,0.1,1.0", "--out", "sw",
                     "--set", "steps=10", "--set", "dataset_size=100"]) == 0
        rows = read_csv(workdir / "sw" / "sweep.csv")
        assert len(rows) == 3 and all(r["status"] in ("ok", "diverged") for r in rows)

    def test_parallel_matches_serial(self, workdir):
        args = ["--set", "steps=5", "--set", "dataset_size=100"]
        main(["sweep", "shapes", "--axis", "latent_channels=16,32", "--out", "s1", *args])
        main(["sweep", "shapes", "--axis", "latent_channels=16,32", "--out", "s2", "--jobs", "2", *args])
        assert (workdir / "s1" / "sweep.csv").read_text() == (workdir / "s2" / "sweep.csv").read_text()

    def test_empty_axis(self):
        with pytest.raises(ConfigError):
            parse_axis("fourier_bands=")
        with pytest.raises(ConfigError):
            parse_axis("nonsense=1,2")
        assert main(["sweep", "shapes", "--axis", "fourier_bands="]) == 2


class TestBench:
    def test_scaling_columns(self):
        cfg = RunConfig.load("sign-of-mean")
        cfg.set("input_channels", "10")
        rows = cmd_bench(cfg, [512, 4096, 32768], repeats=5)
        walls = [r["wall_median_s"] for r in rows]
        assert walls == sorted(walls)
        ratios = [r["transformer_ratio"] for r in rows[1:]]
        assert all(r > 8 for r in ratios)

    def test_m_must_ascend(self):
        with pytest.raises(ConfigError):
            cmd_bench(RunConfig.load("imagenet-8x"), [2048, 1024], wall=False)

    def test_cli_output(self, capsys):
        assert main(["bench", "crossonly-4", "--m", "1024,2048,4096,8192", "--no-wall"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("M,perceiver_flops,transformer_flops")
        assert out[-1].startswith("perceiver linear-fit R2=1.0")


def test_permute_eval(workdir, capsys):
    assert main(["permute-eval", "shapes", "--out", "pe", "--set", "steps=40", "--set", "dataset_size=200"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["init_logit_rel_change"] < 1e-6
    assert result["conv_probe_rel_change"] > 1e-2
    assert (workdir / "pe" / "permute_eval.csv").is_file()
