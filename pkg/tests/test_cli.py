"""Command surface tests: flags, exit codes, file outputs, determinism."""

import numpy as np
import pytest

from crossmatte import imgio
from crossmatte.cli import main, parse_config_file, resolve_config, build_parser

DESK_MODEL = ["--channels", "8", "--heads", "2", "--blocks", "1",
              "--enc-channels", "4,4,8,8", "--res", "32", "--dtype", "float64"]


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture
def trained_run(tmp_path):
    out = tmp_path / "run"
    code = run_cli("train", "--synthetic", "4", "--epochs", "1", "--batch", "2",
                   "--seed", "3", "--out-dir", str(out), *DESK_MODEL)
    assert code == 0
    ckpts = sorted(out.glob("*.ckpt"))
    assert ckpts, "training should write at least one checkpoint"
    return out, ckpts[-1]


class TestTrain:
    def test_smoke_run_writes_checkpoint_and_logs(self, trained_run):
        out, ckpt = trained_run
        assert (out / "train.log").exists()
        assert (out / "resolved.cfg").exists()

    def test_missing_dataset_flags_exit_2(self, tmp_path, capsys):
        code = run_cli("train", "--out-dir", str(tmp_path / "x"), *DESK_MODEL)
        assert code == 2
        assert "synthetic" in capsys.readouterr().err

    def test_missing_manifest_path_exit_2(self, tmp_path):
        code = run_cli("train", "--manifest", str(tmp_path / "none.manifest"),
                       "--out-dir", str(tmp_path / "x"), *DESK_MODEL)
        assert code == 2

    def test_resolved_config_reproduces_run(self, trained_run, tmp_path):
        out, _ = trained_run
        out2 = tmp_path / "rerun"
        code = run_cli("train", "--config", str(out / "resolved.cfg"),
                       "--out-dir", str(out2))
        assert code == 0
        log1 = (out / "train.log").read_text()
        log2 = (out2 / "train.log").read_text()
        assert log1 == log2


class TestConfigLayering:
    def test_file_then_flags_priority(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[model]\nchannels=16\nheads=2\n[train]\nepochs=7\n")
        parser = build_parser()
        args = parser.parse_args(["train", "--config", str(cfg), "--channels", "32"])
        model_cfg, train_cfg, _ = resolve_config(args)
        assert model_cfg.channels == 32  # flag wins
        assert model_cfg.heads == 2      # file wins over default
        assert train_cfg.epochs == 7

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[model]\nnot_a_knob=3\n")
        parser = build_parser()
        args = parser.parse_args(["train", "--config", str(cfg)])
        from crossmatte.cli import ConfigError
        with pytest.raises(ConfigError, match="not_a_knob"):
            resolve_config(args)

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[misc]\nx=1\n")
        parser = build_parser()
        args = parser.parse_args(["train", "--config", str(cfg)])
        from crossmatte.cli import ConfigError
        with pytest.raises(ConfigError, match="misc"):
            resolve_config(args)

    def test_parse_sections(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n[model]\nres=288x512\n[run]\nout_dir=here\n")
        sections = parse_config_file(cfg)
        assert sections["model"]["res"] == "288x512"
        assert sections["run"]["out_dir"] == "here"


class TestEval:
    def test_checkpoint_eval_prints_columns(self, trained_run, tmp_path, capsys):
        _, ckpt = trained_run
        code = run_cli("eval", "--checkpoint", str(ckpt), "--synthetic", "3",
                       "--seed", "3", "--out-dir", str(tmp_path / "ev"))
        assert code == 0
        out = capsys.readouterr().out
        header = out.splitlines()[0].split()
        assert header == ["MAD", "MSE", "Grad", "Conn"]
        assert (tmp_path / "ev" / "metrics.txt").exists()
        assert (tmp_path / "ev" / "metrics.json").exists()

    def test_pred_dir_self_comparison_is_zero(self, tmp_path, rng, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        for i in range(3):
            imgio.write_image(pred / f"m{i}.png", rng.random((1, 16, 16)))
        code = run_cli("eval", "--pred-dir", str(pred), "--gt-dir", str(pred),
                       "--out-dir", str(tmp_path / "ev"))
        assert code == 0
        values = capsys.readouterr().out.splitlines()[1].split()
        assert [float(v) for v in values] == [0.0, 0.0, 0.0, 0.0]

    def test_architecture_mismatch_exit_2(self, trained_run, tmp_path, capsys):
        _, ckpt = trained_run
        from crossmatte.checkpoint import load_checkpoint, save_checkpoint
        from crossmatte.config import ModelConfig
        data = load_checkpoint(ckpt)
        data = type(data)(
            model_config=ModelConfig.from_dict({**data.model_config.to_dict(),
                                                "channels": 16}),
            params=data.params, epoch=data.epoch,
            opt_state=data.opt_state, rng_state=data.rng_state)
        bad = tmp_path / "bad.ckpt"
        save_checkpoint(bad, data)
        code = run_cli("eval", "--checkpoint", str(bad), "--synthetic", "2",
                       "--out-dir", str(tmp_path / "ev2"))
        assert code == 2

    def test_deterministic_across_reruns(self, trained_run, tmp_path, capsys):
        _, ckpt = trained_run
        outputs = []
        for i in range(2):
            code = run_cli("eval", "--checkpoint", str(ckpt), "--synthetic", "3",
                           "--seed", "5", "--out-dir", str(tmp_path / f"e{i}"))
            assert code == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]


class TestInfer:
    def test_matte_files_match_input_resolution(self, trained_run, tmp_path, rng):
        _, ckpt = trained_run
        img = tmp_path / "in.png"
        imgio.write_image(img, rng.random((3, 32, 32)))
        out = tmp_path / "mattes"
        code = run_cli("infer", "--checkpoint", str(ckpt), "--input", str(img),
                       "--out-dir", str(out))
        assert code == 0
        matte = imgio.read_alpha(out / "in_matte.png")
        assert matte.shape == (1, 32, 32)

    def test_non_multiple_of_16_padded_and_cropped(self, trained_run, tmp_path, rng):
        _, ckpt = trained_run
        img = tmp_path / "odd.png"
        imgio.write_image(img, rng.random((3, 50, 70)))
        out = tmp_path / "mattes"
        code = run_cli("infer", "--checkpoint", str(ckpt), "--input", str(img),
                       "--out-dir", str(out))
        assert code == 0
        matte = imgio.read_alpha(out / "odd_matte.png")
        assert matte.shape == (1, 50, 70)

    def test_unreadable_input_exit_1(self, trained_run, tmp_path):
        _, ckpt = trained_run
        bogus = tmp_path / "not_an_image.png"
        bogus.write_text("nope")
        code = run_cli("infer", "--checkpoint", str(ckpt), "--input", str(bogus),
                       "--out-dir", str(tmp_path / "m"))
        assert code == 1

    def test_soft_values_present_on_synthetic_edge(self, trained_run, tmp_path):
        _, ckpt = trained_run
        from crossmatte.data import synth_dataset, composite
        ds = synth_dataset(1, 32, seed=0)
        img = composite(ds.foregrounds[0], ds.alphas[0], ds.backgrounds[0])
        path = tmp_path / "soft.png"
        imgio.write_image(path, img)
        out = tmp_path / "m"
        assert run_cli("infer", "--checkpoint", str(ckpt), "--input", str(path),
                       "--out-dir", str(out)) == 0
        matte = imgio.read_alpha(out / "soft_matte.png")
        assert matte.min() >= 0.0 and matte.max() <= 1.0


class TestGradcheck:
    def test_default_run_passes(self, capsys):
        code = run_cli("gradcheck", "--skip-block")
        assert code == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out
        assert "max_rel_err" in out

    def test_injected_bug_detected(self, capsys):
        code = run_cli("gradcheck", "--skip-block", "--inject-bug")
        assert code == 1
        assert "FAIL" in capsys.readouterr().out


class TestVisualize:
    def test_all_taps_emit_files(self, trained_run, tmp_path, rng):
        out_run, ckpt = trained_run
        img = tmp_path / "v.png"
        imgio.write_image(img, rng.random((3, 32, 32)))
        out = tmp_path / "heat"
        code = run_cli("visualize", "--checkpoint", str(ckpt), "--input", str(img),
                       "--taps", "ca,sa,ceeb,seb", "--block", "0",
                       "--out-dir", str(out))
        assert code == 0
        for tap in ("ca", "sa", "ceeb", "seb"):
            assert (out / f"{tap}_block0.png").exists()
            assert (out / f"{tap}_block0_overlay.png").exists()

    def test_ablated_tap_warns_and_others_proceed(self, tmp_path, rng, capsys):
        run_dir = tmp_path / "sa_only"
        assert run_cli("train", "--synthetic", "2", "--epochs", "1", "--batch", "2",
                       "--ablation", "sa_only", "--out-dir", str(run_dir),
                       *DESK_MODEL) == 0
        ckpt = sorted(run_dir.glob("*.ckpt"))[-1]
        img = tmp_path / "v.png"
        imgio.write_image(img, rng.random((3, 32, 32)))
        out = tmp_path / "heat"
        code = run_cli("visualize", "--checkpoint", str(ckpt), "--input", str(img),
                       "--taps", "ca,sa", "--out-dir", str(out))
        assert code == 0
        captured = capsys.readouterr()
        assert "unavailable" in captured.err
        assert (out / "sa_block0.png").exists()
        assert not (out / "ca_block0.png").exists()

    def test_unknown_tap_exit_2(self, trained_run, tmp_path, rng):
        _, ckpt = trained_run
        img = tmp_path / "v.png"
        imgio.write_image(img, rng.random((3, 32, 32)))
        code = run_cli("visualize", "--checkpoint", str(ckpt), "--input", str(img),
                       "--taps", "bogus", "--out-dir", str(tmp_path / "h"))
        assert code == 2

    def test_gradcam_variant(self, trained_run, tmp_path, rng):
        _, ckpt = trained_run
        img = tmp_path / "v.png"
        imgio.write_image(img, rng.random((3, 32, 32)))
        out = tmp_path / "cam"
        code = run_cli("visualize", "--checkpoint", str(ckpt), "--input", str(img),
                       "--taps", "ceeb", "--gradcam", "--box", "8,8,24,24",
                       "--out-dir", str(out))
        assert code == 0
        assert (out / "ceeb_block0.png").exists()


class TestInspect:
    def test_full_config_flags(self, capsys):
        code = run_cli("inspect", *DESK_MODEL)
        assert code == 0
        out = capsys.readouterr().out
        assert "block0: CA:yes SA:yes CEEB:yes SEB:yes" in out
        assert "parameters=" in out

    def test_ablations_flagged(self, capsys):
        assert run_cli("inspect", "--ablation", "ca_only", *DESK_MODEL) == 0
        assert "SA:no" in capsys.readouterr().out
        assert run_cli("inspect", "--ablation", "sa_only", *DESK_MODEL) == 0
        assert "CA:no" in capsys.readouterr().out

    def test_parameter_count_stable(self, capsys):
        run_cli("inspect", *DESK_MODEL)
        first = capsys.readouterr().out
        run_cli("inspect", *DESK_MODEL)
        assert capsys.readouterr().out == first


class TestHeatmapNormalization:
    def test_constant_activation_maps_to_zero(self):
        from crossmatte.visualize import _normalize
        flat = np.full((4, 4), 0.7)
        assert np.array_equal(_normalize(flat), np.zeros((4, 4)))

    def test_normalized_range(self, rng):
        from crossmatte.visualize import _normalize
        out = _normalize(rng.normal(size=(5, 5)))
        assert out.min() == 0.0 and out.max() == 1.0


class TestAblate:
    def test_matrix_emitted(self, tmp_path, capsys):
        out = tmp_path / "ab"
        code = run_cli("ablate", "--synthetic", "2", "--epochs", "1", "--batch", "2",
                       "--out-dir", str(out), *DESK_MODEL)
        assert code == 0
        text = (out / "ablation.txt").read_text()
        assert "[attention]" in text and "[levels]" in text
        assert text.count("hr=1/") == 3
