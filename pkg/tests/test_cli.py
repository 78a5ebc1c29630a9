"""Command-line interface: file counts, oracles, exit codes, determinism."""

import numpy as np
import pytest

from stylewarp.cli import main
from stylewarp.groundtruth import OcclusionParams, SynthConfig, occlusion_mask, synth_clip
from stylewarp.io import read_flo, read_image, read_mask, save_clip, write_flo
from stylewarp.coherence import FlowField
from stylewarp.tensor import Tensor


def tree_bytes(root):
    """Map of relative path -> file bytes for a directory tree."""
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestSynth:
    def test_two_frame_clip_file_counting(self, tmp_path):
        out = tmp_path / "clip"
        code = main(
            ["synth", "--out", str(out), "--frames", "2", "--size", "32x32", "--seed", "1"]
        )
        assert code == 0
        ppm = list(out.glob("*.ppm"))
        flo = list(out.glob("*.flo"))
        pgm = list(out.glob("*.pgm"))
        assert len(ppm) == 2 and len(flo) == 1 and len(pgm) == 1
        assert (out / "manifest.txt").exists()

    def test_same_seed_byte_identical_directories(self, tmp_path):
        argv = ["synth", "--frames", "3", "--size", "32x32", "--seed", "7", "--objects", "1"]
        assert main(argv + ["--out", str(tmp_path / "one")]) == 0
        assert main(argv + ["--out", str(tmp_path / "two")]) == 0
        assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")

    def test_brightness_jitter_shifts_mean_intensity(self, tmp_path):
        out = tmp_path / "jitter"
        main(
            [
                "synth", "--out", str(out), "--frames", "2", "--size", "32x32",
                "--seed", "3", "--objects", "0", "--camera", "0,0",
                "--brightness-jitter", "0.05",
            ]
        )
        a = read_image(out / "frame_0000.ppm").data.mean()
        b = read_image(out / "frame_0001.ppm").data.mean()
        assert b / a == pytest.approx(1.05, abs=2e-3)  # within quantization

    def test_bad_size_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--size", "nonsense"]) == 1


class TestGenMasks:
    def test_consistent_flows_give_interior_ones(self, tmp_path):
        h = w = 16
        fwd = np.zeros((1, 2, h, w))
        bwd = np.zeros((1, 2, h, w))
        write_flo(FlowField(Tensor(fwd)), tmp_path / "fwd.flo")
        write_flo(FlowField(Tensor(bwd)), tmp_path / "bwd.flo")
        out = tmp_path / "mask.pgm"
        assert main(
            ["gen-masks", "--fwd", str(tmp_path / "fwd.flo"), "--bwd", str(tmp_path / "bwd.flo"),
             "--out", str(out)]
        ) == 0
        mask = read_mask(out)
        assert np.all(mask.tensor.data == 1.0)

    def test_matches_library_masks(self, tmp_path):
        rng = np.random.default_rng(5)
        fwd = rng.uniform(-2, 2, size=(1, 2, 12, 12)).astype(np.float32).astype(np.float64)
        bwd = rng.uniform(-2, 2, size=(1, 2, 12, 12)).astype(np.float32).astype(np.float64)
        write_flo(FlowField(Tensor(fwd)), tmp_path / "fwd.flo")
        write_flo(FlowField(Tensor(bwd)), tmp_path / "bwd.flo")
        out = tmp_path / "mask.pgm"
        main(["gen-masks", "--fwd", str(tmp_path / "fwd.flo"), "--bwd", str(tmp_path / "bwd.flo"),
              "--out", str(out)])
        want = occlusion_mask(
            FlowField(Tensor(fwd)), FlowField(Tensor(bwd)), OcclusionParams()
        )
        assert np.array_equal(read_mask(out).tensor.data, want.tensor.data)

    def test_missing_file_exit_code_and_message(self, tmp_path, capsys):
        code = main(
            ["gen-masks", "--fwd", str(tmp_path / "absent.flo"), "--bwd", str(tmp_path / "b.flo"),
             "--out", str(tmp_path / "m.pgm")]
        )
        assert code == 2
        assert "absent.flo" in capsys.readouterr().err


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Tiny two-clip dataset plus a short training run."""
    root = tmp_path_factory.mktemp("toyrun")
    for i, seed in enumerate((21, 22)):
        clip = synth_clip(
            SynthConfig(height=32, width=32, num_frames=4, num_objects=1,
                        brightness_jitter=0.05, noise_sigma=1e-4),
            seed=seed,
        )
        save_clip(clip, root / f"clip{i}")
    cfg = root / "run.cfg"
    cfg.write_text(
        "iterations=150\nflow_warmup_iters=0\ncheckpoint_every=75\nseed=4\nsplit_layer=r1/2d\n"
    )
    out = root / "run"
    code = main(
        ["train", "--data", str(root / "clip0"), "--data", str(root / "clip1"),
         "--config", str(cfg), "--out", str(out)]
    )
    return root, out, code


class TestTrain:
    def test_smoke_run_completes_and_loss_drops(self, toy_run):
        root, out, code = toy_run
        assert code == 0
        assert (out / "model.swb").exists()
        assert (out / "effective_config.txt").exists()
        history = (out / "history.txt").read_text().strip().splitlines()
        assert len(history) == 150
        first = float(history[0].rsplit("total=", 1)[1])
        last = float(history[-1].rsplit("total=", 1)[1])
        assert last < first

    def test_checkpoints_written(self, toy_run):
        _, out, _ = toy_run
        assert (out / "checkpoints" / "checkpoint_000075.swb").exists()
        assert (out / "checkpoints" / "checkpoint_000150.swb").exists()

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_key=1\n")
        code = main(
            ["train", "--data", str(tmp_path), "--config", str(cfg), "--out", str(tmp_path / "o")]
        )
        assert code == 2

    def test_missing_data_dir_is_data_error(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")])
        assert code == 2


class TestStylizeAndEval:
    def test_baseline_single_frame_matches_coherent_first(self, toy_run, tmp_path):
        root, run, _ = toy_run
        frames = tmp_path / "one"
        frames.mkdir()
        src = root / "clip0" / "frame_0000.ppm"
        (frames / "frame_0000.ppm").write_bytes(src.read_bytes())
        out_a = tmp_path / "coh"
        out_b = tmp_path / "base"
        assert main(["stylize", "--model", str(run / "model.swb"), "--frames", str(frames),
                     "--out", str(out_a), "--mode", "coherent"]) == 0
        assert main(["stylize", "--model", str(run / "model.swb"), "--frames", str(frames),
                     "--out", str(out_b), "--mode", "baseline"]) == 0
        assert (out_a / "out_0000.ppm").read_bytes() == (out_b / "out_0000.ppm").read_bytes()

    def test_stylize_debug_dumps_masks_and_flows(self, toy_run, tmp_path):
        root, run, _ = toy_run
        out = tmp_path / "dbg"
        assert main(["stylize", "--model", str(run / "model.swb"),
                     "--frames", str(root / "clip0"), "--out", str(out), "--debug"]) == 0
        assert len(list(out.glob("out_*.ppm"))) == 4
        assert len(list(out.glob("mask_*.pgm"))) == 3
        assert len(list(out.glob("flow_*.flo"))) == 3

    def test_stylize_deterministic_across_runs(self, toy_run, tmp_path):
        root, run, _ = toy_run
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            main(["stylize", "--model", str(run / "model.swb"),
                  "--frames", str(root / "clip0"), "--out", str(out)])
            outs.append(tree_bytes(out))
        assert outs[0] == outs[1]

    def test_eval_zero_for_identical_static_frames(self, tmp_path, capsys):
        # identical frames, zero flows, all-ones masks -> stability 0.0
        clip = synth_clip(
            SynthConfig(height=16, width=16, num_frames=3, num_objects=0,
                        camera_velocity=(0.0, 0.0), max_speed=0.0),
            seed=9,
        )
        save_clip(clip, tmp_path / "clip")
        frames = tmp_path / "clip"
        out = tmp_path / "report"
        code = main(["eval", "--a", str(frames), "--flows", str(frames),
                     "--masks", str(frames), "--out", str(out)])
        assert code == 0
        text = (out / "report.txt").read_text()
        assert "mean a=0" in text

    def test_eval_mean_is_arithmetic_mean_of_pairs(self, toy_run, tmp_path):
        root, run, _ = toy_run
        styl = tmp_path / "styl"
        main(["stylize", "--model", str(run / "model.swb"), "--frames", str(root / "clip0"),
              "--out", str(styl)])
        # rename outputs so frame discovery picks them up alongside clip flows
        out = tmp_path / "rep"
        code = main(["eval", "--a", str(styl), "--flows", str(root / "clip0"),
                     "--masks", str(root / "clip0"), "--out", str(out)])
        assert code == 0
        import json

        summary = json.loads((out / "summary.json").read_text())
        pairs = summary["a"]["per_pair"]
        assert summary["a"]["mean"] == pytest.approx(sum(pairs) / len(pairs), abs=1e-12)

    def test_eval_missing_directory_is_data_error(self, tmp_path):
        assert main(["eval", "--a", str(tmp_path / "x"), "--flows", str(tmp_path / "y"),
                     "--masks", str(tmp_path / "z")]) == 2


class TestExitCodes:
    def test_usage_error_is_one(self):
        assert main(["synth"]) == 1  # missing required --out
        assert main(["not-a-command"]) == 1

    def test_help_is_zero(self, capsys):
        assert main(["--help"]) == 0
        capsys.readouterr()
