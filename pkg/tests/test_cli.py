import json

import numpy as np
import pytest

from avflow.checkpoint import load_checkpoint, load_tensors
from avflow.cli import main
from avflow.pgm import read_pgm, write_pgm


def tiny_config(out_dir, steps=2, stage=1, seed=0) -> dict:
    return {
        "model": {
            "n_blocks": 1, "model_dim": 16, "n_heads": 2, "head_dim": 8,
            "ffn_mult": 2, "patch": [1, 2, 2],
        },
        "world": {"bank_seed": 1},
        "train": {
            "stage": stage, "steps": steps, "batch_size": 2, "lr": 0.001,
            "seed": seed, "checkpoint_every": 0,
        },
        "sample": {"omega": 2.0, "steps": 4, "task": "T2AV", "seed": 0},
        "paths": {"out_dir": str(out_dir)},
    }


@pytest.fixture()
def trained_checkpoint(tmp_path):
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(out, steps=2)))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return out / "model.utlk"


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (5, 9)).astype(np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)
        assert path.read_bytes().startswith(b"P5\n9 5\n255\n")

    def test_rejects_bad_input(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros(4, dtype=np.uint8))


class TestTrainCommand:
    def test_zero_steps_header_only_exit_zero(self, tmp_path, capsys):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny_config(out, steps=0)))
        assert main(["train", "--config", str(cfg)]) == 0
        assert (out / "metrics.csv").read_text() == (
            "step,task,loss_total,loss_a,loss_v,grad_norm,wall_ms\n"
        )
        assert (out / "model.utlk").exists()

    def test_invalid_config_exit_2_with_field_path(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"lr": "fast"}}))
        assert main(["train", "--config", str(cfg)]) == 2
        assert "train.lr" in capsys.readouterr().err

    def test_replay_identical_metrics_modulo_wall(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps(tiny_config(out, steps=3)))
            assert main(["train", "--config", str(cfg)]) == 0
            outs.append((out / "metrics.csv").read_text())

        def strip(text):
            return [",".join(l.split(",")[:6]) for l in text.splitlines()]

        assert strip(outs[0]) == strip(outs[1])

    def test_resume_continues(self, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.json"
        spec = tiny_config(out, steps=4)
        spec["train"]["checkpoint_every"] = 2
        cfg.write_text(json.dumps(spec))
        assert main(["train", "--config", str(cfg)]) == 0
        mid = out / "model.step000002.utlk"
        assert mid.exists()
        full_rows = (out / "metrics.csv").read_text().splitlines()[1:]

        out2 = tmp_path / "resumed"
        assert main([
            "train", "--config", str(cfg), "--resume", str(mid), "--out", str(out2),
        ]) == 0
        resumed_rows = (out2 / "metrics.csv").read_text().splitlines()[1:]

        def strip(rows):
            return [",".join(r.split(",")[:6]) for r in rows]

        assert strip(resumed_rows) == strip(full_rows[2:])

    def test_nan_abort_exit_3_with_step_and_task(self, tmp_path, capsys):
        out = tmp_path / "run"
        spec = tiny_config(out, steps=5)
        spec["train"]["lr"] = 1e30  # guaranteed overflow on the next forward
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(spec))
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(cfg)])
        assert code == 3
        err = capsys.readouterr().err
        assert "step" in err and "TTS" in err

    def test_stage_transition_resume(self, tmp_path):
        """Stage-2 training resumed from a stage-1 checkpoint adopts the
        weights, restarts at step 0, and rebuilds the optimizer state."""
        out1 = tmp_path / "s1"
        cfg1 = tmp_path / "s1.json"
        cfg1.write_text(json.dumps(tiny_config(out1, steps=2, stage=1)))
        assert main(["train", "--config", str(cfg1)]) == 0

        out2 = tmp_path / "s2"
        spec2 = tiny_config(out2, steps=2, stage=2, seed=1)
        cfg2 = tmp_path / "s2.json"
        cfg2.write_text(json.dumps(spec2))
        assert main([
            "train", "--config", str(cfg2), "--resume", str(out1 / "model.utlk"),
        ]) == 0
        rows = (out2 / "metrics.csv").read_text().splitlines()[1:]
        assert len(rows) == 2
        assert rows[0].split(",")[0] == "0"
        assert rows[0].split(",")[1] == "T2AV"
        ckpt = load_checkpoint(out2 / "model.utlk")
        # stage-2 optimizer covers every parameter, not just the audio stream
        assert any(n.startswith("video.") for n in ckpt.optimizer.m)

    def test_resume_config_mismatch_exit_2(self, tmp_path, capsys):
        out = tmp_path / "run"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny_config(out, steps=1)))
        assert main(["train", "--config", str(cfg)]) == 0
        other = tiny_config(out, steps=1)
        other["model"]["n_blocks"] = 1
        other["world"]["bank_seed"] = 99
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps(other))
        code = main([
            "train", "--config", str(cfg2), "--resume", str(out / "model.utlk"),
        ])
        assert code == 2


class TestSampleCommand:
    def test_same_seed_identical_dumps(self, trained_checkpoint, tmp_path):
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert main([
                "sample", "--checkpoint", str(trained_checkpoint),
                "--task", "T2AV", "--omega", "1.0", "--steps", "3",
                "--seed", "5", "--out", str(out),
            ]) == 0
            outs.append(out)
        a = (outs[0] / "audio.bin").read_bytes()
        b = (outs[1] / "audio.bin").read_bytes()
        assert a == b
        av = (outs[0] / "video.bin").read_bytes()
        bv = (outs[1] / "video.bin").read_bytes()
        assert av == bv

    def test_tv2a_video_bit_equals_conditioning(self, trained_checkpoint, tmp_path):
        out = tmp_path / "tv2a"
        assert main([
            "sample", "--checkpoint", str(trained_checkpoint), "--task", "TV2A",
            "--steps", "3", "--seed", "6", "--out", str(out),
        ]) == 0
        dumped, _ = load_tensors(out / "video.bin")
        # regenerate the conditioning video exactly as the command derived it
        from avflow.cli import _build_task_inputs, build_runtime
        from avflow.config import config_from_dict

        ckpt = load_checkpoint(trained_checkpoint)
        run = config_from_dict(ckpt.config)
        _, _, bank = build_runtime(run, params=ckpt.params)
        source, _ = _build_task_inputs(run, bank, "TV2A", 6)
        np.testing.assert_array_equal(dumped["video"], source.video)

    def test_outputs_shapes_and_manifest(self, trained_checkpoint, tmp_path):
        out = tmp_path / "t2av"
        assert main([
            "sample", "--checkpoint", str(trained_checkpoint), "--task", "T2AV",
            "--steps", "3", "--seed", "7", "--out", str(out),
        ]) == 0
        video, _ = load_tensors(out / "video.bin")
        audio, _ = load_tensors(out / "audio.bin")
        assert video["video"].shape == (8, 4, 4, 8)
        assert audio["audio"].shape == (16, 8)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["task"] == "T2AV" and manifest["seed"] == 7
        assert len(manifest["prompt_phonemes"]) == 8
        for name in manifest["files"]["frames"]:
            img = read_pgm(out / name)
            assert img.shape == (4, 4 * 8)
        assert read_pgm(out / "audio.pgm").shape == (8, 16)

    def test_unknown_task_exit_2(self, trained_checkpoint, tmp_path):
        assert main([
            "sample", "--checkpoint", str(trained_checkpoint), "--task", "A2V",
            "--out", str(tmp_path / "x"),
        ]) == 2

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main([
            "sample", "--checkpoint", str(tmp_path / "nope.utlk"), "--out", str(tmp_path),
        ]) == 2


class TestEvalCommand:
    def test_report_files_and_reproducibility(self, trained_checkpoint, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert main([
                "eval", "--checkpoint", str(trained_checkpoint), "--samples", "2",
                "--seed", "3", "--steps", "3", "--out", str(out),
            ]) == 0
            outs.append(out)
        for fname in ("report.json", "report.txt", "report.csv",
                      "eval_sync.png", "eval_adherence.png", "eval_timbre.png"):
            assert (outs[0] / fname).exists(), fname
        assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
        assert (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
        report = json.loads((outs[0] / "report.json").read_text())
        assert set(report["tasks"]) == {"T2AV", "TV2A", "TI2AV", "TR2AV"}
        assert report["tasks"]["TV2A"]["video_clamped"] is True


class TestInspectAttnCommand:
    def test_exports_and_shapes(self, trained_checkpoint, tmp_path):
        out = tmp_path / "attn"
        assert main([
            "inspect-attn", "--checkpoint", str(trained_checkpoint),
            "--seed", "2", "--blocks", "0", "--steps", "0,2", "--out", str(out),
        ]) == 0
        raw, _ = load_tensors(out / "attn_raw.bin")
        # 32 video tokens (8 frames x 2x2 patches), 16 audio tokens
        assert raw["a2v_step0_block0"].shape == (16, 32)
        assert raw["v2a_step0_block0"].shape == (32, 16)
        assert read_pgm(out / "attn_a2v_step2_block0.pgm").shape == (16, 32)
        manifest = json.loads((out / "attn_manifest.json").read_text())
        assert len(manifest["captured"]) == 2
        # sub-blocks of softmax rows sum to <= 1
        for key, mat in raw.items():
            assert mat.sum(axis=1).max() <= 1.0 + 1e-5

    def test_out_of_range_block_exit_2(self, trained_checkpoint, tmp_path):
        assert main([
            "inspect-attn", "--checkpoint", str(trained_checkpoint),
            "--blocks", "5", "--steps", "0", "--out", str(tmp_path / "x"),
        ]) == 2

    def test_out_of_range_step_exit_2(self, trained_checkpoint, tmp_path):
        assert main([
            "inspect-attn", "--checkpoint", str(trained_checkpoint),
            "--blocks", "0", "--steps", "99", "--out", str(tmp_path / "x"),
        ]) == 2
