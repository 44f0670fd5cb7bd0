import json
import math

import numpy as np
import pytest
import torch
import yaml

from paranoise_sv.checkpoint import CheckpointError, load_model, read_checkpoint, save_checkpoint
from paranoise_sv.cli import format_ablation, main
from paranoise_sv.config import ConfigError, RunConfig, dump_config, from_dict, load_config
from paranoise_sv.datapipe import load_wav, measured_snr, read_manifest, save_wav
from paranoise_sv.dual_unet import Variant
from paranoise_sv.train import TrainingAborted, learning_rate, pair_trials, train
from conftest import tiny


def short_config(corpus, out_dir, **changes):
    cfg = RunConfig(
        variant="enc_only", seed=0, out_dir=str(out_dir), model_preset="tiny",
        optim={"epochs": 2, "steps_per_epoch": 2, "warmup_epochs": 1},
        data={"train_manifest": str(corpus.train_manifest),
              "noise_manifest": str(corpus.noise_manifest), "trials": str(corpus.trials),
              "num_speakers": 4, "crop_seconds": 1.0},
        validation={"every_epochs": 1, "utterances_per_speaker": 2},
        eval={"conditions": ["clean"]})
    return from_dict(cfg.to_dict()).replace(**changes) if changes else from_dict(cfg.to_dict())


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    cfg = short_config(small_corpus, tmp_path_factory.mktemp("run"))
    return cfg, train(cfg)


class TestSchedule:
    def test_warmup_peak_and_end(self):
        assert learning_rate(0.0, 0.01, 5, 200) == 0.0
        assert learning_rate(2.5, 0.01, 5, 200) == pytest.approx(0.005)
        assert learning_rate(5.0, 0.01, 5, 200) == pytest.approx(0.01)
        assert learning_rate(200.0, 0.01, 5, 200) == pytest.approx(0.0, abs=1e-15)
        mid = 5 + (200 - 5) / 2
        assert learning_rate(mid, 0.01, 5, 200) == pytest.approx(0.005)

    def test_monotone_after_warmup(self):
        lrs = [learning_rate(e, 0.01, 5, 200) for e in np.linspace(5, 200, 100)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_dict({"optim": {"lr": 0.1}})

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            RunConfig(variant="both")

    def test_round_trip_and_env(self, tmp_path):
        cfg = RunConfig(model_preset="tiny").replace(**{"optim.epochs": 3})
        dump_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml", env={}) == cfg
        over = load_config(tmp_path / "c.yaml", env={"PARANOISE_SEED": "9",
                                                      "PARANOISE_OUT": "/tmp/x"})
        assert (over.seed, over.out_dir) == (9, "/tmp/x")

    def test_relative_paths_resolve(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"data": {"trials": "t.txt"}}))
        assert load_config(tmp_path / "c.yaml", env={}).data.trials == str(tmp_path / "t.txt")

    def test_bundled_smoke_config_loads(self):
        from pathlib import Path

        cfg = load_config(Path(__file__).parents[1] / "configs" / "smoke.yaml", env={})
        assert cfg.model_preset == "tiny" and cfg.optim.epochs * cfg.optim.steps_per_epoch == 300


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = tiny(Variant.DEC_ONLY).eval()
        save_checkpoint(tmp_path / "m.pt", model, epoch=3)
        loaded, blob = load_model(tmp_path / "m.pt", expected_variant="dec_only")
        assert blob["header"]["epoch"] == 3 and loaded.variant is Variant.DEC_ONLY
        x = torch.randn(1, 64, 40)
        with torch.no_grad():
            assert torch.equal(model.embed(x), loaded.embed(x))

    def test_variant_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.pt", tiny(Variant.ENC_ONLY))
        with pytest.raises(CheckpointError, match="dec_only"):
            load_model(tmp_path / "m.pt", expected_variant="dec_only")

    def test_missing_and_foreign(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "nope.pt")
        torch.save({"weights": 1}, tmp_path / "other.pt")
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "other.pt")

    def test_tampered_structure(self, tmp_path):
        save_checkpoint(tmp_path / "m.pt", tiny())
        blob = torch.load(tmp_path / "m.pt", weights_only=False)
        blob["header"]["structural_hash"] = "0" * 16
        torch.save(blob, tmp_path / "m.pt")
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "m.pt")


class TestTrain:
    def test_outputs(self, trained):
        cfg, result = trained
        assert len(result.totals) == 4 and all(math.isfinite(t) for t in result.totals)
        rows = [json.loads(l) for l in (result.out_dir / "losses.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        for r in rows:
            parts = r["l_n"] + r["l_s"] + r["l_c"] + r["l_ap"] + r["l_aam"]
            assert r["total"] == pytest.approx(parts, rel=1e-6)
        assert result.best_checkpoint.exists() and result.last_checkpoint.exists()
        assert load_config(result.out_dir / "config.yaml", env={}) == cfg
        assert all(h["val_eer"] is not None for h in result.history)

    def test_resume_continues_trace(self, trained, tmp_path):
        cfg, result = trained
        # restart after epoch 0 and finish epoch 1 in a fresh directory
        resumed = train(cfg.replace(out_dir=str(tmp_path / "b")),
                        resume=result.out_dir / "epoch000.pt")
        assert resumed.totals == pytest.approx(result.totals[2:], abs=1e-6)

    def test_resume_rejects_other_structure(self, trained, tmp_path):
        cfg, result = trained
        other = cfg.replace(variant="dec_only", out_dir=str(tmp_path / "c"))
        with pytest.raises(CheckpointError):
            train(other, resume=result.last_checkpoint)

    def test_non_finite_loss_aborts(self, trained, tmp_path):
        cfg, _ = trained
        bad = cfg.replace(out_dir=str(tmp_path / "d"), **{"optim.lr_peak": 1e30,
                                                          "optim.epochs": 3})
        with pytest.raises(TrainingAborted) as err:
            train(bad)
        diag = json.loads((tmp_path / "d" / "abort.json").read_text())
        assert diag["seed"] == 0 and diag["step"] == err.value.diagnostics["step"]
        assert diag["utterances"]

    def test_pair_trials(self, small_corpus):
        trials = pair_trials(read_manifest(small_corpus.train_manifest), per_speaker=2)
        assert len(trials) == 8 * 7 // 2
        assert sum(t.label for t in trials) == 4


class TestCLI:
    def test_eval_clean_only(self, trained, small_corpus, tmp_path, capsys):
        _, result = trained
        code = main(["eval", "--ckpt", str(result.best_checkpoint), "--trials",
                     str(small_corpus.trials), "--conditions", "clean", "--out", str(tmp_path)])
        assert code == 0
        rows = [json.loads(l) for l in (tmp_path / "report.jsonl").read_text().splitlines()]
        assert [r["condition"] for r in rows] == ["clean", "average"]
        assert "clean" in capsys.readouterr().out

    def test_eval_noisy_grid(self, trained, small_corpus, tmp_path):
        _, result = trained
        code = main(["eval", "--ckpt", str(result.best_checkpoint), "--trials",
                     str(small_corpus.trials), "--conditions", "babble", "--snr", "0,20",
                     "--out", str(tmp_path), "--plot"])
        assert code == 0
        rows = [json.loads(l) for l in (tmp_path / "report.jsonl").read_text().splitlines()]
        assert [(r["condition"], r["snr_db"]) for r in rows[:2]] == [("babble", 0.0),
                                                                     ("babble", 20.0)]
        assert (tmp_path / "report.png").exists()

    def test_missing_checkpoint(self, small_corpus, tmp_path, capsys):
        code = main(["eval", "--ckpt", str(tmp_path / "none.pt"), "--trials",
                     str(small_corpus.trials)])
        assert code != 0
        assert "not found" in capsys.readouterr().err

    def test_wrong_variant(self, trained, small_corpus, capsys):
        _, result = trained
        code = main(["eval", "--ckpt", str(result.best_checkpoint), "--trials",
                     str(small_corpus.trials), "--variant", "baseline_no_ne"])
        assert code != 0
        assert "baseline_no_ne" in capsys.readouterr().err

    def test_bad_condition(self, trained, small_corpus, capsys):
        _, result = trained
        code = main(["eval", "--ckpt", str(result.best_checkpoint), "--trials",
                     str(small_corpus.trials), "--conditions", "traffic"])
        assert code != 0

    def test_params(self, tmp_path, capsys):
        dump_config(RunConfig(), tmp_path / "c.yaml")
        assert main(["params", "--config", str(tmp_path / "c.yaml")]) == 0
        count = int(capsys.readouterr().out)
        assert abs(count - 7.75e6) / 7.75e6 <= 0.15

    def test_mix(self, tmp_path):
        rng = np.random.default_rng(0)
        save_wav(tmp_path / "s.wav", 0.3 * rng.standard_normal(16000).clip(-3, 3) / 3)
        save_wav(tmp_path / "n.wav", 0.3 * rng.standard_normal(8000).clip(-3, 3) / 3)
        code = main(["mix", "--in", str(tmp_path / "s.wav"), "--noise", str(tmp_path / "n.wav"),
                     "--snr", "5", "--out", str(tmp_path / "m.wav"), "--float"])
        assert code == 0
        s, m = load_wav(tmp_path / "s.wav"), load_wav(tmp_path / "m.wav")
        assert len(m) == len(s)
        assert measured_snr(s, m.astype(np.float64) - s) == pytest.approx(5.0, abs=1e-3)

    def test_synth(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path), "--speakers", "2", "--utterances", "2",
                     "--duration", "0.5"])
        assert code == 0
        assert len(read_manifest(tmp_path / "train.tsv")) == 4

    def test_format_ablation(self):
        rows = [{"variant": v.value, "parameters": 10, "eer_percent": {"clean": 1.0},
                 "avg_eer_percent": 1.0} for v in Variant]
        table = format_ablation(rows)
        assert len(table.splitlines()) == 5 and "Avg." in table
