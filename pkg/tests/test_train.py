"""Training loop: schedule, determinism, checkpointing, evaluation."""

from __future__ import annotations

import csv

import pytest
import torch

from mefnas.ablation import default_genotype
from mefnas.data import SynthConfig, make_test_image, synth_pair
from mefnas.losses import LossWeights
from mefnas.metrics import psnr
from mefnas.train import (
    TrainConfig,
    TrainError,
    build_net,
    cosine_lr,
    evaluate,
    latest_checkpoint,
    load_checkpoint,
    restore_net,
    train,
    write_eval,
)


def _fast_cfg(**kw):
    base = dict(epochs=3, batch_size=4, patch=16, lr=1e-3, lr_end=1e-5, seed=0,
                cascade_count=1, adversarial=False, weights=LossWeights(0.75, 0.0),
                augment=True)
    base.update(kw)
    return TrainConfig(**base)


def _geno():
    return default_genotype(base_channels=8)


class TestSchedule:
    def test_start_is_lr0(self):
        assert cosine_lr(0, 1000, 1e-4, 1e-10) == pytest.approx(1e-4, abs=1e-12)

    def test_end_is_lr1(self):
        assert cosine_lr(999, 1000, 1e-4, 1e-10) == pytest.approx(1e-10, abs=1e-12)

    def test_midpoint(self):
        lr = cosine_lr(500, 1001, 2e-4, 0.0)
        assert lr == pytest.approx(1e-4, rel=1e-9)

    def test_monotone_decay(self):
        values = [cosine_lr(s, 100, 1e-3, 1e-6) for s in range(100)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_single_step_schedule(self):
        assert cosine_lr(0, 1, 3e-4, 1e-10) == 3e-4


class TestTraining:
    def test_writes_artifacts(self, aligned_pairs, tmp_path):
        res = train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "run")
        assert res.final_checkpoint.exists()
        assert res.log_path.exists()
        assert (tmp_path / "run" / "genotype.json").exists()
        assert res.steps == 3  # 4 pairs / batch 4 = 1 step per epoch

    def test_log_format(self, aligned_pairs, tmp_path):
        res = train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "run")
        lines = res.log_path.read_text().splitlines()
        assert lines[0].startswith("# batch_size=4 patch=16 lr=0.001 seed=0")
        rows = list(csv.DictReader(lines[1:]))
        assert len(rows) == 3
        assert {"step", "l_int", "l_gra", "l_dis", "l_total", "d_loss"} <= set(rows[0])
        for row in rows:
            parts = (float(row["l_int"]) + 0.75 * float(row["l_gra"])
                     + 0.0 * float(row["l_dis"]))
            assert parts == pytest.approx(float(row["l_total"]), abs=1e-9)

    def test_bit_exact_determinism(self, aligned_pairs, tmp_path):
        res_a = train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "a")
        res_b = train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "b")
        sd_a = res_a.net.state_dict()
        sd_b = res_b.net.state_dict()
        assert sd_a.keys() == sd_b.keys()
        for k in sd_a:
            assert torch.equal(sd_a[k], sd_b[k]), k

    def test_seed_changes_trajectory(self, aligned_pairs, tmp_path):
        res_a = train(_geno(), aligned_pairs[:4], _fast_cfg(seed=0), tmp_path / "a")
        res_b = train(_geno(), aligned_pairs[:4], _fast_cfg(seed=1), tmp_path / "b")
        sd_a, sd_b = res_a.net.state_dict(), res_b.net.state_dict()
        assert any(not torch.equal(sd_a[k], sd_b[k]) for k in sd_a)

    def test_diverged_run_raises(self, aligned_pairs, tmp_path, monkeypatch):
        import mefnas.train as train_mod

        def bad_net(genotype, cascade_count=2):
            net = build_net(genotype, cascade_count)
            with torch.no_grad():
                next(net.drm.coarse_head.parameters()).fill_(float("nan"))
            return net

        monkeypatch.setattr(train_mod, "build_net", bad_net)
        with pytest.raises(TrainError, match="training diverged at step"):
            train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "run")

    def test_empty_pairs_rejected(self, tmp_path):
        with pytest.raises(TrainError):
            train(_geno(), [], _fast_cfg(), tmp_path / "run")

    def test_adversarial_branch_runs(self, aligned_pairs, tmp_path):
        cfg = _fast_cfg(adversarial=True, weights=LossWeights(0.75, 0.05), epochs=2)
        res = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "run")
        rows = list(csv.DictReader(res.log_path.read_text().splitlines()[1:]))
        assert any(float(r["d_loss"]) != 0.0 for r in rows)


class TestCheckpointing:
    def test_round_trip_bit_exact(self, aligned_pairs, tmp_path):
        res = train(_geno(), aligned_pairs[:4], _fast_cfg(), tmp_path / "run")
        ckpt = load_checkpoint(res.final_checkpoint)
        net, geno = restore_net(ckpt)
        sd_trained = res.net.state_dict()
        sd_restored = net.state_dict()
        assert sd_trained.keys() == sd_restored.keys()
        for k in sd_trained:
            assert torch.equal(sd_trained[k], sd_restored[k]), k
        assert geno.blocks == _geno().blocks

    def test_resume_matches_uninterrupted_run(self, aligned_pairs, tmp_path):
        """The first post-resume step loss agrees with the straight run, 1e-6."""
        cfg = _fast_cfg(epochs=6)
        full = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "full")
        part = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "part", max_steps=3)
        resumed = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "part",
                        resume_from=part.final_checkpoint)
        full_rows = list(csv.DictReader(full.log_path.read_text().splitlines()[1:]))
        res_rows = list(csv.DictReader(resumed.log_path.read_text().splitlines()[1:]))
        full_by_step = {r["step"]: float(r["l_total"]) for r in full_rows}
        res_by_step = {r["step"]: float(r["l_total"]) for r in res_rows}
        assert "3" in res_by_step
        assert res_by_step["3"] == pytest.approx(full_by_step["3"], abs=1e-6)
        # the whole tail should agree, not just one step
        for s in ("3", "4", "5"):
            assert res_by_step[s] == pytest.approx(full_by_step[s], abs=1e-6)

    def test_resume_final_weights_bit_exact(self, aligned_pairs, tmp_path):
        cfg = _fast_cfg(epochs=4)
        full = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "full")
        part = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "part", max_steps=2)
        resumed = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "part",
                        resume_from=part.final_checkpoint)
        sd_full = full.net.state_dict()
        sd_res = resumed.net.state_dict()
        for k in sd_full:
            assert torch.equal(sd_full[k], sd_res[k]), k

    def test_latest_checkpoint_picks_max_step(self, aligned_pairs, tmp_path):
        cfg = _fast_cfg(epochs=4, checkpoint_every=2)
        res = train(_geno(), aligned_pairs[:4], cfg, tmp_path / "run")
        latest = latest_checkpoint(tmp_path / "run")
        assert latest.name == "4.bin"
        assert latest == res.final_checkpoint

    def test_missing_checkpoint_error(self, tmp_path):
        with pytest.raises(TrainError, match="checkpoint error"):
            load_checkpoint(tmp_path / "absent.bin")

    def test_latest_checkpoint_empty_dir_error(self, tmp_path):
        with pytest.raises(TrainError, match="checkpoint error"):
            latest_checkpoint(tmp_path)


class TestEvaluation:
    def test_identity_net_on_identity_pairs(self):
        """Pairs where under = gt: a pass-through stub scores the cap exactly."""
        cfg = SynthConfig(under_exposure=0.0, over_exposure=0.0, gamma=1.0,
                          noise_sigma=0.0, seed=0)
        pairs = [synth_pair(make_test_image(i, 32), cfg) for i in range(3)]

        class Passthrough(torch.nn.Module):
            def forward(self, under, over):
                return under

        result = evaluate(Passthrough(), pairs)
        assert result.psnr_db == 100.0
        assert result.ssim == pytest.approx(1.0, abs=1e-6)
        assert len(result.per_image) == 3
        assert result.per_image[0]["image"] == "0000"

    def test_write_eval_formats(self, tmp_path):
        class Half(torch.nn.Module):
            def forward(self, under, over):
                return 0.5 * (under + over)

        pairs = [synth_pair(make_test_image(i, 32), SynthConfig(seed=i))
                 for i in range(2)]
        result = evaluate(Half(), pairs)
        csv_path = tmp_path / "eval.csv"
        json_path = tmp_path / "eval.json"
        write_eval(result, csv_path, json_path)
        rows = list(csv.DictReader(csv_path.open()))
        assert len(rows) == 2
        import json

        summary = json.loads(json_path.read_text())
        assert summary["count"] == 2
        assert summary["psnr_db"] == pytest.approx(result.psnr_db, rel=1e-9)

    def test_trained_model_beats_averaging_baseline(self, tmp_path):
        """Held-out synthetic pairs: the fused output must outscore the plain
        average of the two exposures."""
        train_pairs = [synth_pair(make_test_image(i, 64), SynthConfig(seed=i))
                       for i in range(8)]
        held_out = [synth_pair(make_test_image(100 + i, 64), SynthConfig(seed=100 + i))
                    for i in range(4)]
        cfg = TrainConfig(epochs=300, batch_size=8, patch=32, lr=3e-3, lr_end=1e-5,
                          seed=0, cascade_count=1, adversarial=False,
                          weights=LossWeights(0.0, 0.0), augment=True)
        res = train(default_genotype(base_channels=8), train_pairs, cfg,
                    tmp_path / "run")
        fused = evaluate(res.net, held_out)
        baseline = sum(psnr(0.5 * (p.under + p.over), p.gt) for p in held_out) / 4
        assert fused.psnr_db > baseline


class TestBuildNet:
    def test_without_relight_blocks(self):
        geno = default_genotype(base_channels=8, with_srsm=False)
        net = build_net(geno, cascade_count=2)
        assert net.srsm_under is None

    def test_with_alignment_blocks(self):
        geno = default_genotype(base_channels=8, with_dasm=True)
        net = build_net(geno, cascade_count=1)
        assert net.dasm is not None
        assert net.fuse_conv is None
