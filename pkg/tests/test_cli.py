"""End-to-end tests for the command line interface.

Everything runs through cli.main with tiny grids so the whole file stays
fast; the expensive artifacts (a generated dataset, a trained checkpoint)
are built once per module and shared.
"""

import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from pdenetpp import pdnx
from pdenetpp.cli import main


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


def read_csv(path):
    lines = open(path).read().splitlines()
    return lines[0], [line.split(",") for line in lines[1:]]


def dir_bytes(root):
    """Map of relative path -> file bytes for a whole tree."""
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            full = os.path.join(base, name)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


GEN_FN = {"pde": "fn", "fine": 32, "coarse": 32, "ratio": 2, "trajectories": 2, "steps": 2, "seed": 7}
GEN_NS = {"pde": "ns", "fine": 32, "coarse": 32, "ratio": 2, "trajectories": 2, "steps": 1, "seed": 7}
TRAIN_FN = {
    "pde": "fn",
    "method": "moment",
    "backbone": "convresnet",
    "backbone_opts": {"width": 4, "blocks": 1},
    "epochs": 1,
    "batch_size": 4,
    "lr": 1e-3,
    "seed": 3,
}


@pytest.fixture(scope="module")
def fn_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("fnds")
    cfg = write_json(root / "gen.json", GEN_FN)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == 0
    return str(root / "data")


@pytest.fixture(scope="module")
def ns_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("nsds")
    cfg = write_json(root / "gen.json", GEN_NS)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == 0
    return str(root / "data")


@pytest.fixture(scope="module")
def fn_checkpoint(tmp_path_factory, fn_dataset):
    root = tmp_path_factory.mktemp("fnrun")
    cfg = write_json(root / "train.json", dict(TRAIN_FN, dataset=fn_dataset))
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return str(root / "run" / "checkpoint")


class TestGenerate:
    def test_dataset_layout(self, fn_dataset):
        meta = json.load(open(os.path.join(fn_dataset, "metadata.json")))
        assert meta["pde"] == "fn"
        assert meta["shape"] == [2, 3, 2, 32, 32]
        assert meta["files"] == {"clean": "clean.pdnx", "noisy": "noisy.pdnx"}
        assert meta["seed"] == 7 and meta["noise"] == 0.001
        clean = pdnx.read_pdnx(os.path.join(fn_dataset, "clean.pdnx"))
        noisy = pdnx.read_pdnx(os.path.join(fn_dataset, "noisy.pdnx"))
        assert clean.shape == noisy.shape == (2, 3, 2, 32, 32)
        assert not np.array_equal(clean, noisy)

    def test_same_seed_byte_identical(self, fn_dataset, tmp_path):
        cfg = write_json(tmp_path / "gen.json", GEN_FN)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
        assert dir_bytes(tmp_path / "data") == dir_bytes(fn_dataset)

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_json(tmp_path / "gen.json", GEN_FN)
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d"), "--seed", "11"]) == 0
        meta = json.load(open(tmp_path / "d" / "metadata.json"))
        assert meta["seed"] == 11

    def test_zero_noise_omits_noisy_file(self, tmp_path):
        cfg = write_json(tmp_path / "gen.json", dict(GEN_FN, noise=0.0))
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        meta = json.load(open(tmp_path / "d" / "metadata.json"))
        assert meta["files"] == {"clean": "clean.pdnx"}
        assert not os.path.exists(tmp_path / "d" / "noisy.pdnx")

    def test_ns_stores_one_shared_forcing(self, ns_dataset):
        meta = json.load(open(os.path.join(ns_dataset, "metadata.json")))
        assert meta["files"]["forcing"] == "forcing.pdnx"
        forcing = pdnx.read_pdnx(os.path.join(ns_dataset, "forcing.pdnx"))
        assert forcing.shape == (1, 32, 32)

    def test_unknown_pde_is_usage_error(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", dict(GEN_FN, pde="heat"))
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "unknown pde" in capsys.readouterr().err

    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", dict(GEN_FN, bogus=1))
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2
        assert "unknown keys: bogus" in capsys.readouterr().err

    def test_zero_trajectories_is_usage_error(self, tmp_path):
        cfg = write_json(tmp_path / "gen.json", dict(GEN_FN, trajectories=0))
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 2

    def test_blowup_is_numerical_failure(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "gen.json", dict(GEN_FN, dt=1e6, steps=5))
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["generate", "--config", cfg, "--out", str(tmp_path / "d")])
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, fn_checkpoint):
        run = os.path.dirname(fn_checkpoint)
        manifest = json.load(open(os.path.join(fn_checkpoint, "manifest.json")))
        assert manifest["format"] == "checkpoint"
        assert manifest["model"]["pde"] == "fn"
        assert manifest["model"]["method"] == "moment"
        for entry in manifest["parameters"]:
            arr = pdnx.read_pdnx(os.path.join(fn_checkpoint, entry["file"]))
            assert list(arr.shape) == entry["shape"]
        header, rows = read_csv(os.path.join(run, "loss.csv"))
        assert header == "epoch,loss,pred_loss,reg_loss"
        assert len(rows) == 1
        epoch, loss, pred, reg = rows[0]
        assert epoch == "0"
        assert float(loss) == pytest.approx(float(pred) + 0.001 * float(reg))

    def test_same_seed_byte_identical(self, fn_dataset, fn_checkpoint, tmp_path):
        cfg = write_json(tmp_path / "train.json", dict(TRAIN_FN, dataset=fn_dataset))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        assert dir_bytes(tmp_path / "run") == dir_bytes(os.path.dirname(fn_checkpoint))

    def test_zero_epochs_saves_initial_model(self, fn_dataset, tmp_path):
        cfg = write_json(tmp_path / "t.json", dict(TRAIN_FN, dataset=fn_dataset, epochs=0))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        header, rows = read_csv(tmp_path / "run" / "loss.csv")
        assert header == "epoch,loss,pred_loss,reg_loss" and rows == []
        assert os.path.exists(tmp_path / "run" / "checkpoint" / "manifest.json")

    def test_blackbox_reg_loss_is_zero(self, fn_dataset, tmp_path):
        cfg = write_json(
            tmp_path / "t.json", dict(TRAIN_FN, dataset=fn_dataset, method="blackbox")
        )
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        _, rows = read_csv(tmp_path / "run" / "loss.csv")
        assert all(float(r[3]) == 0.0 for r in rows)

    def test_pde_mismatch_is_usage_error(self, fn_dataset, tmp_path, capsys):
        cfg = write_json(tmp_path / "t.json", dict(TRAIN_FN, dataset=fn_dataset, pde="burgers"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
        assert "does not match the dataset" in capsys.readouterr().err

    def test_tfdl_needs_first_derivatives(self, fn_dataset, tmp_path):
        cfg = write_json(tmp_path / "t.json", dict(TRAIN_FN, dataset=fn_dataset, method="tfdl"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2

    def test_missing_dataset_is_usage_error(self, tmp_path):
        cfg = write_json(tmp_path / "t.json", dict(TRAIN_FN, dataset=str(tmp_path / "nope")))
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2

    def test_nonfinite_loss_is_numerical_failure(self, fn_dataset, tmp_path, capsys):
        bad = tmp_path / "bad"
        shutil.copytree(fn_dataset, bad)
        clean = pdnx.read_pdnx(bad / "clean.pdnx")
        huge = np.where(np.indices(clean.shape).sum(axis=0) % 2 == 0, 1e160, -1e160)
        pdnx.write_pdnx(bad / "clean.pdnx", huge)
        pdnx.write_pdnx(bad / "noisy.pdnx", huge)
        cfg = write_json(tmp_path / "t.json", dict(TRAIN_FN, dataset=str(bad)))
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", cfg, "--out", str(tmp_path / "run")])
        assert code == 3
        assert "non-finite loss" in capsys.readouterr().err


class TestEvaluate:
    def test_report_matches_trajectory_table(self, fn_checkpoint, fn_dataset, tmp_path):
        cfg = write_json(
            tmp_path / "e.json", {"checkpoint": fn_checkpoint, "dataset": fn_dataset}
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev")]) == 0
        report = json.load(open(tmp_path / "ev" / "report.json"))
        header, rows = read_csv(tmp_path / "ev" / "trajectories.csv")
        assert header == "trajectory,step,rel_error,failed_flag"
        assert len(rows) == 2 * 2
        ok_errors = [float(r[2]) for r in rows if r[3] == "0"]
        n_failed = len({r[0] for r in rows if r[3] == "1"})
        assert report["n_failed"] == n_failed
        assert report["sr_percent"] == pytest.approx(100.0 * (2 - n_failed) / 2)
        assert report["avg_l2_error"] == pytest.approx(np.mean(ok_errors))

    def test_threshold_controls_failure(self, fn_checkpoint, fn_dataset, tmp_path):
        cfg = write_json(
            tmp_path / "e.json",
            {"checkpoint": fn_checkpoint, "dataset": fn_dataset, "threshold": 1e-12},
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev")]) == 0
        report = json.load(open(tmp_path / "ev" / "report.json"))
        assert report["sr_percent"] == 0.0 and report["n_failed"] == 2

    def test_all_failed_report_stays_strict_json(self, fn_checkpoint, fn_dataset, tmp_path):
        cfg = write_json(
            tmp_path / "e.json",
            {"checkpoint": fn_checkpoint, "dataset": fn_dataset, "threshold": 1e-12},
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev")]) == 0

        def reject(_):
            raise AssertionError("non-finite constant leaked into report.json")

        report = json.loads(
            (tmp_path / "ev" / "report.json").read_text(), parse_constant=reject
        )
        assert report["avg_l2_error"] is None

    def test_channel_mismatch_is_usage_error(self, fn_checkpoint, ns_dataset, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "e.json", {"checkpoint": fn_checkpoint, "dataset": ns_dataset}
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev")]) == 2
        assert "does not match the checkpointed model" in capsys.readouterr().err

    def test_missing_checkpoint_is_usage_error(self, fn_dataset, tmp_path):
        cfg = write_json(
            tmp_path / "e.json", {"checkpoint": str(tmp_path / "nope"), "dataset": fn_dataset}
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "ev")]) == 2


class TestRollout:
    def make_ic(self, path, value=None):
        rng = np.random.default_rng(5)
        ic = np.full((2, 32, 32), value) if value is not None else rng.normal(size=(2, 32, 32))
        pdnx.write_pdnx(path, ic)
        return str(path)

    def test_zero_steps_single_frame(self, fn_checkpoint, tmp_path):
        ic = self.make_ic(tmp_path / "ic.pdnx")
        cfg = write_json(
            tmp_path / "r.json", {"checkpoint": fn_checkpoint, "initial": ic, "steps": 0}
        )
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 0
        traj = pdnx.read_pdnx(tmp_path / "ro" / "trajectory.pdnx")
        assert traj.shape == (1, 2, 32, 32)
        sidecar = json.load(open(tmp_path / "ro" / "frames.json"))
        assert [f["file"] for f in sidecar["frames"]] == ["frame_0000.pgm"]

    def test_constant_field_renders_mid_gray(self, fn_checkpoint, tmp_path):
        ic = self.make_ic(tmp_path / "ic.pdnx", value=0.5)
        cfg = write_json(
            tmp_path / "r.json", {"checkpoint": fn_checkpoint, "initial": ic, "steps": 0}
        )
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 0
        blob = open(tmp_path / "ro" / "frame_0000.pgm", "rb").read()
        assert blob.startswith(b"P5\n32 32\n255\n")
        pixels = blob[len(b"P5\n32 32\n255\n"):]
        assert len(pixels) == 32 * 32 and set(pixels) == {128}
        sidecar = json.load(open(tmp_path / "ro" / "frames.json"))
        assert sidecar["frames"][0]["min"] == sidecar["frames"][0]["max"] == 0.5

    def test_frame_selection(self, fn_checkpoint, tmp_path):
        ic = self.make_ic(tmp_path / "ic.pdnx")
        cfg = write_json(
            tmp_path / "r.json",
            {"checkpoint": fn_checkpoint, "initial": ic, "steps": 2, "frames": [0, 2], "channel": 1},
        )
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 0
        pgms = sorted(p for p in os.listdir(tmp_path / "ro") if p.endswith(".pgm"))
        assert pgms == ["frame_0000.pgm", "frame_0002.pgm"]
        traj = pdnx.read_pdnx(tmp_path / "ro" / "trajectory.pdnx")
        assert traj.shape == (3, 2, 32, 32)

    def test_batched_initial_state_accepted(self, fn_checkpoint, tmp_path):
        ic = np.random.default_rng(5).normal(size=(1, 2, 32, 32))
        pdnx.write_pdnx(tmp_path / "ic.pdnx", ic)
        cfg = write_json(
            tmp_path / "r.json",
            {"checkpoint": fn_checkpoint, "initial": str(tmp_path / "ic.pdnx"), "steps": 1},
        )
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 0

    def test_usage_errors(self, fn_checkpoint, tmp_path):
        ic = self.make_ic(tmp_path / "ic.pdnx")
        base = {"checkpoint": fn_checkpoint, "initial": ic, "steps": 1}
        for bad in (
            dict(base, steps=-1),
            dict(base, frames=[5]),
            dict(base, channel=7),
            dict(base, initial=str(tmp_path / "nope.pdnx")),
        ):
            cfg = write_json(tmp_path / "r.json", bad)
            assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 2

    def test_wrong_channel_count_rejected(self, fn_checkpoint, tmp_path):
        pdnx.write_pdnx(tmp_path / "ic.pdnx", np.zeros((1, 32, 32)))
        cfg = write_json(
            tmp_path / "r.json",
            {"checkpoint": fn_checkpoint, "initial": str(tmp_path / "ic.pdnx"), "steps": 1},
        )
        assert main(["rollout", "--config", cfg, "--out", str(tmp_path / "ro")]) == 2


class TestSchemes:
    def test_default_run_covers_all_schemes(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5, "cells": 64, "steps": 20})
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 0
        info = json.load(open(tmp_path / "sc" / "schemes.json"))
        assert sorted(info["files"]) == ["minmod", "upwind1", "upwind2", "vanleer", "weno3"]
        assert info["warning"] is None and info["skipped"] == []
        for fname in info["files"].values():
            header, rows = read_csv(tmp_path / "sc" / fname)
            assert header == "step,tv,l2_error"
            assert len(rows) == 21 and rows[0][0] == "0"

    def test_unit_cfl_upwind_is_exact(self, tmp_path):
        cfg = write_json(
            tmp_path / "s.json",
            {"mu": 1.0, "cells": 64, "steps": 8, "schemes": ["upwind1"], "profile": "square"},
        )
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 0
        _, rows = read_csv(tmp_path / "sc" / "upwind1.csv")
        assert all(float(r[2]) == 0.0 for r in rows)

    def test_minmod_tv_never_grows(self, tmp_path):
        cfg = write_json(
            tmp_path / "s.json", {"mu": 0.4, "cells": 64, "steps": 50, "schemes": ["minmod"]}
        )
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 0
        _, rows = read_csv(tmp_path / "sc" / "minmod.csv")
        tv = [float(r[1]) for r in rows]
        assert all(b <= a + 1e-12 for a, b in zip(tv, tv[1:]))

    def test_large_cfl_skips_flux_form_schemes(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"mu": 1.5, "cells": 64, "steps": 5})
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 0
        info = json.load(open(tmp_path / "sc" / "schemes.json"))
        assert "outside (0, 1]" in info["warning"]
        assert info["skipped"] == ["minmod", "vanleer", "weno3"]
        assert sorted(info["files"]) == ["upwind1", "upwind2"]

    def test_unknown_scheme_is_usage_error(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5, "schemes": ["superbee"]})
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 2

    def test_too_few_cells_is_usage_error(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5, "cells": 4})
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 2


class TestMain:
    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate", "--config", "x.json"]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["schemes", "--config", str(tmp_path / "nope.json")]) == 2
        assert "no such file" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        assert main(["schemes", "--config", str(path)]) == 2
        assert "invalid JSON" in capsys.readouterr().err

    def test_config_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        assert main(["schemes", "--config", str(path)]) == 2

    def test_out_required_somewhere(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5})
        assert main(["schemes", "--config", cfg]) == 2
        assert "no output directory" in capsys.readouterr().err

    def test_out_from_config_key(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5, "steps": 2, "out": str(tmp_path / "sc")})
        assert main(["schemes", "--config", cfg]) == 0
        assert os.path.exists(tmp_path / "sc" / "schemes.json")

    def test_thread_cap_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PDENETPP_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        cfg = write_json(tmp_path / "s.json", {"mu": 0.5, "steps": 2})
        assert main(["schemes", "--config", cfg, "--out", str(tmp_path / "sc")]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "pdenetpp", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "generate" in proc.stdout and "schemes" in proc.stdout
