import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd

from src.cli.config import load_config, parse_config
from src.cli.io import JsonlWriter
from src.cli.main import main
from src.cli.train import Trainer
from src.data.sequences import CellRegistry, load_dataset
from src.denoiser.config import DiTConfig
from src.denoiser.dit import DenoiserParams, init
from src.errors import ConfigError
from src.tensor.checkpoint import load_arrays

TINY = {
    "seed": 1,
    "data": {"synthetic_per_cell": 10},
    "model": {"dim": 16, "depth": 1, "heads": 2, "dim_head": 8, "mlp_ratio": 2.0, "dropout": 0.0,
              "kernel": [5, 4], "seq_len": 24, "num_cells": 4, "time_embed_dim": 8},
    "schedule": {"timesteps": 10},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.001},
    "ddpo": {"batch": 4, "ppo_epochs": 1, "total_steps": 1, "eval_every": 0, "eval_batch": 4},
    "evaluate": {"n_per_cell": 3, "null_replicates": 2},
}


def write_config(directory: str, overrides: dict = None) -> str:
    data = json.loads(json.dumps(TINY))
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    path = os.path.join(directory, "config.json")
    with open(path, "w") as handle:
        json.dump(data, handle)
    return path


def file_bytes(directory: str) -> dict:
    contents = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as handle:
            contents[name] = handle.read()
    return contents


class TestConfig(unittest.TestCase):

    def test_defaults_validate(self):
        config = parse_config({})
        self.assertEqual(config.model.dim, 320)
        self.assertEqual(config.schedule.timesteps, 100)

    def test_unknown_key_names_path(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config({"model": {"bogus": 1}})
        self.assertIn("model.bogus", str(ctx.exception))

    def test_cell_count_mismatch(self):
        with self.assertRaises(ConfigError):
            parse_config({"model": {"num_cells": 3}})

    def test_bad_values(self):
        for data in ({"schedule": {"beta_start": 0.5, "beta_end": 0.1}}, {"train": {"dtype": "float16"}},
                     {"reward": {"kind": "external"}}, {"evaluate": {"k": 30}}, {"model": {"kernel": [4, 4]}}):
            with self.assertRaises(ConfigError, msg=str(data)):
                parse_config(data)

    def test_shipped_configs_load(self):
        root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
        self.assertEqual(load_config(os.path.join(root, "desk.json")).model.seq_len, 64)
        full = load_config(os.path.join(root, "full.json"))
        self.assertEqual((full.model.dim, full.model.depth, full.model.seq_len), (320, 6, 200))

    def test_unreadable_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config(os.path.join(tmp, "missing.json"))
            path = os.path.join(tmp, "broken.json")
            with open(path, "w") as handle:
                handle.write("{not json")
            with self.assertRaises(ConfigError):
                load_config(path)


class TestJsonlWriter(unittest.TestCase):

    def test_appends_one_line_per_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.jsonl")
            with open(path, "w") as handle:
                handle.write("stale\n")
            writer = JsonlWriter(path)
            with open(path) as handle:
                self.assertEqual(handle.read(), "")
            for step in range(1, 4):
                writer.append({"step": np.int64(step), "loss": float("nan") if step == 2 else np.float32(0.5)})
                with open(path) as handle:
                    lines = handle.read().splitlines()
                self.assertEqual(len(lines), step)
            records = [json.loads(line) for line in lines]
            self.assertEqual([r["step"] for r in records], [1, 2, 3])
            self.assertIsNone(records[1]["loss"])
            self.assertEqual(records[2]["loss"], 0.5)
            self.assertEqual(writer.count, 3)


class ScriptedTrainer(Trainer):
    """Validation losses come from a fixed script instead of the model."""

    def __init__(self, params, val_losses, **kwargs):
        x = np.zeros((1, 4, params.config.seq_len), dtype=np.float32)
        super().__init__(params, None, (x, np.zeros(1, dtype=np.int64)), (x, np.zeros(1, dtype=np.int64)), **kwargs)
        self.val_losses = list(val_losses)

    def train_epoch(self, epoch: int) -> float:
        return 1.0

    def validation_loss(self) -> float:
        return self.val_losses[self.epoch] if self.epoch < len(self.val_losses) else self.val_losses[-1]


class TestEarlyStopping(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        config = DiTConfig(dim=16, depth=1, heads=2, dim_head=8, mlp_ratio=2.0, dropout=0.0, seq_len=8,
                           num_cells=4, time_embed_dim=8)
        self.params = init(config, seed=0)

    def tearDown(self):
        self.tmp.cleanup()

    def test_stops_patience_epochs_after_best(self):
        trainer = ScriptedTrainer(self.params, [5.0, 4.0, 3.0, 3.5], patience=10)
        history = trainer.fit(50, self.tmp.name)
        self.assertEqual(list(history["epoch"]), list(range(1, 14)))
        _, best, _ = DenoiserParams.load(os.path.join(self.tmp.name, "best.rgdf"))
        self.assertEqual(best["epoch"], 3)
        _, last, _ = DenoiserParams.load(os.path.join(self.tmp.name, "last.rgdf"))
        self.assertEqual((last["epoch"], last["bad_epochs"]), (13, 10))

    def test_runs_full_budget_while_improving(self):
        trainer = ScriptedTrainer(self.params, [10.0 - e for e in range(8)], patience=2)
        self.assertEqual(len(trainer.fit(6, self.tmp.name)), 6)


class TestCommands(unittest.TestCase):
    """End-to-end runs of every subcommand on a tiny model."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.config = write_config(cls.tmp)
        cls.train_dir = os.path.join(cls.tmp, "train")
        cls.train_status = main(["train", "--config", cls.config, "--out", cls.train_dir, "--log-level", "WARNING"])
        cls.checkpoint = os.path.join(cls.train_dir, "best.rgdf")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def run_command(self, *args, out=None, config=None):
        out = out or tempfile.mkdtemp(dir=self.tmp)
        status = main(list(args) + ["--config", config or self.config, "--out", out, "--log-level", "WARNING"])
        return status, out

    def test_train_outputs(self):
        self.assertEqual(self.train_status, 0)
        for name in ("best.rgdf", "last.rgdf", "loss.csv", "loss.json", "config.json"):
            self.assertTrue(os.path.exists(os.path.join(self.train_dir, name)), name)
        history = pd.read_csv(os.path.join(self.train_dir, "loss.csv"))
        self.assertEqual(list(history["epoch"]), [1, 2])
        self.assertTrue(np.all(np.isfinite(history[["train_loss", "val_loss"]].to_numpy())))

    def test_resume_continues(self):
        status, out = self.run_command("train", "--resume", os.path.join(self.train_dir, "last.rgdf"))
        self.assertEqual(status, 0)
        # already at the configured epoch budget
        self.assertEqual(list(pd.read_csv(os.path.join(out, "loss.csv"))["epoch"]), [1, 2])

    def test_resume_matches_uninterrupted_run(self):
        longer = write_config(tempfile.mkdtemp(dir=self.tmp), {"train": {"epochs": 4}})
        status, straight = self.run_command("train", config=longer)
        self.assertEqual(status, 0)
        status, resumed = self.run_command("train", "--resume", os.path.join(self.train_dir, "last.rgdf"),
                                           config=longer)
        self.assertEqual(status, 0)
        expected = pd.read_csv(os.path.join(straight, "loss.csv"))
        actual = pd.read_csv(os.path.join(resumed, "loss.csv"))
        self.assertEqual(list(actual["epoch"]), [1, 2, 3, 4])
        pd.testing.assert_frame_equal(actual, expected, check_exact=True)
        expected_arrays = load_arrays(os.path.join(straight, "last.rgdf"))
        actual_arrays = load_arrays(os.path.join(resumed, "last.rgdf"))
        self.assertEqual(sorted(actual_arrays), sorted(expected_arrays))
        for name, values in expected_arrays.items():
            np.testing.assert_array_equal(actual_arrays[name], values, err_msg=name)

    def test_repeated_runs_are_byte_identical(self):
        for command in (["train"], ["evaluate", "--checkpoint", self.checkpoint],
                        ["finetune", "--checkpoint", self.checkpoint, "--steps", "2"]):
            out = tempfile.mkdtemp(dir=self.tmp)
            status, _ = self.run_command(*command, out=out)
            self.assertEqual(status, 0, command[0])
            first = file_bytes(out)
            status, _ = self.run_command(*command, out=out)
            self.assertEqual(status, 0, command[0])
            self.assertEqual(file_bytes(out), first, command[0])

    def test_unknown_planted_motif(self):
        motifs = {"K562": "NOPE", "HepG2": "HNF4A", "GM12878": "SPI1", "hESCT0": "POU5F1"}
        config = write_config(tempfile.mkdtemp(dir=self.tmp), {"data": {"cell_motifs": motifs}})
        status, out = self.run_command("train", config=config)
        self.assertEqual(status, 2)
        self.assertFalse(os.path.exists(os.path.join(out, "best.rgdf")))

    def test_sample(self):
        status, out = self.run_command("sample", "--checkpoint", self.checkpoint, "--n", "2", "--trajectories")
        self.assertEqual(status, 0)
        records = load_dataset(os.path.join(out, "samples.tsv"), 24, CellRegistry())
        self.assertEqual(len(records), 8)
        self.assertEqual([r.cell.name for r in records[:2]], ["K562", "K562"])
        self.assertTrue(os.path.exists(os.path.join(out, "trajectories.rgdf")))

    def test_sample_is_deterministic(self):
        paths = []
        for _ in range(2):
            status, out = self.run_command("sample", "--checkpoint", self.checkpoint, "--cell", "HepG2", "--n", "3")
            self.assertEqual(status, 0)
            paths.append(os.path.join(out, "samples.tsv"))
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_sample_zero(self):
        status, out = self.run_command("sample", "--checkpoint", self.checkpoint, "--n", "0")
        self.assertEqual(status, 0)
        with open(os.path.join(out, "samples.tsv")) as handle:
            self.assertEqual(handle.read(), "sequence\tcell\n")

    def test_unknown_cell(self):
        status, _ = self.run_command("sample", "--checkpoint", self.checkpoint, "--cell", "HeLa")
        self.assertEqual(status, 2)

    def test_missing_checkpoint(self):
        status, _ = self.run_command("sample", "--checkpoint", os.path.join(self.tmp, "nope.rgdf"))
        self.assertNotEqual(status, 0)

    def test_evaluate(self):
        status, out = self.run_command("evaluate", "--checkpoint", self.checkpoint)
        self.assertEqual(status, 0)
        metrics = pd.read_csv(os.path.join(out, "metrics.csv"))
        for metric in ("memorization_rate", "self_alignment_rate", "reward_median"):
            values = metrics.loc[metrics["metric"] == metric, "value"]
            self.assertGreater(len(values), 0, metric)
            self.assertTrue(np.all(np.isfinite(values)), metric)
        rates = metrics.loc[metrics["metric"] == "memorization_rate", "value"]
        self.assertTrue(np.all((rates >= 0) & (rates <= 1)))
        hits = pd.read_csv(os.path.join(out, "hits.csv"))
        self.assertEqual(set(hits["set"]), {"training", "test", "generated", "random"})
        for name in ("hits.json", "rewards.csv", "rewards.json"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

    def test_evaluate_needs_input(self):
        status, _ = self.run_command("evaluate")
        self.assertEqual(status, 2)

    def test_calibrate_null(self):
        status, out = self.run_command("calibrate-null", "--replicates", "2")
        self.assertEqual(status, 0)
        null = pd.read_csv(os.path.join(out, "null.csv"))
        self.assertIn("null_memorization_mean", set(null["metric"]))
        self.assertIn("motif_threshold", set(null["metric"]))
        self.assertTrue(np.all(np.isfinite(null["value"])))

    def test_finetune(self):
        status, out = self.run_command("finetune", "--checkpoint", self.checkpoint, "--steps", "1")
        self.assertEqual(status, 0)
        with open(os.path.join(out, "metrics.jsonl")) as handle:
            lines = [json.loads(line) for line in handle if line.strip()]
        self.assertEqual(len(lines), 1)
        self.assertEqual(lines[0]["step"], 1)
        for name in ("final.rgdf", "best_reward.rgdf", "eval_snapshots.csv"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)

    def test_finetune_ten_steps(self):
        status, out = self.run_command("finetune", "--checkpoint", self.checkpoint, "--steps", "10")
        self.assertEqual(status, 0)
        with open(os.path.join(out, "metrics.jsonl")) as handle:
            lines = [json.loads(line) for line in handle if line.strip()]
        self.assertEqual([line["step"] for line in lines], list(range(1, 11)))


if __name__ == "__main__":
    unittest.main()
