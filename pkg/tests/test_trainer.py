import math

import numpy as np
import pytest
import torch

import pestclf.trainer as trainer_mod
from conftest import finite_diff_grad, relative_error
from pestclf.data import (SplitManifest, SplitRatios, make_random_split,
                          scan_label_space, scan_records, stream_batches)
from pestclf.errors import LabelSpaceMismatch, NonFiniteLoss
from pestclf.preprocess import PreprocessSpec
from pestclf.trainer import (TrainRunConfig, build_model, config_from_dict,
                             config_to_dict, cross_entropy, default_config,
                             dump_run_config, evaluate_export, load_checkpoint,
                             parse_run_config, predict_matrix, step_schedule,
                             train)

SMALL_PREP = PreprocessSpec(short_side=72, crop=64)


def small_config(**overrides) -> TrainRunConfig:
    cfg = default_config("resnet50", seed=0)
    cfg.preprocess = SMALL_PREP
    cfg.batch_size = 8
    cfg.max_epochs = 2
    cfg.drop_rate = 0.0
    cfg.optimizer = trainer_mod.OptimizerConfig("adam", 1e-3)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture(scope="module")
def split(shape_root):
    labels = scan_label_space(shape_root)
    records = scan_records(shape_root, labels)
    train_m, val_m, test_m = make_random_split(
        records, SplitRatios(0.7, 0.1, 0.2), seed=0)
    return labels, train_m, val_m, test_m


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(torch.zeros(4), torch.tensor(2))
        assert abs(float(loss) - math.log(4)) < 1e-6

    def test_confident_correct_logit(self):
        loss = cross_entropy(torch.tensor([10.0, -10.0], dtype=torch.float64),
                             torch.tensor(0))
        assert math.isclose(float(loss), math.exp(-20), rel_tol=1e-6)

    def test_batch_mean(self):
        logits = torch.tensor([[0.0, 0.0], [0.0, 0.0]])
        loss = cross_entropy(logits, torch.tensor([0, 1]))
        assert abs(float(loss) - math.log(2)) < 1e-6

    def test_gradient_matches_central_differences(self):
        torch.manual_seed(0)
        logits = torch.randn(5, dtype=torch.float64)
        label = torch.tensor(3)

        probe = logits.clone().requires_grad_(True)
        cross_entropy(probe, label).backward()
        numeric = finite_diff_grad(lambda t: cross_entropy(t, label),
                                   logits.clone())
        assert relative_error(probe.grad, numeric) < 1e-4


class TestSchedule:
    EXP = trainer_mod.ScheduleConfig("exponential", 0.96)
    STEP = trainer_mod.ScheduleConfig("multistep", 0.1, (30, 60))

    def test_epoch_zero_is_base(self):
        assert step_schedule(0, 1e-4, self.EXP) == 1e-4

    def test_exponential_epoch_two(self):
        assert abs(step_schedule(2, 1e-4, self.EXP) - 9.216e-5) < 1e-12

    def test_multistep_counts_passed_milestones(self):
        assert step_schedule(45, 1.0, self.STEP) == pytest.approx(0.1)
        assert step_schedule(29, 1.0, self.STEP) == 1.0
        assert step_schedule(60, 1.0, self.STEP) == pytest.approx(0.01)


class TestDefaults:
    def test_mmal_column(self):
        cfg = default_config("mmal")
        assert cfg.optimizer.kind == "sgd"
        assert cfg.optimizer.momentum == 0.9
        assert cfg.optimizer.learning_rate == 1e-3
        assert cfg.batch_size == 6
        assert cfg.max_epochs == 150
        assert cfg.preprocess.crop == 448

    def test_resnet50_column(self):
        cfg = default_config("resnet50")
        assert cfg.optimizer.kind == "adam"
        assert (cfg.optimizer.beta1, cfg.optimizer.beta2) == (0.9, 0.999)
        assert cfg.optimizer.learning_rate == 1e-4
        assert cfg.optimizer.weight_decay == 1e-5
        assert cfg.schedule.kind == "exponential"
        assert cfg.schedule.decay_rate == 0.96
        assert cfg.batch_size == 64
        assert cfg.drop_rate == 0.3
        assert cfg.preprocess.crop == 224

    def test_ran_column_and_milestone_fallback(self):
        cfg = default_config("ran")
        assert cfg.optimizer.kind == "sgd"
        assert cfg.optimizer.learning_rate == 0.1
        assert cfg.optimizer.weight_decay == 0.0
        assert cfg.schedule.kind == "multistep"
        assert cfg.schedule.milestones == (50, 75)
        assert cfg.batch_size == 32

    def test_patience_default_is_ten(self):
        for tag in ("resnet50", "ran", "fpn", "mmal"):
            assert default_config(tag).patience == 10


class TestConfigFile:
    def test_round_trip(self):
        cfg = default_config("fpn", seed=3)
        rebuilt = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(rebuilt) == config_to_dict(cfg)

    def test_parse_overrides_and_defaults(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# overrides for a quick run\n"
            "model = resnet50\n"
            "learning_rate = 0.01\n"
            "batch_size = 4\n"
            "max_epochs = 3\n"
            "input_size = 64\n"
            "short_side = 72\n")
        cfg = parse_run_config(path)
        assert cfg.optimizer.learning_rate == 0.01
        assert cfg.batch_size == 4
        assert cfg.max_epochs == 3
        assert cfg.preprocess.crop == 64
        # untouched defaults survive
        assert cfg.optimizer.kind == "adam"
        assert cfg.drop_rate == 0.3

    def test_dump_has_every_table_key(self):
        text = dump_run_config(default_config("mmal"))
        for key in ("learning_rate", "batch_size", "optimizer", "scheduler",
                    "decay_rate", "weight_decay", "drop_rate", "max_epochs",
                    "input_size", "momentum"):
            assert f"{key} = " in text

    def test_crop_key_alias(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model = resnet50\ncrop = 96\nshort_side = 128\n")
        cfg = parse_run_config(path)
        assert cfg.preprocess.crop == 96
        assert cfg.preprocess.short_side == 128

    def test_mmal_options_survive(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model = mmal\npart_size = 64\n"
                        "appm_windows = 1x1,2x2\nappm_top_k = 2,1\n")
        cfg = parse_run_config(path)
        model = build_model(cfg, num_classes=3)
        assert model.part_size == 64
        assert model.window_sizes == ((1, 1), (2, 2))
        assert model.top_k == (2, 1)


class TestTrainLoop:
    def test_constant_validation_stops_after_patience(
            self, shape_root, split, tmp_path, monkeypatch):
        labels, train_m, _, _ = split
        tiny = SplitManifest("train", train_m.records[:6])
        val = SplitManifest("val", train_m.records[6:9])
        monkeypatch.setattr(trainer_mod, "_evaluate_accuracy",
                            lambda *a, **k: 0.5)
        cfg = small_config(max_epochs=50, patience=10, batch_size=6)
        _, history = train(cfg, labels, tiny, val, shape_root, tmp_path)
        # first validation improves on -inf; the next 10 do not
        assert len(history.val_acc) == 11
        assert history.best_epoch == 0

    def test_never_stops_before_patience(self, shape_root, split, tmp_path,
                                         monkeypatch):
        labels, train_m, _, _ = split
        tiny = SplitManifest("train", train_m.records[:6])
        val = SplitManifest("val", train_m.records[6:9])
        monkeypatch.setattr(trainer_mod, "_evaluate_accuracy",
                            lambda *a, **k: 0.5)
        cfg = small_config(max_epochs=4, patience=10, batch_size=6)
        _, history = train(cfg, labels, tiny, val, shape_root, tmp_path)
        assert len(history.val_acc) == 4  # hit max_epochs instead

    def test_non_finite_loss_dumps_and_raises(self, shape_root, split,
                                              tmp_path, monkeypatch):
        labels, train_m, val_m, _ = split
        tiny = SplitManifest("train", train_m.records[:6])

        def poisoned(logits, labels_):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(trainer_mod, "cross_entropy", poisoned)
        cfg = small_config(batch_size=6, max_epochs=1)
        with pytest.raises(NonFiniteLoss):
            train(cfg, labels, tiny, val_m, shape_root, tmp_path)
        assert (tmp_path / "nonfinite_dump.pt").exists()

    def test_seeded_runs_produce_identical_traces(self, shape_root, split,
                                                  tmp_path):
        labels, train_m, val_m, _ = split
        tiny = SplitManifest("train", train_m.records[:12])
        cfg = small_config(max_epochs=2, batch_size=6, seed=11)
        _, first = train(cfg, labels, tiny, val_m, shape_root,
                         tmp_path / "a")
        _, second = train(cfg, labels, tiny, val_m, shape_root,
                          tmp_path / "b")
        assert first.train_loss == second.train_loss
        assert first.val_acc == second.val_acc

    def test_loss_decreases_on_separable_set(self, shape_root, split):
        # 2-class subset; 10-step moving average of the first 50 steps
        labels, _, _, _ = split
        records = scan_records(shape_root, scan_label_space(shape_root))
        two_class = SplitManifest(
            "train", [r for r in records if r.label < 2])
        torch.manual_seed(0)
        cfg = small_config(batch_size=8)
        model = build_model(cfg, labels.count)
        optimizer = torch.optim.Adam(model.parameters(), lr=5e-4)
        model.train()
        losses = []
        epoch = 0
        while len(losses) < 50:
            for images, ys in stream_batches(two_class, shape_root, SMALL_PREP,
                                             8, "train", seed=0, epoch=epoch):
                loss = cross_entropy(model(torch.from_numpy(images)),
                                     torch.from_numpy(ys))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                if len(losses) == 50:
                    break
            epoch += 1
        moving = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert moving[-1] < 0.5 * moving[0]
        assert float(np.diff(moving).max()) < 0.1  # monotone up to batch noise


@pytest.fixture(scope="module")
def run(shape_root, split, tmp_path_factory):
    labels, train_m, val_m, test_m = split
    out = tmp_path_factory.mktemp("run")
    cfg = small_config(max_epochs=1)
    ckpt, _ = train(cfg, labels, train_m, val_m, shape_root, out)
    return labels, test_m, ckpt


class TestCheckpointAndExport:
    def test_checkpoint_round_trip_is_bit_identical(self, shape_root, run):
        labels, test_m, ckpt = run
        model_a, cfg, _ = load_checkpoint(ckpt)
        model_b, _, _ = load_checkpoint(ckpt)
        pa = predict_matrix(model_a, test_m, shape_root, cfg.preprocess, 8, "a")
        pb = predict_matrix(model_b, test_m, shape_root, cfg.preprocess, 8, "b")
        assert np.array_equal(pa.probs, pb.probs)

    def test_export_matches_manifest_and_normalizes(self, shape_root, run,
                                                    tmp_path):
        labels, test_m, ckpt = run
        out_csv = tmp_path / "probs.csv"
        matrix, report = evaluate_export(ckpt, test_m, shape_root,
                                         out_csv=out_csv, label_space=labels)
        assert len(matrix) == len(test_m)
        assert np.abs(matrix.probs.sum(axis=1) - 1.0).max() < 1e-5
        assert out_csv.exists()

    def test_exported_file_reproduces_metrics(self, shape_root, run, tmp_path):
        from pestclf.ensemble import decide, read_csv
        from pestclf.metrics import confusion, macro_report
        labels, test_m, ckpt = run
        out_csv = tmp_path / "probs.csv"
        _, in_process = evaluate_export(ckpt, test_m, shape_root,
                                        out_csv=out_csv)
        loaded = read_csv(out_csv)
        from_file = macro_report(confusion(loaded.true_labels, decide(loaded),
                                           loaded.num_classes))
        for attr in ("mpre", "mrec", "mf1", "acc", "gm"):
            assert abs(getattr(from_file, attr)
                       - getattr(in_process, attr)) < 1e-9

    def test_label_space_mismatch_rejected(self, shape_root, run):
        from pestclf.data import LabelSpace
        labels, test_m, ckpt = run
        other = LabelSpace(("x", "y", "z"))
        with pytest.raises(LabelSpaceMismatch):
            evaluate_export(ckpt, test_m, shape_root, label_space=other)

    def test_undecodable_record_fails_export_loudly(self, shape_root, run,
                                                    tmp_path):
        import shutil
        from pestclf.data import ImageRecord, SplitManifest
        from pestclf.errors import PestclfError
        labels, test_m, ckpt = run
        root = tmp_path / "data"
        shutil.copytree(shape_root, root)
        (root / "disc_red" / "corrupt.png").write_bytes(b"junk")
        broken = SplitManifest("test", test_m.records
                               + [ImageRecord("disc_red/corrupt.png", 0)])
        with pytest.raises(PestclfError, match="decoded"):
            evaluate_export(ckpt, broken, root)
