import pandas as pd
import pytest

from crisscross_eeg.cli.config import RunConfig
from crisscross_eeg.cli.main import build_parser, main
from crisscross_eeg.core.finetune import FinetuneConfig, TaskSpec
from crisscross_eeg.core.model import ModelConfig
from crisscross_eeg.core.params import init_parameters, load_checkpoint, save_checkpoint
from crisscross_eeg.core.recordings import (
    read_indices,
    read_sample_set,
    write_container,
)
from crisscross_eeg.core.synthetic import SyntheticSpec, synthetic_recording
from crisscross_eeg.core.training import ScheduleConfig, TrainConfig


@pytest.fixture
def tiny_config(tmp_path):
    """Config file for a tiny end-to-end run: 60 samples of 4 x 64 points."""
    cfg = RunConfig(
        seed=7,
        model=ModelConfig.tiny(),
        schedule=ScheduleConfig(epochs=1),
        train=TrainConfig(batch_size=8),
        task=TaskSpec(head_hidden=(8,)),
        finetune=FinetuneConfig(
            schedule=ScheduleConfig(base_lr=1e-3, min_lr=1e-5, epochs=2), batch_size=8
        ),
        synth=SyntheticSpec(
            n_channels=4, duration_s=0.64, sample_rate=100.0, samples_per_class=30
        ),
    )
    return cfg.write(tmp_path / "tiny.cfg")


def _run(config, out, *argv) -> int:
    return main(["--config", str(config), "--out-dir", str(out), *argv])


class TestPipeline:
    def test_synth_pretrain_finetune_evaluate(self, tiny_config, tmp_path, capsys):
        data = tmp_path / "data"
        assert _run(tiny_config, data, "synth") == 0
        assert len(read_sample_set(data / "samples")) == 60
        split_sizes = [
            len(read_indices(data / "splits" / f"{s}.txt"))
            for s in ("train", "val", "test")
        ]
        assert split_sizes == [36, 12, 12]
        assert (data / "class_counts.csv").is_file()
        assert "seed=7" in capsys.readouterr().out

        pre = tmp_path / "pre"
        assert _run(tiny_config, pre, "pretrain", "--data", str(data / "samples")) == 0
        assert load_checkpoint(pre / "checkpoints" / "epoch000").step == 8
        assert len(pd.read_csv(pre / "train_log.csv")) == 8
        assert (pre / "run_config.txt").is_file()
        assert (pre / "loss_curve.html").is_file()

        ft = tmp_path / "ft"
        code = _run(
            tiny_config,
            ft,
            "finetune",
            "--data",
            str(data / "samples"),
            "--splits",
            str(data / "splits"),
            "--checkpoint",
            str(pre / "checkpoints" / "epoch000"),
        )
        assert code == 0
        report = (ft / "eval_report.txt").read_text()
        assert report.startswith("kind=binary\nn_samples=12\n")
        predictions = pd.read_csv(ft / "predictions.csv")
        assert list(predictions.columns) == ["sample_id", "score", "label"]
        assert len(pd.read_csv(ft / "validation.csv")) == 2

        ev = tmp_path / "ev"
        code = _run(
            tiny_config,
            ev,
            "evaluate",
            "--data",
            str(data / "samples"),
            "--splits",
            str(data / "splits"),
            "--checkpoint",
            str(ft / "finetuned"),
        )
        assert code == 0
        assert pd.read_csv(ev / "predictions.csv")["score"].tolist() == pytest.approx(
            predictions["score"].tolist(), rel=1e-8
        )

    def test_preprocess(self, tmp_path):
        recordings = tmp_path / "recordings"
        write_container(synthetic_recording(duration_s=95.0), recordings / "rec01")
        out = tmp_path / "out"
        argv = ["--out-dir", str(out), "preprocess", "--input", str(recordings)]
        assert main(argv) == 0
        assert read_sample_set(out / "rec01").samples.shape == (3, 4, 6000)
        table = pd.read_csv(out / "segments.csv")
        assert table[["segments", "rejected", "kept"]].iloc[0].tolist() == [3, 0, 3]


class TestUtilityVerbs:
    def test_flops(self, tmp_path, capsys):
        assert main(["--out-dir", str(tmp_path), "flops"]) == 0
        table = pd.read_csv(tmp_path / "flops.csv")
        assert list(table["variant"]) == ["criss_cross", "full", "axial"]
        totals = table.set_index("variant")["total_flops"]
        ratio = totals["criss_cross"] / totals["full"]
        out = capsys.readouterr().out
        assert f"criss_cross/full FLOPs {ratio:.3f}, outside [0.55, 0.85]" in out
        assert "axial equals criss_cross exactly" in out
        assert (tmp_path / "flops_components.csv").is_file()

    def test_flops_empty_grid(self, tmp_path):
        assert main(["--out-dir", str(tmp_path), "flops", "--seconds", "0.5"]) == 2

    def test_oracle(self, tmp_path):
        assert main(["--out-dir", str(tmp_path), "oracle"]) == 0
        assert pd.read_csv(tmp_path / "oracles.csv")["passed"].all()

    def test_gradcheck_flags_corruption(self, tmp_path):
        code = main(["--out-dir", str(tmp_path), "gradcheck", "--corrupt", "ffn"])
        assert code == 3
        table = pd.read_csv(tmp_path / "gradcheck.csv")
        assert table.loc[~table["passed"], "family"].tolist() == ["ffn"]


class TestExitCodes:
    def test_invalid_band_edges(self, tmp_path):
        argv = [
            "--out-dir",
            str(tmp_path),
            "--set",
            "preprocess.bandpass_lo=80",
            "synth",
        ]
        assert main(argv) == 2

    def test_unknown_key(self, tmp_path):
        argv = ["--out-dir", str(tmp_path), "--set", "model.width=3", "flops"]
        assert main(argv) == 2

    def test_missing_data_path(self, tmp_path):
        assert main(["--out-dir", str(tmp_path), "pretrain"]) == 2

    def test_unreadable_container(self, tmp_path):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "manifest.txt").write_text("not a manifest line\n")
        argv = ["--out-dir", str(tmp_path / "out"), "pretrain", "--data", str(broken)]
        assert main(argv) == 4

    def test_checkpoint_must_match_model(self, tiny_config, tmp_path):
        data = tmp_path / "data"
        assert _run(tiny_config, data, "synth") == 0
        params = init_parameters(ModelConfig.tiny(), seed=1)
        checkpoint = save_checkpoint(tmp_path / "ck", params, step=0)
        base = ["--config", str(tiny_config), "--out-dir", str(tmp_path / "ev")]
        verb = [
            "evaluate",
            "--data",
            str(data / "samples"),
            "--checkpoint",
            str(checkpoint),
        ]
        assert main([*base, *verb]) == 0
        assert main([*base, "--set", "model.n_layers=3", *verb]) == 2
        assert main([*base, "--set", "model.energy=magnitude", *verb]) == 2
        assert main([*base, "--set", "model.dropout_p=0.2", *verb]) == 0

    def test_missing_config_file(self, tmp_path):
        assert main(["--config", str(tmp_path / "absent.cfg"), "flops"]) == 4

    def test_bad_override_syntax(self):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(["--set", "seed", "flops"])
        assert info.value.code == 2
