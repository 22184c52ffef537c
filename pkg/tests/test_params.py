import pytest
import torch
from torch.testing import assert_close

from crisscross_eeg.core.complexity import count_params, param_breakdown
from crisscross_eeg.core.errors import (
    ConfigError,
    ContainerError,
    NumericError,
    ShapeError,
)
from crisscross_eeg.core.model import ModelConfig, skeleton
from crisscross_eeg.core.params import (
    FAMILIES,
    MANIFEST_NAME,
    ParameterSet,
    expected_shapes,
    init_parameters,
    load_checkpoint,
    parameter_family,
    save_checkpoint,
)


def _skeleton_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in skeleton(cfg).parameters())


class TestParameterCount:
    def test_full_size_config(self):
        assert count_params(ModelConfig()) == 5_884_400
        assert 3_000_000 <= count_params(ModelConfig()) <= 6_500_000

    @pytest.mark.parametrize(
        "cfg",
        [
            ModelConfig(),
            ModelConfig.desk(),
            ModelConfig(attention_variant="full"),
            ModelConfig(pe_variant="cpe"),
            ModelConfig(pe_variant="ape"),
            ModelConfig(pe_variant="none"),
            ModelConfig(learnable_token=True),
            ModelConfig.tiny(),
            ModelConfig.tiny(learnable_token=True),
        ],
        ids=str,
    )
    def test_analytic_matches_enumerated(self, cfg):
        assert count_params(cfg) == _skeleton_count(cfg)

    def test_variants_share_parameters(self):
        counts = {
            count_params(ModelConfig(attention_variant=v))
            for v in ("criss_cross", "full", "axial")
        }
        assert len(counts) == 1

    def test_breakdown_families(self):
        assert set(param_breakdown(ModelConfig())) == set(FAMILIES)


class TestInit:
    def test_deterministic(self, tiny_cfg):
        a, b = init_parameters(tiny_cfg, 5), init_parameters(tiny_cfg, 5)
        for name in a.names:
            assert torch.equal(a[name], b[name])

    def test_seed_matters(self, tiny_cfg):
        a, b = init_parameters(tiny_cfg, 5), init_parameters(tiny_cfg, 6)
        assert not torch.equal(a["head.weight"], b["head.weight"])

    def test_dtype(self, tiny_params):
        assert all(t.dtype == torch.float64 for t in tiny_params.tensors.values())

    def test_norm_scales_start_at_one(self, tiny_params):
        assert torch.all(tiny_params["blocks.0.attn_norm.weight"] == 1)
        assert torch.all(tiny_params["blocks.0.attn.q_proj.bias"] == 0)

    def test_every_family_present(self):
        params = init_parameters(ModelConfig.tiny(learnable_token=True))
        assert set(params.families()) == set(FAMILIES)


class TestParameterSet:
    def test_validate_missing(self, tiny_params):
        tensors = dict(tiny_params.tensors)
        tensors.pop("head.bias")
        with pytest.raises(ShapeError, match="missing"):
            ParameterSet(tensors, tiny_params.config)

    def test_validate_shape(self, tiny_params):
        tensors = dict(tiny_params.tensors)
        tensors["head.bias"] = torch.zeros(3)
        with pytest.raises(ShapeError):
            ParameterSet(tensors, tiny_params.config)

    def test_task_tensors_kept_apart(self, tiny_params):
        merged = tiny_params.with_task({"layers.0.weight": torch.zeros(2, 2)})
        assert "task.layers.0.weight" in merged
        assert list(merged.task_tensors()) == ["layers.0.weight"]
        assert merged.num_elements() == tiny_params.num_elements()
        assert merged.num_elements(include_task=True) == tiny_params.num_elements() + 4

    def test_expected_shapes(self, tiny_cfg):
        shapes = expected_shapes(tiny_cfg)
        assert shapes["head.weight"] == (16, 8)
        assert shapes["patch_encoder.freq_proj.weight"] == (8, 9)

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            parameter_family("blocks.0.mystery.weight")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_params):
        moments = {"head.bias.exp_avg": torch.ones(16, dtype=torch.float64)}
        save_checkpoint(tmp_path / "ck", tiny_params, step=7, moments=moments)
        back = load_checkpoint(tmp_path / "ck")
        assert back.step == 7
        assert back.params.config == tiny_params.config
        for name in tiny_params.names:
            assert torch.equal(back.params[name], tiny_params[name])
        assert_close(back.moments["head.bias.exp_avg"], moments["head.bias.exp_avg"])
        assert (tmp_path / "ck" / "head.weight.f64").is_file()

    def test_float32_suffix(self, tmp_path):
        params = init_parameters(ModelConfig.tiny(dtype="float32"))
        save_checkpoint(tmp_path / "ck", params, step=0)
        assert (tmp_path / "ck" / "head.weight.f32").is_file()
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.params["head.weight"].dtype == torch.float32

    def test_config_mismatch(self, tmp_path, tiny_params):
        save_checkpoint(tmp_path / "ck", tiny_params, step=0)
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "ck", ModelConfig.tiny(ffn_dim=32))

    def test_architecture_mismatch(self, tmp_path, tiny_params):
        save_checkpoint(tmp_path / "ck", tiny_params, step=0)
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "ck", ModelConfig.tiny(n_layers=3))
        with pytest.raises(ConfigError, match="energy"):
            load_checkpoint(tmp_path / "ck", ModelConfig.tiny(energy="magnitude"))

    def test_runtime_fields_follow_config(self, tmp_path, tiny_params):
        save_checkpoint(tmp_path / "ck", tiny_params, step=0)
        cfg = ModelConfig.tiny(dropout_p=0.3, dtype="float32")
        loaded = load_checkpoint(tmp_path / "ck", cfg).params
        assert loaded.config == cfg
        assert loaded["head.weight"].dtype == torch.float32

    def test_truncated_tensor(self, tmp_path, tiny_params):
        path = save_checkpoint(tmp_path / "ck", tiny_params, step=0)
        tensor = path / "head.weight.f64"
        tensor.write_bytes(tensor.read_bytes()[:-8])
        with pytest.raises(ContainerError):
            load_checkpoint(path)

    def test_wrong_kind(self, tmp_path, tiny_params):
        path = save_checkpoint(tmp_path / "ck", tiny_params, step=0)
        manifest = path / MANIFEST_NAME
        text = manifest.read_text().replace("kind=checkpoint", "kind=recording")
        manifest.write_text(text)
        with pytest.raises(ContainerError):
            load_checkpoint(path)

    def test_refuses_non_finite(self, tmp_path, tiny_params):
        broken = tiny_params.clone()
        broken.tensors["head.bias"][0] = float("nan")
        with pytest.raises(NumericError):
            save_checkpoint(tmp_path / "ck", broken, step=0)
        save_checkpoint(tmp_path / "diag", broken, step=0, check_finite=False)
        with pytest.raises(NumericError):
            load_checkpoint(tmp_path / "diag")
