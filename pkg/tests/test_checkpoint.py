import json

import numpy as np
import pytest

from src.core.encoder import encode
from src.core.errors import CheckpointError
from src.core.lora import attach_lora, lora_parameters
from src.core.tensor import no_grad
from src.inference.checkpoint import (
    LOCK_FILE,
    MANIFEST_FILE,
    WEIGHTS_FILE,
    checkpoint_lock,
    load_checkpoint,
    model_fingerprint,
    read_manifest,
    save_checkpoint,
)
from src.inference.model_loader import ModelLoader
from src.services.redundancy import apply_drop, last_blocks_plan
from src.services.slimming import PruneMask, SlimState, apply_mask, global_prune, install_gates


def _embed(model, tokens):
    with no_grad():
        return encode(model, tokens).data


def _rewrite_manifest(directory, **changes):
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    manifest.update(changes)
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest))


class TestRoundTrip:
    def test_weights_and_outputs_survive(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt", seed=5, metadata={"stage": "init"})
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.seed == 5
        assert loaded.metadata == {"stage": "init"}
        assert loaded.fingerprint == model_fingerprint(tiny_model)
        for (name, a), (other, b) in zip(tiny_model.named_tensors(), loaded.model.named_tensors()):
            assert name == other
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(_embed(loaded.model, [4, 5, 6]), _embed(tiny_model, [4, 5, 6]))

    def test_saving_twice_is_byte_identical(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "a", seed=1)
        save_checkpoint(load_checkpoint(tmp_path / "a").model, tmp_path / "b", seed=1)
        assert (tmp_path / "a" / WEIGHTS_FILE).read_bytes() == (tmp_path / "b" / WEIGHTS_FILE).read_bytes()
        assert (tmp_path / "a" / MANIFEST_FILE).read_text() == (tmp_path / "b" / MANIFEST_FILE).read_text()

    def test_dropped_structure_survives(self, tiny_model, tmp_path):
        pruned = apply_drop(tiny_model, last_blocks_plan(4, 1))
        save_checkpoint(pruned, tmp_path / "ckpt", pruning={"label": "Drop-Last1B"})
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.model.blocks[3].attn is None and loaded.model.blocks[3].mlp is None
        assert loaded.manifest["pruning"] == {"label": "Drop-Last1B"}
        np.testing.assert_array_equal(_embed(loaded.model, [1, 2]), _embed(pruned, [1, 2]))

    def test_gates_and_adapters_survive(self, tiny_model, tmp_path):
        gated = install_gates(tiny_model.copy())
        mask = global_prune(SlimState.from_model(gated), 0.25)
        masked = apply_mask(gated, mask)
        attach_lora(masked, ["v_proj"], rank=2, alpha=4.0)
        save_checkpoint(masked, tmp_path / "ckpt", slim_mask=mask.to_dict())
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert all(mlp.gate_frozen for _, mlp in loaded.model.mlp_layers())
        assert len(lora_parameters(loaded.model)) == 2 * 4
        assert PruneMask.from_dict(loaded.manifest["slim_mask"]).zeros == mask.zeros


class TestRefusals:
    def test_corrupted_blob(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        blob = bytearray((tmp_path / "ckpt" / WEIGHTS_FILE).read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "ckpt" / WEIGHTS_FILE).write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(tmp_path / "ckpt")

    def test_truncated_blob(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        blob = (tmp_path / "ckpt" / WEIGHTS_FILE).read_bytes()
        (tmp_path / "ckpt" / WEIGHTS_FILE).write_bytes(blob[:-4])
        with pytest.raises(CheckpointError, match="bytes"):
            load_checkpoint(tmp_path / "ckpt")

    def test_unknown_version(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        _rewrite_manifest(tmp_path / "ckpt", format_version=99)
        with pytest.raises(CheckpointError, match="format_version"):
            read_manifest(tmp_path / "ckpt")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nowhere")

    def test_locked_directory(self, tiny_model, tmp_path):
        with checkpoint_lock(tmp_path / "ckpt"):
            with pytest.raises(CheckpointError, match="locked"):
                save_checkpoint(tiny_model, tmp_path / "ckpt")
        assert not (tmp_path / "ckpt" / LOCK_FILE).exists()


class TestModelLoader:
    def test_resolves_names_under_model_path(self, tiny_model, isolated_settings):
        loader = ModelLoader(isolated_settings)
        save_checkpoint(tiny_model, loader.model_path / "base", seed=3)
        assert loader.resolve("base") == loader.model_path / "base"
        first = loader.load_model("base")
        assert loader.load_model("base") is first
        assert loader.load_model(str(loader.model_path / "base")) is first
        assert first.manifest["seed"] == 3

    def test_unknown_name(self, isolated_settings):
        with pytest.raises(CheckpointError):
            ModelLoader(isolated_settings).load_model("missing")
