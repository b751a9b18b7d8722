"""
Tests for checkpoint serialization and stage validation
"""
import json

import numpy as np
import pytest

from bnprune.exceptions import CheckpointError, ConfigError
from bnprune.utils.checkpoint import (
    FORMAT,
    CheckpointAux,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from bnprune.utils.netgraph import build_preset, param_key
from bnprune.utils.validator import check_transition, digest, next_stage, validate_checksum
from tests.helpers import randomize


def header_of(data: bytes) -> dict:
    first, rest = data.split(b"\n", 1)
    length = int(first.split(b" ")[2])
    return json.loads(rest[:length])


@pytest.fixture
def aux():
    return CheckpointAux(
        stage="sparsified",
        seed=17,
        config={"ista": {"rho": 0.002}},
        history=[{"epoch": 0, "loss": 1.5, "sparsity_fraction": 0.25, "lasso_term": 3.0, "lr": 0.01}],
        rescale_alpha=0.1,
        ema={param_key("conv1", "kernel"): np.full((3, 3, 4, 6), 0.125)},
    )


class TestRoundTrip:

    def test_float64_bitwise(self, tiny_graph, rng, aux):
        graph = randomize(tiny_graph, rng)
        loaded, loaded_aux = load_checkpoint(save_checkpoint(graph, aux))
        assert loaded.describe() == graph.describe()
        for key, value in graph.params.items():
            assert loaded.params[key].dtype == value.dtype
            assert loaded.params[key].tobytes() == value.tobytes()
        assert loaded_aux.stage == "sparsified"
        assert loaded_aux.seed == 17
        assert loaded_aux.config == aux.config
        assert loaded_aux.history == aux.history
        assert loaded_aux.rescale_alpha == 0.1

    def test_float32_bitwise(self):
        graph = build_preset("mnist_small", seed=2)
        loaded, _ = load_checkpoint(save_checkpoint(graph))
        assert loaded.dtype == "float32"
        for key, value in graph.params.items():
            assert loaded.params[key].tobytes() == value.tobytes()

    def test_ema_preserved(self, tiny_graph, aux):
        _, loaded_aux = load_checkpoint(save_checkpoint(tiny_graph, aux))
        assert set(loaded_aux.ema) == {param_key("conv1", "kernel")}
        np.testing.assert_array_equal(loaded_aux.ema[param_key("conv1", "kernel")], 0.125)

    def test_saving_is_deterministic(self, tiny_graph, aux):
        assert save_checkpoint(tiny_graph, aux) == save_checkpoint(tiny_graph, aux)

    def test_header_layout(self, tiny_graph, aux):
        data = save_checkpoint(tiny_graph, aux)
        assert data.startswith(f"{FORMAT} v1 ".encode())
        header = header_of(data)
        assert set(header) == {
            "format", "version", "stage", "seed", "graph", "config", "history", "rescale_alpha", "manifest", "checksum",
        }
        names = [entry["name"] for entry in header["manifest"]]
        assert names == sorted(names)
        assert "ema/conv1/kernel" in names

    def test_files(self, tmp_path, tiny_graph, aux):
        path = write_checkpoint(tmp_path / "nested" / "model.ckpt", tiny_graph, aux)
        graph, loaded_aux = read_checkpoint(path)
        assert graph.describe() == tiny_graph.describe()
        assert loaded_aux.stage == aux.stage


class TestCorruption:

    def test_flipped_blob_byte(self, tiny_graph, aux):
        data = bytearray(save_checkpoint(tiny_graph, aux))
        data[-10] ^= 0xFF
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(bytes(data))
        assert "checksum" in str(excinfo.value)
        assert excinfo.value.exit_code == 3

    @pytest.mark.parametrize("original, tampered", [
        (b'"rescale_alpha": 0.1', b'"rescale_alpha": 0.5'),
        (b'"loss": 1.5', b'"loss": 9.5'),
        (b'"seed": 17', b'"seed": 18'),
    ])
    def test_tampered_header_value(self, tiny_graph, aux, original, tampered):
        data = save_checkpoint(tiny_graph, aux)
        assert original in data
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(data.replace(original, tampered, 1))
        assert "checksum" in str(excinfo.value)

    def test_checksum_ignores_key_order(self, tiny_graph, aux):
        data = save_checkpoint(tiny_graph, aux)
        first, rest = data.split(b"\n", 1)
        header = header_of(data)
        reordered = json.dumps(dict(reversed(list(header.items())))).encode("utf-8")
        blob = rest[int(first.split(b" ")[2]) + 1:]
        rebuilt = f"{FORMAT} v1 {len(reordered)}\n".encode("ascii") + reordered + b"\n" + blob
        _, loaded = load_checkpoint(rebuilt)
        assert loaded.rescale_alpha == 0.1

    def test_version_mismatch(self, tiny_graph):
        data = save_checkpoint(tiny_graph).replace(b" v1 ", b" v2 ", 1)
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(data)
        assert "version" in str(excinfo.value)

    def test_not_a_checkpoint(self):
        with pytest.raises(CheckpointError):
            load_checkpoint(b"hello world\n{}\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(b"no newline at all")

    def test_truncated_header(self, tiny_graph):
        data = save_checkpoint(tiny_graph)
        with pytest.raises(CheckpointError):
            load_checkpoint(data[:60])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "absent.ckpt")

    def test_unknown_stage(self, tiny_graph):
        with pytest.raises(CheckpointError):
            save_checkpoint(tiny_graph, CheckpointAux(stage="trained"))


class TestValidator:

    def test_checksum(self):
        assert validate_checksum(b"abc", digest(b"abc"))
        assert not validate_checksum(b"abd", digest(b"abc"))
        assert not validate_checksum(b"abc", None)

    def test_commands_need_a_checkpoint(self):
        check_transition("train", None)
        for command in ("prune", "finetune", "eval", "inspect"):
            with pytest.raises(ConfigError):
                check_transition(command, None)

    def test_suspicious_transitions_warn(self, caplog):
        check_transition("prune", "baseline")
        check_transition("finetune", "sparsified")
        assert len([r for r in caplog.records if r.levelname == "WARNING"]) == 2

    def test_regular_chain_is_quiet(self, caplog):
        check_transition("prune", "sparsified")
        check_transition("finetune", "pruned")
        check_transition("eval", "finetuned")
        assert not [r for r in caplog.records if r.levelname == "WARNING"]

    def test_next_stage(self):
        assert next_stage("train", sparsifies=True) == "sparsified"
        assert next_stage("train") == "baseline"
        assert next_stage("prune") == "pruned"
        assert next_stage("finetune") == "finetuned"
        with pytest.raises(ConfigError):
            next_stage("eval")
