import json
import struct

import numpy as np
import pytest

from lytnet.checkpoint import CheckpointError, read_container, write_container
from lytnet.losses import LossWeights
from lytnet.model import ModelConfig, init_params
from lytnet.trainer import TrainConfig, TrainState, load_checkpoint, save_checkpoint


def small():
    return ModelConfig(base_width=8, mhsa_embed_dim=8, mhsa_heads=2, cwd_width=4, cwd_embed_dim=4,
                       final_head_widths=(6, 3))


def fake_state(params):
    rng = np.random.default_rng(0)
    st = TrainState(step=7, lr=1.5e-4, seed=3)
    for n, t in params.items():
        st.m[n] = rng.normal(size=t.shape).astype(np.float32)
        st.v[n] = rng.random(t.shape).astype(np.float32)
    return st


class TestContainer:
    def test_layout(self, tmp_path):
        write_container(tmp_path / "c.lytc", {"a": np.arange(3, dtype=np.float32)}, {"kind": "x"})
        raw = (tmp_path / "c.lytc").read_bytes()
        magic, version, mlen = struct.unpack_from("<4sIQ", raw)
        assert (magic, version) == (b"LYTC", 1)
        manifest = json.loads(raw[16:16 + mlen])
        assert manifest["tensors"] == [{"name": "a", "shape": [3], "dtype": "float32",
                                        "offset": 0, "nbytes": 12}]
        assert np.frombuffer(raw[16 + mlen:], "<f4").tolist() == [0.0, 1.0, 2.0]

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {"w": rng.normal(size=(3, 3, 2, 4)).astype(np.float32),
                   "b": np.array([np.float32(1e-38), -0.0, np.inf], np.float32),
                   "s": np.float32(2.5).reshape(())}
        write_container(tmp_path / "c.lytc", tensors)
        _, back = read_container(tmp_path / "c.lytc")
        for k, v in tensors.items():
            assert back[k].tobytes() == v.tobytes()

    def test_no_temp_files_left(self, tmp_path):
        write_container(tmp_path / "c.lytc", {"a": np.zeros(2)})
        write_container(tmp_path / "c.lytc", {"a": np.ones(2)})
        assert [p.name for p in tmp_path.iterdir()] == ["c.lytc"]

    def test_truncated_names_tensor(self, tmp_path):
        write_container(tmp_path / "c.lytc", {"first": np.zeros(4), "second": np.zeros(8)})
        raw = (tmp_path / "c.lytc").read_bytes()
        (tmp_path / "t.lytc").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="'second'.*truncated"):
            read_container(tmp_path / "t.lytc")

    def test_bad_magic_and_version(self, tmp_path):
        write_container(tmp_path / "c.lytc", {"a": np.zeros(1)})
        raw = bytearray((tmp_path / "c.lytc").read_bytes())
        (tmp_path / "m.lytc").write_bytes(b"NOPE" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            read_container(tmp_path / "m.lytc")
        raw[4:8] = struct.pack("<I", 9)
        (tmp_path / "v.lytc").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 9"):
            read_container(tmp_path / "v.lytc")

    def test_trailing_bytes(self, tmp_path):
        write_container(tmp_path / "c.lytc", {"a": np.zeros(1)})
        (tmp_path / "c.lytc").write_bytes((tmp_path / "c.lytc").read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            read_container(tmp_path / "c.lytc")

    def test_nbytes_shape_disagreement(self, tmp_path):
        manifest = json.dumps({"tensors": [{"name": "a", "shape": [2], "dtype": "float32",
                                            "offset": 0, "nbytes": 4}]}).encode()
        (tmp_path / "c.lytc").write_bytes(struct.pack("<4sIQ", b"LYTC", 1, len(manifest)) + manifest + b"\0" * 4)
        with pytest.raises(CheckpointError, match="nbytes=4 disagrees"):
            read_container(tmp_path / "c.lytc")

    def test_bad_manifest_json(self, tmp_path):
        (tmp_path / "c.lytc").write_bytes(struct.pack("<4sIQ", b"LYTC", 1, 3) + b"{x}")
        with pytest.raises(CheckpointError, match="JSON"):
            read_container(tmp_path / "c.lytc")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            read_container(tmp_path / "none.lytc")


class TestModelCheckpoint:
    def test_full_roundtrip(self, tmp_path):
        params = init_params(small(), seed=4)
        state = fake_state(params)
        tc = TrainConfig(epochs=3, seed=3)
        save_checkpoint(tmp_path / "m.lytc", params, state, tc, LossWeights())
        ck = load_checkpoint(tmp_path / "m.lytc")
        assert ck.params.config == small()
        assert ck.params.names() == params.names()
        for n in params.names():
            assert ck.params[n].data.tobytes() == params[n].data.tobytes()
            assert ck.state.m[n].tobytes() == state.m[n].tobytes()
            assert ck.state.v[n].tobytes() == state.v[n].tobytes()
        assert (ck.state.step, ck.state.lr, ck.state.seed) == (7, 1.5e-4, 3)
        assert ck.train_config == tc
        assert ck.loss_weights == LossWeights()
        assert ck.manifest["rng"]["generator"] == "numpy PCG64"

    def test_config_mismatch_lists_first_entry(self, tmp_path):
        save_checkpoint(tmp_path / "m.lytc", init_params(ModelConfig()))
        narrow = ModelConfig(base_width=16, mhsa_embed_dim=16)
        with pytest.raises(CheckpointError, match=r"'y\.path\.conv_in\.w' has shape \[3, 3, 1, 32\], "
                                                  r"model config expects \[3, 3, 1, 16\]"):
            load_checkpoint(tmp_path / "m.lytc", expected_config=narrow)

    def test_variant_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.lytc", init_params(small()))
        with pytest.raises(CheckpointError, match="missing tensor 'y.cwd"):
            load_checkpoint(tmp_path / "m.lytc", expected_config=small().with_variant(y_cwd=True))

    def test_extra_tensor_rejected(self, tmp_path):
        params = init_params(small())
        tensors = {n: t.data for n, t in params.items()}
        tensors["stray"] = np.zeros(2)
        write_container(tmp_path / "m.lytc", tensors, {"kind": "lytnet", "model_config": small().to_dict()})
        with pytest.raises(CheckpointError, match="'stray' is not part"):
            load_checkpoint(tmp_path / "m.lytc")

    def test_wrong_kind(self, tmp_path):
        write_container(tmp_path / "e.lytc", {"a": np.zeros(1)}, {"kind": "extractor"})
        with pytest.raises(CheckpointError, match="not a model checkpoint"):
            load_checkpoint(tmp_path / "e.lytc")
