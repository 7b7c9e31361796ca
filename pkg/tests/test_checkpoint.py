import struct

import numpy as np
import pytest

from laser_ctr import checkpoint as ck
from laser_ctr.harness.model import LaserCTRClassifier


def test_model_round_trip_is_bit_exact(small_checkpoint, small_corpus, tmp_path):
    model = ck.load_model(small_checkpoint)
    again_path = tmp_path / "again.lasr"
    model.save(str(again_path))
    assert again_path.read_bytes() == open(small_checkpoint, "rb").read()
    other = LaserCTRClassifier.load(str(again_path))
    for k, v in model.params_.items():
        assert other.params_[k].dtype == np.float32
        assert other.params_[k].tobytes() == v.tobytes()
    X, _ = small_corpus.samples(users=[0, 1], seq_len=model.seq_len)
    assert model.decision_function(X).tobytes() == other.decision_function(X).tobytes()


def test_config_record_round_trip():
    rec = dict(seq_len=1000, embed_dim=32, qk_dim=8, segment_w=10, gsta_layers=2, ffn_ratio=4, recent_k=2,
               heads=2, recency_buckets=32, gamma=0.0, gate="softmax", fusion=False, recency=True,
               encoder="din", hidden=64, n_items=500, n_topics=100)
    blob = ck.pack_config(rec)
    assert len(blob) == ck.CONFIG.size == 9 * 4 + 4 + 4 + 3 * 4
    out = ck.unpack_config(blob)
    assert out == {**rec, "gamma": None}


def test_tensor_layout_on_disk():
    params = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    blob = ck.dumps(dict(seq_len=10, embed_dim=4, qk_dim=2, segment_w=5, gsta_layers=1, ffn_ratio=1, recent_k=1,
                         heads=1, recency_buckets=4), params)
    assert blob[:4] == b"LASR" and struct.unpack_from("<H", blob, 4) == (1,)
    tail = blob[6 + ck.CONFIG.size :]
    assert tail[:3] == b"\x01\x00w" and tail[3] == 2
    assert struct.unpack_from("<2I", tail, 4) == (2, 3)
    assert np.frombuffer(tail[12:], "<f4").tolist() == list(range(6))
    rec, back = ck.loads(blob)
    assert rec["segment_w"] == 5 and back["w"].tobytes() == params["w"].tobytes()


def test_rejects_bad_inputs(small_checkpoint, tmp_path):
    data = open(small_checkpoint, "rb").read()
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.loads(b"XXXX" + data[4:])
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.loads(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(ck.CheckpointError):
        ck.loads(data[:-3])
    with pytest.raises(ck.CheckpointError):
        ck.loads(data[:10])
    rec, _ = ck.loads(data)
    with pytest.raises(ck.CheckpointError, match="float32"):
        ck.dumps(rec, {"w": np.zeros(2)})
    with pytest.raises(ck.CheckpointError, match="lacks"):
        ck.dumps({}, {})
    path = tmp_path / "bad.lasr"
    path.write_bytes(ck.dumps(*_drop_tensor(data)))
    with pytest.raises(ck.CheckpointError, match="do not match"):
        ck.load_model(str(path))


def _drop_tensor(data):
    rec, params = ck.loads(data)
    params.pop(sorted(params)[0])
    return rec, params
