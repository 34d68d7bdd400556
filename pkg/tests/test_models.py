import numpy as np
import pytest

from fcntag.errors import ContractError, FcnError
from fcntag.frontend import FeatureKind, FeatureMatrix
from fcntag.models import (MODEL_NAMES, InvalidLadderError, InvalidSpecError, ModelSpec, build, fcn_spec,
                           load_checkpoint, mfcc_spec, param_count, save_checkpoint, shape_trace,
                           spec_by_name)

TINY = dict(n_frames=32, channels=[4, 5, 6, 7], pools=[(2, 2), (4, 2), (3, 2), (4, 4)], output_dim=3)


def test_fcn5_trace():
    assert shape_trace(fcn_spec(5)) == [(48, 341, 128), (24, 85, 256), (12, 21, 512), (4, 4, 1024),
                                        (1, 1, 2048)]


def test_fcn4_trace_follows_floor_pooling():
    assert shape_trace(fcn_spec(4)) == [(48, 341, 128), (12, 68, 384), (4, 8, 768), (1, 1, 2048)]


def test_fcn3_trace():
    assert shape_trace(fcn_spec(3)) == [(32, 273, 256), (8, 17, 768), (1, 1, 2048)]


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_every_named_model_reaches_one_by_one(name):
    assert shape_trace(spec_by_name(name))[-1][:2] == (1, 1)


def test_deeper_fcns_append_1x1_blocks():
    for n, extra in ((6, 1), (7, 2)):
        spec = fcn_spec(n)
        tail = spec.blocks[5:]
        assert len(tail) == extra
        assert all(b.kernel == 1 and b.channels == 1024 and b.pool is None for b in tail)


def test_stft_fcn4_ladder():
    assert [t[:2] for t in shape_trace(spec_by_name("fcn4-stft"))] == [(43, 341), (10, 68), (3, 8), (1, 1)]


def test_bad_ladders():
    with pytest.raises(InvalidLadderError) as err:
        shape_trace(fcn_spec(4, pools=[(2, 4), (4, 5), (3, 8), (2, 8)]))
    assert err.value.block == 3
    with pytest.raises(InvalidLadderError) as err:
        shape_trace(fcn_spec(4, pools=[(2, 4), (64, 5), (3, 8), (4, 8)]))
    assert err.value.block == 1
    with pytest.raises(InvalidSpecError):
        fcn_spec(8)
    with pytest.raises(InvalidSpecError):
        spec_by_name("resnet")


def test_param_count_by_hand():
    spec = fcn_spec(4, **TINY)
    total, rows = param_count(spec)
    expect = (9 * 1 * 4 + 4) + (9 * 4 * 5 + 5) + (9 * 5 * 6 + 6) + (9 * 6 * 7 + 7) + 2 * (4 + 5 + 6 + 7) + (7 * 3 + 3)
    assert total == expect
    assert sum(r["stats"] for r in rows) == 2 * (4 + 5 + 6 + 7)
    assert total == sum(p.data.size for p in build(spec).parameters())


def test_mfcc_spec_shapes():
    spec = mfcc_spec(n_frames=20, hidden=(8, 9, 10), output_dim=4)
    assert shape_trace(spec) == [(1, 20, 8), (1, 20, 9), (1, 1, 10)]
    total, _ = param_count(spec)
    assert total == (90 * 8 + 8) + (8 * 9 + 9) + (9 * 10 + 10) + 2 * (8 + 9 + 10) + (10 * 4 + 4)
    model = build(spec)
    out = model.predict(np.zeros((2, 90, 20), np.float32))
    assert out.shape == (2, 4)


def test_canonical_roundtrip():
    spec = fcn_spec(7, "stft", n_frames=300)
    assert ModelSpec.from_canonical(spec.canonical()) == spec


def test_build_is_seed_deterministic():
    spec = fcn_spec(4, **TINY)
    a, b, c = build(spec, 3), build(spec, 3), build(spec, 4)
    for (na, pa), pb, pc in zip(a.named_parameters().items(), b.parameters(), c.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()
    assert a.named_parameters()["block0.conv.kernel"].data.tobytes() != \
        c.named_parameters()["block0.conv.kernel"].data.tobytes()


def test_predict_is_batch_invariant_and_in_open_interval():
    spec = fcn_spec(4, **TINY)
    model = build(spec, 1)
    x = np.random.default_rng(0).normal(size=(5, 96, 32)).astype(np.float32)
    together = model.predict(x, batch_size=5)
    alone = np.concatenate([model.predict(x[i:i + 1]) for i in range(5)])
    assert together.tobytes() == alone.tobytes()
    assert np.all((together > 0) & (together < 1))


def test_input_contract():
    model = build(fcn_spec(4, **TINY))
    with pytest.raises(ContractError):
        model.predict(np.zeros((1, 96, 33), np.float32))
    stft = FeatureMatrix(np.zeros((96, 32), np.float32), FeatureKind.LOG_STFT, bytes(8))
    with pytest.raises(ContractError):
        model.predict([stft])


def test_training_forward_is_stochastic_and_updates_bn():
    model = build(fcn_spec(4, **TINY), 0).train()
    x = np.random.default_rng(0).normal(size=(4, 96, 32)).astype(np.float32)
    a, b = model(x).data, model(x).data
    assert not np.array_equal(a, b)
    assert all(bn.n_updates == 2 for bn in model.batchnorms().values())


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = build(fcn_spec(4, **TINY), 2).train()
    x = np.random.default_rng(1).normal(size=(3, 96, 32)).astype(np.float32)
    model(x)  # populate batch-norm statistics
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.spec == model.spec
    assert back.predict(x).tobytes() == model.predict(x).tobytes()
    for name, bn in model.batchnorms().items():
        assert back.batchnorms()[name].n_updates == bn.n_updates


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"FCNC\x01\x00garbage")
    with pytest.raises(FcnError) as err:
        load_checkpoint(p)
    assert "bad.ckpt" in str(err.value)
