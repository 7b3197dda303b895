import json

import numpy as np
import pytest

from neuralccm.certloss import ControllerNet, MetricNet
from neuralccm.dynamics import make_benchmark
from neuralccm.modelio import ModelFormatError, SavedModel, load_model, model_to_dict, save_model


def saved_pair(arch="bottleneck", masked=True):
    model = make_benchmark("dubins")
    rng = np.random.default_rng(0)
    mn = MetricNet(4, 2, model.relevant, masked=masked, hidden_dim=8, rng=rng)
    cn = ControllerNet(4, 2, arch, model.relevant, width=5, hidden_dim=8, rng=rng)
    return model, SavedModel("dubins", mn, cn, 1.0, 3, {"note": "x"})


@pytest.mark.parametrize("arch,masked", [("bottleneck", True), ("simple", False)])
def test_round_trip_is_bit_exact(tmp_path, arch, masked):
    model, saved = saved_pair(arch, masked)
    path = tmp_path / "m.json"
    save_model(path, saved)
    back = load_model(path)
    assert (back.system, back.rate, back.seed, back.meta) == ("dubins", 1.0, 3, {"note": "x"})
    assert back.metric.masked == masked and back.controller.arch == arch
    for a, b in zip(saved.metric.params + saved.controller.params, back.metric.params + back.controller.params):
        assert np.array_equal(a.value, b.value)
    rng = np.random.default_rng(1)
    x, xr, u = model.state_box.sample(rng, 50), model.state_box.sample(rng, 50), model.control_box.sample(rng, 50)
    assert np.array_equal(back.controller(x, xr, u), saved.controller(x, xr, u))
    assert np.array_equal(back.metric.W(x), saved.metric.W(x))


def test_truncated_file_reports_offset(tmp_path):
    _, saved = saved_pair()
    path = tmp_path / "m.json"
    save_model(path, saved)
    data = path.read_bytes()
    path.write_bytes(data[:200])
    with pytest.raises(ModelFormatError) as err:
        load_model(path)
    assert err.value.offset is not None and 0 < err.value.offset <= 200
    assert "byte offset" in str(err.value)


def test_version_bump_rejected(tmp_path):
    _, saved = saved_pair()
    d = model_to_dict(saved)
    d["version"] = 2
    path = tmp_path / "m.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError, match="version"):
        load_model(path)


def test_wrong_format_and_missing_fields(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ModelFormatError):
        load_model(path)
    _, saved = saved_pair()
    d = model_to_dict(saved)
    del d["controller"]["nets"]
    path.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError):
        load_model(path)
    path.write_bytes(b"\xff\xfe")
    with pytest.raises(ModelFormatError):
        load_model(path)
