"""Versioned JSON persistence for a trained metric/controller pair."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .certloss import ControllerNet, MetricNet
from .diffnet import Mlp2

FORMAT = "neuralccm-model"
VERSION = 1


class ModelFormatError(ValueError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class SavedModel:
    system: str
    metric: MetricNet
    controller: ControllerNet
    rate: float
    seed: int = 0
    meta: dict = field(default_factory=dict)


def model_to_dict(saved):
    mn, cn = saved.metric, saved.controller
    return {
        "format": FORMAT, "version": VERSION, "system": saved.system, "seed": saved.seed,
        "rate": saved.rate, "meta": saved.meta,
        "metric": {"n": mn.n, "m": mn.m, "relevant": list(mn.relevant), "w_lb": mn.w_lb,
                   "w_ub": mn.w_ub, "masked": mn.masked, "net": mn.net.to_dict(),
                   "block_net": None if mn.block_net is None else mn.block_net.to_dict()},
        "controller": {"n": cn.n, "m": cn.m, "arch": cn.arch, "width": cn.width,
                       "relevant": list(cn.relevant), "nets": [net.to_dict() for net in cn.nets]},
    }


def model_from_dict(d):
    if d.get("format") != FORMAT:
        raise ModelFormatError(f"not a {FORMAT} file")
    if d.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}; expected {VERSION}")
    try:
        md, cd = d["metric"], d["controller"]
        net = Mlp2.from_dict(md["net"])
        mn = MetricNet(md["n"], md["m"], md["relevant"], md["w_lb"], md["w_ub"], md["masked"],
                       hidden_dim=net.hidden_dim, zero=True)
        mn.net = net
        if md["masked"]:
            mn.block_net = Mlp2.from_dict(md["block_net"])
        nets = [Mlp2.from_dict(x) for x in cd["nets"]]
        cn = ControllerNet(cd["n"], cd["m"], cd["arch"], cd["relevant"], cd["width"],
                           hidden_dim=nets[0].hidden_dim, zero=True)
        if cd["arch"] == "bottleneck":
            cn.w1net, cn.w2net = nets
        else:
            (cn.knet,) = nets
        return SavedModel(d["system"], mn, cn, float(d["rate"]), int(d.get("seed", 0)), d.get("meta", {}))
    except (KeyError, TypeError, ValueError) as ex:
        if isinstance(ex, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {ex!r}") from ex


def save_model(path, saved):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(saved), fh)


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as ex:
        raise ModelFormatError("model file is not UTF-8", ex.start) from ex
    try:
        d = json.loads(text)
    except json.JSONDecodeError as ex:
        raise ModelFormatError(f"corrupt model file: {ex.msg}", len(text[:ex.pos].encode("utf-8"))) from ex
    if not isinstance(d, dict):
        raise ModelFormatError("model file must hold a JSON object")
    return model_from_dict(d)
