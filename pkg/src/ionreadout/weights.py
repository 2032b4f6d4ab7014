"""Weight files for trained networks and fitted baseline models.

A network file has a ``[network]`` section (input shape, layer count) followed
by one ``[layer i]`` section per layer::

    [layer 0]
    kind = dense
    weight.shape = 10 20
    weight = ...          # row-major, 17 significant digits
    bias.shape = 20
    bias = ...

Baseline models use the same syntax under a ``[threshold]`` or ``[hmm]``
section.
"""

from __future__ import annotations

from .baselines import HmmModel, ThresholdModel
from .neural import Conv1D, Dense, Flatten, MaxPool1D, NetworkSpec, Normalize, ReLU
from .textio import (WEIGHTS_MAGIC, FormatError, format_array, format_float,
                     parse_array, parse_shape, read_sections, write_sections)

__all__ = ["save_weights", "load_weights", "save_model", "load_model",
           "network_sections", "parse_network"]

_KIND = {Dense: "dense", Conv1D: "conv1d", MaxPool1D: "maxpool1d", ReLU: "relu",
         Flatten: "flatten", Normalize: "normalize"}


def network_sections(spec: NetworkSpec, params) -> list:
    """The ``(name, items)`` sections describing one network."""
    sections = [("network", {"input_shape": " ".join(map(str, spec.input_shape)),
                             "layers": str(len(spec.layers))})]
    for i, (layer, p) in enumerate(zip(spec.layers, params)):
        items = {"kind": _KIND[type(layer)]}
        if isinstance(layer, MaxPool1D):
            items["size"] = str(layer.size)
        for key in ("weight", "bias", "offset", "scale"):
            if key in p:
                items[f"{key}.shape"] = " ".join(map(str, p[key].shape))
                items[key] = format_array(p[key])
        sections.append((f"layer {i}", items))
    return sections


def save_weights(path, spec: NetworkSpec, params) -> None:
    write_sections(path, network_sections(spec, params), header=WEIGHTS_MAGIC)


def _array(items, key, section):
    if key not in items or f"{key}.shape" not in items:
        raise FormatError(f"missing {key}", section)
    shape = parse_shape(items[f"{key}.shape"], section, f"{key}.shape")
    return parse_array(items[key], shape, section, key)


def _layer(items, section):
    kind = items.get("kind")
    if kind == "dense":
        w, b = _array(items, "weight", section), _array(items, "bias", section)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise FormatError(f"dense shapes {w.shape} / {b.shape} are inconsistent", section)
        return Dense(*w.shape), {"weight": w, "bias": b}
    if kind == "conv1d":
        w, b = _array(items, "weight", section), _array(items, "bias", section)
        if w.ndim != 3 or b.shape != (w.shape[0],):
            raise FormatError(f"conv1d shapes {w.shape} / {b.shape} are inconsistent", section)
        return Conv1D(w.shape[1], w.shape[0], w.shape[2]), {"weight": w, "bias": b}
    if kind == "normalize":
        off, sc = _array(items, "offset", section), _array(items, "scale", section)
        if off.ndim != 1 or sc.shape != off.shape:
            raise FormatError("normalize offset/scale shapes differ", section)
        return Normalize(len(off)), {"offset": off, "scale": sc}
    if kind == "maxpool1d":
        try:
            return MaxPool1D(int(items.get("size", 2))), {}
        except ValueError:
            raise FormatError(f"bad pool size {items.get('size')!r}", section) from None
    if kind == "relu":
        return ReLU(), {}
    if kind == "flatten":
        return Flatten(), {}
    raise FormatError(f"unknown layer kind {kind!r}", section)


def load_weights(path) -> tuple[NetworkSpec, list]:
    """Parse a network file; raises ``FormatError`` naming the bad section.

    Nothing is returned unless every section parses and the layer shapes
    compose.
    """
    return parse_network(read_sections(path), path)


def parse_network(sections, path="<weights>") -> tuple[NetworkSpec, list]:
    if not sections or sections[0][0] != "network":
        raise FormatError(f"{path}: first section must be [network]")
    head = sections[0][1]
    try:
        input_shape = parse_shape(head["input_shape"], "network", "input_shape")
        n_layers = int(head["layers"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header ({exc})", "network") from None
    body = sections[1:]
    if len(body) != n_layers:
        raise FormatError(f"declares {n_layers} layers, found {len(body)} (truncated file?)",
                          "network")
    layers, params = [], []
    for i, (name, items) in enumerate(body):
        if name != f"layer {i}":
            raise FormatError(f"expected [layer {i}]", name)
        layer, p = _layer(items, name)
        layers.append(layer)
        params.append(p)
    try:
        spec = NetworkSpec(tuple(layers), input_shape)
    except ValueError as exc:
        # message names the layer index
        raise FormatError(f"shape error: {exc}", "network") from None
    return spec, params


def save_model(path, model) -> None:
    if isinstance(model, ThresholdModel):
        sections = [("threshold", {"threshold": str(model.threshold),
                                   "fitted_on": model.fitted_on or "-"})]
    elif isinstance(model, HmmModel):
        sections = [("hmm", {k: format_float(getattr(model, k)) for k in
                             ("lambda_bright", "lambda_dark", "p_bd", "p_db", "prior_bright")})]
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    write_sections(path, sections, header=WEIGHTS_MAGIC)


def load_model(path):
    sections = read_sections(path)
    if len(sections) != 1:
        raise FormatError(f"{path}: expected exactly one model section")
    name, items = sections[0]
    try:
        if name == "threshold":
            fp = items.get("fitted_on", "-")
            return ThresholdModel(int(items["threshold"]), "" if fp == "-" else fp)
        if name == "hmm":
            return HmmModel(**{k: float(v) for k, v in items.items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad model ({exc})", name) from None
    raise FormatError("unknown model kind", name)
