"""Plain-text file formats.

Sectioned key-value files (weights, fitted baselines, physics parameters)::

    # free-form comment
    [section name]
    key = value
    array = 0.5 -1.25 3

Dataset files: one header line of ``key=value`` tokens, then one record per
trajectory ``label,count0,count1,...`` with label 1 = Bright, 0 = Dark::

    # ionreadout-dataset version=1 n_sub_bins=4 sub_bin_duration=3e-06 fingerprint=... seed=7 balance=0.5
    1,0,2,1,0
    0,0,0,0,0
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .physics import LabeledDataset, PhysicsParams

__all__ = [
    "FormatError",
    "format_float",
    "format_array",
    "read_sections",
    "write_sections",
    "save_dataset",
    "load_dataset",
    "save_physics",
    "load_physics",
]

WEIGHTS_MAGIC = "# ionreadout weights v1"
DATASET_MAGIC = "# ionreadout-dataset"


class FormatError(ValueError):
    """Malformed file; ``section`` names the offending section when known."""

    def __init__(self, message: str, section: str | None = None):
        super().__init__(f"[{section}] {message}" if section else message)
        self.section = section


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def format_array(a) -> str:
    return " ".join(format_float(v) for v in np.asarray(a, dtype=np.float64).ravel())


def write_sections(path, sections, header: str | None = None) -> None:
    """``sections`` is an iterable of ``(name, {key: str value})``."""
    lines = [header] if header else []
    for name, items in sections:
        lines.append(f"[{name}]")
        for key, value in items.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def read_sections(path) -> list[tuple[str, dict]]:
    sections: list[tuple[str, dict]] = []
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FormatError(f"line {lineno}: unterminated section header {line!r}")
            current = (line[1:-1].strip(), {})
            sections.append(current)
            continue
        if current is None:
            raise FormatError(f"line {lineno}: key outside any section")
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"line {lineno}: expected 'key = value'", current[0])
        current[1][key.strip()] = value.strip()
    return sections


def parse_array(text: str, shape, section: str, key: str) -> np.ndarray:
    try:
        values = np.array([float(t) for t in text.split()], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{key}: non-numeric value ({exc})", section) from None
    size = int(np.prod(shape))
    if values.size != size:
        raise FormatError(f"{key}: expected {size} values for shape {tuple(shape)}, "
                          f"found {values.size}", section)
    return values.reshape(shape)


def parse_shape(text: str, section: str, key: str) -> tuple:
    try:
        shape = tuple(int(t) for t in text.split())
    except ValueError:
        raise FormatError(f"{key}: bad shape {text!r}", section) from None
    if not shape or any(s < 1 for s in shape):
        raise FormatError(f"{key}: bad shape {text!r}", section)
    return shape


# -- datasets -------------------------------------------------------------------

def save_dataset(path, data: LabeledDataset) -> None:
    header = (f"{DATASET_MAGIC} version=1 n_sub_bins={data.n_sub_bins} "
              f"sub_bin_duration={format_float(data.sub_bin_duration)} "
              f"fingerprint={data.params_fingerprint or '-'} seed={data.seed} "
              f"balance={format_float(data.class_balance)} start={int(data.indices[0])}")
    body = np.column_stack([data.labels.astype(np.int64), data.counts])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, body, fmt="%d", delimiter=",")


def load_dataset(path) -> LabeledDataset:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith(DATASET_MAGIC):
            raise FormatError(f"{path}: not a dataset file (missing header)")
        meta = dict(tok.split("=", 1) for tok in header[len(DATASET_MAGIC):].split())
        if meta.get("version") != "1":
            raise FormatError(f"{path}: unsupported dataset version {meta.get('version')!r}")
        n_bins = int(meta["n_sub_bins"])
        try:
            body = np.loadtxt(fh, delimiter=",", dtype=np.int64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: bad record ({exc})") from None
    if body.size == 0:
        raise FormatError(f"{path}: no records")
    if body.shape[1] != n_bins + 1:
        raise FormatError(f"{path}: expected {n_bins + 1} fields per record, found {body.shape[1]}")
    if ((body[:, 0] != 0) & (body[:, 0] != 1)).any():
        raise FormatError(f"{path}: labels must be 0 or 1")
    start = int(meta.get("start", 0))
    fp = meta.get("fingerprint", "-")
    return LabeledDataset(body[:, 1:], body[:, 0], int(meta.get("seed", 0)),
                          float(meta.get("balance", 0.5)),
                          np.arange(start, start + len(body)), None,
                          "" if fp == "-" else fp, float(meta["sub_bin_duration"]))


# -- physics parameters -----------------------------------------------------------

def save_physics(path, params: PhysicsParams, extra: dict | None = None) -> None:
    items = {k: (str(v) if isinstance(v, int) else format_float(v))
             for k, v in params.as_dict().items()}
    sections = [("physics", items)]
    if extra:
        sections.append(("calibration", {k: str(v) for k, v in extra.items()}))
    write_sections(path, sections, header="# ionreadout physics parameters")


def load_physics(path) -> PhysicsParams:
    for name, items in read_sections(path):
        if name == "physics":
            known = PhysicsParams.__dataclass_fields__
            unknown = set(items) - set(known)
            if unknown:
                raise FormatError(f"unknown keys {sorted(unknown)}", name)
            kwargs = {k: (int(v) if k == "n_sub_bins" else float(v)) for k, v in items.items()}
            return PhysicsParams(**kwargs)
    raise FormatError(f"{path}: no [physics] section")
