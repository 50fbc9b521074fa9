"""Model, device and network descriptions plus the linear cost primitives.

All sizes are bytes and all rates bytes/second internally.  Config files
may use unit suffixes (``"100MB"``, ``"200Mbps"``, ``"10ms"``); decimal
prefixes are used throughout, so ``1 MB = 10**6 B`` and
``1 Mbps = 125_000 B/s``.
"""

from __future__ import annotations

import os
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .errors import EmptyDeviceList, InvariantViolation, MalformedConfig

_SIZE_UNITS = {
    "b": 1,
    "kb": 10**3,
    "mb": 10**6,
    "gb": 10**9,
    "tb": 10**12,
    "kib": 2**10,
    "mib": 2**20,
    "gib": 2**30,
}
_RATE_UNITS = {
    "b/s": 1.0,
    "kb/s": 1e3,
    "mb/s": 1e6,
    "gb/s": 1e9,
    "bps": 1 / 8,
    "kbps": 1e3 / 8,
    "mbps": 1e6 / 8,
    "gbps": 1e9 / 8,
}
_TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9}

_NUM_RE = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z/]*)\s*$")


def _split(value: Any, what: str) -> tuple[float, str]:
    if isinstance(value, bool):
        raise MalformedConfig(f"{what}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value), ""
    if not isinstance(value, str):
        raise MalformedConfig(f"{what}: expected a number, got {value!r}")
    m = _NUM_RE.match(value)
    if not m:
        raise MalformedConfig(f"{what}: cannot parse {value!r}")
    return float(m.group(1)), m.group(2)


def parse_size(value: Any, what: str = "size") -> int:
    """Parse a byte count such as ``"100MB"`` or ``4096``."""
    number, unit = _split(value, what)
    scale = _SIZE_UNITS.get(unit.lower(), None) if unit else 1
    if scale is None:
        raise MalformedConfig(f"{what}: unknown size unit {unit!r}")
    return int(round(number * scale))


def parse_rate(value: Any, what: str = "rate") -> float:
    """Parse a rate into bytes/second.  Bare numbers are bytes/second."""
    number, unit = _split(value, what)
    if not unit:
        return number
    # "MBps" means bytes, "Mbps" bits; only the capital B distinguishes them.
    if unit.endswith("Bps"):
        unit = unit[:-3] + "B/s"
    scale = _RATE_UNITS.get(unit.lower())
    if scale is None:
        raise MalformedConfig(f"{what}: unknown rate unit {unit!r}")
    return number * scale


def parse_seconds(value: Any, what: str = "time") -> float:
    number, unit = _split(value, what)
    if not unit:
        return number
    scale = _TIME_UNITS.get(unit.lower())
    if scale is None:
        raise MalformedConfig(f"{what}: unknown time unit {unit!r}")
    return number * scale


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    layer_bytes: int
    mha_fraction: float
    mlp_fraction: float
    hidden_size: int
    dtype_bytes: int
    num_attn_heads: int
    num_kv_heads: int
    name: str = "model"
    h_size_bytes: int | None = None
    embedding_bytes: int = 0
    lm_head_bytes: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise InvariantViolation("num_layers must be >= 1")
        if self.layer_bytes <= 0:
            raise InvariantViolation("layer_bytes must be > 0")
        for name in ("mha_fraction", "mlp_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvariantViolation(f"{name} must lie in (0, 1), got {v}")
        if abs(self.mha_fraction + self.mlp_fraction - 1.0) > 1e-9:
            raise InvariantViolation(
                f"mha_fraction + mlp_fraction must equal 1, got "
                f"{self.mha_fraction} + {self.mlp_fraction}"
            )
        if self.hidden_size < 1 or self.dtype_bytes < 1:
            raise InvariantViolation("hidden_size and dtype_bytes must be >= 1")
        if self.num_attn_heads < 1 or self.hidden_size % self.num_attn_heads:
            raise InvariantViolation("hidden_size must be divisible by num_attn_heads")
        if self.num_kv_heads < 1:
            raise InvariantViolation("num_kv_heads must be >= 1")
        if self.h_size_bytes is not None and self.h_size_bytes <= 0:
            raise InvariantViolation("h_size_bytes override must be > 0")
        if self.embedding_bytes < 0 or self.lm_head_bytes < 0:
            raise InvariantViolation("non-decoder reservations must be >= 0")

    @property
    def mha_bytes(self) -> int:
        return int(round(self.mha_fraction * self.layer_bytes))

    @property
    def mlp_bytes(self) -> int:
        return self.layer_bytes - self.mha_bytes

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attn_heads


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    memory_bytes: int
    comp_per_layer_seconds: float
    storage_read_bps: float
    storage_write_bps: float
    prefill_seconds: float = 0.0

    def __post_init__(self):
        if self.memory_bytes <= 0:
            raise InvariantViolation(f"{self.device_id}: memory_bytes must be > 0")
        for name in ("comp_per_layer_seconds", "storage_read_bps", "storage_write_bps"):
            if not getattr(self, name) > 0:
                raise InvariantViolation(f"{self.device_id}: {name} must be > 0")
        if self.prefill_seconds < 0:
            raise InvariantViolation(f"{self.device_id}: prefill_seconds must be >= 0")


@dataclass(frozen=True)
class NetworkSpec:
    base_bandwidth_bps: float
    trace: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not self.base_bandwidth_bps > 0:
            raise InvariantViolation("base_bandwidth_bps must be > 0")
        last = None
        for token, bw in self.trace:
            if last is not None and token <= last:
                raise InvariantViolation("trace token indices must be strictly increasing")
            if not bw > 0:
                raise InvariantViolation(f"trace bandwidth at token {token} must be > 0")
            last = token

    def bandwidth_at(self, token_index: int) -> float:
        """Bandwidth in force for the decode step producing ``token_index``."""
        bw = self.base_bandwidth_bps
        for token, new_bw in self.trace:
            if token <= token_index:
                bw = new_bw
            else:
                break
        return bw


def kv_bytes_per_token_per_layer(model: ModelSpec) -> int:
    return 2 * model.num_kv_heads * model.head_dim * model.dtype_bytes


def hidden_output_bytes(model: ModelSpec, micro_batch: int = 1) -> int:
    if micro_batch < 1:
        raise ValueError("micro_batch must be >= 1")
    per_seq = model.h_size_bytes if model.h_size_bytes is not None else model.hidden_size * model.dtype_bytes
    return micro_batch * per_seq


@dataclass(frozen=True)
class CostProfile:
    """Linear cost surrogates for compute, storage loads and activations."""

    model: ModelSpec
    devices: tuple[DeviceSpec, ...]

    @property
    def kv_bytes_per_token_per_layer(self) -> int:
        return kv_bytes_per_token_per_layer(self.model)

    def comp(self, device: int, layer_equivalents: float, micro_batch: int = 1) -> float:
        return self.devices[device].comp_per_layer_seconds * layer_equivalents * micro_batch

    def load(self, device: int, nbytes: float) -> float:
        return nbytes / self.devices[device].storage_read_bps

    def write(self, device: int, nbytes: float) -> float:
        return nbytes / self.devices[device].storage_write_bps

    def h_size(self, micro_batch: int = 1) -> int:
        return hidden_output_bytes(self.model, micro_batch)

    def comm(self, bw_net: float, micro_batch: int = 1) -> float:
        """One activation hop between neighbouring devices."""
        return self.h_size(micro_batch) / bw_net


# --------------------------------------------------------------------------
# config ingestion

_MODEL_FIELDS = {
    "name": str,
    "num_layers": int,
    "layer_bytes": parse_size,
    "mha_fraction": float,
    "mlp_fraction": float,
    "hidden_size": int,
    "dtype_bytes": int,
    "num_attn_heads": int,
    "num_kv_heads": int,
    "h_size_bytes": parse_size,
    "embedding_bytes": parse_size,
    "lm_head_bytes": parse_size,
}
_DEVICE_FIELDS = {
    "device_id": str,
    "memory_bytes": parse_size,
    "comp_per_layer_seconds": parse_seconds,
    "storage_read_bps": parse_rate,
    "storage_write_bps": parse_rate,
    "prefill_seconds": parse_seconds,
}


def _strict() -> bool:
    return os.environ.get("LIME_CONFIG_STRICT", "").strip() == "1"


def _convert(raw: Mapping[str, Any], schema: Mapping[str, Any], where: str) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        msg = f"{where}: unknown field(s) {', '.join(unknown)}"
        if _strict():
            raise MalformedConfig(msg)
        warnings.warn(msg, stacklevel=3)
    out = {}
    for key, conv in schema.items():
        if key not in raw or raw[key] is None:
            continue
        value = raw[key]
        try:
            if conv is int:
                if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                    raise ValueError
                out[key] = int(value)
            elif conv is float:
                if isinstance(value, bool):
                    raise ValueError
                out[key] = float(value)
            elif conv is str:
                out[key] = str(value)
            else:
                out[key] = conv(value, f"{where}.{key}")
        except (TypeError, ValueError) as exc:
            raise MalformedConfig(f"{where}.{key}: bad value {value!r}") from exc
    return out


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise MalformedConfig(f"{where}: {exc}") from exc


def _load_document(path: str | os.PathLike) -> Any:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise MalformedConfig(f"cannot read {p}: {exc.strerror}") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MalformedConfig(f"{p}: {exc}") from exc


def model_from_dict(raw: Mapping[str, Any], where: str = "model") -> ModelSpec:
    if not isinstance(raw, Mapping):
        raise MalformedConfig(f"{where}: expected a mapping")
    return _build(ModelSpec, _convert(raw, _MODEL_FIELDS, where), where)


def devices_from_obj(raw: Any, where: str = "devices") -> tuple[DeviceSpec, ...]:
    if isinstance(raw, Mapping):
        raw = raw.get("devices")
    if raw is None:
        raw = []
    if not isinstance(raw, Sequence) or isinstance(raw, str):
        raise MalformedConfig(f"{where}: expected a list of devices")
    if not raw:
        raise EmptyDeviceList(f"{where}: no devices")
    devices = []
    for idx, entry in enumerate(raw):
        if not isinstance(entry, Mapping):
            raise MalformedConfig(f"{where}[{idx}]: expected a mapping")
        kw = _convert(entry, _DEVICE_FIELDS, f"{where}[{idx}]")
        kw.setdefault("device_id", f"D{idx + 1}")
        if "storage_write_bps" not in kw and "storage_read_bps" in kw:
            kw["storage_write_bps"] = kw["storage_read_bps"]
        devices.append(_build(DeviceSpec, kw, f"{where}[{idx}]"))
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise InvariantViolation(f"{where}: duplicate device ids")
    return tuple(devices)


def network_from_dict(raw: Mapping[str, Any], where: str = "network") -> NetworkSpec:
    if not isinstance(raw, Mapping):
        raise MalformedConfig(f"{where}: expected a mapping")
    kw = _convert(raw, {"base_bandwidth_bps": parse_rate, "trace": lambda v, w: v}, where)
    if "base_bandwidth_bps" not in kw:
        raise MalformedConfig(f"{where}: base_bandwidth_bps is required")
    trace = []
    for idx, entry in enumerate(kw.get("trace") or []):
        if isinstance(entry, Mapping):
            tok, bw = entry.get("token_index"), entry.get("new_bandwidth_bps")
        elif isinstance(entry, Sequence) and len(entry) == 2:
            tok, bw = entry
        else:
            raise MalformedConfig(f"{where}.trace[{idx}]: expected token_index/new_bandwidth_bps")
        if tok is None or bw is None or isinstance(tok, bool):
            raise MalformedConfig(f"{where}.trace[{idx}]: missing token_index or bandwidth")
        try:
            tok = int(tok)
        except (TypeError, ValueError) as exc:
            raise MalformedConfig(f"{where}.trace[{idx}].token_index: bad value {tok!r}") from exc
        trace.append((tok, parse_rate(bw, f"{where}.trace[{idx}]")))
    return NetworkSpec(kw["base_bandwidth_bps"], tuple(trace))


def parse_model(path) -> ModelSpec:
    return model_from_dict(_load_document(path), str(path))


def parse_devices(path) -> tuple[DeviceSpec, ...]:
    return devices_from_obj(_load_document(path), str(path))


def parse_network(path) -> NetworkSpec:
    return network_from_dict(_load_document(path), str(path))


def parse_configs(model_file, devices_file, network_file):
    """Load and validate the three config documents."""
    return parse_model(model_file), parse_devices(devices_file), parse_network(network_file)
