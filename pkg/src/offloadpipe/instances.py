"""Seeded random instances small enough for the exhaustive oracle."""

from __future__ import annotations

import random
from dataclasses import dataclass

from .profiles import DeviceSpec, ModelSpec, NetworkSpec

MB = 1_000_000


@dataclass(frozen=True)
class Instance:
    model: ModelSpec
    devices: tuple[DeviceSpec, ...]
    network: NetworkSpec

    def __iter__(self):
        return iter((self.model, self.devices, self.network))


def random_instance(
    rng: random.Random,
    max_devices: int = 3,
    max_layers: int = 12,
    layer_bytes: int = 100 * MB,
    bw_mbps: tuple[float, float] = (50.0, 250.0),
    kv_heavy: bool = False,
) -> Instance:
    """Heterogeneous devices holding 2 to 4 layers each, loads slower than compute.

    ``kv_heavy`` picks an attention shape whose cache fills memory within a
    few hundred tokens, so the online planner has something to do.
    """
    D = rng.randint(2, max_devices)
    L = rng.randint(2 * D, max(2 * D, max_layers))
    if kv_heavy:
        model = ModelSpec(L, layer_bytes, 0.4, 0.6, 8192, 2, 8, 8, name="random-kv")
    else:
        model = ModelSpec(L, layer_bytes, 0.4, 0.6, 4096, 2, 32, 8, name="random")
    devices = []
    for i in range(D):
        cap = rng.randint(2, 4)
        read = rng.choice([0.5e9, 1e9, 2e9])
        mem = int(cap * layer_bytes / 0.9) + rng.randint(0, 3 * MB)
        comp = round(rng.uniform(0.1, 0.9) * layer_bytes / read, 4)
        devices.append(DeviceSpec(f"D{i + 1}", mem, comp, read, 1e9))
    bw = rng.uniform(*bw_mbps) * 125_000
    return Instance(model, tuple(devices), NetworkSpec(bw))
