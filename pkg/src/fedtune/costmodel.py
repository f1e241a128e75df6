"""Analytic per-round time, traffic, and energy accounting.

Per-layer costs are uniform: one full-model training batch costs 3*D
forward-layer units (forward D, backward 2D), so the unit cost is the
measured full-batch latency divided by 3*D. Adapter compute overhead is
treated as negligible next to a transformer block. Wire traffic is
charged at 4 bytes per scalar regardless of the 8-byte internal math.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError

WIRE_BYTES_PER_SCALAR = 4
PAYLOAD_HEADER_BYTES = 64

# Reference constants for sanity ratios: a BERT-base-class encoder has
# ~110.01e6 parameters; its per-sample forward cost is estimated with the
# usual 2 * params * seqlen rule at seqlen 256.
REFERENCE_FULL_MODEL_PARAMS = 110_010_000
REFERENCE_SEQLEN = 256
REFERENCE_FORWARD_FLOPS = 2 * REFERENCE_FULL_MODEL_PARAMS * REFERENCE_SEQLEN


@dataclass(frozen=True)
class DeviceProfile:
    """Measured device characteristics driving the emulated clock."""

    name: str
    per_batch_latency_full: float  # seconds for one full-model training batch
    compute_power_watts: float
    radio_power_watts: float
    cache_reload_latency: float  # seconds per batch for the activation cache

    def __post_init__(self):
        for field_name in ("per_batch_latency_full", "compute_power_watts",
                           "radio_power_watts", "cache_reload_latency"):
            if getattr(self, field_name) <= 0:
                raise ConfigurationError(f"device profile '{self.name}': {field_name} must be > 0")


@dataclass(frozen=True)
class NetworkProfile:
    uplink_bytes_per_s: float
    downlink_bytes_per_s: float

    def __post_init__(self):
        if self.uplink_bytes_per_s <= 0 or self.downlink_bytes_per_s <= 0:
            raise ConfigurationError("network bandwidth must be > 0")


# Per-batch latencies measured on real boards; power coefficients and
# reload latencies are artifact-supplied ballparks for those boards.
BUILTIN_DEVICE_PROFILES = {
    "tx2": DeviceProfile("tx2", 0.88, 7.5, 1.5, 0.005),
    "nano": DeviceProfile("nano", 1.89, 5.0, 1.5, 0.008),
    "rpi4b": DeviceProfile("rpi4b", 18.27, 6.0, 1.2, 0.020),
}

DEFAULT_NETWORK = NetworkProfile(1_000_000.0, 1_000_000.0)  # 1 MB/s each way


def layer_unit_cost(profile: DeviceProfile, num_layers: int) -> float:
    """Seconds for one forward pass of one transformer layer on one batch."""
    return profile.per_batch_latency_full / (3.0 * num_layers)


def forward_time_fraction(num_layers: int, tuning_depth: int) -> float:
    """Share of a no-cache training batch spent in the forward pass."""
    return num_layers / (num_layers + 2.0 * tuning_depth)


def compute_time_per_batch(profile: DeviceProfile, num_layers: int,
                           tuning_depth: int, cache_enabled: bool) -> float:
    """Per-batch training seconds at tuning depth d.

    Without the cache: forward all D layers plus backward through the top
    d (at twice forward cost). With the cache: forward and backward only
    the top d, plus the per-batch reload charge. At d = 0 with cache the
    classifier-only cost is folded into the reload term.
    """
    if not 0 <= tuning_depth <= num_layers:
        raise ConfigurationError(
            f"tuning depth {tuning_depth} outside [0, {num_layers}]")
    c = layer_unit_cost(profile, num_layers)
    if cache_enabled:
        return c * (3.0 * tuning_depth) + profile.cache_reload_latency
    return c * (num_layers + 2.0 * tuning_depth)


def batch_time_from_boundary(profile: DeviceProfile, num_layers: int, tuning_depth: int,
                             boundary: int, recomputed: bool) -> float:
    """Honest per-batch seconds when training resumes at ``boundary``.

    A hit forwards the layers above the boundary and backwards through the
    top d; a recompute additionally runs the bottom path once to refresh
    the stored activation. Both paths pay the reload/store charge.
    """
    c = layer_unit_cost(profile, num_layers)
    forward_layers = num_layers - boundary
    if recomputed:
        forward_layers = num_layers
    return c * (forward_layers + 2.0 * tuning_depth) + profile.cache_reload_latency


def payload_bytes(trainable_scalars: int) -> int:
    """Wire size of one payload in one direction."""
    return trainable_scalars * WIRE_BYTES_PER_SCALAR + PAYLOAD_HEADER_BYTES


def transfer_seconds(num_bytes: int, net: NetworkProfile) -> tuple[float, float]:
    """(downlink, uplink) seconds for one payload each way."""
    return num_bytes / net.downlink_bytes_per_s, num_bytes / net.uplink_bytes_per_s


def round_time(group: list[tuple[DeviceProfile, NetworkProfile]],
               batches_per_client: int, payload_size: int, *,
               num_layers: int, tuning_depth: int, cache_enabled: bool) -> float:
    """Synchronous round latency: the slowest member's download + compute + upload."""
    if not group:
        raise ConfigurationError("round_time requires a non-empty group")
    worst = 0.0
    for device, net in group:
        down, up = transfer_seconds(payload_size, net)
        compute = batches_per_client * compute_time_per_batch(
            device, num_layers, tuning_depth, cache_enabled)
        worst = max(worst, down + compute + up)
    return worst


def energy_joules(compute_s: float, transfer_s: float, profile: DeviceProfile) -> float:
    """Energy spent training plus energy spent on the radio."""
    return compute_s * profile.compute_power_watts + transfer_s * profile.radio_power_watts


def adapter_forward_flops(m: int, n: int, seqlen: int) -> int:
    """Forward FLOPs of one bottleneck unit per data sample."""
    return 2 * m * n * seqlen
