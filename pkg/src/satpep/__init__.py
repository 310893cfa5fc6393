"""satpep: a deterministic satellite-network emulation framework.

The package models a four-node chain (client, satellite-terminal proxy,
gateway proxy, server) with configurable delay, loss, and rate on each
link, runs QUIC-like or TCP-like transports end to end or split across
connection-splitting proxies, and measures bulk goodput and web page
load metrics.
"""

from .emunet import EmuNet, LinkSpec, Packet, Delivered, Dropped
from .congestion import make_controller, NewReno, Cubic
from .transport import TransportProfile, AckFrequencyConfig, Connection, connect
from .pep import Proxy, ProxyConfig
from .workloads import (
    PageManifest,
    ObjectSpec,
    BulkResult,
    WebResult,
    default_manifest,
    run_bulk,
    run_web,
)
from .harness import ScenarioConfig, load_config, preset_names, run_matrix

__all__ = [
    "EmuNet",
    "LinkSpec",
    "Packet",
    "Delivered",
    "Dropped",
    "make_controller",
    "NewReno",
    "Cubic",
    "TransportProfile",
    "AckFrequencyConfig",
    "Connection",
    "connect",
    "Proxy",
    "ProxyConfig",
    "PageManifest",
    "ObjectSpec",
    "BulkResult",
    "WebResult",
    "default_manifest",
    "run_bulk",
    "run_web",
    "ScenarioConfig",
    "load_config",
    "preset_names",
    "run_matrix",
]
