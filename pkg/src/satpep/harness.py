"""Scenario configuration, the run matrix, and result persistence.

A scenario fixes link characteristics (satellite one-way delay, terrestrial
delay, loss, rates) plus transport tuning for the endpoints and for the
proxy chain's segments.  The matrix runs every configured measurement with
the proxies enabled and bypassed, a configurable number of repetitions
each, on a fresh simulation instance seeded ``base_seed + run_index`` so
any single run can be reproduced byte-for-byte.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

from .emunet import EmuNet, LinkSpec
from .eventlog import EventLog
from .pep import DEFAULT_MODE, H3_CAPABLE_MODE, install_chain
from .transport import AckFrequencyConfig, TransportProfile
from .workloads import BulkResult, PageManifest, WebResult, default_manifest, run_bulk, run_web

MEASUREMENTS = ("quic-bulk", "tcp-bulk", "h3-web", "h1-web")
CSV_SCHEMA_VERSION = 1
MIN_QUEUE_PKTS = 64


class ValidationError(ValueError):
    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.field = fieldname


class ParseError(ValueError):
    pass


@dataclass
class PepSettings:
    mode: str = "auto"  # auto: h3-web runs use h3_capable, everything else default
    sat_cca: str = "newreno"
    sat_iw: int = 100
    lan_cca: str = "cubic"
    lan_iw: int = 10
    net_cca: str = "cubic"
    net_iw: int = 10
    buffer_cap_bytes: int = 16 * 1024 * 1024


@dataclass
class ScenarioConfig:
    name: str
    satcom_delay_ms: float | list = 250.0  # static ms or [[start_s, ms], ...]
    internet_delay_ms: float = 40.0
    loss_pct: float = 0.0
    attenuation_db: float = 0.0
    forward_rate_mbps: float = 20.0
    return_rate_mbps: float = 8.0
    queue_capacity_pkts: int | None = None  # None: path BDP in packets, floor 64
    sat_loss_direction: str = "both"  # both | forward | return
    # satellite loss acts on link-layer frame units of consecutive packets;
    # the marginal per-packet loss rate stays loss_pct
    sat_frame_pkts: int = 6
    endpoint_cca: str = "cubic"
    endpoint_iw: int = 10
    tls_rtts: int = 0
    ack_threshold: int = 2
    max_ack_delay_ms: float = 25.0
    max_payload_bytes: int = 1200
    measurements: tuple = MEASUREMENTS
    duration_s: float = 15.0
    repetitions: int = 100
    base_seed: int = 1
    page_manifest: str | None = None
    pep: PepSettings = field(default_factory=PepSettings)

    def validate(self) -> None:
        if not self.name:
            raise ValidationError("name", "must be non-empty")
        sched = self.delay_schedule()
        if sched[0][0] != 0:
            raise ValidationError("satcom_delay_ms", "schedule must start at t=0")
        if any(d < 0 for _, d in sched):
            raise ValidationError("satcom_delay_ms", "delays must be >= 0")
        if self.internet_delay_ms < 0:
            raise ValidationError("internet_delay_ms", "must be >= 0")
        if not 0.0 <= self.loss_pct <= 100.0:
            raise ValidationError("loss_pct", "must be within [0, 100]")
        if self.attenuation_db != 0:
            raise ValidationError("attenuation_db", "only 0 dB is supported")
        if self.forward_rate_mbps < 0 or self.return_rate_mbps < 0:
            raise ValidationError("forward_rate_mbps", "rates must be >= 0")
        if self.queue_capacity_pkts is not None and self.queue_capacity_pkts < 1:
            raise ValidationError("queue_capacity_pkts", "must be >= 1")
        if self.sat_loss_direction not in ("both", "forward", "return"):
            raise ValidationError("sat_loss_direction", "must be both, forward or return")
        if self.sat_frame_pkts < 1:
            raise ValidationError("sat_frame_pkts", "must be >= 1")
        if self.endpoint_cca not in ("cubic", "newreno"):
            raise ValidationError("endpoint_cca", "must be cubic or newreno")
        if self.endpoint_iw < 1:
            raise ValidationError("endpoint_iw", "must be >= 1")
        if self.tls_rtts not in (0, 1, 2):
            raise ValidationError("tls_rtts", "must be 0, 1 or 2")
        if self.ack_threshold < 1:
            raise ValidationError("ack_threshold", "must be >= 1")
        if self.max_ack_delay_ms < 0:
            raise ValidationError("max_ack_delay_ms", "must be >= 0")
        if self.duration_s <= 0:
            raise ValidationError("duration_s", "must be > 0")
        if self.repetitions < 1:
            raise ValidationError("repetitions", "must be >= 1")
        for m in self.measurements:
            if m not in MEASUREMENTS:
                raise ValidationError("measurements", f"unknown measurement {m!r}")
        if self.pep.mode not in ("auto", DEFAULT_MODE, H3_CAPABLE_MODE):
            raise ValidationError("pep.mode", f"unknown mode {self.pep.mode!r}")
        for fieldname, cca in (("pep.sat_cca", self.pep.sat_cca),
                               ("pep.lan_cca", self.pep.lan_cca),
                               ("pep.net_cca", self.pep.net_cca)):
            if cca not in ("cubic", "newreno"):
                raise ValidationError(fieldname, "must be cubic or newreno")

    def delay_schedule(self) -> list[tuple[float, float]]:
        if isinstance(self.satcom_delay_ms, (int, float)):
            return [(0.0, float(self.satcom_delay_ms))]
        return [(float(s), float(d)) for s, d in self.satcom_delay_ms]

    @property
    def rtt_ms(self) -> float:
        return 2.0 * (self.delay_schedule()[0][1] + self.internet_delay_ms)

    def profiles(self) -> dict[str, TransportProfile]:
        ackf = AckFrequencyConfig(self.ack_threshold, self.max_ack_delay_ms)
        return {
            "quic": TransportProfile("quic", 0, self.max_payload_bytes, ackf),
            "tcp": TransportProfile("tcp", self.tls_rtts, self.max_payload_bytes,
                                    AckFrequencyConfig(self.ack_threshold, self.max_ack_delay_ms)),
        }

    def default_queue_pkts(self, rate_mbps: float) -> int:
        bdp = rate_mbps * 1e6 * (self.rtt_ms / 1000.0) / 8.0 / self.max_payload_bytes
        return max(MIN_QUEUE_PKTS, int(bdp))


def build_network(sc: ScenarioConfig, pep_enabled: bool, seed: int,
                  log: EventLog | None = None, mode: str = DEFAULT_MODE):
    """Construct the 4-node chain for one run; installs proxies when enabled."""
    fwd_rate = int(sc.forward_rate_mbps * 1e6)
    ret_rate = int(sc.return_rate_mbps * 1e6)
    sched = [(s, d) for s, d in sc.delay_schedule()]
    loss = sc.loss_pct / 100.0
    loss_fwd = loss if sc.sat_loss_direction in ("both", "forward") else 0.0
    loss_ret = loss if sc.sat_loss_direction in ("both", "return") else 0.0
    q_fwd = sc.queue_capacity_pkts or sc.default_queue_pkts(sc.forward_rate_mbps)
    q_ret = sc.queue_capacity_pkts or sc.default_queue_pkts(sc.return_rate_mbps)
    inet = [(0.0, sc.internet_delay_ms)]
    links = {
        ("client", "proxy_st"): LinkSpec("lan-up"),
        ("proxy_st", "client"): LinkSpec("lan-down"),
        ("proxy_st", "proxy_gw"): LinkSpec("sat-return", sched, loss_ret, ret_rate, q_ret,
                                           sc.sat_frame_pkts),
        ("proxy_gw", "proxy_st"): LinkSpec("sat-forward", sched, loss_fwd, fwd_rate, q_fwd,
                                           sc.sat_frame_pkts),
        ("proxy_gw", "server"): LinkSpec("net-up", inet),
        ("server", "proxy_gw"): LinkSpec("net-down", inet),
    }
    net = EmuNet(links, seed=seed, log=log)
    proxies = None
    if pep_enabled:
        proxies = install_chain(
            net,
            mode,
            sc.profiles(),
            lan_cc=(sc.pep.lan_cca, sc.pep.lan_iw),
            sat_cc=(sc.pep.sat_cca, sc.pep.sat_iw),
            net_cc=(sc.pep.net_cca, sc.pep.net_iw),
            buffer_cap_bytes=sc.pep.buffer_cap_bytes,
        )
    return net, proxies


# -- presets -----------------------------------------------------------------

GEO_DELAY_MS = 250.0
LEO_DELAY_MS = 16.0
PRESET_LOSSES = (0.0, 0.01, 0.1, 1.0)


def _orbit_scenarios(orbit: str, delay_ms: float) -> list[ScenarioConfig]:
    out = []
    for loss in PRESET_LOSSES:
        out.append(ScenarioConfig(name=f"{orbit}-loss{loss:g}", satcom_delay_ms=delay_ms,
                                  loss_pct=loss))
    return out


def preset_names() -> list[str]:
    return ["geo", "leo", "full"]


def _presets(name: str) -> list[ScenarioConfig] | None:
    if name == "geo":
        return _orbit_scenarios("geo", GEO_DELAY_MS)
    if name == "leo":
        return _orbit_scenarios("leo", LEO_DELAY_MS)
    if name == "full":
        return _orbit_scenarios("geo", GEO_DELAY_MS) + _orbit_scenarios("leo", LEO_DELAY_MS)
    return None


_SCENARIO_KEYS = {
    "name", "satcom_delay_ms", "internet_delay_ms", "loss_pct", "attenuation_db",
    "forward_rate_mbps", "return_rate_mbps", "queue_capacity_pkts", "sat_loss_direction",
    "sat_frame_pkts", "endpoint_cca", "endpoint_iw", "tls_rtts", "ack_threshold",
    "max_ack_delay_ms", "max_payload_bytes", "measurements", "duration_s", "repetitions",
    "base_seed", "page_manifest", "pep",
}
_PEP_KEYS = {"mode", "sat_cca", "sat_iw", "lan_cca", "lan_iw", "net_cca", "net_iw",
             "buffer_cap_bytes"}


def _scenario_from_dict(raw: dict) -> ScenarioConfig:
    unknown = set(raw) - _SCENARIO_KEYS
    if unknown:
        raise ValidationError(sorted(unknown)[0], "unknown field")
    kwargs = dict(raw)
    pep_raw = kwargs.pop("pep", None)
    if pep_raw is not None:
        bad = set(pep_raw) - _PEP_KEYS
        if bad:
            raise ValidationError(f"pep.{sorted(bad)[0]}", "unknown field")
        kwargs["pep"] = PepSettings(**pep_raw)
    if "measurements" in kwargs:
        kwargs["measurements"] = tuple(kwargs["measurements"])
    try:
        sc = ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError("scenario", str(exc)) from exc
    sc.validate()
    return sc


def load_config(path_or_preset: str) -> list[ScenarioConfig]:
    """Load scenarios from a JSON file, or return a built-in preset by name."""
    preset = _presets(path_or_preset)
    if preset is not None:
        for sc in preset:
            sc.validate()
        return preset
    try:
        with open(path_or_preset) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "scenarios" not in doc:
        raise ParseError("config must be an object with a 'scenarios' list")
    scenarios = [_scenario_from_dict(raw) for raw in doc["scenarios"]]
    if not scenarios:
        raise ParseError("config contains no scenarios")
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ValidationError("name", "scenario names must be unique")
    return scenarios


# -- running ------------------------------------------------------------------


@dataclass
class RunRecord:
    scenario: str
    measurement: str
    pep: bool
    run_idx: int
    seed: int
    status: str
    result: BulkResult | WebResult | None

    def sort_key(self):
        return (self.scenario, self.measurement, self.pep, self.run_idx)


def resolve_pep_mode(sc: ScenarioConfig, measurement: str) -> str:
    if sc.pep.mode != "auto":
        return sc.pep.mode
    return H3_CAPABLE_MODE if measurement == "h3-web" else DEFAULT_MODE


def run_single(sc: ScenarioConfig, measurement: str, pep_enabled: bool, run_idx: int,
               event_log_path: str | None = None) -> RunRecord:
    """One fresh simulation instance for one (measurement, pep, repetition)."""
    seed = sc.base_seed + run_idx
    log = EventLog(verbose=event_log_path is not None)
    mode = resolve_pep_mode(sc, measurement)
    net, proxies = build_network(sc, pep_enabled, seed, log, mode)
    profiles = sc.profiles()
    endpoint_cc = (sc.endpoint_cca, sc.endpoint_iw)
    if measurement in ("quic-bulk", "tcp-bulk"):
        kind = "quic" if measurement == "quic-bulk" else "tcp"
        sat_probe = None
        if pep_enabled:
            gw = proxies["proxy_gw"]
            sat_probe = gw.sat_sender
        result = run_bulk(net, profiles[kind], endpoint_cc, pep_enabled,
                          duration_s=sc.duration_s, sat_probe=sat_probe)
    else:
        kind = "quic" if measurement == "h3-web" else "tcp"
        manifest = PageManifest.load(sc.page_manifest) if sc.page_manifest else default_manifest()
        result = run_web(net, "h3" if kind == "quic" else "h1", profiles[kind],
                         endpoint_cc, pep_enabled, manifest)
    if event_log_path is not None:
        log.dump_jsonl(event_log_path)
    return RunRecord(sc.name, measurement, pep_enabled, run_idx, seed, result.status,
                     result if result.status == "ok" else None)


def _task(args) -> RunRecord:
    sc_dict, measurement, pep_enabled, run_idx, event_log_path = args
    sc = _scenario_from_dict(sc_dict)
    return run_single(sc, measurement, pep_enabled, run_idx, event_log_path)


def _scenario_to_dict(sc: ScenarioConfig) -> dict:
    d = asdict(sc)
    d["measurements"] = list(sc.measurements)
    return d


def run_matrix(
    scenarios: list[ScenarioConfig],
    out_dir: str,
    jobs: int = 1,
    repetitions: int | None = None,
    base_seed: int | None = None,
    event_logs: bool = False,
) -> tuple[list[RunRecord], int]:
    """Run every scenario x measurement x pep x repetition; returns (records, failures)."""
    os.makedirs(out_dir, exist_ok=True)
    event_dir = None
    if event_logs:
        event_dir = os.path.join(out_dir, "events")
        os.makedirs(event_dir, exist_ok=True)
    tasks = []
    for sc in scenarios:
        if repetitions is not None or base_seed is not None:
            sc = replace(
                sc,
                repetitions=repetitions if repetitions is not None else sc.repetitions,
                base_seed=base_seed if base_seed is not None else sc.base_seed,
            )
        sc_dict = _scenario_to_dict(sc)
        for measurement in sc.measurements:
            for pep_enabled in (False, True):
                for run_idx in range(sc.repetitions):
                    path = None
                    if event_dir is not None:
                        pep_tag = "pep" if pep_enabled else "nopep"
                        path = os.path.join(
                            event_dir, f"{sc.name}_{measurement}_{pep_tag}_{run_idx}.jsonl"
                        )
                    tasks.append((sc_dict, measurement, pep_enabled, run_idx, path))
    if jobs <= 1:
        records = [_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_task, tasks, chunksize=4))
    records.sort(key=RunRecord.sort_key)
    write_results(records, out_dir)
    failures = sum(1 for r in records if r.status != "ok")
    return records, failures


# -- persistence ---------------------------------------------------------------


def _fmt_ms(value: float | None) -> str:
    return "" if value is None else f"{value:.3f}"


def write_results(records: list[RunRecord], out_dir: str) -> None:
    """Write goodput/cwnd/bulk/web CSVs plus the run manifest.

    On any write error a PARTIAL_OUTPUT marker is left in the directory.
    """
    os.makedirs(out_dir, exist_ok=True)
    try:
        _write_csvs(records, out_dir)
    except Exception:
        with open(os.path.join(out_dir, "PARTIAL_OUTPUT"), "w") as fh:
            fh.write("result writing aborted mid-way; contents are incomplete\n")
        raise


def _write_csvs(records: list[RunRecord], out_dir: str) -> None:
    def header(fh, name: str, columns: str) -> None:
        fh.write(f"# satpep csv v{CSV_SCHEMA_VERSION} {name}\n{columns}\n")

    with open(os.path.join(out_dir, "goodput.csv"), "w") as fh:
        header(fh, "goodput", "scenario,measurement,pep,run,t_ms,interval_bytes,cum_bytes")
        for r in records:
            if not isinstance(r.result, BulkResult):
                continue
            cum = 0
            for t_ms, nbytes in r.result.goodput:
                cum += nbytes
                fh.write(f"{r.scenario},{r.measurement},{int(r.pep)},{r.run_idx},"
                         f"{t_ms},{nbytes},{cum}\n")

    with open(os.path.join(out_dir, "cwnd.csv"), "w") as fh:
        header(fh, "cwnd", "scenario,measurement,pep,run,t_ms,cwnd_bytes,ssthresh_bytes")
        for r in records:
            if not isinstance(r.result, BulkResult):
                continue
            for t_ms, cwnd, ssthresh in r.result.cwnd_series:
                fh.write(f"{r.scenario},{r.measurement},{int(r.pep)},{r.run_idx},"
                         f"{t_ms},{cwnd},{ssthresh}\n")

    with open(os.path.join(out_dir, "bulk.csv"), "w") as fh:
        header(fh, "bulk", "scenario,measurement,pep,run,establishment_ms,ttfb_ms,total_bytes")
        for r in records:
            if not isinstance(r.result, BulkResult):
                continue
            fh.write(f"{r.scenario},{r.measurement},{int(r.pep)},{r.run_idx},"
                     f"{_fmt_ms(r.result.establishment_ms)},{_fmt_ms(r.result.ttfb_ms)},"
                     f"{r.result.total_bytes}\n")

    with open(os.path.join(out_dir, "web.csv"), "w") as fh:
        header(fh, "web", "scenario,mode,pep,run,rs_ms,fcp_ms,plt_ms")
        for r in records:
            if not isinstance(r.result, WebResult):
                continue
            mode = "h3" if r.measurement == "h3-web" else "h1"
            fh.write(f"{r.scenario},{mode},{int(r.pep)},{r.run_idx},"
                     f"{_fmt_ms(r.result.rs_ms)},{_fmt_ms(r.result.fcp_ms)},"
                     f"{_fmt_ms(r.result.plt_ms)}\n")

    with open(os.path.join(out_dir, "runs.csv"), "w") as fh:
        header(fh, "runs", "scenario,measurement,pep,run,seed,status")
        for r in records:
            fh.write(f"{r.scenario},{r.measurement},{int(r.pep)},{r.run_idx},"
                     f"{r.seed},{r.status}\n")
