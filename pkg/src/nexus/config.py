"""Backend and harness configuration: dataclasses plus JSON file loading.

CONFIG.md documents the file schema; every knob has a default so a config
file only needs the functions array.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import SchemaError

DEFAULT_RATE_LIMIT_BPS = 600_000_000
DEFAULT_WS_REDUCTION = 0.31


@dataclass
class RestoreModelConfig:
    base_us: int = 50_000
    per_page_us: float = 10.0
    working_set_pages: int = 10_000
    offload_ws_reduction: float = DEFAULT_WS_REDUCTION

    def __post_init__(self):
        if not (0 <= self.offload_ws_reduction < 1):
            raise SchemaError("offload_ws_reduction", "must be in [0, 1)")

    def restore_us(self, mode: str) -> int:
        pages = self.working_set_pages
        if mode != "coupled":
            pages = pages * (1 - self.offload_ws_reduction)
        return round(self.base_us + self.per_page_us * pages)


@dataclass
class FunctionConfig:
    name: str
    rate_limit_bps: int = DEFAULT_RATE_LIMIT_BPS
    credentials_token: str = ""
    clients: list[str] = field(default_factory=lambda: ["store"])
    restore: Optional[RestoreModelConfig] = None

    def __post_init__(self):
        if self.rate_limit_bps <= 0:
            raise SchemaError("rate_limit_bps", "must be positive")
        if not self.clients:
            raise SchemaError("clients", "must list at least one client")
        if not self.credentials_token:
            self.credentials_token = f"token-{self.name}-0"


@dataclass
class PoolConfig:
    warm_capacity: int = 4
    idle_timeout_s: float = 30.0
    max_per_function: int = 64


@dataclass
class RegionConfig:
    ring_bytes: int = 4 * 1024 * 1024
    max_region_bytes: int = 256 * 1024 * 1024
    slot_headroom_bytes: int = 1024 * 1024
    max_object_bytes: int = 256 * 1024 * 1024


@dataclass
class WritebackConfig:
    retries: int = 2
    backoff_ms: int = 25


@dataclass
class DebugConfig:
    integrity: bool = False
    capture_frames: Optional[str] = None


@dataclass
class FaultConfig:
    """Deterministic crash injection: abort the process at a named point on
    the (skip+1)-th traversal. Points: during-prefetch,
    post-response-pre-ack."""

    point: str = "none"
    skip: int = 0


@dataclass
class BackendConfig:
    functions: list[FunctionConfig] = field(default_factory=list)
    restore_model: RestoreModelConfig = field(default_factory=RestoreModelConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    writeback: WritebackConfig = field(default_factory=WritebackConfig)
    debug: DebugConfig = field(default_factory=DebugConfig)
    fault: FaultConfig = field(default_factory=FaultConfig)
    region_dir: str = ""
    mode: str = "offloaded-async"
    store_host: str = "127.0.0.1"
    store_port: int = 0
    ingress_host: str = "127.0.0.1"
    ingress_port: int = 0
    metrics_path: Optional[str] = None
    guest_runtimes: dict = field(default_factory=dict)  # function -> argv prefix

    def function(self, name: str) -> Optional[FunctionConfig]:
        for fn in self.functions:
            if fn.name == name:
                return fn
        return None

    def restore_for(self, name: str) -> RestoreModelConfig:
        fn = self.function(name)
        if fn is not None and fn.restore is not None:
            return fn.restore
        return self.restore_model


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise SchemaError(where, "must be an object")
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(doc) - fields
    if unknown:
        raise SchemaError(f"{where}.{sorted(unknown)[0]}", "unknown key")
    return cls(**doc)


def load_config(path: str) -> BackendConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read())


def parse_config(raw: bytes) -> BackendConfig:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError("config", f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config", "must be a JSON object")

    cfg = BackendConfig()
    for name, value in doc.items():
        if name == "functions":
            cfg.functions = [_function(item, i) for i, item in enumerate(value)]
        elif name == "restore_model":
            cfg.restore_model = _build(RestoreModelConfig, value, "restore_model")
        elif name == "pool":
            cfg.pool = _build(PoolConfig, value, "pool")
        elif name == "region":
            cfg.region = _build(RegionConfig, value, "region")
        elif name == "writeback":
            cfg.writeback = _build(WritebackConfig, value, "writeback")
        elif name == "debug":
            cfg.debug = _build(DebugConfig, value, "debug")
        elif name == "fault":
            cfg.fault = _build(FaultConfig, value, "fault")
        elif name in ("region_dir", "mode", "store_host", "ingress_host", "metrics_path"):
            setattr(cfg, name, value)
        elif name in ("store_port", "ingress_port"):
            setattr(cfg, name, int(value))
        elif name == "guest_runtimes":
            cfg.guest_runtimes = dict(value)
        else:
            raise SchemaError(name, "unknown key")
    if cfg.mode not in ("offloaded", "offloaded-async", "coupled"):
        raise SchemaError("mode", f"unknown mode {cfg.mode!r}")
    return cfg


def _function(doc: dict, index: int) -> FunctionConfig:
    if not isinstance(doc, dict):
        raise SchemaError(f"functions[{index}]", "must be an object")
    doc = dict(doc)
    restore = doc.pop("restore", None)
    fn = _build(FunctionConfig, doc, f"functions[{index}]")
    if restore is not None:
        fn.restore = _build(RestoreModelConfig, restore, f"functions[{index}].restore")
    return fn


def dump_config(cfg: BackendConfig) -> bytes:
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(v) for k, v in vars(obj).items() if v is not None}
        if isinstance(obj, list):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    doc = plain(cfg)
    return json.dumps(doc, indent=2).encode("utf-8")


def default_region_dir() -> str:
    import tempfile

    path = os.path.join(tempfile.gettempdir(), f"nexus-regions-{os.getpid()}")
    os.makedirs(path, exist_ok=True)
    return path
