import json

import pytest

from nexus.config import (
    BackendConfig,
    FunctionConfig,
    RestoreModelConfig,
    load_config,
    parse_config,
)
from nexus.errors import SchemaError


def parse(doc: dict) -> BackendConfig:
    return parse_config(json.dumps(doc).encode())


class TestParse:
    def test_minimal(self):
        cfg = parse({"functions": [{"name": "f"}]})
        assert cfg.function("f").rate_limit_bps == 600_000_000
        assert cfg.function("f").clients == ["store"]
        assert cfg.function("f").credentials_token  # auto-minted
        assert cfg.restore_model.offload_ws_reduction == 0.31
        assert cfg.pool.warm_capacity == 4
        assert cfg.region.ring_bytes == 4 * 1024 * 1024
        assert cfg.region.max_region_bytes == 256 * 1024 * 1024

    def test_unknown_key_rejected(self):
        with pytest.raises(SchemaError):
            parse({"functions": [], "bogus": 1})
        with pytest.raises(SchemaError):
            parse({"pool": {"bogus": 1}})

    def test_bad_mode_rejected(self):
        with pytest.raises(SchemaError):
            parse({"mode": "sideways"})

    def test_rate_limit_positive(self):
        with pytest.raises(SchemaError):
            parse({"functions": [{"name": "f", "rate_limit_bps": 0}]})

    def test_clients_nonempty(self):
        with pytest.raises(SchemaError):
            parse({"functions": [{"name": "f", "clients": []}]})

    def test_per_function_restore_override(self):
        cfg = parse({
            "functions": [
                {"name": "a", "restore": {"base_us": 1, "per_page_us": 0,
                                          "working_set_pages": 0}},
                {"name": "b"},
            ],
            "restore_model": {"base_us": 99, "per_page_us": 0, "working_set_pages": 0},
        })
        assert cfg.restore_for("a").base_us == 1
        assert cfg.restore_for("b").base_us == 99

    def test_share_split(self):
        fn = FunctionConfig(name="f", rate_limit_bps=600_000_000,
                            clients=["s3", "cache"])
        assert fn.rate_limit_bps / len(fn.clients) == 300_000_000

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "mode": "offloaded",
            "functions": [{"name": "f", "credentials_token": "tok-1"}],
            "guest_runtimes": {"f": ["node", "guest.js"]},
        }))
        cfg = load_config(str(path))
        assert cfg.mode == "offloaded"
        assert cfg.function("f").credentials_token == "tok-1"
        assert cfg.guest_runtimes == {"f": ["node", "guest.js"]}

    def test_ws_reduction_bounds(self):
        with pytest.raises(SchemaError):
            RestoreModelConfig(offload_ws_reduction=-0.1)
        RestoreModelConfig(offload_ws_reduction=0.0)
