"""Run manifest helpers for reproducible experiment runs.

Features:
- Content normalization + stable hashing (config snapshots, data checksums)
- Seed derivation from hashed parts so every window stream is replayable
- Line-oriented ``key = value`` config files (read and write)
- Atomic write pattern (temp file promotion) for manifests and reports
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

TOOL_NAME = "ecgforge"
TOOL_VERSION = "0.1.0"
MANIFEST_CFG = "run_manifest.cfg"
MANIFEST_JSON = "run_manifest.json"

# keys written into a manifest that are not run parameters
METADATA_KEYS = {"tool_version", "data_checksum", "outputs", "command", "created_at"}


class ManifestError(RuntimeError):
    pass


def normalize_content(raw: str) -> str:
    """Deterministic normalization prior to hashing."""
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines)


def stable_hash(content: str, *, extra: Optional[Dict[str, Any]] = None) -> str:
    payload: Dict[str, Any] = {"content": normalize_content(content)}
    if extra:
        payload.update(extra)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Map arbitrary hashable parts onto a 63-bit RNG seed."""
    blob = json.dumps([str(p) for p in parts], separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def file_checksum(paths: Iterable[Path]) -> str:
    """SHA-256 over the byte contents of ``paths`` in sorted order."""
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ManifestError(f"Config line {lineno} is not 'key = value': {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ManifestError(f"Config line {lineno} has an empty key")
        values[key] = value.strip()
    return values


def load_config_file(path: str) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ManifestError(f"Config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def format_config(values: Mapping[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}-", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except Exception:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


@dataclasses.dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    data_checksum: str = ""
    outputs: List[str] = dataclasses.field(default_factory=list)
    tool_version: str = TOOL_VERSION

    def config_hash(self) -> str:
        return stable_hash(format_config(self.config))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tool": TOOL_NAME,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": dict(sorted(self.config.items())),
            "config_hash": self.config_hash(),
            "data_checksum": self.data_checksum,
            "outputs": sorted(self.outputs),
        }

    def write(self, out_dir: Path) -> List[Path]:
        """Write the replayable key=value form and the JSON snapshot."""
        out_dir = Path(out_dir)
        cfg_values = dict(self.config)
        cfg_values["tool_version"] = self.tool_version
        cfg_values["data_checksum"] = self.data_checksum
        cfg_path = atomic_write_text(out_dir / MANIFEST_CFG, format_config(cfg_values))
        json_path = atomic_write_text(out_dir / MANIFEST_JSON, json.dumps(self.to_dict(), indent=2) + "\n")
        return [cfg_path, json_path]

    @classmethod
    def read(cls, out_dir: Path) -> "RunManifest":
        path = Path(out_dir) / MANIFEST_JSON
        if not path.exists():
            raise ManifestError(f"No run manifest in {out_dir}")
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            command=data["command"],
            config=dict(data.get("config", {})),
            data_checksum=data.get("data_checksum", ""),
            outputs=list(data.get("outputs", [])),
            tool_version=data.get("tool_version", TOOL_VERSION),
        )


__all__ = [
    "RunManifest",
    "ManifestError",
    "normalize_content",
    "stable_hash",
    "derive_seed",
    "file_checksum",
    "parse_config_text",
    "load_config_file",
    "format_config",
    "atomic_write_text",
    "METADATA_KEYS",
]
