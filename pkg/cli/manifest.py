"""
Run manifests: config hash, code version, stage timings and output checksums.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from core.io import sha256_file

logger = logging.getLogger(__name__)

CODE_VERSION = "1.0.0"
MANIFEST_NAME = "manifest.json"


class StageLogger:
    """Collects begin/end records with elapsed wall-clock time per stage."""

    def __init__(self, *, seed: int, config_hash: str) -> None:
        self._seed = seed
        self._config_hash = config_hash
        self._start_ns = time.time_ns()
        self._open: Dict[str, int] = {}
        self.records: List[Dict[str, Any]] = []
        self.current: Optional[str] = None

    def begin(self, stage: str) -> None:
        self._open[stage] = time.time_ns()
        self.current = stage
        self._append(stage=stage, status="begin")
        logger.info("stage %s started", stage)

    def end(self, stage: str, *, extra: Optional[Mapping[str, Any]] = None) -> None:
        started = self._open.pop(stage, self._start_ns)
        seconds = (time.time_ns() - started) / 1e9
        self._append(stage=stage, status="end", extra=extra, seconds=seconds)
        self.current = None
        logger.info("stage %s finished in %.2fs", stage, seconds)

    def _append(self, *, stage: str, status: str, extra: Optional[Mapping[str, Any]] = None,
                seconds: Optional[float] = None) -> None:
        record: Dict[str, Any] = {
            "ts_utc": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
            "stage": stage,
            "status": status,
            "seed": self._seed,
            "config_hash": self._config_hash,
            "elapsed_ns": time.time_ns() - self._start_ns,
        }
        if seconds is not None:
            record["seconds"] = seconds
        if extra:
            record["extra"] = dict(extra)
        self.records.append(record)


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    code_version: str = CODE_VERSION
    outputs: List[Path] = field(default_factory=list)
    dumps: List[Path] = field(default_factory=list)
    status: str = "running"
    failure_stage: Optional[str] = None
    failure: Optional[str] = None
    exit_code: int = 0

    def add(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def add_dump(self, *paths: Path) -> None:
        self.dumps.extend(Path(p) for p in paths)

    def fail(self, stage: Optional[str], error: BaseException, exit_code: int) -> None:
        """Mark the run failed and remove field dumps written so far."""
        self.status = "failed"
        self.failure_stage = stage
        self.failure = f"{type(error).__name__}: {error}"
        self.exit_code = exit_code
        for path in self.dumps:
            if path.exists():
                path.unlink()
                logger.debug("removed incomplete dump %s", path)
        self.outputs = [p for p in self.outputs if p not in self.dumps]
        self.dumps = []

    def checksums(self) -> List[Dict[str, str]]:
        return [{"path": p.name, "sha256": sha256_file(p)} for p in sorted(set(self.outputs)) if p.exists()]

    def write(self, out_dir: Path, stages: StageLogger) -> Path:
        if self.status == "running":
            self.status = "ok"
        path = Path(out_dir) / MANIFEST_NAME
        body = {
            "subcommand": self.subcommand,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "status": self.status,
            "exit_code": self.exit_code,
            "failure_stage": self.failure_stage,
            "failure": self.failure,
            "stages": stages.records,
            "outputs": self.checksums(),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(body, f, indent=2, sort_keys=True)
            f.write("\n")
        return path
