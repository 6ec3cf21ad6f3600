"""JSONL / JSON / CSV persistence with atomic temp-file renames."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from curriculum_grpo.world.policy import PolicyConfig, PolicyParams

log = logging.getLogger(__name__)


class CheckpointMismatch(RuntimeError):
    """Checkpoint was written for a different model configuration."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(dumps_line(r) + "\n" for r in records))


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc.msg}") from None


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, fieldnames: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def config_hash(policy_config: PolicyConfig) -> str:
    blob = json.dumps(policy_config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(params: PolicyParams, path, extra: dict | None = None) -> None:
    payload = {
        "config_hash": config_hash(params.config),
        "policy": params.config.to_json(),
        # float repr round-trips exactly through JSON
        "params": params.flat.tolist(),
    }
    if extra:
        payload["extra"] = extra
    atomic_write_text(path, json.dumps(payload) + "\n")


def load_checkpoint(path, expected: PolicyConfig | None = None, force: bool = False) -> PolicyParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = PolicyConfig.from_json(payload["policy"])
    if config_hash(cfg) != payload["config_hash"]:
        raise CheckpointMismatch(f"{path}: stored config hash does not match its policy block")
    if expected is not None and config_hash(expected) != payload["config_hash"]:
        msg = f"{path}: checkpoint config hash {payload['config_hash'][:12]} != expected {config_hash(expected)[:12]}"
        if not force:
            raise CheckpointMismatch(msg)
        log.warning("%s (loading anyway)", msg)
        if expected.n_params != cfg.n_params:
            raise CheckpointMismatch(f"{msg}; parameter counts differ, cannot force")
        return PolicyParams(expected, np.array(payload["params"], dtype=np.float64))
    return PolicyParams(cfg, np.array(payload["params"], dtype=np.float64))
