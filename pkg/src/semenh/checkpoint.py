"""Versioned checkpoint container with a content checksum.

Parameters are stored as named float64-preserving numpy arrays inside a
deterministic pickle, so save -> load -> save produces identical bytes and
corruption is detected on load. A component tag (tokenizer | saslm | fmse)
prevents loading a checkpoint into the wrong consumer.
"""

from __future__ import annotations

import hashlib
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
COMPONENTS = ("tokenizer", "saslm", "fmse")


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ComponentError(CheckpointError):
    pass


@dataclass
class CheckpointContainer:
    component: str
    config: dict
    state: dict[str, np.ndarray]
    step: int = 0
    format_version: int = FORMAT_VERSION
    checksum: str = field(default="", repr=False)

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ComponentError(f"unknown component tag {self.component!r}")

    @property
    def n_parameters(self) -> int:
        return sum(int(np.prod(a.shape)) for a in self.state.values())


def _content_checksum(container: CheckpointContainer) -> str:
    h = hashlib.sha256()
    head = {"format_version": container.format_version,
            "component": container.component,
            "config": container.config,
            "step": container.step}
    h.update(json.dumps(head, sort_keys=True).encode())
    for name in sorted(container.state):
        arr = np.ascontiguousarray(container.state[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def state_from_module(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


def state_to_module(container: CheckpointContainer, module: torch.nn.Module) -> None:
    sd = module.state_dict()
    missing = sorted(set(sd) - set(container.state))
    extra = sorted(set(container.state) - set(sd))
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing {missing}, extra {extra}")
    module.load_state_dict({
        k: torch.from_numpy(container.state[k]).to(sd[k].dtype).reshape(sd[k].shape)
        for k in sd
    })


def save_checkpoint(path: str | Path, container: CheckpointContainer) -> Path:
    container.checksum = _content_checksum(container)
    payload = {
        "format_version": container.format_version,
        "component": container.component,
        "config": container.config,
        "step": container.step,
        "checksum": container.checksum,
        "state": {k: container.state[k] for k in sorted(container.state)},
    }
    path = Path(path)
    path.write_bytes(pickle.dumps(payload, protocol=4))
    return path


def load_checkpoint(path: str | Path,
                    expect_component: str | None = None) -> CheckpointContainer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    payload = pickle.loads(path.read_bytes())
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version} needs migration to {FORMAT_VERSION}")
    container = CheckpointContainer(
        component=payload["component"],
        config=payload["config"],
        state=payload["state"],
        step=payload["step"],
        format_version=version,
        checksum=payload["checksum"],
    )
    if _content_checksum(container) != container.checksum:
        raise ChecksumError(f"{path}: content checksum mismatch (corrupted file)")
    if expect_component is not None and container.component != expect_component:
        raise ComponentError(
            f"{path}: expected a {expect_component} checkpoint, "
            f"found {container.component}")
    return container
