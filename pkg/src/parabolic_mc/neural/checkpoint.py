"""JSON checkpoint envelope for networks."""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import ConfigurationError, MissingArtifactError
from .layers import Network, NetworkSpec

CHECKPOINT_VERSION = 1


def network_to_dict(net):
    return {"spec": net.spec.to_dict(), "params": [float(v) for v in net.flat_params()]}


def network_from_dict(d):
    spec = NetworkSpec.from_dict(d["spec"])
    net = Network(spec, seed=0)
    net.set_flat_params(d["params"])
    return net


def save_checkpoint(path, networks, metadata=None):
    """Write ``{name: Network}`` plus metadata to ``path``."""
    if isinstance(networks, Network):
        networks = {"net": networks}
    doc = {"format_version": CHECKPOINT_VERSION,
           "networks": {k: network_to_dict(v) for k, v in networks.items()},
           "metadata": metadata or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path):
    """Returns ``({name: Network}, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} not found")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('format_version')}")
    return {k: network_from_dict(v) for k, v in doc["networks"].items()}, doc.get("metadata", {})
