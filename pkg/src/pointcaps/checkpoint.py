"""Checkpoint directories: one tensor blob per parameter/buffer plus a manifest.

``manifest.json`` records the architecture hash of the config, the class
names, and the blob file of every named tensor. Loading refuses a checkpoint
whose hash differs from the requested config.
"""

import json
from pathlib import Path

from pointcaps.autodiff import tensor_from_bytes, tensor_to_bytes
from pointcaps.config import ModelConfig
from pointcaps.errors import CheckpointError, ConfigError, DimensionError

MANIFEST = "manifest.json"
CONFIG_FILE = "config.ini"


def save_checkpoint(model, path, class_names=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, array in sorted(model.state_dict().items()):
        filename = f"{name}.bin"
        (path / filename).write_bytes(tensor_to_bytes(array))
        tensors[name] = filename
    manifest = {
        "config_hash": model.config.architecture_hash(),
        "n_classes": model.n_classes,
        "class_names": list(class_names or []),
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    model.config.save(path / CONFIG_FILE)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    try:
        return json.loads((Path(path) / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None


def load_checkpoint(path, config=None):
    """Rebuild the model stored at ``path``.

    If ``config`` is given its architecture hash must match the manifest.
    Returns ``(model, manifest)``.
    """
    from pointcaps.model import PointCloudClassifier

    path = Path(path)
    manifest = read_manifest(path)
    try:
        stored_config = ModelConfig.load(path / CONFIG_FILE)
    except (OSError, ConfigError) as exc:
        raise CheckpointError(f"{path}: cannot read stored config ({exc})") from None
    if stored_config.architecture_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match the manifest hash")
    if config is not None and config.architecture_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was built for a different architecture (config hash mismatch)")
    model = PointCloudClassifier(config or stored_config, manifest["n_classes"])
    state = {}
    for name, filename in manifest["tensors"].items():
        try:
            state[name] = tensor_from_bytes((path / filename).read_bytes())
        except (OSError, DimensionError) as exc:
            raise CheckpointError(f"{path}: tensor {name}: {exc}") from None
    try:
        model.load_state_dict(state)
    except DimensionError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model.eval()
    return model, manifest
