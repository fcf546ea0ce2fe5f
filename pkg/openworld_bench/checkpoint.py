"""
Self-describing checkpoint container for classifiers and autoencoders.

Layout: a numpy ``.npz`` archive holding one little-endian float64 array per
parameter under ``param/<name>`` and a ``__meta__`` entry with a UTF-8 JSON record.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .autodiff import Tensor
from .models import Autoencoder, Classifier, ModelError, Network, build_network
from .utils import BenchError

logger = logging.getLogger(__name__)

FORMAT_TAG = 'openworld-bench-checkpoint'
FORMAT_VERSION = 1


class CheckpointError(BenchError):
    """Raised when a checkpoint container is malformed or does not match its architecture."""
    pass


def save_checkpoint(path: Union[str, Path], net: Network, detector: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write ``net`` to ``path``.

    Args:
        path: Destination file (``.npz`` is appended by numpy if missing)
        net: Classifier or autoencoder
        detector: Optional detector record stored alongside for replay

    Returns:
        Path of the written file
    """
    path = Path(path)
    if path.suffix != '.npz':
        path = path.with_suffix('.npz')
    path.parent.mkdir(parents=True, exist_ok=True)

    meta: Dict[str, Any] = {
        'format': FORMAT_TAG,
        'version': FORMAT_VERSION,
        'kind': 'autoencoder' if isinstance(net, Autoencoder) else 'classifier',
        'arch': net.arch,
        'arch_options': net.arch_options,
        'input_shape': list(net.input_shape),
        'output_width': net.output_width,
        'param_shapes': {name: list(shape) for name, shape in net.param_shapes().items()},
    }
    if isinstance(net, Classifier):
        meta['label_names'] = list(net.label_names)
        meta['background_names'] = list(net.background_names)
    if detector is not None:
        meta['detector'] = detector

    arrays = {f"param/{name}": p.data.astype('<f8') for name, p in net.params.items()}
    arrays['__meta__'] = np.frombuffer(json.dumps(meta, sort_keys=True).encode('utf-8'), dtype=np.uint8)
    with open(path, 'wb') as fh:
        np.savez(fh, **arrays)
    logger.info("Saved %s checkpoint to %s", meta['kind'], path)
    return path


def read_meta(path: Union[str, Path]) -> Dict[str, Any]:
    """Read and validate only the metadata record of a checkpoint."""
    with _open(path) as archive:
        return _meta(archive, path)


def _open(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Not a checkpoint container: {path} ({e})")


def _meta(archive, path) -> Dict[str, Any]:
    if '__meta__' not in archive.files:
        raise CheckpointError(f"Missing metadata record in {path}")
    try:
        meta = json.loads(archive['__meta__'].tobytes().decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt metadata record in {path}: {e}")
    if meta.get('format') != FORMAT_TAG:
        raise CheckpointError(f"Unknown container format '{meta.get('format')}' in {path}")
    if meta.get('version') != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {meta.get('version')} in {path}")
    return meta


def load_checkpoint(path: Union[str, Path]) -> Network:
    """
    Load a classifier or autoencoder, validating every parameter shape before use.

    Raises:
        CheckpointError: On a foreign container, unknown version or architecture,
            or any parameter missing or shaped differently from the architecture
    """
    with _open(path) as archive:
        meta = _meta(archive, path)
        input_shape = tuple(meta['input_shape'])
        try:
            layers, params = build_network(meta['arch'], input_shape, meta['output_width'],
                                           **meta.get('arch_options', {}))
        except ModelError as e:
            raise CheckpointError(f"{path}: {e}")

        expected = {name: tuple(p.shape) for name, p in params.items()}
        declared = {name: tuple(shape) for name, shape in meta.get('param_shapes', {}).items()}
        if declared != expected:
            raise CheckpointError(f"{path}: declared parameter shapes {declared} do not match "
                                  f"architecture '{meta['arch']}' {expected}")
        for name, shape in expected.items():
            key = f"param/{name}"
            if key not in archive.files:
                raise CheckpointError(f"{path}: missing parameter '{name}'")
            data = archive[key]
            if data.shape != shape:
                raise CheckpointError(f"{path}: parameter '{name}' has shape {data.shape}, expected {shape}")
            params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)

    common = dict(arch=meta['arch'], input_shape=input_shape, output_width=meta['output_width'],
                  layers=layers, params=params, arch_options=meta.get('arch_options', {}))
    if meta['kind'] == 'autoencoder':
        return Autoencoder(**common)
    names = meta.get('label_names', [])
    if len(names) != meta['output_width']:
        raise CheckpointError(f"{path}: {len(names)} label names for {meta['output_width']} outputs")
    return Classifier(label_names=names, background_names=meta.get('background_names', []), **common)


def load_classifier(path: Union[str, Path]) -> Classifier:
    net = load_checkpoint(path)
    if not isinstance(net, Classifier):
        raise CheckpointError(f"{path} holds an autoencoder, expected a classifier")
    return net


def load_autoencoder(path: Union[str, Path]) -> Autoencoder:
    net = load_checkpoint(path)
    if not isinstance(net, Autoencoder):
        raise CheckpointError(f"{path} holds a classifier, expected an autoencoder")
    return net
