"""Parameter-tree helpers: walking, lifting to tape leaves, serialization.

Parameter containers are dataclasses whose fields are ndarrays, nested
containers, or lists of containers. Walking field order gives every tensor
a stable dotted name, which the optimizer, the gradient checker, and the
checkpoint format all share.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from . import autodiff as ad


def named_arrays(obj, prefix: str = ""):
    """Yield (dotted_name, leaf) pairs in deterministic field order.

    Leaves are whatever sits in array positions: ndarrays for stored
    parameters, Tensors for lifted ones.
    """
    if isinstance(obj, (np.ndarray, ad.Tensor)):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for field in dataclasses.fields(obj):
            name = f"{prefix}.{field.name}" if prefix else field.name
            yield from named_arrays(getattr(obj, field.name), name)
    elif isinstance(obj, (list, tuple)):
        for idx, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{idx}" if prefix else str(idx))
    elif obj is None or isinstance(obj, (int, float, str, bool)):
        return
    else:
        raise TypeError(f"cannot walk parameter node of type {type(obj)!r} at {prefix!r}")


def _map_arrays(obj, fn):
    if isinstance(obj, (np.ndarray, ad.Tensor)):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        updates = {field.name: _map_arrays(getattr(obj, field.name), fn)
                   for field in dataclasses.fields(obj)}
        return dataclasses.replace(obj, **updates)
    if isinstance(obj, list):
        return [_map_arrays(item, fn) for item in obj]
    if isinstance(obj, tuple):
        return tuple(_map_arrays(item, fn) for item in obj)
    return obj


def lift(params):
    """Copy of a parameter tree with every ndarray wrapped as a tape leaf."""
    return _map_arrays(params, lambda a: a if isinstance(a, ad.Tensor) else ad.Tensor(a))


def detach(params):
    """Copy of a parameter tree with Tensor leaves unwrapped to ndarrays."""
    return _map_arrays(params, ad.value_of)


def checksum(params) -> str:
    """Order-stable sha256 over every tensor's bytes."""
    digest = hashlib.sha256()
    for name, leaf in named_arrays(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(ad.value_of(leaf)).tobytes())
    return digest.hexdigest()


def set_leaf(params, dotted_name: str, value) -> None:
    """Replace one leaf (addressed by its dotted name) in a parameter tree."""
    parts = dotted_name.split(".")
    node = params
    for part in parts[:-1]:
        node = node[int(part)] if isinstance(node, (list, tuple)) else getattr(node, part)
    last = parts[-1]
    if isinstance(node, (list, tuple)):
        node[int(last)] = value
    else:
        setattr(node, last, value)


def flatten_inplace(params) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Repack every leaf as a view into one contiguous buffer.

    Elementwise updates to the buffer (e.g. a vectorized optimizer step)
    then reach every tensor at once. Returns (buffer, name -> view).
    """
    leaves = list(named_arrays(params))
    total = sum(arr.size for _, arr in leaves)
    buffer = np.empty(total, dtype=np.float64)
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, arr in leaves:
        view = buffer[offset:offset + arr.size].reshape(arr.shape)
        view[...] = arr
        set_leaf(params, name, view)
        views[name] = view
        offset += arr.size
    return buffer, views


def to_jsonable(params):
    """Nested plain-python mirror of a parameter tree (for checkpoints)."""
    if isinstance(params, (np.ndarray, ad.Tensor)):
        return ad.value_of(params).tolist()
    if dataclasses.is_dataclass(params):
        return {field.name: to_jsonable(getattr(params, field.name))
                for field in dataclasses.fields(params)}
    if isinstance(params, (list, tuple)):
        return [to_jsonable(item) for item in params]
    return params
