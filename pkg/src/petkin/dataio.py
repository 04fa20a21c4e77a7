"""On-disk dataset format.

One directory per replicate: a JSON header describing shapes, time grid,
seeds and geometry, plus flat little-endian float32 arrays for the dynamic
image, sinograms, input function, labels and V map.  Parametric maps reuse
the same convention.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imaging import ParametricMaps
from .kinetics import InputFunction, TimeGrid
from .phantom import DynamicImage, LabelImage, save_pgm

HEADER_NAME = "header.json"


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    return arr.reshape(shape).astype(np.float64)


def save_dataset(dirpath, dyn: DynamicImage, input_fn: InputFunction,
                 sinograms: np.ndarray | None = None,
                 sino_angles: np.ndarray | None = None) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    h, w, n = dyn.data.shape
    header = {
        "shape": [h, w, n],
        "frame_starts_s": dyn.grid.frame_starts_s.tolist(),
        "frame_ends_s": dyn.grid.frame_ends_s.tolist(),
        "if_samples": int(input_fn.times_min.size),
        "meta": dyn.meta,
    }
    if sinograms is not None:
        header["sinogram_shape"] = list(sinograms.shape)
        header["angles_deg"] = np.asarray(sino_angles).tolist()
        _write_f32(d / "sinograms.f32", sinograms)
    with open(d / HEADER_NAME, "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    _write_f32(d / "dynamic.f32", np.transpose(dyn.data, (2, 0, 1)))
    _write_f32(d / "if.f32", np.stack([input_fn.times_min, input_fn.values]))
    _write_f32(d / "labels.f32", dyn.labels.labels)
    _write_f32(d / "vmap.f32", dyn.v_map)
    save_pgm(d / "labels.pgm", dyn.labels.labels)


def load_dataset(dirpath) -> tuple[DynamicImage, InputFunction]:
    d = Path(dirpath)
    if not (d / HEADER_NAME).exists():
        raise FileNotFoundError(f"no {HEADER_NAME} in {d}")
    with open(d / HEADER_NAME) as fh:
        header = json.load(fh)
    h, w, n = header["shape"]
    grid = TimeGrid(np.array(header["frame_starts_s"]), np.array(header["frame_ends_s"]))
    data = np.transpose(_read_f32(d / "dynamic.f32", (n, h, w)), (1, 2, 0))
    if_arr = _read_f32(d / "if.f32", (2, header["if_samples"]))
    # float32 storage can perturb strict monotonicity guards; re-snap t=0
    t = if_arr[0]
    t[0] = 0.0
    input_fn = InputFunction(t, np.maximum(if_arr[1], 0.0))
    labels = LabelImage(_read_f32(d / "labels.f32", (h, w)).round().astype(np.int32))
    v_map = _read_f32(d / "vmap.f32", (h, w))
    dyn = DynamicImage(data=data, grid=grid, labels=labels, v_map=v_map,
                       meta=header.get("meta", {}))
    return dyn, input_fn


def save_maps(dirpath, maps: ParametricMaps, meta: dict | None = None) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": list(maps.k_maps.shape),
        "meta": meta or {},
    }
    with open(d / "maps_header.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    _write_f32(d / "kmaps.f32", maps.k_maps)
    _write_f32(d / "stop_reason.f32", maps.stop_reason)
    _write_f32(d / "iterations.f32", maps.iterations)
    _write_f32(d / "infilled.f32", maps.infilled)


def load_maps(dirpath) -> ParametricMaps:
    d = Path(dirpath)
    with open(d / "maps_header.json") as fh:
        header = json.load(fh)
    shape = tuple(header["shape"])
    hw = shape[1:]
    return ParametricMaps(
        k_maps=_read_f32(d / "kmaps.f32", shape),
        stop_reason=_read_f32(d / "stop_reason.f32", hw).round().astype(np.int32),
        iterations=_read_f32(d / "iterations.f32", hw).round().astype(np.int32),
        infilled=_read_f32(d / "infilled.f32", hw) > 0.5,
    )
