"""Dataset directories: 8-bit PGM images plus a versioned JSON manifest.

Layout::

    <root>/manifest.json
    <root>/client_<k>/img_<i>.pgm, mask_<i>.pgm
    <root>/style/img_<i>.pgm

Masks are stored as 0/255.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from stfl.errors import ConfigError
from stfl.phantom import ClientDataset, NoiseSpec, StyleSet

SCHEMA_VERSION = 1


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ConfigError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / 255).astype(np.float32)


def client_digest(images: np.ndarray, masks: np.ndarray | None = None) -> str:
    h = hashlib.sha256(quantize(images).tobytes())
    if masks is not None:
        h.update(np.asarray(masks, dtype=np.uint8).tobytes())
    return h.hexdigest()


def export_dataset(root, clients: Sequence[ClientDataset], style: StyleSet, config: dict | None = None) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in clients:
        d = root / f"client_{c.client_id}"
        d.mkdir(exist_ok=True)
        for i, (img, m) in enumerate(zip(c.images, c.masks)):
            write_pgm(d / f"img_{i:03d}.pgm", quantize(img))
            write_pgm(d / f"mask_{i:03d}.pgm", np.asarray(m, dtype=np.uint8) * 255)
        entries.append({"client_id": c.client_id, "dir": d.name, "n_samples": len(c), "noise": c.noise.to_dict(),
                        "is_style_target": c.is_style_target, "structure_shift": c.structure_shift,
                        "phantom_seeds": list(c.phantom_seeds), "train_indices": list(c.train_indices),
                        "val_indices": list(c.val_indices), "digest": client_digest(c.images, c.masks)})
    sd = root / "style"
    sd.mkdir(exist_ok=True)
    for i, img in enumerate(style.images):
        write_pgm(sd / f"img_{i:03d}.pgm", quantize(img))
    manifest = {"schema_version": SCHEMA_VERSION, "resolution": int(style.images.shape[1]),
                "clients": entries,
                "style": {"dir": sd.name, "n_images": len(style), "seeds": list(style.seeds),
                          "digest": client_digest(style.images)},
                "config": config or {}}
    manifest["dataset_digest"] = dataset_digest(manifest)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def dataset_digest(manifest: dict) -> str:
    parts = [c["digest"] for c in manifest["clients"]] + [manifest["style"]["digest"]]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    return manifest


def import_dataset(root) -> tuple[list[ClientDataset], StyleSet, dict]:
    root = Path(root)
    manifest = read_manifest(root)
    clients = []
    for e in manifest["clients"]:
        d = root / e["dir"]
        imgs = np.stack([dequantize(read_pgm(d / f"img_{i:03d}.pgm")) for i in range(e["n_samples"])])
        masks = np.stack([(read_pgm(d / f"mask_{i:03d}.pgm") > 127).astype(np.uint8) for i in range(e["n_samples"])])
        if client_digest(imgs, masks) != e["digest"]:
            raise ConfigError(f"{d}: contents do not match the manifest digest")
        clients.append(ClientDataset(e["client_id"], imgs, masks, NoiseSpec.parse(e["noise"]), e["is_style_target"],
                                     e["train_indices"], e["val_indices"], e["phantom_seeds"], e["structure_shift"]))
    s = manifest["style"]
    sd = root / s["dir"]
    style = StyleSet(np.stack([dequantize(read_pgm(sd / f"img_{i:03d}.pgm")) for i in range(s["n_images"])]), s["seeds"])
    return clients, style, manifest
