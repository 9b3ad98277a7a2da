"""Model archives: a directory with ``manifest.json`` and one DTEN file per array."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .block import BlockFactorModel
from .factor import FactorModel
from .hierarchy import HierarchySpec
from .incremental import ChildFactorization
from .tensor import read_dten, write_dten

__all__ = ["save_model", "load_model", "to_jsonable"]

FORMAT_VERSION = 1


def _put(root: Path, name: str, A: np.ndarray | None) -> str | None:
    if A is None:
        return None
    write_dten(root / name, np.asarray(A, dtype=float))
    return name


def _get(root: Path, name: str | None) -> np.ndarray | None:
    return None if name is None else read_dten(root / name)


def _vector(root: Path, name: str | None) -> np.ndarray | None:
    A = _get(root, name)
    return None if A is None else A.ravel()


def _safe(node_id: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in node_id)


def to_jsonable(x):
    """Convert numpy scalars and arrays inside ``x`` to plain JSON types."""
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def save_model(model: FactorModel | BlockFactorModel, path: str | Path) -> Path:
    """Write ``model`` to directory ``path`` (created if needed)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(model, FactorModel):
        manifest = {
            "format": FORMAT_VERSION,
            "kind": "flat",
            "core": _put(root, "core.dten", model.core),
            "factors": [_put(root, f"U{m}.dten", U) for m, U in enumerate(model.factors)],
            "sigmas": [_put(root, f"sigma{m}.dten", s) for m, s in enumerate(model.sigmas)],
            "mean": _put(root, "mean.dten", model.mean),
            "losses": list(model.losses),
        }
    elif isinstance(model, BlockFactorModel):
        segs = []
        for s, sid in enumerate(model.segment_ids):
            tag = f"s{s}"
            factors = []
            for m in range(model.order):
                if model.shared[m]:
                    factors.append(_put(root, f"U{m}_shared.dten", model.factors[m][s]))
                else:
                    factors.append(_put(root, f"U{m}_{tag}.dten", model.factors[m][s]))
            sig = None
            if model.sigmas is not None:
                sig = [_put(root, f"sigma{m}_{tag}.dten", model.sigmas[m][s]) for m in range(model.order)]
            segs.append({
                "id": sid,
                "core": _put(root, f"core_{tag}.dten", model.cores[s]),
                "factors": factors,
                "sigmas": sig,
                "support": [int(i) for i in model.supports[s]],
            })
        wholes = {}
        for nid, w in model.wholes.items():
            tag = f"w_{_safe(nid)}"
            wholes[nid] = {
                "core": _put(root, f"{tag}_core.dten", w.core),
                "factors": [_put(root, f"{tag}_U{m}.dten", U) for m, U in enumerate(w.factors)],
                "sigmas": [_put(root, f"{tag}_sigma{m}.dten", s) for m, s in enumerate(w.sigmas)],
                "index": [[int(i) for i in ix] for ix in w.index],
                "truncation": w.truncation,
            }
        manifest = {
            "format": FORMAT_VERSION,
            "kind": "block",
            "shape": list(model.shape),
            "shared": list(model.shared),
            "segments": segs,
            "lambdas": None if model.lambdas is None else np.asarray(model.lambdas).tolist(),
            "mean": _put(root, "mean.dten", model.mean),
            "hierarchy": None if model.hierarchy is None else model.hierarchy.to_dict(),
            "losses": list(model.losses),
            "report": to_jsonable(model.report),
            "wholes": wholes,
        }
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    (root / "manifest.json").write_text(json.dumps(to_jsonable(manifest), indent=2) + "\n")
    return root


def load_model(path: str | Path) -> FactorModel | BlockFactorModel:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"{root}: no manifest.json")
    man = json.loads(mf.read_text())
    if man.get("format") != FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported model format {man.get('format')!r}")
    if man["kind"] == "flat":
        return FactorModel(
            core=_get(root, man["core"]),
            factors=[_get(root, n) for n in man["factors"]],
            sigmas=[_vector(root, n) for n in man["sigmas"]],
            mean=_vector(root, man["mean"]),
            losses=list(man["losses"]),
        )
    if man["kind"] != "block":
        raise ValueError(f"{root}: unknown model kind {man['kind']!r}")
    order = len(man["shape"])
    shared = tuple(bool(x) for x in man["shared"])
    cache: dict[str, np.ndarray] = {}

    def cached(name):
        if name not in cache:
            cache[name] = _get(root, name)
        return cache[name]

    segs = man["segments"]
    factors = [[cached(seg["factors"][m]) for seg in segs] for m in range(order)]
    sigmas = None
    if segs and segs[0]["sigmas"] is not None:
        sigmas = [[_vector(root, seg["sigmas"][m]) for seg in segs] for m in range(order)]
    wholes = {}
    for nid, w in man["wholes"].items():
        wholes[nid] = ChildFactorization(
            nid,
            tuple(np.asarray(ix, dtype=int) for ix in w["index"]),
            [_get(root, n) for n in w["factors"]],
            [_vector(root, n) for n in w["sigmas"]],
            _get(root, w["core"]),
            float(w["truncation"]),
        )
    return BlockFactorModel(
        segment_ids=[seg["id"] for seg in segs],
        cores=[_get(root, seg["core"]) for seg in segs],
        factors=factors,
        shared=shared,
        supports=[np.asarray(seg["support"], dtype=int) for seg in segs],
        sigmas=sigmas,
        hierarchy=None if man["hierarchy"] is None else HierarchySpec.from_dict(man["hierarchy"]),
        lambdas=None if man["lambdas"] is None else np.asarray(man["lambdas"]),
        mean=_vector(root, man["mean"]),
        losses=list(man["losses"]),
        report=man["report"],
        wholes=wholes,
    )
