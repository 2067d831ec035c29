"""Deterministic synthetic checkpoint families for desk-scale experiments."""

from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from app.config import settings
from app.errors import FamilySpecError
from app.schemas import FamilySpec, SourceRef
from app.services.container import CheckpointHandle, open_checkpoint, write_checkpoint
from app.services.delta_source import LORA_A, LORA_B, DeltaSource
from app.utils import canonical_json, logger

FAMILY_FILE = "family.json"
ROLE_BY_KIND = {"full": "expert", "explicit-delta": "delta", "lora": "lora-adapter"}


class FamilyLayout(BaseModel):
    root: str
    spec: FamilySpec
    base_path: str
    base_id: str
    experts: List[SourceRef]


def seed_override() -> Optional[int]:
    """Seed from the environment when one was set explicitly"""
    return settings.SEED if "SEED" in settings.model_fields_set else None


def _check_spec(spec: FamilySpec) -> None:
    names = [t.name for t in spec.tensors]
    if not names:
        raise FamilySpecError("a family needs at least one tensor")
    if len(set(names)) != len(names):
        raise FamilySpecError(f"duplicate tensor names in {names}")
    if any(name.endswith((LORA_A, LORA_B)) for name in names):
        raise FamilySpecError("tensor names may not use the lora factor suffixes")
    if any(dim <= 0 for t in spec.tensors for dim in t.shape):
        raise FamilySpecError("tensor dimensions must be positive")
    if isinstance(spec.delta_scale, list) and not spec.delta_scale:
        raise FamilySpecError("delta_scale list is empty")
    lora_wanted = any(spec.kind_of(i) == "lora" for i in range(spec.k))
    if lora_wanted and not any(len(t.shape) == 2 for t in spec.tensors):
        raise FamilySpecError("lora experts need at least one rank-2 tensor")


def _sparse_delta(rng: np.random.Generator, shape: List[int], scale: float, sparsity: float) -> np.ndarray:
    delta = rng.standard_normal(shape) * scale
    if sparsity > 0:
        delta *= rng.random(shape) >= sparsity
    return delta.astype(np.float32)


def generate_family(spec: FamilySpec, out_dir: Union[str, Path]) -> FamilyLayout:
    """Write a base and K experts under out_dir; the same spec always gives the same ids"""
    override = seed_override()
    if override is not None and override != spec.seed:
        spec = spec.model_copy(update={"seed": override})
    _check_spec(spec)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([spec.seed, 0])
    base_tensors: Dict[str, np.ndarray] = {
        t.name: (rng.standard_normal(t.shape) * spec.base_scale).astype(np.float32) for t in spec.tensors
    }
    base = write_checkpoint(root / "base", base_tensors, "base", block_bytes=spec.block_bytes)

    experts: List[SourceRef] = []
    for index, expert_id in enumerate(spec.expert_ids()):
        rng = np.random.default_rng([spec.seed, index + 1])
        kind = spec.kind_of(index)
        scale = spec.scale_of(index)
        path = root / expert_id
        if kind == "lora":
            factors: Dict[str, np.ndarray] = {}
            targets: Dict[str, float] = {}
            factor_scale = float(np.sqrt(scale))
            for t in spec.tensors:
                if len(t.shape) != 2:
                    continue
                out_dim, in_dim = t.shape
                factors[t.name + LORA_B] = (rng.standard_normal((out_dim, spec.lora_rank)) * factor_scale).astype(np.float32)
                factors[t.name + LORA_A] = (rng.standard_normal((spec.lora_rank, in_dim)) * factor_scale).astype(np.float32)
                targets[t.name] = spec.lora_scale
            handle = write_checkpoint(path, factors, "lora-adapter", block_bytes=spec.block_bytes, lora_scales=targets)
        else:
            deltas = {t.name: _sparse_delta(rng, t.shape, scale, spec.sparsity) for t in spec.tensors}
            if kind == "full":
                tensors = {name: np.add(base_tensors[name], delta, dtype=np.float32) for name, delta in deltas.items()}
                handle = write_checkpoint(path, tensors, "expert", layout=base.header.tensors)
            else:
                handle = write_checkpoint(path, deltas, "delta", layout=base.header.tensors)
        experts.append(SourceRef(expert_id=expert_id, kind=kind, path=str(path), checkpoint_id=handle.checkpoint_id))
        handle.close()

    layout = FamilyLayout(
        root=str(root),
        spec=spec,
        base_path=str(root / "base"),
        base_id=base.checkpoint_id,
        experts=experts,
    )
    base.close()
    (root / FAMILY_FILE).write_bytes(canonical_json(layout.model_dump(mode="json")))
    logger.info(f"Generated family at {root}: base {layout.base_id[:12]} with {spec.k} experts")
    return layout


def load_family(path: Union[str, Path]) -> FamilyLayout:
    path = Path(path)
    if path.is_dir():
        path = path / FAMILY_FILE
    try:
        return FamilyLayout.model_validate_json(path.read_bytes())
    except (OSError, ValidationError) as e:
        raise FamilySpecError(f"cannot load family {path}: {e}")


def open_family(layout: FamilyLayout) -> Tuple[CheckpointHandle, List[DeltaSource]]:
    """Open the base and every expert source of a generated family"""
    base = open_checkpoint(layout.base_path)
    sources = [DeltaSource(ref.expert_id, open_checkpoint(ref.path), ref.kind) for ref in layout.experts]
    return base, sources
