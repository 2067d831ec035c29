"""Mask-aware merge operators.

Each operator consumes one block's mask row and the deltas of the selected
experts only. Accumulation runs in f64 in ascending expert order; the result
is rounded to f32 once, when added to the base block.
"""

import hashlib
import math
from typing import Dict, List, Sequence

import numpy as np

from app.errors import GeometryMismatchError, OmittedDeltaAccessError, OperatorParamsError
from app.schemas import BlockKey, OperatorParams
from app.utils import canonical_json

F64 = np.float64
F32 = np.float32


class MaskedDeltaTuple:
    """Zero-completed delta tuple: arrays exist only for selected experts"""

    def __init__(self, mask_row: Sequence[bool], deltas: Dict[int, np.ndarray], n_elems: int):
        self.mask_row = tuple(bool(bit) for bit in mask_row)
        present = set(deltas)
        wanted = {i for i, bit in enumerate(self.mask_row) if bit}
        if present != wanted:
            raise GeometryMismatchError(f"deltas present for {sorted(present)}, mask selects {sorted(wanted)}")
        for i, delta in deltas.items():
            if delta.size != n_elems:
                raise GeometryMismatchError(f"expert {i} delta has {delta.size} elements, block has {n_elems}")
        self._deltas = deltas
        self.n_elems = n_elems

    @property
    def k(self) -> int:
        return len(self.mask_row)

    def selected(self) -> List[int]:
        return [i for i, bit in enumerate(self.mask_row) if bit]

    def delta(self, i: int) -> np.ndarray:
        if not self.mask_row[i]:
            raise OmittedDeltaAccessError(f"expert {i} is omitted by the mask")
        return self._deltas[i]


# Shared arithmetic rules (used by both the streaming path and the oracle)
def subtract_delta(expert_values: np.ndarray, base_values: np.ndarray) -> np.ndarray:
    return np.subtract(expert_values, base_values, dtype=F32)


def lora_delta(b_rows: np.ndarray, a: np.ndarray, scale: float) -> np.ndarray:
    """scale * (B_rows @ A), accumulated rank by rank so row slices agree bit for bit"""
    acc = np.zeros((b_rows.shape[0], a.shape[1]), dtype=F64)
    for j in range(a.shape[0]):
        acc += np.outer(b_rows[:, j].astype(F64), a[j].astype(F64))
    return (acc * F64(scale)).astype(F32)


def add_to_base(base_values: np.ndarray, psi: np.ndarray) -> np.ndarray:
    if base_values.size != psi.size:
        raise GeometryMismatchError(f"base has {base_values.size} elements, operator output {psi.size}")
    return (base_values.astype(F64) + psi).astype(F32)


def ties_trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the top ceil(density * n) entries by magnitude; lower index wins ties"""
    n = delta.size
    keep = min(n, math.ceil(round(density * n, 9)))
    values = delta.astype(F64)
    if keep >= n:
        return values
    order = np.lexsort((np.arange(n), -np.abs(values)))
    trimmed = np.zeros(n, dtype=F64)
    chosen = order[:keep]
    trimmed[chosen] = values[chosen]
    return trimmed


def omega_uniforms(seed: int, expert_id: str, key: BlockKey, n: int) -> np.ndarray:
    """Counter-based uniforms for one (seed, expert, block); coordinate j is draw j"""
    digest = hashlib.sha256(canonical_json([int(seed), expert_id, key.tensor, int(key.block_index)])).digest()
    bit_generator = np.random.Philox(key=int.from_bytes(digest[:16], "little"))
    return np.random.Generator(bit_generator).random(n)


def omega_keep_mask(seed: int, expert_id: str, key: BlockKey, n: int, drop_p: float) -> np.ndarray:
    return omega_uniforms(seed, expert_id, key, n) >= drop_p


def derive_omega(seed: int, expert_id: str, key: BlockKey, coordinate: int, drop_p: float) -> bool:
    """Keep (True) or drop decision for one coordinate"""
    return bool(omega_uniforms(seed, expert_id, key, coordinate + 1)[coordinate] >= drop_p)


def dare_rescale(delta: np.ndarray, keep: np.ndarray, drop_p: float) -> np.ndarray:
    scale = 1.0 / (1.0 - drop_p)
    return np.where(keep, delta.astype(F64) * scale, 0.0)


def resolved_alphas(params: OperatorParams, k: int) -> List[float]:
    if params.alphas is None:
        return [1.0 / k] * k if k else []
    if len(params.alphas) != k:
        raise OperatorParamsError(f"{len(params.alphas)} coefficients given for {k} experts")
    return list(params.alphas)


def validate_params(params: OperatorParams, k: int) -> None:
    if params.operator == "ties" and not 0 < params.ties_density <= 1:
        raise OperatorParamsError(f"ties density must lie in (0, 1], got {params.ties_density}")
    if params.operator == "dare" and not 0 <= params.dare_drop_p < 1:
        raise OperatorParamsError(f"dare drop probability must lie in [0, 1), got {params.dare_drop_p}")
    resolved_alphas(params, k)


# Operators
def psi_avg_fixed(tuple_: MaskedDeltaTuple, params: OperatorParams) -> np.ndarray:
    alphas = resolved_alphas(params, tuple_.k)
    acc = np.zeros(tuple_.n_elems, dtype=F64)
    for i in tuple_.selected():
        acc += alphas[i] * tuple_.delta(i).astype(F64)
    return acc


def psi_avg_renorm(tuple_: MaskedDeltaTuple, params: OperatorParams) -> np.ndarray:
    acc = np.zeros(tuple_.n_elems, dtype=F64)
    selected = tuple_.selected()
    if not selected:
        return acc
    beta = 1.0 / len(selected)
    for i in selected:
        acc += beta * tuple_.delta(i).astype(F64)
    return acc


def psi_ties(tuple_: MaskedDeltaTuple, params: OperatorParams) -> np.ndarray:
    validate_params(params, tuple_.k)
    kept = [ties_trim(tuple_.delta(i), params.ties_density) for i in tuple_.selected()]
    return ties_combine(kept, tuple_.n_elems)


def ties_combine(kept: List[np.ndarray], n_elems: int) -> np.ndarray:
    """Elect the sign of the summed kept values; average the agreeing entries"""
    total = np.zeros(n_elems, dtype=F64)
    for values in kept:
        total += values
    elected = np.sign(total)
    agree_sum = np.zeros(n_elems, dtype=F64)
    agree_count = np.zeros(n_elems, dtype=F64)
    for values in kept:
        agrees = (np.sign(values) == elected) & (elected != 0)
        agree_sum += np.where(agrees, values, 0.0)
        agree_count += agrees
    out = np.zeros(n_elems, dtype=F64)
    np.divide(agree_sum, agree_count, out=out, where=agree_count > 0)
    return out


def psi_dare(tuple_: MaskedDeltaTuple, params: OperatorParams, block_key: BlockKey, experts: Sequence[str]) -> np.ndarray:
    validate_params(params, tuple_.k)
    alphas = resolved_alphas(params, tuple_.k)
    acc = np.zeros(tuple_.n_elems, dtype=F64)
    for i in tuple_.selected():
        keep = omega_keep_mask(params.seed, experts[i], block_key, tuple_.n_elems, params.dare_drop_p)
        acc += alphas[i] * dare_rescale(tuple_.delta(i), keep, params.dare_drop_p)
    return acc


def psi(tuple_: MaskedDeltaTuple, params: OperatorParams, block_key: BlockKey, experts: Sequence[str]) -> np.ndarray:
    """Dispatch to the operator named in the params"""
    if params.operator == "avg-fixed":
        return psi_avg_fixed(tuple_, params)
    if params.operator == "avg-renorm":
        return psi_avg_renorm(tuple_, params)
    if params.operator == "ties":
        return psi_ties(tuple_, params)
    if params.operator == "dare":
        return psi_dare(tuple_, params, block_key, experts)
    raise OperatorParamsError(f"unknown operator {params.operator}")
