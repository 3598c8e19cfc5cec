"""Trainable-parameter counts for adapter methods over a model geometry."""

from __future__ import annotations

from dataclasses import dataclass

METHODS = ("lora", "dora", "moelora", "mor")

LLAMA2_7B_TOTAL = 6_738_415_616


@dataclass(frozen=True)
class Geometry:
    layers: int
    projections: tuple[tuple[int, int], ...]  # (d_in, d_out) per adapted projection

    def __post_init__(self):
        if self.layers < 1 or not self.projections:
            raise ValueError("geometry needs at least one layer and one projection")
        if any(d < 1 for proj in self.projections for d in proj):
            raise ValueError("projection dimensions must be positive")

    @property
    def n_projections(self) -> int:
        return self.layers * len(self.projections)


@dataclass(frozen=True)
class MethodSpec:
    method: str
    rank: int
    experts: int = 1
    includes_router: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.experts < 0 or (self.method != "mor" and self.experts < 1):
            raise ValueError("experts must be >= 1")

    @property
    def label(self) -> str:
        if self.method == "lora":
            return f"LoRA (R{self.rank})"
        if self.method == "dora":
            return f"DoRA (R{self.rank})"
        if self.method == "moelora":
            return f"MoELoRA (E{self.experts}R{self.rank})"
        return f"MoR (E{self.experts}R{self.rank})"


def llama7b_geometry() -> Geometry:
    """FFN projections of LLaMA-7B: gate and up (4096->11008), down (11008->4096)."""
    return Geometry(32, ((4096, 11008), (4096, 11008), (11008, 4096)))


def projection_params(spec: MethodSpec, d_in: int, d_out: int) -> int:
    r, n = spec.rank, spec.experts
    router = n * d_in if spec.includes_router else 0
    if spec.method == "lora":
        return r * (d_in + d_out)
    if spec.method == "dora":
        return r * (d_in + d_out) + d_out
    if spec.method == "moelora":
        return n * r * (d_in + d_out) + router
    return r * (d_in + d_out) + n * (r + d_out) + router


def count_params(spec: MethodSpec, geo: Geometry) -> int:
    per_layer = sum(projection_params(spec, d_in, d_out) for d_in, d_out in geo.projections)
    return geo.layers * per_layer
